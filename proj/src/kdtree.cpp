#include "idam/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace idam {

namespace {
// Heap/order comparator: worse = farther, ties to the higher index, so the
// best candidate set is unique and matches brute force exactly.
bool worse(const double d2a, const int ia, const double d2b, const int ib) {
  return d2a > d2b || (d2a == d2b && ia > ib);
}
}  // namespace

KdTree::KdTree(const PointCloud& cloud, int leaf_size) : leaf_size_(leaf_size) {
  cloud.validate();
  if (leaf_size_ < 1) throw std::invalid_argument("KdTree: leaf_size must be positive");
  pts_ = cloud.points;
  order_.resize(pts_.size());
  for (size_t i = 0; i < pts_.size(); ++i) order_[i] = static_cast<int>(i);
  nodes_.reserve(2 * pts_.size() / leaf_size_ + 2);
  root_ = build(0, static_cast<int>(pts_.size()));
}

int KdTree::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  if (end - begin <= leaf_size_) {
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    return id;
  }

  Eigen::Vector3d lo = pts_[order_[begin]], hi = lo;
  for (int i = begin + 1; i < end; ++i) {
    lo = lo.cwiseMin(pts_[order_[i]]);
    hi = hi.cwiseMax(pts_[order_[i]]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);

  const int mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) {
                     const double ca = pts_[a](axis), cb = pts_[b](axis);
                     return ca < cb || (ca == cb && a < b);
                   });

  nodes_[id].axis = axis;
  nodes_[id].split = pts_[order_[mid]](axis);
  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void KdTree::knn_search(int node, const Eigen::Vector3d& q, int k, std::vector<HeapEntry>& heap) const {
  const Node& nd = nodes_[node];
  if (nd.axis < 0) {
    for (int i = nd.begin; i < nd.end; ++i) {
      const int idx = order_[i];
      const double d2 = (pts_[idx] - q).squaredNorm();
      if (static_cast<int>(heap.size()) < k) {
        heap.push_back({d2, idx});
        std::push_heap(heap.begin(), heap.end(), [](const HeapEntry& a, const HeapEntry& b) {
          return worse(b.d2, b.index, a.d2, a.index);
        });
      } else if (worse(heap.front().d2, heap.front().index, d2, idx)) {
        std::pop_heap(heap.begin(), heap.end(), [](const HeapEntry& a, const HeapEntry& b) {
          return worse(b.d2, b.index, a.d2, a.index);
        });
        heap.back() = {d2, idx};
        std::push_heap(heap.begin(), heap.end(), [](const HeapEntry& a, const HeapEntry& b) {
          return worse(b.d2, b.index, a.d2, a.index);
        });
      }
    }
    return;
  }

  const double diff = q(nd.axis) - nd.split;
  const int near = diff < 0.0 ? nd.left : nd.right;
  const int far = diff < 0.0 ? nd.right : nd.left;
  knn_search(near, q, k, heap);
  // The far side can still hold an equal-distance, lower-index point, so the
  // bound check uses <= rather than <.
  if (static_cast<int>(heap.size()) < k || diff * diff <= heap.front().d2) knn_search(far, q, k, heap);
}

std::vector<Neighbor> KdTree::knn(const Eigen::Vector3d& query, int k) const {
  if (k < 1 || k > size()) throw std::invalid_argument("KdTree::knn: k out of range");
  std::vector<HeapEntry> heap;
  heap.reserve(k);
  knn_search(root_, query, k, heap);
  std::sort(heap.begin(), heap.end(), [](const HeapEntry& a, const HeapEntry& b) {
    return a.d2 < b.d2 || (a.d2 == b.d2 && a.index < b.index);
  });
  std::vector<Neighbor> out;
  out.reserve(heap.size());
  for (const auto& e : heap) out.push_back({e.index, std::sqrt(e.d2)});
  return out;
}

void KdTree::radius_search(int node, const Eigen::Vector3d& q, double r2, std::vector<HeapEntry>& out) const {
  const Node& nd = nodes_[node];
  if (nd.axis < 0) {
    for (int i = nd.begin; i < nd.end; ++i) {
      const int idx = order_[i];
      const double d2 = (pts_[idx] - q).squaredNorm();
      if (d2 <= r2) out.push_back({d2, idx});
    }
    return;
  }
  const double diff = q(nd.axis) - nd.split;
  const int near = diff < 0.0 ? nd.left : nd.right;
  const int far = diff < 0.0 ? nd.right : nd.left;
  radius_search(near, q, r2, out);
  if (diff * diff <= r2) radius_search(far, q, r2, out);
}

std::vector<Neighbor> KdTree::radius(const Eigen::Vector3d& query, double r) const {
  if (!(r > 0.0)) throw std::invalid_argument("KdTree::radius: radius must be positive");
  std::vector<HeapEntry> hits;
  radius_search(root_, query, r * r, hits);
  std::sort(hits.begin(), hits.end(), [](const HeapEntry& a, const HeapEntry& b) {
    return a.d2 < b.d2 || (a.d2 == b.d2 && a.index < b.index);
  });
  std::vector<Neighbor> out;
  out.reserve(hits.size());
  for (const auto& e : hits) out.push_back({e.index, std::sqrt(e.d2)});
  return out;
}

}  // namespace idam
