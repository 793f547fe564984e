#pragma once

#include <Eigen/Core>
#include <vector>

#include "idam/geometry.hpp"

namespace idam {

struct Neighbor {
  int index;
  double distance;
};

// Balanced k-d tree over a fixed point set. Queries are exact: results agree
// with a brute-force scan, with equal distances broken by lower point index.
class KdTree {
 public:
  explicit KdTree(const PointCloud& cloud, int leaf_size = 16);

  int size() const { return static_cast<int>(pts_.size()); }

  // k nearest neighbours in ascending (distance, index) order.
  // Throws std::invalid_argument when k is out of [1, size()].
  std::vector<Neighbor> knn(const Eigen::Vector3d& query, int k) const;

  Neighbor nearest(const Eigen::Vector3d& query) const { return knn(query, 1).front(); }

  // All points with distance <= r, ascending (distance, index).
  // Throws std::invalid_argument when r <= 0.
  std::vector<Neighbor> radius(const Eigen::Vector3d& query, double r) const;

 private:
  struct Node {
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    int left = -1;
    int right = -1;
    int begin = 0;
    int end = 0;
  };

  struct HeapEntry {
    double d2;
    int index;
  };

  int build(int begin, int end);
  void knn_search(int node, const Eigen::Vector3d& q, int k, std::vector<HeapEntry>& heap) const;
  void radius_search(int node, const Eigen::Vector3d& q, double r2, std::vector<HeapEntry>& out) const;

  std::vector<Eigen::Vector3d> pts_;
  std::vector<int> order_;  // permutation of point indices, partitioned by build()
  std::vector<Node> nodes_;
  int root_ = -1;
  int leaf_size_;
};

}  // namespace idam
