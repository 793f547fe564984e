#include "idam/nn.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "idam/rng.hpp"

namespace idam {

void MlpGrads::set_zero() {
  for (auto& l : layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
}

Mlp::Mlp(const std::vector<int>& sizes, Activation output_activation)
    : output_activation(output_activation) {
  if (sizes.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
  for (int s : sizes)
    if (s < 1) throw std::invalid_argument("Mlp: layer sizes must be positive");
  layers.resize(sizes.size() - 1);
  for (size_t l = 0; l < layers.size(); ++l) {
    layers[l].weight = Eigen::MatrixXd::Zero(sizes[l + 1], sizes[l]);
    layers[l].bias = Eigen::VectorXd::Zero(sizes[l + 1]);
  }
}

void Mlp::init_uniform(Rng& rng) {
  for (auto& l : layers) {
    const double a = std::sqrt(6.0 / static_cast<double>(l.weight.rows() + l.weight.cols()));
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = rng.uniform(-a, a);
    l.bias.setZero();
  }
}

int Mlp::input_dim() const {
  if (layers.empty()) throw std::logic_error("Mlp: uninitialized");
  return static_cast<int>(layers.front().weight.cols());
}

int Mlp::output_dim() const {
  if (layers.empty()) throw std::logic_error("Mlp: uninitialized");
  return static_cast<int>(layers.back().weight.rows());
}

std::vector<int> Mlp::sizes() const {
  std::vector<int> s;
  s.push_back(input_dim());
  for (const auto& l : layers) s.push_back(static_cast<int>(l.weight.rows()));
  return s;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, MlpCache* cache) const {
  if (x.cols() != input_dim()) throw std::invalid_argument("Mlp::forward: input width mismatch");
  if (cache) {
    cache->act.clear();
    cache->act.reserve(layers.size() + 1);
    cache->act.push_back(x);
  }
  Eigen::MatrixXd a = x;
  for (size_t l = 0; l < layers.size(); ++l) {
    Eigen::MatrixXd z = a * layers[l].weight.transpose();
    z.rowwise() += layers[l].bias.transpose();
    if (l + 1 < layers.size()) {
      a = z.cwiseMax(0.0);
    } else if (output_activation == Activation::Sigmoid) {
      a = z.unaryExpr([](double v) {
        // Split form avoids overflow in exp for large |v|.
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
    } else {
      a = std::move(z);
    }
    if (cache) cache->act.push_back(a);
  }
  return a;
}

Eigen::MatrixXd Mlp::backward(const MlpCache& cache, const Eigen::MatrixXd& dy, MlpGrads& grads,
                              int tap_activation, const Eigen::MatrixXd* tap_grad) const {
  const int nl = num_layers();
  if (static_cast<int>(cache.act.size()) != nl + 1)
    throw std::invalid_argument("Mlp::backward: cache does not match network depth");
  if (static_cast<int>(grads.layers.size()) != nl)
    throw std::invalid_argument("Mlp::backward: gradient buffer does not match network depth");
  if (dy.rows() != cache.act.back().rows() || dy.cols() != cache.act.back().cols())
    throw std::invalid_argument("Mlp::backward: dy shape mismatch");

  Eigen::MatrixXd d = dy;
  if (tap_activation == nl && tap_grad) d += *tap_grad;
  for (int l = nl - 1; l >= 0; --l) {
    const Eigen::MatrixXd& out = cache.act[l + 1];
    Eigen::MatrixXd dz;
    if (l == nl - 1) {
      if (output_activation == Activation::Sigmoid)
        dz = d.cwiseProduct(out.cwiseProduct(Eigen::MatrixXd::Ones(out.rows(), out.cols()) - out));
      else
        dz = std::move(d);
    } else {
      dz = d.cwiseProduct((out.array() > 0.0).cast<double>().matrix());
    }
    grads.layers[l].weight.noalias() += dz.transpose() * cache.act[l];
    grads.layers[l].bias.noalias() += dz.colwise().sum().transpose();
    d.noalias() = dz * layers[l].weight;
    if (tap_activation == l && tap_grad) d += *tap_grad;
  }
  return d;
}

MlpGrads Mlp::zero_grads() const {
  MlpGrads g;
  g.layers.resize(layers.size());
  for (size_t l = 0; l < layers.size(); ++l) {
    g.layers[l].weight = Eigen::MatrixXd::Zero(layers[l].weight.rows(), layers[l].weight.cols());
    g.layers[l].bias = Eigen::VectorXd::Zero(layers[l].bias.size());
  }
  return g;
}

Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    Eigen::ArrayXd e = (x.row(r).array() - m).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  return out;
}

Eigen::MatrixXd row_softmax_backward(const Eigen::MatrixXd& s, const Eigen::MatrixXd& ds) {
  if (s.rows() != ds.rows() || s.cols() != ds.cols())
    throw std::invalid_argument("row_softmax_backward: shape mismatch");
  Eigen::MatrixXd dx(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double dot = s.row(r).dot(ds.row(r));
    dx.row(r) = s.row(r).cwiseProduct(ds.row(r).array().matrix() -
                                      Eigen::RowVectorXd::Constant(s.cols(), dot));
  }
  return dx;
}

AdamState::AdamState(const Mlp& model, AdamConfig cfg) : config(cfg) {
  m.resize(model.layers.size());
  v.resize(model.layers.size());
  for (size_t l = 0; l < model.layers.size(); ++l) {
    m[l].weight = Eigen::MatrixXd::Zero(model.layers[l].weight.rows(), model.layers[l].weight.cols());
    m[l].bias = Eigen::VectorXd::Zero(model.layers[l].bias.size());
    v[l] = m[l];
  }
}

void AdamState::step(Mlp& model, const MlpGrads& grads) {
  if (grads.layers.size() != model.layers.size() || m.size() != model.layers.size())
    throw std::invalid_argument("AdamState::step: model/gradient shape mismatch");
  ++step_count;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step_count));
  const double decay = 1.0 - config.lr * config.weight_decay;

  auto update = [&](Eigen::Ref<Eigen::MatrixXd> p, Eigen::Ref<Eigen::MatrixXd> mm,
                    Eigen::Ref<Eigen::MatrixXd> vv, const Eigen::MatrixXd& g) {
    if (config.weight_decay != 0.0) p *= decay;
    mm = config.beta1 * mm + (1.0 - config.beta1) * g;
    vv = config.beta2 * vv + (1.0 - config.beta2) * g.cwiseProduct(g);
    p.array() -= config.lr * (mm.array() / bc1) / ((vv.array() / bc2).sqrt() + config.eps);
  };

  for (size_t l = 0; l < model.layers.size(); ++l) {
    update(model.layers[l].weight, m[l].weight, v[l].weight, grads.layers[l].weight);
    Eigen::MatrixXd gb = grads.layers[l].bias;
    Eigen::Map<Eigen::MatrixXd> pb(model.layers[l].bias.data(), model.layers[l].bias.size(), 1);
    Eigen::Map<Eigen::MatrixXd> mb(m[l].bias.data(), m[l].bias.size(), 1);
    Eigen::Map<Eigen::MatrixXd> vb(v[l].bias.data(), v[l].bias.size(), 1);
    update(pb, mb, vb, gb);
  }
}

uint32_t crc32(const unsigned char* data, size_t n) {
  static const std::array<uint32_t, 256> table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = 0xffffffffu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

namespace {

constexpr uint32_t kFormatVersion = 1;

void put_u8(std::string& buf, uint8_t v) { buf.push_back(static_cast<char>(v)); }

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& buf, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

void put_str(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<uint32_t>(s.size()));
  buf.append(s);
}

class Reader {
 public:
  Reader(const std::string& buf, size_t end) : buf_(buf), end_(end) {}

  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf_[pos_++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_++])) << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(static_cast<uint8_t>(buf_[pos_++])) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(size_t n) {
    if (pos_ + n > end_) throw std::runtime_error("parameter file: truncated payload");
  }
  const std::string& buf_;
  size_t end_;
  size_t pos_ = 0;
};

}  // namespace

void save_params(const std::string& path, const ParamFile& file) {
  std::string buf;
  buf.append("IDAM");
  put_u32(buf, kFormatVersion);

  put_u32(buf, static_cast<uint32_t>(file.config.size()));
  for (const auto& [key, value] : file.config) {
    put_str(buf, key);
    put_f64(buf, value);
  }

  put_u32(buf, static_cast<uint32_t>(file.heads.size()));
  for (const auto& [name, mlp] : file.heads) {
    put_str(buf, name);
    put_u8(buf, mlp.output_activation == Activation::Sigmoid ? 1 : 0);
    put_u32(buf, static_cast<uint32_t>(mlp.layers.size()));
    for (const auto& l : mlp.layers) {
      put_u32(buf, static_cast<uint32_t>(l.weight.cols()));
      put_u32(buf, static_cast<uint32_t>(l.weight.rows()));
    }
    for (const auto& l : mlp.layers) {
      for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
        for (Eigen::Index j = 0; j < l.weight.cols(); ++j) put_f64(buf, l.weight(i, j));
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) put_f64(buf, l.bias(i));
    }
  }

  put_u32(buf, crc32(reinterpret_cast<const unsigned char*>(buf.data()), buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_params: cannot open '" + path + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("save_params: write to '" + path + "' failed");
}

ParamFile load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_params: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 12) throw std::runtime_error("parameter file: checksum mismatch (file too short)");
  const size_t payload = buf.size() - 4;
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<uint32_t>(static_cast<uint8_t>(buf[payload + i])) << (8 * i);
  if (crc32(reinterpret_cast<const unsigned char*>(buf.data()), payload) != stored)
    throw std::runtime_error("parameter file: checksum mismatch");

  Reader r(buf, payload);
  if (r.u8() != 'I' || r.u8() != 'D' || r.u8() != 'A' || r.u8() != 'M')
    throw std::runtime_error("parameter file: bad magic");
  const uint32_t version = r.u32();
  if (version != kFormatVersion)
    throw std::runtime_error("parameter file: unsupported format version " + std::to_string(version));

  ParamFile file;
  const uint32_t nconfig = r.u32();
  for (uint32_t i = 0; i < nconfig; ++i) {
    std::string key = r.str();
    file.config[key] = r.f64();
  }

  const uint32_t nheads = r.u32();
  for (uint32_t h = 0; h < nheads; ++h) {
    std::string name = r.str();
    const Activation act = r.u8() ? Activation::Sigmoid : Activation::None;
    const uint32_t nlayers = r.u32();
    std::vector<int> sizes;
    for (uint32_t l = 0; l < nlayers; ++l) {
      const uint32_t in_dim = r.u32();
      const uint32_t out_dim = r.u32();
      if (l == 0) sizes.push_back(static_cast<int>(in_dim));
      else if (sizes.back() != static_cast<int>(in_dim))
        throw std::runtime_error("parameter file: inconsistent layer dimensions");
      sizes.push_back(static_cast<int>(out_dim));
    }
    Mlp mlp(sizes, act);
    for (auto& l : mlp.layers) {
      for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
        for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = r.f64();
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = r.f64();
    }
    file.heads.emplace_back(std::move(name), std::move(mlp));
  }
  if (!r.done()) throw std::runtime_error("parameter file: trailing bytes in payload");
  return file;
}

}  // namespace idam
