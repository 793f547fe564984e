#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace idam {

class Rng;

enum class Activation { None, Sigmoid };

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

// Activations kept for the backward pass: act[0] is the input, act[l + 1]
// the post-nonlinearity output of layer l.
struct MlpCache {
  std::vector<Eigen::MatrixXd> act;
};

struct MlpGrads {
  std::vector<DenseLayer> layers;
  void set_zero();
};

// Fully connected network, ReLU between layers, configurable output
// activation, all arithmetic in double.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::vector<int>& sizes, Activation output_activation);

  // Weights ~ U(-a, a) with a = sqrt(6 / (in + out)); biases zero.
  void init_uniform(Rng& rng);

  int input_dim() const;
  int output_dim() const;
  int num_layers() const { return static_cast<int>(layers.size()); }
  std::vector<int> sizes() const;

  // x: batch x in, returns batch x out. cache may be null for inference.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, MlpCache* cache = nullptr) const;

  // dy: batch x out. Accumulates parameter gradients into grads and returns
  // dx. tap_activation (an index into cache.act) injects tap_grad into the
  // gradient flowing through that activation, for losses attached to an
  // exposed hidden layer.
  Eigen::MatrixXd backward(const MlpCache& cache, const Eigen::MatrixXd& dy, MlpGrads& grads,
                           int tap_activation = -1,
                           const Eigen::MatrixXd* tap_grad = nullptr) const;

  MlpGrads zero_grads() const;

  std::vector<DenseLayer> layers;
  Activation output_activation = Activation::None;
};

// Row-wise softmax with per-row max subtraction; rows sum to 1.
Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& x);

// Gradient of row_softmax: given s = row_softmax(x) and ds, returns dx.
Eigen::MatrixXd row_softmax_backward(const Eigen::MatrixXd& s, const Eigen::MatrixXd& ds);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; applied as p *= 1 - lr * wd
};

// Adam with bias correction and decoupled weight decay.
class AdamState {
 public:
  AdamState(const Mlp& model, AdamConfig cfg);
  void step(Mlp& model, const MlpGrads& grads);

  AdamConfig config;
  int64_t step_count = 0;
  std::vector<DenseLayer> m, v;
};

// Binary parameter container: "IDAM" magic, u32 format version, scalar
// config map, named heads with layer-size descriptors and raw weights,
// trailing CRC32. Little-endian throughout.
struct ParamFile {
  std::map<std::string, double> config;
  std::vector<std::pair<std::string, Mlp>> heads;
};

void save_params(const std::string& path, const ParamFile& file);
ParamFile load_params(const std::string& path);

uint32_t crc32(const unsigned char* data, size_t n);

}  // namespace idam
