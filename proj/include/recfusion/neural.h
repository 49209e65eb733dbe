#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "recfusion/random.h"

namespace recfusion {

// Dense 64-bit array. Batches are laid out one example per row.
using Tensor = Eigen::MatrixXd;

enum class Activation { kIdentity, kTanh, kSigmoid };

std::string to_string(Activation activation);
Activation parse_activation(const std::string& name);

// y = act(x W + b), with W of shape (in, out) and b of shape (1, out).
struct DenseLayer {
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::kIdentity;
};

struct Mlp {
  std::vector<DenseLayer> layers;

  Eigen::Index input_width() const;
  Eigen::Index output_width() const;
  // Weight and bias of every layer, in order W0, b0, W1, b1, ...
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
};

// widths = {in, hidden..., out}. Hidden layers use `hidden`, the last layer
// uses `output`. Weights are Glorot-uniform, biases zero.
Mlp make_mlp(std::span<const Eigen::Index> widths, Activation hidden,
             Activation output, Rng& rng);

// Per-layer inputs and activated outputs recorded by mlp_forward.
struct MlpCache {
  std::vector<Tensor> inputs;
  std::vector<Tensor> outputs;
};

struct MlpForward {
  Tensor output;
  MlpCache cache;
};

// Throws std::invalid_argument when x.cols() != input width.
MlpForward mlp_forward(const Mlp& mlp, const Tensor& x);

struct MlpGradients {
  std::vector<Tensor> parameters;  // aligned with Mlp::parameters()
  Tensor input;
};

// Throws std::invalid_argument if the cache was not produced by a forward
// pass through a network of this shape, or grad_output has the wrong shape.
MlpGradients mlp_backward(const Mlp& mlp, const MlpCache& cache,
                          const Tensor& grad_output);

// Sinusoidal step embedding: entries (2k, 2k+1) hold
// (sin(t w_k), cos(t w_k)) with w_k = 10000^(-k / (dim / 2)).
// Throws std::invalid_argument for odd dim, std::out_of_range unless
// 0 <= t <= max_step.
Eigen::RowVectorXd time_embedding(int t, Eigen::Index dim, int max_step);

// Probabilities are clamped to [kProbabilityClamp, 1 - kProbabilityClamp]
// before any logarithm.
inline constexpr double kProbabilityClamp = 1e-7;

struct LossResult {
  double value = 0.0;
  Tensor grad;
};

// Mean binary cross-entropy over all entries; grad is w.r.t. pred and is
// zero where the clamp is active.
LossResult bce_loss(const Tensor& pred, const Tensor& target);

// Mean over entries of KL(B(p) || B(q)); grad is w.r.t. q.
LossResult bernoulli_kl(const Tensor& p, const Tensor& q);

// Mean over rows of -sum_i target_i log softmax(logits)_i. Throws
// std::invalid_argument if a target row has no positive entry.
LossResult multinomial_loss(const Tensor& logits, const Tensor& target);

// Mean over rows of the per-row summed Gaussian negative log-likelihood.
struct GaussianNllResult {
  double value = 0.0;
  Tensor grad_mean;
  Tensor grad_log_variance;
};
GaussianNllResult gaussian_nll(const Tensor& mean, const Tensor& log_variance,
                               const Tensor& target);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adam with bias correction. Moment buffers are created on the first step
// and must keep their shapes afterwards.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads);

  std::int64_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::int64_t steps_ = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  // Coordinate with the largest error.
  std::size_t parameter = 0;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double analytic = 0.0;
  double numeric = 0.0;

  std::string describe() const;
};

// Compares analytic gradients with central differences on a seeded random
// subsample of at least `samples` coordinates (all of them when there are
// fewer). `loss` must be deterministic and read the current values of
// `params`, which are perturbed in place and restored.
GradCheckResult grad_check(const std::function<double()>& loss,
                           std::span<Tensor* const> params,
                           std::span<const Tensor> analytic, double epsilon,
                           std::size_t samples = 100, std::uint64_t seed = 0);

}  // namespace recfusion
