#include "recfusion/neural.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace recfusion {
namespace {

Tensor activate(const Tensor& pre, Activation a) {
  switch (a) {
    case Activation::kIdentity: return pre;
    case Activation::kTanh: return pre.array().tanh().matrix();
    case Activation::kSigmoid:
      return (1.0 / (1.0 + (-pre.array()).exp())).matrix();
  }
  return pre;
}

// Derivative of the activation expressed through its output.
Tensor activation_slope(const Tensor& out, Activation a) {
  switch (a) {
    case Activation::kIdentity: return Tensor::Ones(out.rows(), out.cols());
    case Activation::kTanh: return (1.0 - out.array().square()).matrix();
    case Activation::kSigmoid: return (out.array() * (1.0 - out.array())).matrix();
  }
  return Tensor::Ones(out.rows(), out.cols());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

double clamp_probability(double p) {
  return std::clamp(p, kProbabilityClamp, 1.0 - kProbabilityClamp);
}

}  // namespace

std::string to_string(Activation activation) {
  switch (activation) {
    case Activation::kIdentity: return "identity";
    case Activation::kTanh: return "tanh";
    case Activation::kSigmoid: return "sigmoid";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "tanh") return Activation::kTanh;
  if (name == "sigmoid") return Activation::kSigmoid;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

Eigen::Index Mlp::input_width() const {
  return layers.empty() ? 0 : layers.front().weight.rows();
}

Eigen::Index Mlp::output_width() const {
  return layers.empty() ? 0 : layers.back().weight.cols();
}

std::vector<Tensor*> Mlp::parameters() {
  std::vector<Tensor*> out;
  for (auto& layer : layers) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
  return out;
}

std::vector<const Tensor*> Mlp::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& layer : layers) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
  return out;
}

Mlp make_mlp(std::span<const Eigen::Index> widths, Activation hidden,
             Activation output, Rng& rng) {
  if (widths.size() < 2) throw std::invalid_argument("MLP needs >= 2 widths");
  Mlp mlp;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const Eigen::Index in = widths[l];
    const Eigen::Index out = widths[l + 1];
    if (in < 1 || out < 1) throw std::invalid_argument("MLP widths must be >= 1");
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    DenseLayer layer;
    layer.weight.resize(in, out);
    for (Eigen::Index c = 0; c < out; ++c) {
      for (Eigen::Index r = 0; r < in; ++r) {
        layer.weight(r, c) = (2.0 * rng.uniform() - 1.0) * limit;
      }
    }
    layer.bias = Tensor::Zero(1, out);
    layer.activation = l + 2 == widths.size() ? output : hidden;
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

MlpForward mlp_forward(const Mlp& mlp, const Tensor& x) {
  if (mlp.layers.empty()) throw std::invalid_argument("empty MLP");
  if (x.cols() != mlp.input_width()) {
    throw std::invalid_argument("mlp_forward: input width " +
                                std::to_string(x.cols()) + " != " +
                                std::to_string(mlp.input_width()));
  }
  MlpForward result;
  Tensor h = x;
  for (const auto& layer : mlp.layers) {
    Tensor pre = h * layer.weight;
    pre.rowwise() += layer.bias.row(0);
    Tensor out = activate(pre, layer.activation);
    result.cache.inputs.push_back(std::move(h));
    h = out;
    result.cache.outputs.push_back(std::move(out));
  }
  result.output = std::move(h);
  return result;
}

MlpGradients mlp_backward(const Mlp& mlp, const MlpCache& cache,
                          const Tensor& grad_output) {
  const std::size_t n = mlp.layers.size();
  if (cache.inputs.size() != n || cache.outputs.size() != n) {
    throw std::invalid_argument("mlp_backward: cache depth does not match MLP");
  }
  for (std::size_t l = 0; l < n; ++l) {
    const auto& w = mlp.layers[l].weight;
    if (cache.inputs[l].cols() != w.rows() || cache.outputs[l].cols() != w.cols() ||
        cache.inputs[l].rows() != cache.outputs[l].rows()) {
      throw std::invalid_argument("mlp_backward: stale or mismatched cache");
    }
  }
  require_same_shape(grad_output, cache.outputs.back(), "mlp_backward");

  MlpGradients grads;
  grads.parameters.resize(2 * n);
  Tensor upstream = grad_output;
  for (std::size_t l = n; l-- > 0;) {
    const auto& layer = mlp.layers[l];
    const Tensor delta =
        (upstream.array() *
         activation_slope(cache.outputs[l], layer.activation).array())
            .matrix();
    grads.parameters[2 * l] = cache.inputs[l].transpose() * delta;
    grads.parameters[2 * l + 1] = delta.colwise().sum();
    upstream = delta * layer.weight.transpose();
  }
  grads.input = std::move(upstream);
  return grads;
}

Eigen::RowVectorXd time_embedding(int t, Eigen::Index dim, int max_step) {
  if (dim <= 0 || dim % 2 != 0) {
    throw std::invalid_argument("time embedding dimension must be even and > 0");
  }
  if (t < 0 || t > max_step) {
    throw std::out_of_range("time step " + std::to_string(t) + " outside [0, " +
                            std::to_string(max_step) + "]");
  }
  const Eigen::Index half = dim / 2;
  Eigen::RowVectorXd out(dim);
  for (Eigen::Index k = 0; k < half; ++k) {
    const double freq =
        std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half));
    out[2 * k] = std::sin(t * freq);
    out[2 * k + 1] = std::cos(t * freq);
  }
  return out;
}

LossResult bce_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "bce_loss");
  const double n = static_cast<double>(pred.size());
  LossResult r;
  r.grad.resize(pred.rows(), pred.cols());
  double total = 0.0;
  for (Eigen::Index c = 0; c < pred.cols(); ++c) {
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
      const double raw = pred(i, c);
      const double p = clamp_probability(raw);
      const double y = target(i, c);
      total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
      const bool clamped = p != raw;
      r.grad(i, c) = clamped ? 0.0 : (p - y) / (p * (1.0 - p)) / n;
    }
  }
  r.value = total / n;
  return r;
}

LossResult bernoulli_kl(const Tensor& p, const Tensor& q) {
  require_same_shape(p, q, "bernoulli_kl");
  const double n = static_cast<double>(p.size());
  LossResult r;
  r.grad.resize(q.rows(), q.cols());
  double total = 0.0;
  for (Eigen::Index c = 0; c < p.cols(); ++c) {
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double a = clamp_probability(p(i, c));
      const double raw_b = q(i, c);
      const double b = clamp_probability(raw_b);
      total += a * std::log(a / b) + (1.0 - a) * std::log((1.0 - a) / (1.0 - b));
      r.grad(i, c) = b != raw_b ? 0.0 : (-a / b + (1.0 - a) / (1.0 - b)) / n;
    }
  }
  r.value = total / n;
  return r;
}

LossResult multinomial_loss(const Tensor& logits, const Tensor& target) {
  require_same_shape(logits, target, "multinomial_loss");
  const double batch = static_cast<double>(logits.rows());
  LossResult r;
  r.grad.resize(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mass = target.row(i).sum();
    if (!(mass > 0.0)) {
      throw std::invalid_argument("multinomial_loss: target row " +
                                  std::to_string(i) + " has no positive entry");
    }
    const double top = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd shifted = logits.row(i).array() - top;
    const double log_z = std::log(shifted.array().exp().sum());
    const Eigen::RowVectorXd log_softmax = shifted.array() - log_z;
    total -= target.row(i).dot(log_softmax);
    r.grad.row(i) =
        (log_softmax.array().exp() * mass - target.row(i).array()) / batch;
  }
  r.value = total / batch;
  return r;
}

GaussianNllResult gaussian_nll(const Tensor& mean, const Tensor& log_variance,
                               const Tensor& target) {
  require_same_shape(mean, target, "gaussian_nll");
  require_same_shape(log_variance, target, "gaussian_nll");
  const double batch = static_cast<double>(mean.rows());
  const double log_two_pi = std::log(2.0 * std::numbers::pi);
  const auto resid = (target - mean).array();
  const auto inv_var = (-log_variance.array()).exp();
  GaussianNllResult r;
  r.value = 0.5 *
            (log_two_pi + log_variance.array() + resid.square() * inv_var).sum() /
            batch;
  r.grad_mean = (-resid * inv_var / batch).matrix();
  r.grad_log_variance = (0.5 * (1.0 - resid.square() * inv_var) / batch).matrix();
  return r;
}

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam: parameter/gradient count mismatch");
  }
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.push_back(Tensor::Zero(p->rows(), p->cols()));
      v_.push_back(Tensor::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) {
    throw std::invalid_argument("adam: parameter count changed between steps");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    require_same_shape(*params[k], grads[k], "adam");
    require_same_shape(*params[k], m_[k], "adam");
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    m_[k] = config_.beta1 * m_[k] + (1.0 - config_.beta1) * grads[k];
    v_[k] = config_.beta2 * v_[k] +
            (1.0 - config_.beta2) * grads[k].array().square().matrix();
    params[k]->array() -= config_.learning_rate * (m_[k].array() / bc1) /
                          ((v_[k].array() / bc2).sqrt() + config_.epsilon);
  }
}

std::string GradCheckResult::describe() const {
  std::ostringstream out;
  out << "max relative error " << max_relative_error << " over " << checked
      << " coordinates; worst at parameter " << parameter << " (" << row << ", "
      << col << "): analytic " << analytic << " vs numeric " << numeric;
  return out.str();
}

GradCheckResult grad_check(const std::function<double()>& loss,
                           std::span<Tensor* const> params,
                           std::span<const Tensor> analytic, double epsilon,
                           std::size_t samples, std::uint64_t seed) {
  if (params.size() != analytic.size()) {
    throw std::invalid_argument("grad_check: parameter/gradient count mismatch");
  }
  struct Coord {
    std::size_t param;
    Eigen::Index index;
  };
  std::vector<Coord> coords;
  for (std::size_t k = 0; k < params.size(); ++k) {
    require_same_shape(*params[k], analytic[k], "grad_check");
    for (Eigen::Index i = 0; i < params[k]->size(); ++i) coords.push_back({k, i});
  }
  if (coords.size() > samples) {
    Rng rng(seed);
    rng.shuffle(std::span<Coord>(coords));
    coords.resize(samples);
  }

  GradCheckResult result;
  for (const Coord& c : coords) {
    double& value = params[c.param]->data()[c.index];
    const double saved = value;
    value = saved + epsilon;
    const double up = loss();
    value = saved - epsilon;
    const double down = loss();
    value = saved;
    const double numeric = (up - down) / (2.0 * epsilon);
    const double exact = analytic[c.param].data()[c.index];
    const double scale = std::max({std::abs(exact), std::abs(numeric), 1e-6});
    const double err = std::abs(exact - numeric) / scale;
    ++result.checked;
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.parameter = c.param;
      result.row = c.index % params[c.param]->rows();
      result.col = c.index / params[c.param]->rows();
      result.analytic = exact;
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace recfusion
