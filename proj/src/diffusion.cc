#include "recfusion/diffusion.h"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "recfusion/io.h"

namespace recfusion {
namespace {

void check_step(int t, const Schedule& schedule) {
  if (t < 1 || t > schedule.steps()) {
    throw std::out_of_range("diffusion step " + std::to_string(t) +
                            " outside [1, " + std::to_string(schedule.steps()) +
                            "]");
  }
}

void check_rate(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw std::invalid_argument("diffusion rate must lie in [0, 1]");
  }
}

// Marginal P(x^t = 1) for x^0 = 1 and x^0 = 0.
struct MarginalPair {
  double from_one = 1.0;
  double from_zero = 0.0;
};

MarginalPair marginal_pair(BitProcess process, int t, const Schedule& schedule) {
  MarginalPair m;
  for (int s = 1; s <= t; ++s) {
    const BitKernel k = bit_kernel(process, schedule.beta(s));
    m.from_one = m.from_one * k.stay_on + (1.0 - m.from_one) * k.turn_on;
    m.from_zero = m.from_zero * k.stay_on + (1.0 - m.from_zero) * k.turn_on;
  }
  return m;
}

}  // namespace

Schedule::Schedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw std::invalid_argument("schedule needs T >= 1");
  double prod = 1.0;
  alpha_bars_.reserve(betas_.size());
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) {
      throw std::invalid_argument("every beta must lie in (0, 1)");
    }
    prod *= 1.0 - b;
    alpha_bars_.push_back(prod);
  }
}

std::size_t Schedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw std::out_of_range("schedule step " + std::to_string(t) +
                            " outside [1, " + std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

double Schedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  return alpha_bars_.at(index(t));
}

Schedule linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t) / (steps - 1);
    betas[static_cast<std::size_t>(t)] =
        beta_start + (beta_end - beta_start) * frac;
  }
  return Schedule(std::move(betas));
}

Schedule constant_schedule(int steps, double beta) {
  return linear_schedule(steps, beta, beta);
}

Regime parse_regime(const std::string& name) {
  if (name == "a") return Regime::kMeanActivity;
  if (name == "b") return Regime::kCoinFlip;
  if (name == "c") return Regime::kZeroAbsorbing;
  throw std::invalid_argument("unknown regime '" + name + "' (expected a, b or c)");
}

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::kMeanActivity: return "a";
    case Regime::kCoinFlip: return "b";
    case Regime::kZeroAbsorbing: return "c";
  }
  return "?";
}

BitProcess process_for(Regime regime) {
  return regime == Regime::kZeroAbsorbing ? BitProcess::kZeroAbsorbing
                                          : BitProcess::kSymmetricFlip;
}

BitKernel bit_kernel(BitProcess process, double beta) {
  switch (process) {
    case BitProcess::kBinomial:
      return {1.0 - beta + 0.5 * beta, 0.5 * beta};
    case BitProcess::kSymmetricFlip:
      return {1.0 - beta, beta};
    case BitProcess::kZeroAbsorbing:
      return {1.0 - beta + 0.5 * beta, 0.0};
  }
  return {};
}

UserVector bernoulli_step(const UserVector& x_prev, double beta, Rng& rng) {
  check_rate(beta);
  UserVector out(x_prev.size());
  for (Eigen::Index i = 0; i < x_prev.size(); ++i) {
    out[i] = rng.bernoulli(x_prev[i] * (1.0 - beta) + 0.5 * beta) ? 1.0 : 0.0;
  }
  return out;
}

UserVector bernoulli_marginal(const UserVector& x0, int t,
                              const Schedule& schedule) {
  check_step(t, schedule);
  const double ab = schedule.alpha_bar(t);
  return (ab * x0.array() + 0.5 * (1.0 - ab)).matrix();
}

UserVector sample_bits(const UserVector& probabilities, Rng& rng) {
  UserVector out(probabilities.size());
  for (Eigen::Index i = 0; i < probabilities.size(); ++i) {
    out[i] = rng.bernoulli(probabilities[i]) ? 1.0 : 0.0;
  }
  return out;
}

UserVector symmetric_flip_forward(const UserVector& x_prev, double beta,
                                  Rng& rng) {
  check_rate(beta);
  UserVector out(x_prev.size());
  for (Eigen::Index i = 0; i < x_prev.size(); ++i) {
    const double flip = rng.bernoulli(beta) ? 1.0 : 0.0;
    out[i] = (1.0 - flip) * x_prev[i] + flip * (1.0 - x_prev[i]);
  }
  return out;
}

UserVector zero_absorbing_forward(const UserVector& x_prev, double beta,
                                  Rng& rng) {
  check_rate(beta);
  const double keep = 1.0 - beta + 0.5 * beta;
  UserVector out = UserVector::Zero(x_prev.size());
  for (Eigen::Index i = 0; i < x_prev.size(); ++i) {
    // One uniform draw per entry regardless of value keeps streams aligned.
    const bool survives = rng.bernoulli(keep);
    if (x_prev[i] > 0.5 && survives) out[i] = 1.0;
  }
  return out;
}

UserVector process_marginal(BitProcess process, const UserVector& x0, int t,
                            const Schedule& schedule) {
  check_step(t, schedule);
  const MarginalPair m = marginal_pair(process, t, schedule);
  return (x0.array() * m.from_one + (1.0 - x0.array()) * m.from_zero).matrix();
}

Eigen::MatrixXd process_marginal(BitProcess process, const Eigen::MatrixXd& x0,
                                 int t, const Schedule& schedule) {
  check_step(t, schedule);
  const MarginalPair m = marginal_pair(process, t, schedule);
  return (x0.array() * m.from_one + (1.0 - x0.array()) * m.from_zero).matrix();
}

PosteriorValue bit_posterior(BitProcess process, const Schedule& schedule,
                             int t, double x_t, double x0_prob) {
  check_step(t, schedule);
  const MarginalPair prev = marginal_pair(process, t - 1, schedule);
  const MarginalPair cur = marginal_pair(process, t, schedule);
  const BitKernel k = bit_kernel(process, schedule.beta(t));

  // P(x^{t-1} = 1) and P(x^t = 1), both linear in x0_prob.
  const double a = x0_prob * prev.from_one + (1.0 - x0_prob) * prev.from_zero;
  const double da = prev.from_one - prev.from_zero;
  const double m = x0_prob * cur.from_one + (1.0 - x0_prob) * cur.from_zero;
  const double dm = cur.from_one - cur.from_zero;

  PosteriorValue on{}, off{};
  if (m > 0.0) {
    on.value = a * k.stay_on / m;
    on.d_x0 = k.stay_on * (da * m - a * dm) / (m * m);
  } else {
    on.value = 1.0;
  }
  if (m < 1.0) {
    const double rest = 1.0 - m;
    off.value = a * (1.0 - k.stay_on) / rest;
    off.d_x0 = (1.0 - k.stay_on) * (da * rest + a * dm) / (rest * rest);
  }
  return {x_t * on.value + (1.0 - x_t) * off.value,
          x_t * on.d_x0 + (1.0 - x_t) * off.d_x0};
}

UserVector gaussian_forward(const UserVector& x0, int t,
                            const Schedule& schedule, Rng& rng) {
  check_step(t, schedule);
  const double ab = schedule.alpha_bar(t);
  UserVector out(x0.size());
  const double signal = std::sqrt(ab);
  const double noise = std::sqrt(1.0 - ab);
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    out[i] = signal * x0[i] + noise * rng.normal();
  }
  return out;
}

Eigen::MatrixXd gaussian_forward_with_noise(const Eigen::MatrixXd& x0,
                                            std::span<const int> steps,
                                            const Schedule& schedule,
                                            const Eigen::MatrixXd& noise) {
  if (static_cast<Eigen::Index>(steps.size()) != x0.rows() ||
      noise.rows() != x0.rows() || noise.cols() != x0.cols()) {
    throw std::invalid_argument("gaussian_forward_with_noise: shape mismatch");
  }
  Eigen::MatrixXd out(x0.rows(), x0.cols());
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    const int t = steps[static_cast<std::size_t>(r)];
    check_step(t, schedule);
    const double ab = schedule.alpha_bar(t);
    out.row(r) = std::sqrt(ab) * x0.row(r) + std::sqrt(1.0 - ab) * noise.row(r);
  }
  return out;
}

TraceGrid export_trace(const UserVector& x0, Regime regime,
                       const Schedule& schedule, const ReverseModel* model,
                       Rng& rng) {
  const int T = schedule.steps();
  const BitProcess process = process_for(regime);
  TraceGrid grid;
  grid.forward.resize(T + 1, x0.size());
  grid.forward.row(0) = x0.transpose();
  UserVector state = x0;
  for (int t = 1; t <= T; ++t) {
    const double beta = schedule.beta(t);
    state = process == BitProcess::kZeroAbsorbing
                ? zero_absorbing_forward(state, beta, rng)
                : symmetric_flip_forward(state, beta, rng);
    grid.forward.row(t) = state.transpose();
  }
  if (model != nullptr) {
    Eigen::MatrixXd reverse(T + 1, x0.size());
    reverse.row(T) = grid.forward.row(T);
    for (int t = T; t >= 1; --t) {
      const Eigen::VectorXd x_t = reverse.row(t).transpose();
      const Eigen::VectorXd x0_hat = (*model)(x_t, t);
      for (Eigen::Index i = 0; i < x_t.size(); ++i) {
        const double p = std::clamp(x0_hat[i], 0.0, 1.0);
        reverse(t - 1, i) = bit_posterior(process, schedule, t, x_t[i], p).value;
      }
    }
    grid.reverse = std::move(reverse);
  }
  return grid;
}

void write_trace_csv(const Eigen::MatrixXd& grid,
                     const std::filesystem::path& path) {
  std::ostringstream out;
  out << "step";
  for (Eigen::Index i = 0; i < grid.cols(); ++i) out << ",item_" << i;
  out << '\n';
  for (Eigen::Index t = 0; t < grid.rows(); ++t) {
    out << t;
    for (Eigen::Index i = 0; i < grid.cols(); ++i) {
      out << ',' << format_double(grid(t, i));
    }
    out << '\n';
  }
  write_file_atomic(path, out.str());
}

}  // namespace recfusion
