#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "recfusion/core.h"
#include "recfusion/random.h"

namespace recfusion {

// Diffusion rates beta_1..beta_T with alpha_t = 1 - beta_t and
// alpha_bar_t = prod_{tau <= t} alpha_tau. Steps are 1-based; alpha_bar(0) is 1.
class Schedule {
 public:
  // Throws std::invalid_argument unless every beta lies in (0, 1).
  explicit Schedule(std::vector<double> betas);

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(index(t)); }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const;
  std::span<const double> betas() const { return betas_; }
  std::span<const double> alpha_bars() const { return alpha_bars_; }

 private:
  std::size_t index(int t) const;

  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

// Betas interpolated linearly from beta_start to beta_end, both inclusive.
Schedule linear_schedule(int steps, double beta_start, double beta_end);
Schedule constant_schedule(int steps, double beta);

// Full-perturbation regimes for the binary forward process:
//   a: symmetric bit flips with a small rate; x^T keeps the data's mean activity
//   b: symmetric bit flips at rate 0.5; x^T is a fair coin
//   c: 1 -> 0 flips only; x^T is all zeros
enum class Regime { kMeanActivity, kCoinFlip, kZeroAbsorbing };

Regime parse_regime(const std::string& name);
std::string to_string(Regime regime);

// One-step transition of a single bit:
// P(x^t = 1 | x^{t-1} = 1) and P(x^t = 1 | x^{t-1} = 0).
struct BitKernel {
  double stay_on = 1.0;
  double turn_on = 0.0;
};

enum class BitProcess {
  kBinomial,       // B(x (1 - beta) + beta / 2)
  kSymmetricFlip,  // flip with probability beta
  kZeroAbsorbing,  // ones survive with probability 1 - beta / 2, zeros stay
};

BitProcess process_for(Regime regime);
BitKernel bit_kernel(BitProcess process, double beta);

// x^t ~ B(x^{t-1} (1 - beta) + beta / 2), entry-wise. beta in [0, 1].
UserVector bernoulli_step(const UserVector& x_prev, double beta, Rng& rng);

// Closed-form q(x^t = 1 | x^0) = alpha_bar_t x0 + (1 - alpha_bar_t) / 2.
// Throws std::out_of_range unless 1 <= t <= T.
UserVector bernoulli_marginal(const UserVector& x0, int t,
                              const Schedule& schedule);

// Entry-wise Bernoulli draw from a probability vector.
UserVector sample_bits(const UserVector& probabilities, Rng& rng);

// Flip mask b ~ B(beta); output (1 - b) x + b (1 - x).
UserVector symmetric_flip_forward(const UserVector& x_prev, double beta,
                                  Rng& rng);

// Zeros stay zero; each one survives with probability 1 - beta / 2.
UserVector zero_absorbing_forward(const UserVector& x_prev, double beta,
                                  Rng& rng);

// P(x^t = 1 | x^0) for an arbitrary bit process, computed by the two-state
// recurrence. x0 may hold probabilities; the result is linear in x0.
UserVector process_marginal(BitProcess process, const UserVector& x0, int t,
                            const Schedule& schedule);
Eigen::MatrixXd process_marginal(BitProcess process, const Eigen::MatrixXd& x0,
                                 int t, const Schedule& schedule);

// Posterior P(x^{t-1} = 1 | x^t, x^0 ~ B(x0_prob)) for one entry, and its
// derivative with respect to x0_prob. x_t is a bit (or, for mean-field
// traces, a probability the result is linear in).
struct PosteriorValue {
  double value = 0.0;
  double d_x0 = 0.0;
};
PosteriorValue bit_posterior(BitProcess process, const Schedule& schedule,
                             int t, double x_t, double x0_prob);

// x^t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
UserVector gaussian_forward(const UserVector& x0, int t,
                            const Schedule& schedule, Rng& rng);
Eigen::MatrixXd gaussian_forward_with_noise(const Eigen::MatrixXd& x0,
                                            std::span<const int> steps,
                                            const Schedule& schedule,
                                            const Eigen::MatrixXd& noise);

// Predicts x^0 probabilities from (x^t, t); used to run the reverse chain.
using ReverseModel =
    std::function<Eigen::VectorXd(const Eigen::VectorXd& x_t, int t)>;

// Forward grid: row t is x^t sampled under `regime` (row 0 is x0). When a
// reverse model is given, the reverse grid starts from the forward row T and
// each row t-1 is the posterior mean given row t and the model's x^0
// prediction. Both grids are (T + 1) x n_items.
struct TraceGrid {
  Eigen::MatrixXd forward;
  std::optional<Eigen::MatrixXd> reverse;
};

TraceGrid export_trace(const UserVector& x0, Regime regime,
                       const Schedule& schedule, const ReverseModel* model,
                       Rng& rng);

// CSV with header `step,item_0,...,item_{n-1}` and one row per step.
void write_trace_csv(const Eigen::MatrixXd& grid,
                     const std::filesystem::path& path);

}  // namespace recfusion
