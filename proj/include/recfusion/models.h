#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include <nlohmann/json.hpp>
#include "recfusion/core.h"
#include "recfusion/diffusion.h"
#include "recfusion/neural.h"
#include "recfusion/random.h"

namespace recfusion {

enum class Variant {
  kRecFusion,     // Gaussian forward, tanh MLP, multinomial reconstruction
  kRecFusionT,    // RecFusion with the step embedding added to the input
  kRecFusionVar,  // predicts mean and variance of x^0, Gaussian likelihood
  kRecFusionBin,  // zero-absorbing Bernoulli forward, sigmoid MLP, BCE
  kRandom,
  kPopularity,
  kEase,
  kMultVae,
};

std::string to_string(Variant variant);
// Accepts the names produced by to_string (case-insensitive).
Variant parse_variant(const std::string& name);
bool is_diffusion(Variant variant);
// True for the variants trained by gradient descent.
bool is_neural(Variant variant);

struct ModelSpec {
  Variant variant = Variant::kRecFusion;
  // Hidden widths of the denoiser; MultVAE uses hidden[0] for both encoder
  // and decoder.
  std::vector<Eigen::Index> hidden = {600, 200};
  int steps = 10;
  bool linear_schedule = false;
  double beta_start = 0.01;
  double beta_end = 0.01;
  bool full_elbo = false;  // RecFusionBin: add the posterior KL terms
  double ease_lambda = 500.0;
  Eigen::Index latent_dim = 200;
  double dropout = 0.5;
  double kl_cap = 0.2;
  double kl_anneal_fraction = 0.2;

  Schedule make_schedule() const;
  // Throws std::invalid_argument for out-of-range hyperparameters.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
  // FNV-1a hash of the canonical JSON, as 16 hex digits.
  std::string hash() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct DenoiserParams {
  Mlp network;
};

struct VaeParams {
  Mlp encoder;  // n_items -> hidden -> 2 * latent (mean, log-variance)
  Mlp decoder;  // latent -> hidden -> n_items logits
};

// Popularity: normalized counts. Random: a seeded permutation rank (m for the
// first of m eligible items, down to 1) and -inf for items never seen in
// training. At scoring time Random redraws the permutation per user from
// (seed, fold-in).
struct ItemScoreParams {
  Eigen::VectorXd scores;
  std::uint64_t seed = 0;
};

struct ItemItemParams {
  Eigen::MatrixXd weights;
};

using ModelParams =
    std::variant<DenoiserParams, VaeParams, ItemScoreParams, ItemItemParams>;

// Mutable view of one stored parameter array (column-major data).
struct ArrayView {
  std::string name;
  double* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

struct FittedModel {
  ModelSpec spec;
  Eigen::Index n_items = 0;
  ModelParams params;

  // Every stored array, in a fixed order; used by checkpointing.
  std::vector<ArrayView> arrays();
  // Seed used at scoring time (Random baseline only; 0 otherwise).
  std::uint64_t scoring_seed() const;
};

// Allocates parameters of the right shapes; neural weights are initialized
// from `rng`, other arrays are zero.
FittedModel init_model(const ModelSpec& spec, Eigen::Index n_items, Rng& rng);

// ---- diffusion objectives ----

// A training batch with every noise draw frozen, so the objective below is a
// deterministic function of the parameters.
struct DiffusionBatch {
  Tensor x0;
  Tensor x_t;
  std::vector<int> steps;
};

// x^t per row: Gaussian forward for RecFusion/T/Var, zero-absorbing
// Bernoulli marginal for RecFusionBin.
DiffusionBatch make_diffusion_batch(Variant variant, const Tensor& x0,
                                    std::span<const int> steps,
                                    const Schedule& schedule, Rng& rng);
// Same with steps drawn uniformly from 1..T.
DiffusionBatch make_diffusion_batch(Variant variant, const Tensor& x0,
                                    const Schedule& schedule, Rng& rng);

// Network input for a (possibly noisy) batch: x^t, plus the step embedding
// for RecFusionT.
Tensor denoiser_input(const ModelSpec& spec, const Tensor& x_t,
                      std::span<const int> steps);

struct ObjectiveResult {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with Mlp::parameters()
};

ObjectiveResult diffusion_objective(const ModelSpec& spec, const Mlp& network,
                                    const DiffusionBatch& batch,
                                    const Schedule& schedule);

// Samples x^t (and steps when omitted) and evaluates the objective.
ObjectiveResult recfusion_loss(const ModelSpec& spec, const Mlp& network,
                               const Tensor& x0, std::span<const int> steps,
                               const Schedule& schedule, Rng& rng);

// RecFusionVar variance head: log(1 / (2 pi) + softplus(raw)). The floor keeps
// the Gaussian negative log-likelihood non-negative.
Tensor variance_head_log_variance(const Tensor& raw);

// ---- MultVAE ----

struct VaeNoise {
  Tensor keep_mask;  // input dropout, already scaled by 1 / (1 - rate)
  Tensor eps;        // reparameterization noise
};

VaeNoise sample_vae_noise(const VaeParams& vae, const Tensor& x0,
                          double dropout, Rng& rng);

struct VaeObjective {
  double loss = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  std::vector<Tensor> encoder_grads;
  std::vector<Tensor> decoder_grads;
};

// Multinomial reconstruction of x0 + kl_weight * KL(N(mu, sigma) || N(0, I)),
// both averaged over rows.
VaeObjective multvae_objective(const VaeParams& vae, const Tensor& x0,
                               const VaeNoise& noise, double kl_weight);

VaeObjective multvae_loss(const VaeParams& vae, const Tensor& x0,
                          double kl_weight, double dropout, Rng& rng);

// ---- closed-form and baseline fits ----

// score_i = count_i / max_j count_j. Throws on a matrix without interactions.
Eigen::VectorXd popularity_fit(const InteractionMatrix& train);

// Permutation ranks for items with a training interaction, -inf otherwise.
ItemScoreParams random_fit(const InteractionMatrix& train, std::uint64_t seed);

// B = I - P diag(1 / diag(P)) with P = (X^T X + lambda I)^-1; diag(B) = 0.
Eigen::MatrixXd ease_fit(const InteractionMatrix& train, double lambda);

// ---- scoring ----

// Scores for each row of `fold_in` (users x n_items). Diffusion variants take
// the fold-in as x^1 and run one reverse pass at t = 1.
Tensor score_batch(const FittedModel& model, const Tensor& fold_in);
UserVector score_user(const FittedModel& model, const UserVector& fold_in);

}  // namespace recfusion
