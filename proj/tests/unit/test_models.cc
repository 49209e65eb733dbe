#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "recfusion/models.h"
#include "test_util.h"

namespace recfusion {
namespace {

using testing::random_matrix;

ModelSpec small_spec(Variant variant) {
  ModelSpec spec;
  spec.variant = variant;
  spec.hidden = {6};
  spec.steps = 5;
  spec.linear_schedule = true;
  spec.beta_start = 0.05;
  spec.beta_end = 0.3;
  spec.latent_dim = 3;
  return spec;
}

Tensor binary_batch(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  return to_dense_all(random_matrix(rows, cols, 0.3, seed, 1));
}

// Scales up the initial weights so the gradient check sees curvature.
void perturb(Mlp& mlp, Rng& rng) {
  for (Tensor* p : mlp.parameters()) {
    for (Eigen::Index i = 0; i < p->size(); ++i) p->data()[i] += 0.2 * rng.normal();
  }
}

const Mlp& network_of(const FittedModel& m) {
  return std::get<DenoiserParams>(m.params).network;
}

TEST(Variant, NamesRoundTripCaseInsensitively) {
  for (auto v : {Variant::kRecFusion, Variant::kRecFusionT, Variant::kRecFusionVar,
                 Variant::kRecFusionBin, Variant::kRandom, Variant::kPopularity,
                 Variant::kEase, Variant::kMultVae}) {
    EXPECT_EQ(parse_variant(to_string(v)), v);
  }
  EXPECT_EQ(parse_variant("recfusionbin"), Variant::kRecFusionBin);
  EXPECT_THROW(parse_variant("lightgcn"), std::invalid_argument);
  EXPECT_TRUE(is_diffusion(Variant::kRecFusionT));
  EXPECT_FALSE(is_diffusion(Variant::kMultVae));
  EXPECT_TRUE(is_neural(Variant::kMultVae));
  EXPECT_FALSE(is_neural(Variant::kEase));
}

TEST(ModelSpec, JsonRoundTripAndHash) {
  ModelSpec spec = small_spec(Variant::kRecFusionBin);
  spec.full_elbo = true;
  const ModelSpec back = ModelSpec::from_json(spec.to_json());
  EXPECT_EQ(back, spec);
  EXPECT_EQ(back.hash(), spec.hash());
  EXPECT_EQ(spec.hash().size(), 16U);
  ModelSpec other = spec;
  other.steps = 6;
  EXPECT_NE(other.hash(), spec.hash());
}

TEST(ModelSpec, ValidationRejectsOutOfRangeValues) {
  ModelSpec spec = small_spec(Variant::kRecFusion);
  spec.steps = 0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = small_spec(Variant::kRecFusion);
  spec.beta_start = 1.0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = small_spec(Variant::kRecFusion);
  spec.beta_end = 0.01;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = small_spec(Variant::kRecFusion);
  spec.hidden.clear();
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = small_spec(Variant::kEase);
  spec.ease_lambda = 0.0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec = small_spec(Variant::kMultVae);
  spec.dropout = 1.0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(InitModel, ShapesPerVariant) {
  Rng rng(1);
  const auto plain = init_model(small_spec(Variant::kRecFusion), 9, rng);
  EXPECT_EQ(network_of(plain).output_width(), 9);
  EXPECT_EQ(network_of(plain).layers.back().activation, Activation::kIdentity);
  const auto var = init_model(small_spec(Variant::kRecFusionVar), 9, rng);
  EXPECT_EQ(network_of(var).output_width(), 18);
  const auto bin = init_model(small_spec(Variant::kRecFusionBin), 9, rng);
  EXPECT_EQ(network_of(bin).layers.back().activation, Activation::kSigmoid);
  auto vae = init_model(small_spec(Variant::kMultVae), 9, rng);
  const auto& v = std::get<VaeParams>(vae.params);
  EXPECT_EQ(v.encoder.output_width(), 6);
  EXPECT_EQ(v.decoder.input_width(), 3);
  EXPECT_EQ(v.decoder.output_width(), 9);
  const auto names = vae.arrays();
  ASSERT_FALSE(names.empty());
  EXPECT_EQ(names.front().name.rfind("encoder.", 0), 0U);
}

TEST(DiffusionBatch, ZeroAbsorbingOnlyTurnsBitsOff) {
  Rng rng(2);
  const ModelSpec spec = small_spec(Variant::kRecFusionBin);
  const Tensor x0 = binary_batch(40, 12, 3);
  const auto batch = make_diffusion_batch(spec.variant, x0, spec.make_schedule(), rng);
  ASSERT_EQ(batch.steps.size(), 40U);
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    const double v = batch.x_t.data()[i];
    EXPECT_TRUE(v == 0.0 || v == 1.0);
    EXPECT_LE(v, x0.data()[i]);
  }
  for (int t : batch.steps) {
    EXPECT_GE(t, 1);
    EXPECT_LE(t, spec.steps);
  }
}

TEST(DiffusionBatch, GaussianUsesSqrtAlphaBar) {
  Rng rng(4);
  const ModelSpec spec = small_spec(Variant::kRecFusion);
  const Schedule schedule = spec.make_schedule();
  const Tensor x0 = Tensor::Ones(4000, 3);
  const std::vector<int> steps(4000, 3);
  const auto batch = make_diffusion_batch(spec.variant, x0, steps, schedule, rng);
  const double alpha_bar = (1 - 0.05) * (1 - 0.1125) * (1 - 0.175);
  EXPECT_NEAR(batch.x_t.mean(), std::sqrt(alpha_bar), 0.01);
}

TEST(DiffusionBatch, RejectsBadSteps) {
  Rng rng(5);
  const ModelSpec spec = small_spec(Variant::kRecFusion);
  const Tensor x0 = Tensor::Ones(2, 3);
  const std::vector<int> bad{1, 6};
  EXPECT_THROW(make_diffusion_batch(spec.variant, x0, bad, spec.make_schedule(), rng),
               std::out_of_range);
  const std::vector<int> short_steps{1};
  EXPECT_THROW(
      make_diffusion_batch(spec.variant, x0, short_steps, spec.make_schedule(), rng),
      std::invalid_argument);
  EXPECT_THROW(make_diffusion_batch(Variant::kEase, x0, spec.make_schedule(), rng),
               std::invalid_argument);
}

TEST(DenoiserInput, StepEmbeddingOnlyForTimedVariant) {
  const Tensor x = Tensor::Zero(2, 7);
  const std::vector<int> steps{1, 4};
  const Tensor plain = denoiser_input(small_spec(Variant::kRecFusion), x, steps);
  EXPECT_EQ(plain, x);
  const Tensor timed = denoiser_input(small_spec(Variant::kRecFusionT), x, steps);
  EXPECT_EQ(timed.cols(), 7);
  EXPECT_GT((timed.row(0) - timed.row(1)).norm(), 0.1);
  // Odd width: embedding of width 8 truncated to 7.
  EXPECT_TRUE(timed.row(1).isApprox(time_embedding(4, 8, 5).head(7)));
}

class ObjectiveVariant : public ::testing::TestWithParam<Variant> {};

TEST_P(ObjectiveVariant, LossIsFiniteAndNonNegative) {
  Rng rng(6);
  ModelSpec spec = small_spec(GetParam());
  const auto model = init_model(spec, 10, rng);
  const Tensor x0 = binary_batch(16, 10, 7);
  for (int rep = 0; rep < 5; ++rep) {
    const auto r = recfusion_loss(spec, network_of(model), x0, {}, spec.make_schedule(), rng);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_GE(r.loss, 0.0);
    EXPECT_EQ(r.grads.size(), network_of(model).parameters().size());
  }
}

TEST_P(ObjectiveVariant, GradientMatchesCentralDifferences) {
  Rng rng(8);
  ModelSpec spec = small_spec(GetParam());
  spec.full_elbo = GetParam() == Variant::kRecFusionBin;
  auto model = init_model(spec, 8, rng);
  Mlp& net = std::get<DenoiserParams>(model.params).network;
  perturb(net, rng);
  const Schedule schedule = spec.make_schedule();
  const Tensor x0 = binary_batch(6, 8, 9);
  const std::vector<int> steps{1, 2, 3, 4, 5, 3};
  const auto batch = make_diffusion_batch(spec.variant, x0, steps, schedule, rng);
  const auto r = diffusion_objective(spec, net, batch, schedule);
  auto params = net.parameters();
  const auto check = grad_check(
      [&] { return diffusion_objective(spec, net, batch, schedule).loss; }, params,
      r.grads, 1e-6, 200, 3);
  EXPECT_LT(check.max_relative_error, 1e-4) << check.describe();
}

INSTANTIATE_TEST_SUITE_P(Diffusion, ObjectiveVariant,
                         ::testing::Values(Variant::kRecFusion, Variant::kRecFusionT,
                                           Variant::kRecFusionVar,
                                           Variant::kRecFusionBin));

TEST(TimedObjective, LossDependsOnStep) {
  Rng rng(10);
  const ModelSpec spec = small_spec(Variant::kRecFusionT);
  const auto model = init_model(spec, 8, rng);
  const Tensor x0 = binary_batch(4, 8, 11);
  DiffusionBatch batch{x0, x0, {1, 1, 1, 1}};
  const Schedule schedule = spec.make_schedule();
  const double at_one = diffusion_objective(spec, network_of(model), batch, schedule).loss;
  batch.steps = {5, 5, 5, 5};
  const double at_five = diffusion_objective(spec, network_of(model), batch, schedule).loss;
  EXPECT_NE(at_one, at_five);
}

TEST(FullElbo, AddsNonNegativeKlOnlyAfterFirstStep) {
  Rng rng(12);
  ModelSpec spec = small_spec(Variant::kRecFusionBin);
  const auto model = init_model(spec, 8, rng);
  const Tensor x0 = binary_batch(5, 8, 13);
  const Schedule schedule = spec.make_schedule();
  const DiffusionBatch first{x0, x0, {1, 1, 1, 1, 1}};
  const DiffusionBatch later{x0, x0, {3, 3, 3, 3, 3}};
  ModelSpec elbo = spec;
  elbo.full_elbo = true;
  const double bce1 = diffusion_objective(spec, network_of(model), first, schedule).loss;
  EXPECT_DOUBLE_EQ(diffusion_objective(elbo, network_of(model), first, schedule).loss, bce1);
  const double bce3 = diffusion_objective(spec, network_of(model), later, schedule).loss;
  EXPECT_GT(diffusion_objective(elbo, network_of(model), later, schedule).loss, bce3);
}

TEST(VarianceHead, FloorKeepsNllNonNegative) {
  Tensor raw(1, 4);
  raw << -50.0, -1.0, 0.0, 3.0;
  const Tensor lv = variance_head_log_variance(raw);
  const double floor = std::log(1.0 / (2.0 * std::numbers::pi));
  EXPECT_NEAR(lv(0, 0), floor, 1e-12);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_GE(lv(0, i), floor);
  EXPECT_NEAR(lv(0, 2), std::log(1.0 / (2.0 * std::numbers::pi) + std::log(2.0)), 1e-12);
  // A perfect mean at the smallest variance costs exactly zero.
  EXPECT_NEAR(gaussian_nll(Tensor::Zero(1, 1), lv.leftCols(1), Tensor::Zero(1, 1)).value,
              0.0, 1e-12);
}

TEST(MultVae, KlVanishesAtStandardNormalPosterior) {
  Rng rng(14);
  auto model = init_model(small_spec(Variant::kMultVae), 8, rng);
  auto& vae = std::get<VaeParams>(model.params);
  // Zero last encoder layer: mu = 0 and log-variance = 0 for every input.
  vae.encoder.layers.back().weight.setZero();
  vae.encoder.layers.back().bias.setZero();
  const Tensor x0 = binary_batch(5, 8, 15);
  const auto noise = sample_vae_noise(vae, x0, 0.5, rng);
  const auto r = multvae_objective(vae, x0, noise, 1.0);
  EXPECT_NEAR(r.kl, 0.0, 1e-15);
  EXPECT_NEAR(r.loss, r.reconstruction, 1e-15);
}

TEST(MultVae, ZeroKlWeightIsPureReconstruction) {
  Rng rng(16);
  const auto model = init_model(small_spec(Variant::kMultVae), 8, rng);
  const auto& vae = std::get<VaeParams>(model.params);
  const Tensor x0 = binary_batch(5, 8, 17);
  const auto noise = sample_vae_noise(vae, x0, 0.0, rng);
  const auto r = multvae_objective(vae, x0, noise, 0.0);
  EXPECT_GT(r.kl, 0.0);
  EXPECT_DOUBLE_EQ(r.loss, r.reconstruction);
  EXPECT_THROW(multvae_objective(vae, x0, noise, 1.5), std::invalid_argument);
}

TEST(MultVae, DropoutMaskIsScaled) {
  Rng rng(18);
  const auto model = init_model(small_spec(Variant::kMultVae), 8, rng);
  const Tensor x0 = binary_batch(50, 8, 19);
  const auto noise = sample_vae_noise(std::get<VaeParams>(model.params), x0, 0.25, rng);
  for (Eigen::Index i = 0; i < noise.keep_mask.size(); ++i) {
    const double v = noise.keep_mask.data()[i];
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-15);
  }
  EXPECT_NEAR(noise.keep_mask.mean(), 1.0, 0.15);
}

TEST(MultVae, GradientMatchesCentralDifferences) {
  Rng rng(20);
  auto model = init_model(small_spec(Variant::kMultVae), 8, rng);
  auto& vae = std::get<VaeParams>(model.params);
  perturb(vae.encoder, rng);
  perturb(vae.decoder, rng);
  const Tensor x0 = binary_batch(5, 8, 21);
  const auto noise = sample_vae_noise(vae, x0, 0.5, rng);
  const auto r = multvae_objective(vae, x0, noise, 0.3);
  auto params = vae.encoder.parameters();
  auto dec = vae.decoder.parameters();
  params.insert(params.end(), dec.begin(), dec.end());
  std::vector<Tensor> grads = r.encoder_grads;
  grads.insert(grads.end(), r.decoder_grads.begin(), r.decoder_grads.end());
  const auto check = grad_check([&] { return multvae_objective(vae, x0, noise, 0.3).loss; },
                                params, grads, 1e-6, 300, 4);
  EXPECT_LT(check.max_relative_error, 1e-4) << check.describe();
}

TEST(Popularity, NormalizedCounts) {
  // Item 0 seen by 4 users, item 1 by 2, item 2 by 1, item 3 by none.
  const InteractionMatrix train(4, {{0, 1}, {0, 1, 2}, {0}, {0}});
  const auto scores = popularity_fit(train);
  ASSERT_EQ(scores.size(), 4);
  EXPECT_DOUBLE_EQ(scores[0], 1.0);
  EXPECT_DOUBLE_EQ(scores[1], 0.5);
  EXPECT_DOUBLE_EQ(scores[2], 0.25);
  EXPECT_DOUBLE_EQ(scores[3], 0.0);
  EXPECT_THROW(popularity_fit(InteractionMatrix(3, {{}, {}})), std::invalid_argument);
}

TEST(Popularity, EveryUserGetsTheSameScores) {
  Rng rng(22);
  const auto train = random_matrix(30, 12, 0.3, 23, 1);
  auto model = init_model(small_spec(Variant::kPopularity), 12, rng);
  std::get<ItemScoreParams>(model.params).scores = popularity_fit(train);
  const Tensor scores = score_batch(model, binary_batch(6, 12, 24));
  for (Eigen::Index r = 1; r < scores.rows(); ++r) EXPECT_EQ(scores.row(r), scores.row(0));
}

FittedModel random_model(const InteractionMatrix& train, std::uint64_t seed) {
  Rng rng(0);
  auto model = init_model(small_spec(Variant::kRandom),
                          static_cast<Eigen::Index>(train.n_items()), rng);
  model.params = random_fit(train, seed);
  return model;
}

TEST(RandomBaseline, DeterministicPerUserAndUnseenLast) {
  // Item 4 never appears in training.
  const InteractionMatrix train(5, {{0, 1}, {2, 3}, {1, 3}});
  const auto model = random_model(train, 99);
  const Tensor fold = binary_batch(3, 5, 25);
  const Tensor a = score_batch(model, fold);
  const Tensor b = score_batch(model, fold);
  EXPECT_EQ(a, b);
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    EXPECT_EQ(a(r, 4), -std::numeric_limits<double>::infinity());
    std::set<double> ranks;
    for (Eigen::Index c = 0; c < 4; ++c) ranks.insert(a(r, c));
    EXPECT_EQ(ranks, (std::set<double>{1.0, 2.0, 3.0, 4.0}));
  }
  EXPECT_EQ(model.scoring_seed(), 99U);
}

TEST(RandomBaseline, TopItemIsUniformAcrossUsers) {
  constexpr Eigen::Index kItems = 12;
  constexpr int kUsers = 4000;
  std::vector<ItemIndex> all(kItems);
  for (Eigen::Index i = 0; i < kItems; ++i) all[static_cast<std::size_t>(i)] = static_cast<ItemIndex>(i);
  const auto model = random_model(InteractionMatrix(kItems, {all}), 7);
  // Row r holds the binary digits of r + 1, so every fold-in is distinct.
  Tensor fold = Tensor::Zero(kUsers, kItems);
  for (int r = 0; r < kUsers; ++r) {
    for (Eigen::Index c = 0; c < kItems; ++c) fold(r, c) = ((r + 1) >> c) & 1;
  }
  const Tensor s = score_batch(model, fold);
  std::vector<int> top(kItems, 0);
  for (int r = 0; r < kUsers; ++r) {
    Eigen::Index best = 0;
    s.row(r).maxCoeff(&best);
    ++top[static_cast<std::size_t>(best)];
  }
  const double p = 1.0 / kItems;
  const double sigma = std::sqrt(kUsers * p * (1.0 - p));
  for (int count : top) EXPECT_NEAR(count, kUsers * p, 5.0 * sigma);
}

// Independent oracle: for every column j solve the ridge problem with the
// diagonal entry excluded, min ||X_j - X_{-j} b||^2 + lambda ||b||^2.
Eigen::MatrixXd ease_oracle(const InteractionMatrix& train, double lambda) {
  const Eigen::MatrixXd x = to_dense_all(train);
  const Eigen::Index n = x.cols();
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    std::vector<Eigen::Index> others;
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k != j) others.push_back(k);
    }
    Eigen::MatrixXd xo(x.rows(), n - 1);
    for (Eigen::Index k = 0; k < n - 1; ++k) xo.col(k) = x.col(others[static_cast<std::size_t>(k)]);
    Eigen::MatrixXd a = xo.transpose() * xo;
    a.diagonal().array() += lambda;
    const Eigen::VectorXd sol = a.colPivHouseholderQr().solve(xo.transpose() * x.col(j));
    for (Eigen::Index k = 0; k < n - 1; ++k) b(others[static_cast<std::size_t>(k)], j) = sol[k];
  }
  return b;
}

TEST(Ease, MatchesPerColumnRidgeSolve) {
  for (double lambda : {1.0, 10.0, 100.0}) {
    const auto train = random_matrix(25, 10, 0.3, 26 + static_cast<int>(lambda));
    const auto b = ease_fit(train, lambda);
    EXPECT_EQ(b.diagonal().cwiseAbs().maxCoeff(), 0.0);
    EXPECT_LT((b - ease_oracle(train, lambda)).cwiseAbs().maxCoeff(), 1e-9) << lambda;
  }
}

TEST(Ease, ScoresAreLinearInFoldIn) {
  Rng rng(27);
  const auto train = random_matrix(30, 9, 0.3, 28);
  auto model = init_model(small_spec(Variant::kEase), 9, rng);
  std::get<ItemItemParams>(model.params).weights = ease_fit(train, 5.0);
  const UserVector a = to_dense(random_matrix(1, 9, 0.4, 29), 0);
  const UserVector b = to_dense(random_matrix(1, 9, 0.4, 30), 0);
  const UserVector lhs = score_user(model, a + 2.0 * b);
  const UserVector rhs = score_user(model, a) + 2.0 * score_user(model, b);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(ease_fit(train, 0.0), std::invalid_argument);
}

TEST(Scoring, BinScoresAreProbabilities) {
  Rng rng(31);
  const auto model = init_model(small_spec(Variant::kRecFusionBin), 10, rng);
  const Tensor s = score_batch(model, binary_batch(8, 10, 32));
  EXPECT_GE(s.minCoeff(), 0.0);
  EXPECT_LE(s.maxCoeff(), 1.0);
}

TEST(Scoring, VarReturnsMeanHalf) {
  Rng rng(33);
  const auto model = init_model(small_spec(Variant::kRecFusionVar), 10, rng);
  const Tensor fold = binary_batch(3, 10, 34);
  const Tensor s = score_batch(model, fold);
  EXPECT_EQ(s.cols(), 10);
  EXPECT_EQ(s, mlp_forward(network_of(model), fold).output.leftCols(10));
}

TEST(Scoring, MultVaeRowsSumToOne) {
  Rng rng(35);
  const auto model = init_model(small_spec(Variant::kMultVae), 10, rng);
  const Tensor s = score_batch(model, binary_batch(4, 10, 36));
  for (Eigen::Index r = 0; r < s.rows(); ++r) EXPECT_NEAR(s.row(r).sum(), 1.0, 1e-12);
}

TEST(Scoring, RejectsWrongWidth) {
  Rng rng(37);
  const auto model = init_model(small_spec(Variant::kRecFusion), 10, rng);
  EXPECT_THROW(score_batch(model, Tensor::Zero(2, 9)), std::invalid_argument);
  EXPECT_EQ(score_user(model, UserVector::Zero(10)).size(), 10);
}

}  // namespace
}  // namespace recfusion
