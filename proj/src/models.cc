#include "recfusion/models.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace recfusion {
namespace {

using nlohmann::json;

constexpr Eigen::Index kMaxEaseItems = 40000;

const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names = {
      {Variant::kRecFusion, "RecFusion"},
      {Variant::kRecFusionT, "RecFusionT"},
      {Variant::kRecFusionVar, "RecFusionVar"},
      {Variant::kRecFusionBin, "RecFusionBin"},
      {Variant::kRandom, "Random"},
      {Variant::kPopularity, "Popularity"},
      {Variant::kEase, "EASE"},
      {Variant::kMultVae, "MultVAE"},
  };
  return names;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor normalize_rows(const Tensor& x) {
  Tensor out = x;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double norm = out.row(r).norm();
    if (norm > 0.0) out.row(r) /= norm;
  }
  return out;
}

std::uint64_t hash_row(const Tensor& x, Eigen::Index r) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    if (x(r, i) > 0.5) {
      h ^= static_cast<std::uint64_t>(i);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void require_params(const FittedModel& model, bool ok) {
  if (!ok) {
    throw std::logic_error("model parameters do not match variant " +
                           to_string(model.spec.variant));
  }
}

}  // namespace

std::string to_string(Variant variant) {
  for (const auto& [v, name] : variant_names()) {
    if (v == variant) return name;
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  for (const auto& [v, n] : variant_names()) {
    if (lower(n) == lower(name)) return v;
  }
  throw std::invalid_argument("unknown model variant '" + name + "'");
}

bool is_diffusion(Variant variant) {
  return variant == Variant::kRecFusion || variant == Variant::kRecFusionT ||
         variant == Variant::kRecFusionVar || variant == Variant::kRecFusionBin;
}

bool is_neural(Variant variant) {
  return is_diffusion(variant) || variant == Variant::kMultVae;
}

Schedule ModelSpec::make_schedule() const {
  return linear_schedule ? recfusion::linear_schedule(steps, beta_start, beta_end)
                         : constant_schedule(steps, beta_start);
}

void ModelSpec::validate() const {
  auto fail = [](const std::string& why) {
    throw std::invalid_argument("invalid model spec: " + why);
  };
  if (is_neural(variant)) {
    if (hidden.empty()) fail("hidden widths must not be empty");
    for (auto w : hidden) {
      if (w < 1) fail("hidden widths must be >= 1");
    }
  }
  if (is_diffusion(variant)) {
    if (steps < 1) fail("steps must be >= 1");
    if (!(beta_start > 0.0 && beta_start < 1.0)) fail("beta_start outside (0, 1)");
    if (linear_schedule && !(beta_end >= beta_start && beta_end < 1.0)) {
      fail("beta_end must lie in [beta_start, 1)");
    }
  }
  if (variant == Variant::kEase && !(ease_lambda > 0.0)) {
    fail("ease_lambda must be > 0");
  }
  if (variant == Variant::kMultVae) {
    if (latent_dim < 1) fail("latent_dim must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout outside [0, 1)");
    if (!(kl_cap >= 0.0 && kl_cap <= 1.0)) fail("kl_cap outside [0, 1]");
    if (!(kl_anneal_fraction > 0.0 && kl_anneal_fraction <= 1.0)) {
      fail("kl_anneal_fraction outside (0, 1]");
    }
  }
}

json ModelSpec::to_json() const {
  return json{{"variant", to_string(variant)},
              {"hidden", hidden},
              {"steps", steps},
              {"schedule", linear_schedule ? "linear" : "constant"},
              {"beta_start", beta_start},
              {"beta_end", beta_end},
              {"full_elbo", full_elbo},
              {"ease_lambda", ease_lambda},
              {"latent_dim", latent_dim},
              {"dropout", dropout},
              {"kl_cap", kl_cap},
              {"kl_anneal_fraction", kl_anneal_fraction}};
}

ModelSpec ModelSpec::from_json(const json& j) {
  ModelSpec s;
  s.variant = parse_variant(j.at("variant").get<std::string>());
  s.hidden = j.at("hidden").get<std::vector<Eigen::Index>>();
  s.steps = j.at("steps").get<int>();
  s.linear_schedule = j.at("schedule").get<std::string>() == "linear";
  s.beta_start = j.at("beta_start").get<double>();
  s.beta_end = j.at("beta_end").get<double>();
  s.full_elbo = j.at("full_elbo").get<bool>();
  s.ease_lambda = j.at("ease_lambda").get<double>();
  s.latent_dim = j.at("latent_dim").get<Eigen::Index>();
  s.dropout = j.at("dropout").get<double>();
  s.kl_cap = j.at("kl_cap").get<double>();
  s.kl_anneal_fraction = j.at("kl_anneal_fraction").get<double>();
  return s;
}

std::string ModelSpec::hash() const {
  const std::string text = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<ArrayView> FittedModel::arrays() {
  std::vector<ArrayView> out;
  auto add_mlp = [&out](const std::string& prefix, Mlp& mlp) {
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
      auto& layer = mlp.layers[l];
      const std::string base = prefix + "." + std::to_string(l);
      out.push_back({base + ".weight", layer.weight.data(), layer.weight.rows(),
                     layer.weight.cols()});
      out.push_back({base + ".bias", layer.bias.data(), layer.bias.rows(),
                     layer.bias.cols()});
    }
  };
  std::visit(
      [&](auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, DenoiserParams>) {
          add_mlp("network", p.network);
        } else if constexpr (std::is_same_v<P, VaeParams>) {
          add_mlp("encoder", p.encoder);
          add_mlp("decoder", p.decoder);
        } else if constexpr (std::is_same_v<P, ItemScoreParams>) {
          out.push_back({"scores", p.scores.data(), p.scores.size(), 1});
        } else {
          out.push_back({"weights", p.weights.data(), p.weights.rows(),
                         p.weights.cols()});
        }
      },
      params);
  return out;
}

std::uint64_t FittedModel::scoring_seed() const {
  if (const auto* p = std::get_if<ItemScoreParams>(&params)) return p->seed;
  return 0;
}

FittedModel init_model(const ModelSpec& spec, Eigen::Index n_items, Rng& rng) {
  spec.validate();
  if (n_items < 1) throw std::invalid_argument("model needs n_items >= 1");
  FittedModel model{spec, n_items, {}};
  switch (spec.variant) {
    case Variant::kRecFusion:
    case Variant::kRecFusionT:
    case Variant::kRecFusionVar:
    case Variant::kRecFusionBin: {
      std::vector<Eigen::Index> widths{n_items};
      widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
      widths.push_back(spec.variant == Variant::kRecFusionVar ? 2 * n_items
                                                              : n_items);
      const Activation out = spec.variant == Variant::kRecFusionBin
                                 ? Activation::kSigmoid
                                 : Activation::kIdentity;
      model.params = DenoiserParams{make_mlp(widths, Activation::kTanh, out, rng)};
      break;
    }
    case Variant::kMultVae: {
      const Eigen::Index h = spec.hidden.front();
      const std::vector<Eigen::Index> enc{n_items, h, 2 * spec.latent_dim};
      const std::vector<Eigen::Index> dec{spec.latent_dim, h, n_items};
      VaeParams vae;
      vae.encoder = make_mlp(enc, Activation::kTanh, Activation::kIdentity, rng);
      vae.decoder = make_mlp(dec, Activation::kTanh, Activation::kIdentity, rng);
      model.params = std::move(vae);
      break;
    }
    case Variant::kRandom:
    case Variant::kPopularity:
      model.params = ItemScoreParams{Eigen::VectorXd::Zero(n_items), 0};
      break;
    case Variant::kEase:
      if (n_items > kMaxEaseItems) {
        throw std::invalid_argument("EASE needs an n_items x n_items matrix; " +
                                    std::to_string(n_items) + " items is too many");
      }
      model.params = ItemItemParams{Eigen::MatrixXd::Zero(n_items, n_items)};
      break;
  }
  return model;
}

DiffusionBatch make_diffusion_batch(Variant variant, const Tensor& x0,
                                    std::span<const int> steps,
                                    const Schedule& schedule, Rng& rng) {
  if (!is_diffusion(variant)) {
    throw std::invalid_argument(to_string(variant) + " is not a diffusion variant");
  }
  if (static_cast<Eigen::Index>(steps.size()) != x0.rows()) {
    throw std::invalid_argument("one diffusion step per row is required");
  }
  DiffusionBatch batch{x0, Tensor(x0.rows(), x0.cols()),
                       std::vector<int>(steps.begin(), steps.end())};
  for (int t : steps) {
    if (t < 1 || t > schedule.steps()) {
      throw std::out_of_range("diffusion step " + std::to_string(t) +
                              " outside [1, " + std::to_string(schedule.steps()) +
                              "]");
    }
  }
  if (variant == Variant::kRecFusionBin) {
    for (Eigen::Index r = 0; r < x0.rows(); ++r) {
      const UserVector row = x0.row(r).transpose();
      const UserVector p = process_marginal(BitProcess::kZeroAbsorbing, row,
                                            batch.steps[r], schedule);
      batch.x_t.row(r) = sample_bits(p, rng).transpose();
    }
  } else {
    Tensor noise(x0.rows(), x0.cols());
    for (Eigen::Index r = 0; r < x0.rows(); ++r) {
      for (Eigen::Index c = 0; c < x0.cols(); ++c) noise(r, c) = rng.normal();
    }
    batch.x_t = gaussian_forward_with_noise(x0, batch.steps, schedule, noise);
  }
  return batch;
}

DiffusionBatch make_diffusion_batch(Variant variant, const Tensor& x0,
                                    const Schedule& schedule, Rng& rng) {
  std::vector<int> steps(static_cast<std::size_t>(x0.rows()));
  for (int& t : steps) {
    t = 1 + static_cast<int>(rng.uniform_index(
                static_cast<std::uint64_t>(schedule.steps())));
  }
  return make_diffusion_batch(variant, x0, steps, schedule, rng);
}

Tensor denoiser_input(const ModelSpec& spec, const Tensor& x_t,
                      std::span<const int> steps) {
  if (spec.variant != Variant::kRecFusionT) return x_t;
  // Odd catalogs use the next even width and drop the last entry.
  const Eigen::Index n = x_t.cols();
  const Eigen::Index dim = n % 2 == 0 ? n : n + 1;
  Tensor out = x_t;
  for (Eigen::Index r = 0; r < x_t.rows(); ++r) {
    const int t = steps[static_cast<std::size_t>(r)];
    out.row(r) += time_embedding(t, dim, spec.steps).head(n);
  }
  return out;
}

Tensor variance_head_log_variance(const Tensor& raw) {
  const double floor = 1.0 / (2.0 * std::numbers::pi);
  return raw.unaryExpr([floor](double v) { return std::log(floor + softplus(v)); });
}

ObjectiveResult diffusion_objective(const ModelSpec& spec, const Mlp& network,
                                    const DiffusionBatch& batch,
                                    const Schedule& schedule) {
  const Tensor input = denoiser_input(spec, batch.x_t, batch.steps);
  const MlpForward fwd = mlp_forward(network, input);
  const Eigen::Index n = batch.x0.cols();
  ObjectiveResult result;
  Tensor grad_out;

  switch (spec.variant) {
    case Variant::kRecFusion:
    case Variant::kRecFusionT: {
      LossResult loss = multinomial_loss(fwd.output, batch.x0);
      result.loss = loss.value;
      grad_out = std::move(loss.grad);
      break;
    }
    case Variant::kRecFusionVar: {
      const Tensor mean = fwd.output.leftCols(n);
      const Tensor raw = fwd.output.rightCols(n);
      const Tensor log_var = variance_head_log_variance(raw);
      const GaussianNllResult nll = gaussian_nll(mean, log_var, batch.x0);
      result.loss = nll.value;
      const double floor = 1.0 / (2.0 * std::numbers::pi);
      const Tensor dlogvar_draw = raw.unaryExpr(
          [floor](double v) { return sigmoid(v) / (floor + softplus(v)); });
      grad_out.resize(fwd.output.rows(), fwd.output.cols());
      grad_out.leftCols(n) = nll.grad_mean;
      grad_out.rightCols(n) =
          (nll.grad_log_variance.array() * dlogvar_draw.array()).matrix();
      break;
    }
    case Variant::kRecFusionBin: {
      const Tensor& pred = fwd.output;
      LossResult bce = bce_loss(pred, batch.x0);
      result.loss = bce.value;
      grad_out = std::move(bce.grad);
      if (spec.full_elbo) {
        // L_{t-1}: KL between the true posterior q(x^{t-1} | x^t, x^0) and the
        // one implied by the predicted x^0. Rows at t = 1 contribute nothing.
        Tensor target_post = Tensor::Constant(pred.rows(), pred.cols(), 0.5);
        Tensor model_post = target_post;
        Tensor d_post = Tensor::Zero(pred.rows(), pred.cols());
        for (Eigen::Index r = 0; r < pred.rows(); ++r) {
          const int t = batch.steps[static_cast<std::size_t>(r)];
          if (t <= 1) continue;
          for (Eigen::Index c = 0; c < n; ++c) {
            const double xt = batch.x_t(r, c);
            target_post(r, c) = bit_posterior(BitProcess::kZeroAbsorbing, schedule,
                                              t, xt, batch.x0(r, c))
                                    .value;
            const PosteriorValue mp = bit_posterior(
                BitProcess::kZeroAbsorbing, schedule, t, xt, pred(r, c));
            model_post(r, c) = mp.value;
            d_post(r, c) = mp.d_x0;
          }
        }
        const LossResult kl = bernoulli_kl(target_post, model_post);
        result.loss += kl.value;
        grad_out += (kl.grad.array() * d_post.array()).matrix();
      }
      break;
    }
    default:
      throw std::invalid_argument(to_string(spec.variant) +
                                  " has no diffusion objective");
  }
  MlpGradients grads = mlp_backward(network, fwd.cache, grad_out);
  result.grads = std::move(grads.parameters);
  return result;
}

ObjectiveResult recfusion_loss(const ModelSpec& spec, const Mlp& network,
                               const Tensor& x0, std::span<const int> steps,
                               const Schedule& schedule, Rng& rng) {
  const DiffusionBatch batch =
      steps.empty() ? make_diffusion_batch(spec.variant, x0, schedule, rng)
                    : make_diffusion_batch(spec.variant, x0, steps, schedule, rng);
  return diffusion_objective(spec, network, batch, schedule);
}

VaeNoise sample_vae_noise(const VaeParams& vae, const Tensor& x0, double dropout,
                          Rng& rng) {
  const Eigen::Index latent = vae.decoder.input_width();
  VaeNoise noise{Tensor(x0.rows(), x0.cols()), Tensor(x0.rows(), latent)};
  const double keep = 1.0 - dropout;
  for (Eigen::Index c = 0; c < x0.cols(); ++c) {
    for (Eigen::Index r = 0; r < x0.rows(); ++r) {
      noise.keep_mask(r, c) = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    }
  }
  for (Eigen::Index c = 0; c < latent; ++c) {
    for (Eigen::Index r = 0; r < x0.rows(); ++r) noise.eps(r, c) = rng.normal();
  }
  return noise;
}

VaeObjective multvae_objective(const VaeParams& vae, const Tensor& x0,
                               const VaeNoise& noise, double kl_weight) {
  if (!(kl_weight >= 0.0 && kl_weight <= 1.0)) {
    throw std::invalid_argument("kl_weight must lie in [0, 1]");
  }
  const Eigen::Index latent = vae.decoder.input_width();
  const double batch = static_cast<double>(x0.rows());
  const Tensor input =
      (normalize_rows(x0).array() * noise.keep_mask.array()).matrix();
  const MlpForward enc = mlp_forward(vae.encoder, input);
  const Tensor mu = enc.output.leftCols(latent);
  const Tensor log_var = enc.output.rightCols(latent);
  const Tensor std_dev = (0.5 * log_var.array()).exp().matrix();
  const Tensor z = mu + (std_dev.array() * noise.eps.array()).matrix();
  const MlpForward dec = mlp_forward(vae.decoder, z);
  const LossResult rec = multinomial_loss(dec.output, x0);

  VaeObjective out;
  out.reconstruction = rec.value;
  out.kl = 0.5 *
           (-log_var.array() + log_var.array().exp() + mu.array().square() - 1.0)
               .sum() /
           batch;
  out.loss = out.reconstruction + kl_weight * out.kl;

  MlpGradients dec_grads = mlp_backward(vae.decoder, dec.cache, rec.grad);
  const Tensor& dz = dec_grads.input;
  Tensor grad_h(enc.output.rows(), enc.output.cols());
  grad_h.leftCols(latent) = dz + (kl_weight / batch) * mu;
  grad_h.rightCols(latent) =
      (dz.array() * noise.eps.array() * 0.5 * std_dev.array() +
       (kl_weight / batch) * 0.5 * (log_var.array().exp() - 1.0))
          .matrix();
  MlpGradients enc_grads = mlp_backward(vae.encoder, enc.cache, grad_h);
  out.encoder_grads = std::move(enc_grads.parameters);
  out.decoder_grads = std::move(dec_grads.parameters);
  return out;
}

VaeObjective multvae_loss(const VaeParams& vae, const Tensor& x0,
                          double kl_weight, double dropout, Rng& rng) {
  return multvae_objective(vae, x0, sample_vae_noise(vae, x0, dropout, rng),
                           kl_weight);
}

Eigen::VectorXd popularity_fit(const InteractionMatrix& train) {
  if (train.nnz() == 0) {
    throw std::invalid_argument("popularity_fit: training matrix is empty");
  }
  const auto counts = train.item_counts();
  const double top =
      static_cast<double>(*std::max_element(counts.begin(), counts.end()));
  Eigen::VectorXd scores(static_cast<Eigen::Index>(counts.size()));
  for (std::size_t i = 0; i < counts.size(); ++i) {
    scores[static_cast<Eigen::Index>(i)] = static_cast<double>(counts[i]) / top;
  }
  return scores;
}

ItemScoreParams random_fit(const InteractionMatrix& train, std::uint64_t seed) {
  if (train.nnz() == 0) {
    throw std::invalid_argument("random_fit: training matrix is empty");
  }
  const auto counts = train.item_counts();
  std::vector<Eigen::Index> eligible;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] > 0) eligible.push_back(static_cast<Eigen::Index>(i));
  }
  Rng rng(seed);
  rng.shuffle(std::span<Eigen::Index>(eligible));
  ItemScoreParams p{Eigen::VectorXd::Constant(
                        static_cast<Eigen::Index>(counts.size()),
                        -std::numeric_limits<double>::infinity()),
                    seed};
  const auto m = static_cast<double>(eligible.size());
  for (std::size_t k = 0; k < eligible.size(); ++k) {
    p.scores[eligible[k]] = m - static_cast<double>(k);
  }
  return p;
}

Eigen::MatrixXd ease_fit(const InteractionMatrix& train, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("EASE lambda must be > 0");
  const auto n = static_cast<Eigen::Index>(train.n_items());
  if (n > kMaxEaseItems) {
    throw std::invalid_argument("EASE needs an n_items x n_items matrix; " +
                                std::to_string(n) + " items is too many");
  }
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n, n);
  for (const auto& row : train.rows()) {
    for (ItemIndex a : row) {
      for (ItemIndex b : row) gram(a, b) += 1.0;
    }
  }
  gram.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("EASE: Gram matrix is not positive definite");
  }
  const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(n, n));
  Eigen::MatrixXd b(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    b.col(j) = -inv.col(j) / inv(j, j);
    b(j, j) = 0.0;
  }
  return b;
}

Tensor score_batch(const FittedModel& model, const Tensor& fold_in) {
  if (fold_in.cols() != model.n_items) {
    throw std::invalid_argument("score_batch: fold-in width " +
                                std::to_string(fold_in.cols()) + " != n_items " +
                                std::to_string(model.n_items));
  }
  const ModelSpec& spec = model.spec;
  switch (spec.variant) {
    case Variant::kRecFusion:
    case Variant::kRecFusionT:
    case Variant::kRecFusionVar:
    case Variant::kRecFusionBin: {
      const auto* p = std::get_if<DenoiserParams>(&model.params);
      require_params(model, p != nullptr);
      const std::vector<int> steps(static_cast<std::size_t>(fold_in.rows()), 1);
      const Tensor out =
          mlp_forward(p->network, denoiser_input(spec, fold_in, steps)).output;
      if (spec.variant == Variant::kRecFusionVar) return out.leftCols(model.n_items);
      return out;
    }
    case Variant::kMultVae: {
      const auto* p = std::get_if<VaeParams>(&model.params);
      require_params(model, p != nullptr);
      const Eigen::Index latent = p->decoder.input_width();
      const Tensor mu =
          mlp_forward(p->encoder, normalize_rows(fold_in)).output.leftCols(latent);
      Tensor logits = mlp_forward(p->decoder, mu).output;
      for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double top = logits.row(r).maxCoeff();
        logits.row(r) = (logits.row(r).array() - top).exp();
        logits.row(r) /= logits.row(r).sum();
      }
      return logits;
    }
    case Variant::kPopularity: {
      const auto* p = std::get_if<ItemScoreParams>(&model.params);
      require_params(model, p != nullptr);
      return p->scores.transpose().replicate(fold_in.rows(), 1);
    }
    case Variant::kRandom: {
      const auto* p = std::get_if<ItemScoreParams>(&model.params);
      require_params(model, p != nullptr);
      std::vector<Eigen::Index> eligible;
      for (Eigen::Index i = 0; i < p->scores.size(); ++i) {
        if (std::isfinite(p->scores[i])) eligible.push_back(i);
      }
      Tensor out = Tensor::Constant(fold_in.rows(), fold_in.cols(),
                                    -std::numeric_limits<double>::infinity());
      for (Eigen::Index r = 0; r < fold_in.rows(); ++r) {
        Rng rng(mix_seed(p->seed, hash_row(fold_in, r)));
        std::vector<Eigen::Index> order = eligible;
        rng.shuffle(std::span<Eigen::Index>(order));
        const auto m = static_cast<double>(order.size());
        for (std::size_t k = 0; k < order.size(); ++k) {
          out(r, order[k]) = m - static_cast<double>(k);
        }
      }
      return out;
    }
    case Variant::kEase: {
      const auto* p = std::get_if<ItemItemParams>(&model.params);
      require_params(model, p != nullptr);
      return fold_in * p->weights;
    }
  }
  throw std::logic_error("unhandled variant");
}

UserVector score_user(const FittedModel& model, const UserVector& fold_in) {
  const Tensor row = fold_in.transpose();
  return score_batch(model, row).row(0).transpose();
}

}  // namespace recfusion
