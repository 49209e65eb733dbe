#include "recfusion/training.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "recfusion/eval.h"
#include "recfusion/io.h"

namespace recfusion {
namespace {

constexpr char kMagic[8] = {'R', 'F', 'C', 'K', 'P', 'T', '\r', '\n'};
constexpr std::size_t kPreambleBytes = sizeof(kMagic) + 4 + 8;

// Stream ids for mix_seed; fixed so checkpoints from different builds agree.
constexpr std::uint64_t kInitStream = 11;
constexpr std::uint64_t kNoiseStream = 12;
constexpr std::uint64_t kBatchStreamBase = 1000;

void append_le(std::string& out, std::uint64_t value, int bytes) {
  for (int b = 0; b < bytes; ++b) {
    out.push_back(static_cast<char>((value >> (8 * b)) & 0xFF));
  }
}

std::uint64_t read_le(std::string_view in, std::size_t offset, int bytes) {
  std::uint64_t value = 0;
  for (int b = 0; b < bytes; ++b) {
    value |= static_cast<std::uint64_t>(
                 static_cast<unsigned char>(in[offset + static_cast<std::size_t>(b)]))
             << (8 * b);
  }
  return value;
}

nlohmann::ordered_json history_to_json(const std::vector<HistoryEntry>& history) {
  auto j = nlohmann::ordered_json::array();
  for (const auto& h : history) {
    nlohmann::ordered_json row = {{"epoch", h.epoch}};
    row["train_loss"] = h.train_loss ? nlohmann::ordered_json(*h.train_loss)
                                     : nlohmann::ordered_json(nullptr);
    row["val_ndcg"] = h.val_ndcg ? nlohmann::ordered_json(*h.val_ndcg)
                                 : nlohmann::ordered_json(nullptr);
    j.push_back(std::move(row));
  }
  return j;
}

std::vector<HistoryEntry> history_from_json(const nlohmann::json& j) {
  std::vector<HistoryEntry> out;
  for (const auto& row : j) {
    HistoryEntry h;
    h.epoch = row.at("epoch").get<int>();
    if (!row.at("train_loss").is_null()) h.train_loss = row["train_loss"].get<double>();
    if (!row.at("val_ndcg").is_null()) h.val_ndcg = row["val_ndcg"].get<double>();
    out.push_back(h);
  }
  return out;
}

std::vector<Tensor*> trainable_parameters(FittedModel& model) {
  if (auto* d = std::get_if<DenoiserParams>(&model.params)) {
    return d->network.parameters();
  }
  auto& vae = std::get<VaeParams>(model.params);
  std::vector<Tensor*> out = vae.encoder.parameters();
  for (Tensor* p : vae.decoder.parameters()) out.push_back(p);
  return out;
}

std::vector<std::size_t> nonempty_rows(const InteractionMatrix& train,
                                       const std::vector<std::size_t>& batch) {
  std::vector<std::size_t> out;
  out.reserve(batch.size());
  for (std::size_t u : batch) {
    if (!train.row(u).empty()) out.push_back(u);
  }
  return out;
}

TrainResult fit_closed_form(const ModelSpec& spec, const SplitDataset& data,
                            const TrainConfig& config) {
  const auto n = static_cast<Eigen::Index>(data.n_items());
  FittedModel model{spec, n, {}};
  switch (spec.variant) {
    case Variant::kPopularity:
      model.params = ItemScoreParams{popularity_fit(data.train), 0};
      break;
    case Variant::kRandom:
      model.params = random_fit(data.train, config.seed);
      break;
    case Variant::kEase:
      model.params = ItemItemParams{ease_fit(data.train, spec.ease_lambda)};
      break;
    default:
      throw std::logic_error(to_string(spec.variant) + " is not a closed form");
  }
  HistoryEntry entry{0, std::nullopt, std::nullopt};
  if (data.val_fold_in.n_users() > 0) {
    entry.val_ndcg =
        evaluate(model, data.val_fold_in, data.val_held_out).ndcg_at_100;
  }
  return {std::move(model), {entry}, 0};
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& why) {
    throw std::invalid_argument("invalid training config: " + why);
  };
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    fail("learning_rate must be > 0");
  }
  if (patience < 1) fail("patience must be >= 1");
  if (eval_every < 1) fail("eval_every must be >= 1");
}

TrainResult train(const ModelSpec& spec, const SplitDataset& data,
                  const TrainConfig& config, const ProgressCallback& progress) {
  spec.validate();
  config.validate();
  if (data.train.nnz() == 0) {
    throw std::invalid_argument("training split has no interactions");
  }
  if (!is_neural(spec.variant)) {
    TrainResult result = fit_closed_form(spec, data, config);
    if (progress) progress(result.history.front());
    return result;
  }

  const auto n = static_cast<Eigen::Index>(data.n_items());
  Rng init_rng(mix_seed(config.seed, kInitStream));
  Rng noise_rng(mix_seed(config.seed, kNoiseStream));
  FittedModel model = init_model(spec, n, init_rng);
  const std::vector<Tensor*> params = trainable_parameters(model);
  Adam adam(AdamConfig{.learning_rate = config.learning_rate});
  const bool diffusion = is_diffusion(spec.variant);
  const std::optional<Schedule> schedule =
      diffusion ? std::optional<Schedule>(spec.make_schedule()) : std::nullopt;

  const std::size_t users = data.train.n_users();
  const std::size_t batches_per_epoch =
      (users + config.batch_size - 1) / config.batch_size;
  const double anneal_steps = std::max(
      1.0, spec.kl_anneal_fraction * static_cast<double>(batches_per_epoch) *
               static_cast<double>(config.epochs));
  std::int64_t step = 0;

  const bool has_val = data.val_fold_in.n_users() > 0;
  TrainResult result{model, {}, std::nullopt};
  double best = -1.0;
  int stale_rounds = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = batch_rows(data.train, config.batch_size,
                                    mix_seed(config.seed, kBatchStreamBase + epoch));
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (const auto& raw_batch : batches) {
      const std::vector<std::size_t> batch = nonempty_rows(data.train, raw_batch);
      if (batch.empty()) continue;
      const Tensor x0 = to_dense_rows(data.train, batch);
      double loss = 0.0;
      std::vector<Tensor> grads;
      if (diffusion) {
        const auto& net = std::get<DenoiserParams>(model.params).network;
        ObjectiveResult r = recfusion_loss(spec, net, x0, {}, *schedule, noise_rng);
        loss = r.loss;
        grads = std::move(r.grads);
      } else {
        const double kl_weight =
            spec.kl_cap * std::min(1.0, static_cast<double>(step) / anneal_steps);
        VaeObjective r = multvae_loss(std::get<VaeParams>(model.params), x0,
                                      kl_weight, spec.dropout, noise_rng);
        loss = r.loss;
        grads = std::move(r.encoder_grads);
        for (auto& g : r.decoder_grads) grads.push_back(std::move(g));
      }
      if (!std::isfinite(loss)) {
        throw TrainingDiverged(to_string(spec.variant) +
                               ": non-finite training loss at epoch " +
                               std::to_string(epoch) + ", step " +
                               std::to_string(step) +
                               "; lower the learning rate or check the data");
      }
      adam.step(params, grads);
      loss_sum += loss;
      ++loss_count;
      ++step;
    }

    HistoryEntry entry{epoch, loss_count > 0 ? std::optional<double>(
                                                   loss_sum / static_cast<double>(loss_count))
                                             : std::nullopt,
                       std::nullopt};
    bool stop = false;
    if (has_val && (epoch % config.eval_every == 0 || epoch == config.epochs)) {
      const double ndcg =
          evaluate(model, data.val_fold_in, data.val_held_out).ndcg_at_100;
      entry.val_ndcg = ndcg;
      if (ndcg > best) {
        best = ndcg;
        result.model = model;
        result.best_epoch = epoch;
        stale_rounds = 0;
      } else if (++stale_rounds >= config.patience) {
        stop = true;
      }
    }
    result.history.push_back(entry);
    if (progress) progress(entry);
    if (stop) break;
  }
  if (!has_val) {
    result.model = model;
    result.best_epoch = result.history.back().epoch;
  }
  return result;
}

void save_checkpoint(const FittedModel& model,
                     const std::vector<HistoryEntry>& history, std::uint64_t seed,
                     const std::filesystem::path& path) {
  FittedModel copy = model;
  const std::vector<ArrayView> arrays = copy.arrays();
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  std::size_t values = 0;
  for (const auto& a : arrays) {
    manifest.push_back({{"name", a.name}, {"rows", a.rows}, {"cols", a.cols}});
    values += static_cast<std::size_t>(a.rows * a.cols);
  }
  nlohmann::ordered_json spec_json = nlohmann::ordered_json::parse(
      model.spec.to_json().dump());
  const nlohmann::ordered_json header = {
      {"format", "recfusion-checkpoint"},
      {"spec", std::move(spec_json)},
      {"n_items", model.n_items},
      {"seed", seed},
      {"scoring_seed", model.scoring_seed()},
      {"history", history_to_json(history)},
      {"arrays", std::move(manifest)},
  };
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(kPreambleBytes + header_text.size() + 8 * values);
  out.append(kMagic, sizeof(kMagic));
  append_le(out, kCheckpointVersion, 4);
  append_le(out, header_text.size(), 8);
  out += header_text;
  for (const auto& a : arrays) {
    const auto count = static_cast<std::size_t>(a.rows * a.cols);
    for (std::size_t i = 0; i < count; ++i) {
      append_le(out, std::bit_cast<std::uint64_t>(a.data[i]), 8);
    }
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<Variant> expected) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError(e.what());
  }
  const std::string where = "checkpoint " + path.string() + ": ";
  if (bytes.size() < kPreambleBytes ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(where + "not a checkpoint (bad magic bytes)");
  }
  const auto version = read_le(bytes, sizeof(kMagic), 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(where + "unsupported format version " +
                          std::to_string(version));
  }
  const auto header_len = read_le(bytes, sizeof(kMagic) + 4, 8);
  if (header_len > bytes.size() - kPreambleBytes) {
    throw CheckpointError(where + "truncated header");
  }

  Checkpoint ckpt;
  std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index>> manifest;
  try {
    const auto header = nlohmann::json::parse(
        std::string_view(bytes).substr(kPreambleBytes, header_len));
    if (header.at("format") != "recfusion-checkpoint") {
      throw CheckpointError(where + "unknown header format");
    }
    const ModelSpec spec = ModelSpec::from_json(header.at("spec"));
    if (expected && *expected != spec.variant) {
      throw CheckpointError(where + "holds a " + to_string(spec.variant) +
                            " model, expected " + to_string(*expected));
    }
    const auto n_items = header.at("n_items").get<Eigen::Index>();
    Rng unused(0);
    ckpt.model = init_model(spec, n_items, unused);
    if (auto* p = std::get_if<ItemScoreParams>(&ckpt.model.params)) {
      p->seed = header.at("scoring_seed").get<std::uint64_t>();
    }
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.history = history_from_json(header.at("history"));
    for (const auto& a : header.at("arrays")) {
      manifest.emplace_back(a.at("name").get<std::string>(),
                            a.at("rows").get<Eigen::Index>(),
                            a.at("cols").get<Eigen::Index>());
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(where + "corrupt header: " + e.what());
  }

  std::vector<ArrayView> arrays = ckpt.model.arrays();
  if (arrays.size() != manifest.size()) {
    throw CheckpointError(where + "array manifest does not match the model");
  }
  std::size_t values = 0;
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto& [name, rows, cols] = manifest[i];
    if (name != arrays[i].name || rows != arrays[i].rows || cols != arrays[i].cols) {
      throw CheckpointError(where + "array '" + name +
                            "' does not match the model layout");
    }
    values += static_cast<std::size_t>(rows * cols);
  }
  const std::size_t offset = kPreambleBytes + header_len;
  if (bytes.size() - offset != 8 * values) {
    throw CheckpointError(where + "payload holds " +
                          std::to_string(bytes.size() - offset) +
                          " bytes, expected " + std::to_string(8 * values));
  }
  std::size_t cursor = offset;
  for (auto& a : arrays) {
    const auto count = static_cast<std::size_t>(a.rows * a.cols);
    for (std::size_t i = 0; i < count; ++i, cursor += 8) {
      a.data[i] = std::bit_cast<double>(read_le(bytes, cursor, 8));
    }
  }
  return ckpt;
}

std::vector<ItemIndex> recommend(const FittedModel& model,
                                 const UserVector& fold_in, std::size_t k) {
  if (k == 0) throw std::invalid_argument("recommend: k must be >= 1");
  if (fold_in.size() != model.n_items) {
    throw std::invalid_argument("recommend: fold-in vector has the wrong length");
  }
  return top_k(score_user(model, fold_in), fold_in, k);
}

}  // namespace recfusion
