#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "recfusion/core.h"
#include "recfusion/models.h"

namespace recfusion {

struct TrainConfig {
  int epochs = 100;
  std::size_t batch_size = 500;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int patience = 5;    // non-improving validation rounds before stopping
  int eval_every = 1;  // epochs between validation rounds

  // Throws std::invalid_argument for non-positive counts or rates.
  void validate() const;
};

struct HistoryEntry {
  int epoch = 0;
  std::optional<double> train_loss;  // mean batch loss; empty for closed forms
  std::optional<double> val_ndcg;    // NDCG@100 on the validation split

  friend bool operator==(const HistoryEntry&, const HistoryEntry&) = default;
};

struct TrainResult {
  FittedModel model;  // parameters from the best validation round
  std::vector<HistoryEntry> history;
  std::optional<int> best_epoch;
};

// Raised when a batch loss becomes NaN or infinite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using ProgressCallback = std::function<void(const HistoryEntry&)>;

// Gradient variants: Adam over seeded mini-batches with early stopping on
// validation NDCG@100. Closed-form variants: a single fit and one history
// entry. Fully determined by (spec, data, config).
TrainResult train(const ModelSpec& spec, const SplitDataset& data,
                  const TrainConfig& config,
                  const ProgressCallback& progress = nullptr);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  FittedModel model;
  std::vector<HistoryEntry> history;
  std::uint64_t seed = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: 8-byte magic, uint32 version, uint64 header length, JSON header,
// then every array as little-endian float64 in column-major order. Written
// atomically.
void save_checkpoint(const FittedModel& model,
                     const std::vector<HistoryEntry>& history,
                     std::uint64_t seed, const std::filesystem::path& path);

// Throws CheckpointError on a bad magic, version, header or payload size, or
// when `expected` is given and the stored variant differs.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<Variant> expected = std::nullopt);

// Top-k unseen items for one user; fold-in items are never returned, so the
// list is shorter than k when fewer unseen items exist. Throws for k == 0.
std::vector<ItemIndex> recommend(const FittedModel& model,
                                 const UserVector& fold_in, std::size_t k);

}  // namespace recfusion
