#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "recfusion/config.h"
#include "recfusion/diffusion.h"
#include "recfusion/eval.h"
#include "recfusion/training.h"

namespace recfusion {

// Files written under the output directory.
struct OutputLayout {
  std::filesystem::path dir;

  std::filesystem::path manifest() const { return dir / "split.jsonl"; }
  std::filesystem::path stats() const { return dir / "stats.csv"; }
  std::filesystem::path checkpoint() const { return dir / "model.ckpt"; }
  std::filesystem::path history() const { return dir / "history.csv"; }
  std::filesystem::path report_csv(const std::string& split) const {
    return dir / ("report_" + split + ".csv");
  }
  std::filesystem::path report_json(const std::string& split) const {
    return dir / ("report_" + split + ".json");
  }
  std::filesystem::path leaderboard() const { return dir / "sweep" / "leaderboard.csv"; }
  std::filesystem::path best_config() const { return dir / "sweep" / "best.ini"; }
  std::filesystem::path trace(Regime regime, const std::string& direction) const {
    return dir / ("trace_" + to_string(regime) + "_" + direction + ".csv");
  }
};

// Ratings file -> binarized, filtered, indexed, split.
SplitDataset build_split(const ExperimentConfig& config);

// Writes the split manifest and per-split statistics.
SplitDataset cmd_prepare(const ExperimentConfig& config);

// Trains on the prepared split; writes the checkpoint and history CSV.
TrainResult cmd_train(const ExperimentConfig& config, std::ostream* log = nullptr);

// split is "val" or "test". Throws when the checkpoint and manifest disagree
// on the catalog size.
EvalReport cmd_evaluate(const ExperimentConfig& config,
                        const std::filesystem::path& checkpoint,
                        const std::string& split);

struct SweepRow {
  std::size_t trial = 0;
  TrialAssignment assignment;
  double val_ndcg = 0.0;
  int best_epoch = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // ranked, best first
  ExperimentConfig best;
};

// Seeded random search ranked by validation NDCG@100. Writes the leaderboard
// and the best configuration as an INI file accepted by `train`.
SweepResult cmd_sweep(const ExperimentConfig& config, std::ostream* log = nullptr);

// Forward (and, with a diffusion checkpoint, reverse) trace of one user's
// fold-in bits. split is "train", "val" or "test".
TraceGrid cmd_trace(const ExperimentConfig& config, Regime regime,
                    std::size_t user, const std::string& split,
                    const std::optional<std::filesystem::path>& checkpoint);

// Entry point of the command-line tool; returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace recfusion
