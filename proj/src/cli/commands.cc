#include "recfusion/commands.h"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "recfusion/io.h"

namespace recfusion {
namespace {

constexpr std::uint64_t kSweepStream = 21;
constexpr std::uint64_t kTraceStream = 31;

void require_file(const std::filesystem::path& path, const std::string& what) {
  if (!std::filesystem::is_regular_file(path)) {
    throw ConfigError(what + " not found: " + path.string());
  }
}

SplitDataset load_prepared(const ExperimentConfig& config) {
  const OutputLayout out{config.output_dir};
  require_file(out.manifest(), "split manifest (run `prepare` first)");
  return read_manifest(out.manifest());
}

std::string optional_text(const std::optional<double>& v) {
  return v ? format_double(*v) : "";
}

void write_history_csv(const std::vector<HistoryEntry>& history,
                       const std::filesystem::path& path) {
  std::ostringstream out;
  out << "epoch,train_loss,val_ndcg@100\n";
  for (const auto& h : history) {
    out << h.epoch << ',' << optional_text(h.train_loss) << ','
        << optional_text(h.val_ndcg) << '\n';
  }
  write_file_atomic(path, out.str());
}

const InteractionMatrix& fold_in_for(const SplitDataset& data,
                                     const std::string& split) {
  if (split == "train") return data.train;
  if (split == "val") return data.val_fold_in;
  if (split == "test") return data.test_fold_in;
  throw ConfigError("unknown split '" + split + "' (expected train, val or test)");
}

const std::vector<std::string>& user_ids_for(const SplitDataset& data,
                                             const std::string& split) {
  if (split == "val") return data.val_user_ids;
  if (split == "test") return data.test_user_ids;
  return data.train_user_ids;
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string quoted = "\"";
  for (char c : text) {
    if (c == '"') quoted += '"';
    quoted += c;
  }
  return quoted + "\"";
}

// Predicted P(x^0 = 1) from a diffusion checkpoint at step t.
ReverseModel reverse_model_for(const FittedModel& model) {
  return [&model](const Eigen::VectorXd& x_t, int t) -> Eigen::VectorXd {
    const auto& net = std::get<DenoiserParams>(model.params).network;
    const std::vector<int> steps{t};
    const Tensor input = denoiser_input(model.spec, x_t.transpose(), steps);
    Eigen::VectorXd out =
        mlp_forward(net, input).output.row(0).head(model.n_items).transpose();
    if (model.spec.variant != Variant::kRecFusionBin) {
      out = out.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
    }
    return out;
  };
}

}  // namespace

SplitDataset build_split(const ExperimentConfig& config) {
  if (config.data.path.empty()) {
    throw ConfigError("config data.path is required to prepare a split");
  }
  require_file(config.data.path, "ratings file");
  const RatingsTable table = parse_ratings(config.data.path, config.data.format);
  const auto pairs = filter_min_counts(binarize(table, config.data.rating_threshold),
                                       config.data.min_items_per_user,
                                       config.data.min_users_per_item);
  return strong_split(index_pairs(pairs), config.split.ratios,
                      config.split.fold_in_fraction, config.split.seed);
}

SplitDataset cmd_prepare(const ExperimentConfig& config) {
  SplitDataset split = build_split(config);
  const OutputLayout out{config.output_dir};
  std::filesystem::create_directories(out.dir);
  write_manifest(split, out.manifest());
  write_stats_csv(split_stats(split), out.stats());
  return split;
}

TrainResult cmd_train(const ExperimentConfig& config, std::ostream* log) {
  const SplitDataset data = load_prepared(config);
  const OutputLayout out{config.output_dir};
  auto progress = [log](const HistoryEntry& h) {
    if (log == nullptr) return;
    *log << "epoch " << h.epoch;
    if (h.train_loss) *log << "  loss " << *h.train_loss;
    if (h.val_ndcg) *log << "  val ndcg@100 " << *h.val_ndcg;
    *log << '\n';
  };
  TrainResult result = train(config.model, data, config.train, progress);
  save_checkpoint(result.model, result.history, config.train.seed, out.checkpoint());
  write_history_csv(result.history, out.history());
  return result;
}

EvalReport cmd_evaluate(const ExperimentConfig& config,
                        const std::filesystem::path& checkpoint,
                        const std::string& split) {
  if (split != "val" && split != "test") {
    throw ConfigError("evaluate: split must be 'val' or 'test'");
  }
  require_file(checkpoint, "checkpoint");
  const SplitDataset data = load_prepared(config);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  if (ckpt.model.n_items != static_cast<Eigen::Index>(data.n_items())) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.model.n_items) +
                      " items but the manifest has " +
                      std::to_string(data.n_items()));
  }
  const bool val = split == "val";
  EvalReport report =
      evaluate(ckpt.model, val ? data.val_fold_in : data.test_fold_in,
               val ? data.val_held_out : data.test_held_out);
  report.split = split;
  report.split_seed = data.seed;
  const OutputLayout out{config.output_dir};
  write_report_csv(report, user_ids_for(data, split), out.report_csv(split));
  write_report_json(report, out.report_json(split));
  return report;
}

SweepResult cmd_sweep(const ExperimentConfig& config, std::ostream* log) {
  if (config.sweep.space.empty()) {
    throw ConfigError("sweep: the search space is empty (add range.* or choice.* keys)");
  }
  if (config.sweep.trials < 1) throw ConfigError("sweep: trials must be >= 1");
  const SplitDataset data = load_prepared(config);
  if (data.val_fold_in.n_users() == 0) {
    throw ConfigError("sweep: the validation split has no users");
  }

  Rng rng(mix_seed(config.sweep.seed, kSweepStream));
  std::vector<TrialAssignment> assignments;
  std::vector<ExperimentConfig> trials;
  for (std::size_t i = 0; i < config.sweep.trials; ++i) {
    assignments.push_back(sample_trial(config.sweep, rng));
    trials.push_back(apply_assignment(config, assignments.back()));
  }

  SweepResult result;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const TrainResult run = train(trials[i].model, data, trials[i].train);
    double best = 0.0;
    for (const auto& h : run.history) best = std::max(best, h.val_ndcg.value_or(0.0));
    result.rows.push_back({i, assignments[i], best, run.best_epoch.value_or(0)});
    if (log != nullptr) {
      *log << "trial " << i << "  val ndcg@100 " << best << '\n';
    }
  }
  std::stable_sort(result.rows.begin(), result.rows.end(),
                   [](const SweepRow& a, const SweepRow& b) {
                     return a.val_ndcg > b.val_ndcg;
                   });
  result.best = trials[result.rows.front().trial];

  std::ostringstream board;
  board << "rank,trial";
  for (const auto& [key, value] : result.rows.front().assignment) board << ',' << key;
  board << ",val_ndcg@100,best_epoch\n";
  for (std::size_t r = 0; r < result.rows.size(); ++r) {
    const SweepRow& row = result.rows[r];
    board << r + 1 << ',' << row.trial;
    for (const auto& [key, value] : row.assignment) board << ',' << csv_field(value);
    board << ',' << format_double(row.val_ndcg) << ',' << row.best_epoch << '\n';
  }
  const OutputLayout out{config.output_dir};
  std::filesystem::create_directories(out.leaderboard().parent_path());
  write_file_atomic(out.leaderboard(), board.str());
  write_file_atomic(out.best_config(), to_ini(effective_tree(result.best, false)));
  return result;
}

TraceGrid cmd_trace(const ExperimentConfig& config, Regime regime,
                    std::size_t user, const std::string& split,
                    const std::optional<std::filesystem::path>& checkpoint) {
  const SplitDataset data = load_prepared(config);
  const InteractionMatrix& matrix = fold_in_for(data, split);
  if (user >= matrix.n_users()) {
    throw ConfigError("trace: user " + std::to_string(user) + " is outside the " +
                      split + " split (" + std::to_string(matrix.n_users()) +
                      " users)");
  }
  std::optional<Checkpoint> ckpt;
  if (checkpoint) {
    require_file(*checkpoint, "checkpoint");
    ckpt = load_checkpoint(*checkpoint);
    if (!is_diffusion(ckpt->model.spec.variant)) {
      throw ConfigError("trace: reverse traces need a diffusion checkpoint, got " +
                        to_string(ckpt->model.spec.variant));
    }
    if (ckpt->model.n_items != static_cast<Eigen::Index>(data.n_items())) {
      throw ConfigError("trace: checkpoint and manifest disagree on n_items");
    }
  }
  const ModelSpec& spec = ckpt ? ckpt->model.spec : config.model;
  const Schedule schedule = regime == Regime::kCoinFlip
                                ? constant_schedule(spec.steps, 0.5)
                                : spec.make_schedule();
  Rng rng(mix_seed(config.train.seed, kTraceStream + user));
  const UserVector x0 = to_dense(matrix, user);
  std::optional<ReverseModel> reverse;
  if (ckpt) reverse = reverse_model_for(ckpt->model);
  TraceGrid grid = export_trace(x0, regime, schedule, reverse ? &*reverse : nullptr, rng);

  const OutputLayout out{config.output_dir};
  write_trace_csv(grid.forward, out.trace(regime, "forward"));
  if (grid.reverse) write_trace_csv(*grid.reverse, out.trace(regime, "reverse"));
  return grid;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Diffusion recommenders for implicit feedback: prepare data, "
               "train, evaluate, sweep and export traces."};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> data_dir;
  bool print_config = false;
  app.add_option("--config", config_path, "INI experiment config")
      ->required()
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override the split and training seeds");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--data-dir", data_dir,
                 "Dataset root (overrides RECFUSION_DATA_DIR)");
  app.add_flag("--print-effective-config", print_config,
               "Print the fully resolved config and exit");

  auto* prepare = app.add_subcommand("prepare", "Build the split manifest and stats");
  auto* train_cmd = app.add_subcommand("train", "Train a model on the prepared split");
  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  std::string eval_split = "test";
  std::optional<std::string> eval_ckpt;
  eval_cmd->add_option("--split", eval_split, "val or test")
      ->check(CLI::IsMember({"val", "test"}));
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Defaults to <out>/model.ckpt");
  auto* sweep = app.add_subcommand("sweep", "Seeded random hyperparameter search");
  std::optional<std::size_t> trials;
  sweep->add_option("--trials", trials, "Override [sweep] trials");
  auto* trace = app.add_subcommand("trace", "Export forward/reverse diffusion traces");
  std::string regime_name;
  std::size_t trace_user = 0;
  std::string trace_split = "test";
  std::optional<std::string> trace_ckpt;
  trace->add_option("--regime", regime_name, "a, b or c")->required();
  trace->add_option("--user", trace_user, "User row within the split");
  trace->add_option("--split", trace_split, "train, val or test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  trace->add_option("--checkpoint", trace_ckpt, "Diffusion checkpoint for the reverse grid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    ConfigOverrides overrides;
    overrides.seed = seed;
    if (out_dir) overrides.output_dir = std::filesystem::absolute(*out_dir);
    if (data_dir) overrides.data_dir = std::filesystem::absolute(*data_dir);
    ExperimentConfig config = load_config(config_path, overrides);
    if (trials) config.sweep.trials = *trials;
    if (print_config) {
      std::cout << to_ini(effective_tree(config));
      return 0;
    }
    // Everything below is validated before the first write.
    if (*prepare) {
      const SplitDataset split = cmd_prepare(config);
      for (const auto& s : split_stats(split)) {
        std::cerr << s.split << ": " << s.users << " users, " << s.items
                  << " items, " << s.interactions << " interactions\n";
      }
    } else if (*train_cmd) {
      const TrainResult r = cmd_train(config, &std::cerr);
      if (r.best_epoch) std::cerr << "best epoch " << *r.best_epoch << '\n';
    } else if (*eval_cmd) {
      const OutputLayout out{config.output_dir};
      const auto ckpt = eval_ckpt ? std::filesystem::path(*eval_ckpt) : out.checkpoint();
      const EvalReport r = cmd_evaluate(config, ckpt, eval_split);
      std::cout << eval_split << " recall@20 " << r.recall_at_20 << "  recall@50 "
                << r.recall_at_50 << "  ndcg@100 " << r.ndcg_at_100 << '\n';
    } else if (*sweep) {
      const SweepResult r = cmd_sweep(config, &std::cerr);
      std::cout << "best val ndcg@100 " << r.rows.front().val_ndcg << " (trial "
                << r.rows.front().trial << ")\n";
    } else if (*trace) {
      const Regime regime = parse_regime(regime_name);
      std::optional<std::filesystem::path> ckpt;
      if (trace_ckpt) ckpt = *trace_ckpt;
      cmd_trace(config, regime, trace_user, trace_split, ckpt);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace recfusion
