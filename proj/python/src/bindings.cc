#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "recfusion/commands.h"
#include "recfusion/config.h"
#include "recfusion/diffusion.h"
#include "recfusion/eval.h"
#include "recfusion/models.h"
#include "recfusion/training.h"

namespace py = pybind11;
using namespace recfusion;

namespace {

// Rows of a dense 0/1 array; entries > 0.5 are treated as set.
InteractionMatrix from_dense(const Eigen::MatrixXd& dense) {
  std::vector<std::vector<ItemIndex>> rows(static_cast<std::size_t>(dense.rows()));
  for (Eigen::Index r = 0; r < dense.rows(); ++r) {
    for (Eigen::Index c = 0; c < dense.cols(); ++c) {
      if (dense(r, c) > 0.5) rows[static_cast<std::size_t>(r)].push_back(static_cast<ItemIndex>(c));
    }
  }
  return InteractionMatrix(static_cast<std::size_t>(dense.cols()), std::move(rows));
}

ExperimentConfig load(const std::filesystem::path& config, std::optional<std::uint64_t> seed,
                      std::optional<std::filesystem::path> out,
                      std::optional<std::filesystem::path> data_dir) {
  ConfigOverrides o;
  o.seed = seed;
  if (out) o.output_dir = std::filesystem::absolute(*out);
  if (data_dir) o.data_dir = std::filesystem::absolute(*data_dir);
  return load_config(config, o);
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["split"] = r.split;
  d["users"] = r.users.size();
  d["skipped_users"] = r.skipped_users;
  d["recall@20"] = r.recall_at_20;
  d["recall@50"] = r.recall_at_50;
  d["ndcg@100"] = r.ndcg_at_100;
  d["spec_hash"] = r.spec_hash;
  return d;
}

py::list history_list(const std::vector<HistoryEntry>& history) {
  py::list out;
  for (const auto& h : history) {
    py::dict d;
    d["epoch"] = h.epoch;
    d["train_loss"] = h.train_loss ? py::cast(*h.train_loss) : py::none();
    d["val_ndcg"] = h.val_ndcg ? py::cast(*h.val_ndcg) : py::none();
    out.append(d);
  }
  return out;
}

Schedule schedule_from(const std::vector<double>& betas) { return Schedule(betas); }

}  // namespace

PYBIND11_MODULE(_recfusion, m) {
  m.doc() = "Diffusion recommenders for implicit feedback";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);
  py::register_exception<TrainingDiverged>(m, "TrainingDiverged", PyExc_ArithmeticError);

  // ---- diffusion ----
  m.def("linear_schedule",
        [](int steps, double start, double end) {
          const auto s = linear_schedule(steps, start, end);
          return std::vector<double>(s.betas().begin(), s.betas().end());
        },
        py::arg("steps"), py::arg("beta_start"), py::arg("beta_end"));
  m.def("alpha_bars",
        [](const std::vector<double>& betas) {
          const auto s = schedule_from(betas);
          return std::vector<double>(s.alpha_bars().begin(), s.alpha_bars().end());
        },
        py::arg("betas"));
  m.def("bernoulli_marginal",
        [](const Eigen::VectorXd& x0, int t, const std::vector<double>& betas) {
          return bernoulli_marginal(x0, t, schedule_from(betas));
        },
        py::arg("x0"), py::arg("t"), py::arg("betas"));
  m.def("bernoulli_chain",
        [](const Eigen::VectorXd& x0, const std::vector<double>& betas, std::uint64_t seed) {
          Rng rng(seed);
          UserVector x = x0;
          for (double b : betas) x = bernoulli_step(x, b, rng);
          return x;
        },
        py::arg("x0"), py::arg("betas"), py::arg("seed"),
        "Final state of one simulated chain through every step.");
  m.def("gaussian_forward",
        [](const Eigen::VectorXd& x0, int t, const std::vector<double>& betas,
           std::uint64_t seed) {
          Rng rng(seed);
          return gaussian_forward(x0, t, schedule_from(betas), rng);
        },
        py::arg("x0"), py::arg("t"), py::arg("betas"), py::arg("seed"));

  // ---- metrics ----
  m.def("top_k", &top_k, py::arg("scores"), py::arg("excluded"), py::arg("k"));
  m.def("recall_at_k",
        [](const std::vector<ItemIndex>& ranked, std::vector<ItemIndex> relevant,
           std::size_t k) {
          std::sort(relevant.begin(), relevant.end());
          return calibrated_recall_at_k(ranked, relevant, k);
        },
        py::arg("ranked"), py::arg("relevant"), py::arg("k"));
  m.def("ndcg_at_k",
        [](const std::vector<ItemIndex>& ranked, std::vector<ItemIndex> relevant,
           std::size_t k) {
          std::sort(relevant.begin(), relevant.end());
          return ndcg_at_k(ranked, relevant, k);
        },
        py::arg("ranked"), py::arg("relevant"), py::arg("k"));

  // ---- closed forms ----
  m.def("ease_fit",
        [](const Eigen::MatrixXd& interactions, double lam) {
          return ease_fit(from_dense(interactions), lam);
        },
        py::arg("interactions"), py::arg("lam"));
  m.def("popularity_fit",
        [](const Eigen::MatrixXd& interactions) { return popularity_fit(from_dense(interactions)); },
        py::arg("interactions"));

  // ---- models ----
  py::class_<FittedModel>(m, "Model")
      .def_static(
          "load",
          [](const std::filesystem::path& path) { return load_checkpoint(path).model; },
          py::arg("path"))
      .def_property_readonly("variant",
                             [](const FittedModel& f) { return to_string(f.spec.variant); })
      .def_property_readonly("n_items", [](const FittedModel& f) { return f.n_items; })
      .def_property_readonly("spec_hash", [](const FittedModel& f) { return f.spec.hash(); })
      .def("score", [](const FittedModel& f, const Eigen::MatrixXd& fold_in) {
             return score_batch(f, fold_in);
           },
           py::arg("fold_in"), "Scores for each row of a (users x n_items) 0/1 array.")
      .def("recommend", &recommend, py::arg("fold_in"), py::arg("k"));

  // ---- experiment runner ----
  m.def("effective_config",
        [](const std::filesystem::path& config, std::optional<std::uint64_t> seed,
           std::optional<std::filesystem::path> out,
           std::optional<std::filesystem::path> data_dir) {
          return to_ini(effective_tree(load(config, seed, out, data_dir)));
        },
        py::arg("config"), py::arg("seed") = py::none(), py::arg("out") = py::none(),
        py::arg("data_dir") = py::none());
  m.def("prepare",
        [](const std::filesystem::path& config, std::optional<std::uint64_t> seed,
           std::optional<std::filesystem::path> out,
           std::optional<std::filesystem::path> data_dir) {
          const auto split = cmd_prepare(load(config, seed, out, data_dir));
          py::dict d;
          d["n_items"] = split.n_items();
          d["train_users"] = split.train.n_users();
          d["val_users"] = split.val_fold_in.n_users();
          d["test_users"] = split.test_fold_in.n_users();
          d["test_fold_in"] = to_dense_all(split.test_fold_in);
          d["test_held_out"] = to_dense_all(split.test_held_out);
          return d;
        },
        py::arg("config"), py::arg("seed") = py::none(), py::arg("out") = py::none(),
        py::arg("data_dir") = py::none(),
        "Writes the split manifest; returns sizes and the dense test matrices.");
  m.def("train",
        [](const std::filesystem::path& config, std::optional<std::uint64_t> seed,
           std::optional<std::filesystem::path> out,
           std::optional<std::filesystem::path> data_dir) {
          const auto cfg = load(config, seed, out, data_dir);
          TrainResult r;
          {
            py::gil_scoped_release release;
            r = cmd_train(cfg);
          }
          py::dict d;
          d["history"] = history_list(r.history);
          d["best_epoch"] = r.best_epoch ? py::cast(*r.best_epoch) : py::none();
          d["checkpoint"] = OutputLayout{cfg.output_dir}.checkpoint();
          return d;
        },
        py::arg("config"), py::arg("seed") = py::none(), py::arg("out") = py::none(),
        py::arg("data_dir") = py::none());
  m.def("evaluate",
        [](const std::filesystem::path& config, std::optional<std::filesystem::path> checkpoint,
           const std::string& split, std::optional<std::uint64_t> seed,
           std::optional<std::filesystem::path> out,
           std::optional<std::filesystem::path> data_dir) {
          const auto cfg = load(config, seed, out, data_dir);
          const auto ckpt = checkpoint.value_or(OutputLayout{cfg.output_dir}.checkpoint());
          return report_dict(cmd_evaluate(cfg, ckpt, split));
        },
        py::arg("config"), py::arg("checkpoint") = py::none(), py::arg("split") = "test",
        py::arg("seed") = py::none(), py::arg("out") = py::none(),
        py::arg("data_dir") = py::none());
}
