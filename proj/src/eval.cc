#include "recfusion/eval.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "recfusion/io.h"

namespace recfusion {
namespace {

constexpr std::size_t kScoringBatch = 256;
constexpr std::size_t kDeepestCutoff = 100;

void check_inputs(std::span<const ItemIndex> relevant, std::size_t k) {
  if (relevant.empty()) throw std::invalid_argument("relevant set is empty");
  if (k == 0) throw std::invalid_argument("cutoff k must be >= 1");
}

bool is_relevant(std::span<const ItemIndex> relevant, ItemIndex item) {
  return std::binary_search(relevant.begin(), relevant.end(), item);
}

double discount(std::size_t rank) {
  return 1.0 / std::log2(static_cast<double>(rank) + 1.0);
}

}  // namespace

std::vector<ItemIndex> top_k(const UserVector& scores, const UserVector& excluded,
                             std::size_t k) {
  if (excluded.size() != scores.size()) {
    throw std::invalid_argument("top_k: scores and mask differ in length");
  }
  std::vector<ItemIndex> candidates;
  candidates.reserve(static_cast<std::size_t>(scores.size()));
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (!(excluded[i] > 0.5)) candidates.push_back(static_cast<ItemIndex>(i));
  }
  auto key = [&scores](ItemIndex i) {
    const double s = scores[i];
    return std::isnan(s) ? -std::numeric_limits<double>::infinity() : s;
  };
  auto better = [&key](ItemIndex a, ItemIndex b) {
    const double sa = key(a);
    const double sb = key(b);
    if (sa != sb) return sa > sb;
    return a < b;
  };
  const std::size_t n = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(),
                    candidates.begin() + static_cast<std::ptrdiff_t>(n),
                    candidates.end(), better);
  candidates.resize(n);
  return candidates;
}

double calibrated_recall_at_k(std::span<const ItemIndex> ranked,
                              std::span<const ItemIndex> relevant, std::size_t k) {
  check_inputs(relevant, k);
  const std::size_t depth = std::min(k, ranked.size());
  std::size_t hits = 0;
  for (std::size_t r = 0; r < depth; ++r) {
    if (is_relevant(relevant, ranked[r])) ++hits;
  }
  return static_cast<double>(hits) /
         static_cast<double>(std::min(k, relevant.size()));
}

double ndcg_at_k(std::span<const ItemIndex> ranked,
                 std::span<const ItemIndex> relevant, std::size_t k) {
  check_inputs(relevant, k);
  const std::size_t depth = std::min(k, ranked.size());
  double dcg = 0.0;
  for (std::size_t r = 0; r < depth; ++r) {
    if (is_relevant(relevant, ranked[r])) dcg += discount(r + 1);
  }
  double idcg = 0.0;
  for (std::size_t r = 1; r <= std::min(k, relevant.size()); ++r) {
    idcg += discount(r);
  }
  return dcg / idcg;
}

EvalReport evaluate(const FittedModel& model, const InteractionMatrix& fold_in,
                    const InteractionMatrix& held_out) {
  if (fold_in.n_users() != held_out.n_users() ||
      fold_in.n_items() != held_out.n_items()) {
    throw std::invalid_argument(
        "evaluate: fold-in and held-out matrices describe different users or "
        "items");
  }
  if (static_cast<Eigen::Index>(fold_in.n_items()) != model.n_items) {
    throw std::invalid_argument("evaluate: model has " +
                                std::to_string(model.n_items) +
                                " items but the split has " +
                                std::to_string(fold_in.n_items()));
  }
  EvalReport report;
  report.spec_hash = model.spec.hash();

  for (std::size_t start = 0; start < fold_in.n_users(); start += kScoringBatch) {
    const std::size_t stop = std::min(fold_in.n_users(), start + kScoringBatch);
    std::vector<std::size_t> users(stop - start);
    std::iota(users.begin(), users.end(), start);
    const Eigen::MatrixXd dense = to_dense_rows(fold_in, users);
    const Eigen::MatrixXd scores = score_batch(model, dense);
    for (std::size_t b = 0; b < users.size(); ++b) {
      const auto relevant = held_out.row(users[b]);
      if (relevant.empty()) {
        ++report.skipped_users;
        continue;
      }
      const auto row = static_cast<Eigen::Index>(b);
      const std::vector<ItemIndex> ranked =
          top_k(scores.row(row).transpose(), dense.row(row).transpose(),
                kDeepestCutoff);
      report.users.push_back({users[b], calibrated_recall_at_k(ranked, relevant, 20),
                              calibrated_recall_at_k(ranked, relevant, 50),
                              ndcg_at_k(ranked, relevant, 100)});
    }
  }
  if (!report.users.empty()) {
    const auto n = static_cast<double>(report.users.size());
    for (const auto& u : report.users) {
      report.recall_at_20 += u.recall_at_20;
      report.recall_at_50 += u.recall_at_50;
      report.ndcg_at_100 += u.ndcg_at_100;
    }
    report.recall_at_20 /= n;
    report.recall_at_50 /= n;
    report.ndcg_at_100 /= n;
  }
  return report;
}

void write_report_csv(const EvalReport& report,
                      const std::vector<std::string>& user_ids,
                      const std::filesystem::path& path) {
  std::ostringstream out;
  out << "user,recall@20,recall@50,ndcg@100\n";
  for (const auto& u : report.users) {
    out << (u.user < user_ids.size() ? user_ids[u.user] : std::to_string(u.user))
        << ',' << format_double(u.recall_at_20) << ','
        << format_double(u.recall_at_50) << ',' << format_double(u.ndcg_at_100)
        << '\n';
  }
  write_file_atomic(path, out.str());
}

void write_report_json(const EvalReport& report,
                       const std::filesystem::path& path) {
  const nlohmann::ordered_json j = {
      {"schema_version", 1},
      {"split", report.split},
      {"split_seed", report.split_seed},
      {"spec_hash", report.spec_hash},
      {"users", report.users.size()},
      {"skipped_users", report.skipped_users},
      {"recall@20", report.recall_at_20},
      {"recall@50", report.recall_at_50},
      {"ndcg@100", report.ndcg_at_100},
  };
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace recfusion
