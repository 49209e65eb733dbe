#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "recfusion/core.h"
#include "recfusion/models.h"

namespace recfusion {

// The k best items by descending score, ties broken by ascending index.
// Entries of `excluded` that are set (> 0.5) are never returned, so fewer
// than k items come back when fewer than k remain. NaN scores rank last.
std::vector<ItemIndex> top_k(const UserVector& scores, const UserVector& excluded,
                             std::size_t k);

// |top-k of ranked ∩ relevant| / min(k, |relevant|). `relevant` must be
// sorted; throws std::invalid_argument when it is empty or k == 0.
double calibrated_recall_at_k(std::span<const ItemIndex> ranked,
                              std::span<const ItemIndex> relevant, std::size_t k);

// DCG with 1 / log2(rank + 1) gains over the ideal DCG for min(k, |relevant|)
// hits. Same preconditions as calibrated_recall_at_k.
double ndcg_at_k(std::span<const ItemIndex> ranked,
                 std::span<const ItemIndex> relevant, std::size_t k);

struct UserMetrics {
  std::size_t user = 0;  // row in the fold-in / held-out matrices
  double recall_at_20 = 0.0;
  double recall_at_50 = 0.0;
  double ndcg_at_100 = 0.0;
};

struct EvalReport {
  std::vector<UserMetrics> users;  // only users with a non-empty held-out set
  double recall_at_20 = 0.0;
  double recall_at_50 = 0.0;
  double ndcg_at_100 = 0.0;
  std::size_t skipped_users = 0;
  std::string spec_hash;
  std::uint64_t split_seed = 0;
  std::string split;
};

// Scores every fold-in row, masks the fold-in items and ranks against the
// held-out row. Throws std::invalid_argument when the two matrices disagree
// in users or items, or do not match the model's catalog.
EvalReport evaluate(const FittedModel& model, const InteractionMatrix& fold_in,
                    const InteractionMatrix& held_out);

// Per-user rows; `user_ids` (optional) supplies catalog ids for the rows.
void write_report_csv(const EvalReport& report,
                      const std::vector<std::string>& user_ids,
                      const std::filesystem::path& path);
// Aggregates and metadata.
void write_report_json(const EvalReport& report,
                       const std::filesystem::path& path);

}  // namespace recfusion
