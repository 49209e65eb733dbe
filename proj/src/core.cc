#include "recfusion/core.h"

#include <algorithm>
#include <numeric>
#include <set>

#include "recfusion/random.h"

namespace recfusion {

InteractionMatrix::InteractionMatrix(std::size_t n_items,
                                     std::vector<std::vector<ItemIndex>> rows)
    : n_items_(n_items), rows_(std::move(rows)) {
  for (std::size_t u = 0; u < rows_.size(); ++u) {
    const auto& r = rows_[u];
    for (std::size_t k = 0; k < r.size(); ++k) {
      if (r[k] >= n_items_) {
        throw std::invalid_argument("row " + std::to_string(u) +
                                    " references item " + std::to_string(r[k]) +
                                    " >= n_items " + std::to_string(n_items_));
      }
      if (k > 0 && r[k] <= r[k - 1]) {
        throw std::invalid_argument("row " + std::to_string(u) +
                                    " is not strictly ascending");
      }
    }
    nnz_ += r.size();
  }
}

std::span<const ItemIndex> InteractionMatrix::row(std::size_t user) const {
  if (user >= rows_.size()) {
    throw std::out_of_range("user index " + std::to_string(user) +
                            " out of range (n_users=" +
                            std::to_string(rows_.size()) + ")");
  }
  return rows_[user];
}

bool InteractionMatrix::contains(std::size_t user, ItemIndex item) const {
  const auto r = row(user);
  return std::binary_search(r.begin(), r.end(), item);
}

std::vector<std::size_t> InteractionMatrix::item_counts() const {
  std::vector<std::size_t> counts(n_items_, 0);
  for (const auto& r : rows_) {
    for (ItemIndex i : r) ++counts[i];
  }
  return counts;
}

std::size_t InteractionMatrix::active_items() const {
  const auto counts = item_counts();
  return static_cast<std::size_t>(
      std::count_if(counts.begin(), counts.end(),
                    [](std::size_t c) { return c > 0; }));
}

void SplitDataset::validate() const {
  const std::size_t n = train.n_items();
  for (const InteractionMatrix* m :
       {&val_fold_in, &val_held_out, &test_fold_in, &test_held_out}) {
    if (m->n_items() != n) {
      throw std::invalid_argument("split matrices disagree on n_items");
    }
  }
  if (val_fold_in.n_users() != val_held_out.n_users() ||
      test_fold_in.n_users() != test_held_out.n_users()) {
    throw std::invalid_argument("fold-in and held-out user sets differ");
  }
  if (train_user_ids.size() != train.n_users() ||
      val_user_ids.size() != val_fold_in.n_users() ||
      test_user_ids.size() != test_fold_in.n_users()) {
    throw std::invalid_argument("user id tables do not match split sizes");
  }
  std::set<std::string> seen;
  for (const auto* ids : {&train_user_ids, &val_user_ids, &test_user_ids}) {
    for (const auto& id : *ids) {
      if (!seen.insert(id).second) {
        throw std::invalid_argument("user " + id + " appears in two splits");
      }
    }
  }
  auto check_folds = [](const InteractionMatrix& fold_in,
                        const InteractionMatrix& held_out) {
    for (std::size_t u = 0; u < fold_in.n_users(); ++u) {
      const auto a = fold_in.row(u);
      const auto b = held_out.row(u);
      if (a.empty() || b.empty()) {
        throw std::invalid_argument("evaluation user " + std::to_string(u) +
                                    " has an empty fold");
      }
      std::vector<ItemIndex> common;
      std::set_intersection(a.begin(), a.end(), b.begin(), b.end(),
                            std::back_inserter(common));
      if (!common.empty()) {
        throw std::invalid_argument("fold-in and held-out items overlap");
      }
    }
  };
  check_folds(val_fold_in, val_held_out);
  check_folds(test_fold_in, test_held_out);
}

UserVector to_dense(const InteractionMatrix& matrix, std::size_t user) {
  UserVector v = UserVector::Zero(static_cast<Eigen::Index>(matrix.n_items()));
  for (ItemIndex i : matrix.row(user)) v[i] = 1.0;
  return v;
}

Eigen::MatrixXd to_dense_rows(const InteractionMatrix& matrix,
                              std::span<const std::size_t> users) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(users.size()),
      static_cast<Eigen::Index>(matrix.n_items()));
  for (std::size_t k = 0; k < users.size(); ++k) {
    for (ItemIndex i : matrix.row(users[k])) {
      out(static_cast<Eigen::Index>(k), i) = 1.0;
    }
  }
  return out;
}

Eigen::MatrixXd to_dense_all(const InteractionMatrix& matrix) {
  std::vector<std::size_t> users(matrix.n_users());
  std::iota(users.begin(), users.end(), std::size_t{0});
  return to_dense_rows(matrix, users);
}

std::vector<ItemIndex> to_sparse(const UserVector& vector) {
  std::vector<ItemIndex> out;
  for (Eigen::Index i = 0; i < vector.size(); ++i) {
    if (vector[i] > 0.5) out.push_back(static_cast<ItemIndex>(i));
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_rows(const InteractionMatrix& matrix,
                                                 std::size_t batch_size,
                                                 std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(matrix.n_users());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace recfusion
