#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace recfusion {

using ItemIndex = std::uint32_t;

// Dense per-user vector of length n_items with entries in [0, 1]. A bit
// vector is the special case where every entry is 0 or 1.
using UserVector = Eigen::VectorXd;

// Sparse binary user-item matrix. Each row lists, in ascending order and
// without duplicates, the items the user interacted with. Immutable after
// construction.
class InteractionMatrix {
 public:
  InteractionMatrix() = default;
  // Throws std::invalid_argument if a row is unsorted, has duplicates or
  // references an item >= n_items.
  InteractionMatrix(std::size_t n_items,
                    std::vector<std::vector<ItemIndex>> rows);

  std::size_t n_users() const { return rows_.size(); }
  std::size_t n_items() const { return n_items_; }
  std::size_t nnz() const { return nnz_; }

  // Throws std::out_of_range for user >= n_users().
  std::span<const ItemIndex> row(std::size_t user) const;
  const std::vector<std::vector<ItemIndex>>& rows() const { return rows_; }

  bool contains(std::size_t user, ItemIndex item) const;

  // Number of users interacting with each item.
  std::vector<std::size_t> item_counts() const;
  // Number of items with at least one interaction.
  std::size_t active_items() const;

  friend bool operator==(const InteractionMatrix&,
                         const InteractionMatrix&) = default;

 private:
  std::size_t n_items_ = 0;
  std::size_t nnz_ = 0;
  std::vector<std::vector<ItemIndex>> rows_;
};

// Users split for strong generalization. Training users contribute their
// full history; validation and test users are each split into a fold-in part
// (fed to the model) and a held-out part (scored).
struct SplitDataset {
  InteractionMatrix train;
  InteractionMatrix val_fold_in;
  InteractionMatrix val_held_out;
  InteractionMatrix test_fold_in;
  InteractionMatrix test_held_out;
  std::uint64_t seed = 0;

  // Original catalog ids, indexed by contiguous user / item index.
  std::vector<std::string> train_user_ids;
  std::vector<std::string> val_user_ids;
  std::vector<std::string> test_user_ids;
  std::vector<std::string> item_ids;

  std::size_t n_items() const { return train.n_items(); }

  // Throws std::invalid_argument when a split invariant is violated.
  void validate() const;
};

UserVector to_dense(const InteractionMatrix& matrix, std::size_t user);

// Rows `users` of the matrix as a dense (users.size() x n_items) block.
Eigen::MatrixXd to_dense_rows(const InteractionMatrix& matrix,
                              std::span<const std::size_t> users);
Eigen::MatrixXd to_dense_all(const InteractionMatrix& matrix);

// Indices of the entries equal to 1 (entries > 0.5 are treated as set).
std::vector<ItemIndex> to_sparse(const UserVector& vector);

// Seeded permutation of all users, cut into consecutive batches. The last
// batch may be short. Throws std::invalid_argument for batch_size == 0.
std::vector<std::vector<std::size_t>> batch_rows(const InteractionMatrix& matrix,
                                                 std::size_t batch_size,
                                                 std::uint64_t seed);

}  // namespace recfusion
