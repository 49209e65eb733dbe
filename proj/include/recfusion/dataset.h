#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "recfusion/core.h"

namespace recfusion {

// Raised for unreadable or malformed input files. line() is 1-based, or 0
// when the error is not tied to a line.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& message, std::size_t line = 0)
      : std::runtime_error(message), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

enum class RatingsFormat {
  kMovieLensDat,  // user::item::rating::timestamp
  kCsv,           // user,item,rating,timestamp with optional header row
};

RatingsFormat parse_ratings_format(const std::string& name);
std::string to_string(RatingsFormat format);

struct Rating {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::int64_t timestamp = 0;

  friend bool operator==(const Rating&, const Rating&) = default;
};

// One record per data line, in file order. Duplicate (user, item) pairs are
// kept here and resolved by binarize().
struct RatingsTable {
  std::vector<Rating> records;
};

using InteractionPair = std::pair<std::string, std::string>;

RatingsTable parse_ratings(const std::filesystem::path& path,
                           RatingsFormat format);

// Keeps the (user, item) pairs whose maximum rating is >= threshold, in order
// of first occurrence. Lower ratings are dropped, never stored as zeros.
std::vector<InteractionPair> binarize(const RatingsTable& table,
                                      double threshold = 4.0);

// Single pass: drop items with fewer than min_users_per_item users, then
// users left with fewer than min_items_per_user items.
std::vector<InteractionPair> filter_min_counts(
    const std::vector<InteractionPair>& pairs,
    std::size_t min_items_per_user = 5, std::size_t min_users_per_item = 5);

// Corpus matrix with contiguous indices assigned in order of first
// appearance, plus the id tables mapping back to catalog ids.
struct IndexedInteractions {
  InteractionMatrix matrix;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
};

IndexedInteractions index_pairs(const std::vector<InteractionPair>& pairs);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Strong-generalization split: users are shuffled with `seed` and cut into
// train/val/test; each val/test user's items are split uniformly at random
// into fold-in and held-out parts, fold_in_fraction going to fold-in and at
// least one item on each side.
SplitDataset strong_split(const IndexedInteractions& data,
                          const SplitRatios& ratios = {},
                          double fold_in_fraction = 0.8,
                          std::uint64_t seed = 0);

// Split manifest: a header line followed by one JSON object per user.
void write_manifest(const SplitDataset& split,
                    const std::filesystem::path& path);
SplitDataset read_manifest(const std::filesystem::path& path);

struct SplitStats {
  std::string split;
  std::size_t users = 0;
  std::size_t items = 0;  // items with at least one interaction
  std::size_t interactions = 0;
};

// Rows for train, val and test. Val/test counts cover fold-in plus held-out.
std::vector<SplitStats> split_stats(const SplitDataset& split);
void write_stats_csv(const std::vector<SplitStats>& stats,
                     const std::filesystem::path& path);

}  // namespace recfusion
