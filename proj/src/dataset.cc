#include "recfusion/dataset.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string_view>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>
#include "recfusion/io.h"
#include "recfusion/random.h"

namespace recfusion {
namespace {

using nlohmann::json;

constexpr int kManifestSchemaVersion = 1;
constexpr std::string_view kManifestFormat = "recfusion-split-manifest";

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' ||
                        s.back() == '\r' || s.back() == '\n')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line,
                                           std::string_view sep) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      fields.push_back(trim(line.substr(start)));
      break;
    }
    fields.push_back(trim(line.substr(start, pos - start)));
    start = pos + sep.size();
  }
  return fields;
}

bool parse_number(std::string_view text, double& out) {
  if (text.empty()) return false;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  return res.ec == std::errc() && res.ptr == text.data() + text.size() &&
         std::isfinite(out);
}

bool parse_integer(std::string_view text, std::int64_t& out) {
  if (text.empty()) return false;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  if (res.ec == std::errc() && res.ptr == text.data() + text.size()) {
    return true;
  }
  // Some exports write timestamps as floats ("881250949.0").
  double d = 0.0;
  if (parse_number(text, d) && d == std::floor(d)) {
    out = static_cast<std::int64_t>(d);
    return true;
  }
  return false;
}

}  // namespace

RatingsFormat parse_ratings_format(const std::string& name) {
  if (name == "movielens-dat" || name == "dat") {
    return RatingsFormat::kMovieLensDat;
  }
  if (name == "csv") return RatingsFormat::kCsv;
  throw std::invalid_argument("unknown ratings format '" + name +
                              "' (expected movielens-dat or csv)");
}

std::string to_string(RatingsFormat format) {
  return format == RatingsFormat::kCsv ? "csv" : "movielens-dat";
}

RatingsTable parse_ratings(const std::filesystem::path& path,
                           RatingsFormat format) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open ratings file " + path.string());
  const std::string_view sep =
      format == RatingsFormat::kCsv ? std::string_view(",") : "::";

  RatingsTable table;
  std::string line;
  std::size_t line_no = 0;
  bool first_data_line = true;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view view = trim(line);
    if (view.empty()) continue;
    const auto fields = split_fields(view, sep);
    auto fail = [&](const std::string& why) {
      throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": " +
                             why,
                         line_no);
    };
    if (fields.size() != 4) {
      if (format == RatingsFormat::kCsv && first_data_line) {
        first_data_line = false;
        continue;
      }
      fail("expected 4 fields, found " + std::to_string(fields.size()));
    }
    Rating r;
    if (!parse_number(fields[2], r.rating)) {
      // A CSV header row carries a non-numeric rating column.
      if (format == RatingsFormat::kCsv && first_data_line) {
        first_data_line = false;
        continue;
      }
      fail("rating '" + std::string(fields[2]) + "' is not a finite number");
    }
    first_data_line = false;
    if (fields[0].empty() || fields[1].empty()) fail("empty user or item id");
    if (!parse_integer(fields[3], r.timestamp)) {
      fail("timestamp '" + std::string(fields[3]) + "' is not an integer");
    }
    r.user_id = std::string(fields[0]);
    r.item_id = std::string(fields[1]);
    table.records.push_back(std::move(r));
  }
  return table;
}

std::vector<InteractionPair> binarize(const RatingsTable& table,
                                      double threshold) {
  if (!std::isfinite(threshold)) {
    throw std::invalid_argument("binarization threshold must be finite");
  }
  // Max rating per pair, remembering first-occurrence order.
  std::map<InteractionPair, double> best;
  std::vector<const Rating*> order;
  for (const Rating& r : table.records) {
    auto [it, inserted] =
        best.try_emplace(InteractionPair{r.user_id, r.item_id}, r.rating);
    if (inserted) {
      order.push_back(&r);
    } else {
      it->second = std::max(it->second, r.rating);
    }
  }
  std::vector<InteractionPair> out;
  for (const Rating* r : order) {
    if (best.at({r->user_id, r->item_id}) >= threshold) {
      out.emplace_back(r->user_id, r->item_id);
    }
  }
  return out;
}

std::vector<InteractionPair> filter_min_counts(
    const std::vector<InteractionPair>& pairs, std::size_t min_items_per_user,
    std::size_t min_users_per_item) {
  if (min_items_per_user == 0 || min_users_per_item == 0) {
    throw std::invalid_argument("minimum counts must be >= 1");
  }
  std::unordered_map<std::string, std::size_t> item_users;
  for (const auto& [user, item] : pairs) ++item_users[item];

  std::vector<InteractionPair> kept_items;
  for (const auto& p : pairs) {
    if (item_users[p.second] >= min_users_per_item) kept_items.push_back(p);
  }
  std::unordered_map<std::string, std::size_t> user_items;
  for (const auto& [user, item] : kept_items) ++user_items[user];

  std::vector<InteractionPair> out;
  for (const auto& p : kept_items) {
    if (user_items[p.first] >= min_items_per_user) out.push_back(p);
  }
  return out;
}

IndexedInteractions index_pairs(const std::vector<InteractionPair>& pairs) {
  IndexedInteractions out;
  std::unordered_map<std::string, std::size_t> user_index;
  std::unordered_map<std::string, ItemIndex> item_index;
  std::vector<std::vector<ItemIndex>> rows;
  for (const auto& [user, item] : pairs) {
    auto [uit, new_user] = user_index.try_emplace(user, out.user_ids.size());
    if (new_user) {
      out.user_ids.push_back(user);
      rows.emplace_back();
    }
    auto [iit, new_item] = item_index.try_emplace(
        item, static_cast<ItemIndex>(out.item_ids.size()));
    if (new_item) out.item_ids.push_back(item);
    rows[uit->second].push_back(iit->second);
  }
  for (auto& r : rows) {
    std::sort(r.begin(), r.end());
    r.erase(std::unique(r.begin(), r.end()), r.end());
  }
  out.matrix = InteractionMatrix(out.item_ids.size(), std::move(rows));
  return out;
}

SplitDataset strong_split(const IndexedInteractions& data,
                          const SplitRatios& ratios, double fold_in_fraction,
                          std::uint64_t seed) {
  const InteractionMatrix& m = data.matrix;
  const std::size_t n = m.n_users();
  if (n < 3) throw std::invalid_argument("strong_split needs at least 3 users");
  if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0) ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must be positive and sum to 1");
  }
  if (!(fold_in_fraction > 0.0 && fold_in_fraction < 1.0)) {
    throw std::invalid_argument("fold_in_fraction must lie in (0, 1)");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng user_rng(mix_seed(seed, 0));
  user_rng.shuffle(std::span<std::size_t>(order));

  auto count_for = [n](double ratio) {
    return std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n))));
  };
  const std::size_t n_test = count_for(ratios.test);
  const std::size_t n_val = count_for(ratios.val);
  if (n_test + n_val >= n) {
    throw std::invalid_argument("split leaves no training users");
  }
  const std::size_t n_train = n - n_val - n_test;

  SplitDataset out;
  out.seed = seed;
  out.item_ids = data.item_ids;
  std::vector<std::vector<ItemIndex>> train_rows;
  std::vector<std::vector<ItemIndex>> val_in, val_out, test_in, test_out;

  Rng fold_rng(mix_seed(seed, 1));
  auto fold = [&](std::size_t user, std::vector<std::vector<ItemIndex>>& in,
                  std::vector<std::vector<ItemIndex>>& held) {
    const auto r = m.row(user);
    if (r.size() < 2) {
      throw std::invalid_argument("user " + data.user_ids[user] +
                                  " has fewer than 2 items; cannot fold");
    }
    std::vector<ItemIndex> items(r.begin(), r.end());
    fold_rng.shuffle(std::span<ItemIndex>(items));
    const double held_share =
        (1.0 - fold_in_fraction) * static_cast<double>(items.size());
    std::size_t n_held = static_cast<std::size_t>(std::floor(held_share + 1e-9));
    n_held = std::clamp<std::size_t>(n_held, 1, items.size() - 1);
    std::vector<ItemIndex> h(items.begin(),
                             items.begin() + static_cast<std::ptrdiff_t>(n_held));
    std::vector<ItemIndex> f(items.begin() + static_cast<std::ptrdiff_t>(n_held),
                             items.end());
    std::sort(h.begin(), h.end());
    std::sort(f.begin(), f.end());
    in.push_back(std::move(f));
    held.push_back(std::move(h));
  };

  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t user = order[k];
    if (k < n_train) {
      const auto r = m.row(user);
      train_rows.emplace_back(r.begin(), r.end());
      out.train_user_ids.push_back(data.user_ids[user]);
    } else if (k < n_train + n_val) {
      fold(user, val_in, val_out);
      out.val_user_ids.push_back(data.user_ids[user]);
    } else {
      fold(user, test_in, test_out);
      out.test_user_ids.push_back(data.user_ids[user]);
    }
  }
  const std::size_t n_items = m.n_items();
  out.train = InteractionMatrix(n_items, std::move(train_rows));
  out.val_fold_in = InteractionMatrix(n_items, std::move(val_in));
  out.val_held_out = InteractionMatrix(n_items, std::move(val_out));
  out.test_fold_in = InteractionMatrix(n_items, std::move(test_in));
  out.test_held_out = InteractionMatrix(n_items, std::move(test_out));
  return out;
}

void write_manifest(const SplitDataset& split,
                    const std::filesystem::path& path) {
  std::string text;
  json header = {{"format", kManifestFormat},
                 {"schema_version", kManifestSchemaVersion},
                 {"seed", split.seed},
                 {"n_items", split.n_items()},
                 {"item_ids", split.item_ids}};
  text += header.dump() + "\n";
  auto emit = [&](const char* label, const std::vector<std::string>& ids,
                  const InteractionMatrix& fold_in,
                  const InteractionMatrix* held_out) {
    for (std::size_t u = 0; u < ids.size(); ++u) {
      const auto in = fold_in.row(u);
      json rec = {{"user", ids[u]},
                  {"split", label},
                  {"fold_in", std::vector<ItemIndex>(in.begin(), in.end())},
                  {"held_out", json::array()}};
      if (held_out != nullptr) {
        const auto h = held_out->row(u);
        rec["held_out"] = std::vector<ItemIndex>(h.begin(), h.end());
      }
      text += rec.dump() + "\n";
    }
  };
  emit("train", split.train_user_ids, split.train, nullptr);
  emit("val", split.val_user_ids, split.val_fold_in, &split.val_held_out);
  emit("test", split.test_user_ids, split.test_fold_in, &split.test_held_out);
  write_file_atomic(path, text);
}

SplitDataset read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest " + path.string());
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) {
    throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": " + why,
                       line_no);
  };

  SplitDataset out;
  std::size_t n_items = 0;
  std::vector<std::vector<ItemIndex>> train, val_in, val_out, test_in, test_out;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    try {
      if (!have_header) {
        if (rec.value("format", "") != kManifestFormat) fail("not a split manifest");
        if (rec.at("schema_version").get<int>() != kManifestSchemaVersion) {
          fail("unsupported manifest schema version");
        }
        out.seed = rec.at("seed").get<std::uint64_t>();
        n_items = rec.at("n_items").get<std::size_t>();
        out.item_ids = rec.at("item_ids").get<std::vector<std::string>>();
        if (out.item_ids.size() != n_items) fail("item id table size mismatch");
        have_header = true;
        continue;
      }
      const auto label = rec.at("split").get<std::string>();
      auto user = rec.at("user").get<std::string>();
      auto fold_in = rec.at("fold_in").get<std::vector<ItemIndex>>();
      auto held = rec.at("held_out").get<std::vector<ItemIndex>>();
      if (label == "train") {
        train.push_back(std::move(fold_in));
        out.train_user_ids.push_back(std::move(user));
      } else if (label == "val") {
        val_in.push_back(std::move(fold_in));
        val_out.push_back(std::move(held));
        out.val_user_ids.push_back(std::move(user));
      } else if (label == "test") {
        test_in.push_back(std::move(fold_in));
        test_out.push_back(std::move(held));
        out.test_user_ids.push_back(std::move(user));
      } else {
        fail("unknown split label '" + label + "'");
      }
    } catch (const json::exception& e) {
      fail(std::string("malformed record: ") + e.what());
    }
  }
  if (!have_header) throw DatasetError("manifest " + path.string() + " is empty");
  try {
    out.train = InteractionMatrix(n_items, std::move(train));
    out.val_fold_in = InteractionMatrix(n_items, std::move(val_in));
    out.val_held_out = InteractionMatrix(n_items, std::move(val_out));
    out.test_fold_in = InteractionMatrix(n_items, std::move(test_in));
    out.test_held_out = InteractionMatrix(n_items, std::move(test_out));
    out.validate();
  } catch (const std::invalid_argument& e) {
    throw DatasetError("manifest " + path.string() + ": " + e.what());
  }
  return out;
}

std::vector<SplitStats> split_stats(const SplitDataset& split) {
  auto eval_stats = [&](const char* label, const InteractionMatrix& a,
                        const InteractionMatrix& b) {
    SplitStats s{label, a.n_users(), 0, a.nnz() + b.nnz()};
    auto ca = a.item_counts();
    const auto cb = b.item_counts();
    for (std::size_t i = 0; i < ca.size(); ++i) {
      if (ca[i] + cb[i] > 0) ++s.items;
    }
    return s;
  };
  return {
      SplitStats{"train", split.train.n_users(), split.train.active_items(),
                 split.train.nnz()},
      eval_stats("val", split.val_fold_in, split.val_held_out),
      eval_stats("test", split.test_fold_in, split.test_held_out),
  };
}

void write_stats_csv(const std::vector<SplitStats>& stats,
                     const std::filesystem::path& path) {
  std::ostringstream out;
  out << "split,users,items,interactions\n";
  for (const auto& s : stats) {
    out << s.split << ',' << s.users << ',' << s.items << ',' << s.interactions
        << '\n';
  }
  write_file_atomic(path, out.str());
}

}  // namespace recfusion
