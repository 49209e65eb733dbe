#include "recfusion/config.h"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>

#include "recfusion/io.h"

namespace recfusion {
namespace {

using boost::property_tree::ptree;

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"data",
       {"path", "format", "rating_threshold", "min_items_per_user",
        "min_users_per_item"}},
      {"split", {"train", "val", "test", "fold_in_fraction", "seed"}},
      {"model",
       {"variant", "hidden", "steps", "schedule", "beta_start", "beta_end",
        "full_elbo", "ease_lambda", "latent_dim", "dropout", "kl_cap",
        "kl_anneal_fraction"}},
      {"train",
       {"epochs", "batch_size", "learning_rate", "seed", "patience", "eval_every"}},
      {"output", {"dir"}},
      {"sweep", {"trials", "seed"}},
  };
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string part;
  std::istringstream in(s);
  while (std::getline(in, part, sep)) out.push_back(trim(part));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

[[noreturn]] void bad_value(const std::string& where, const std::string& text,
                            const std::string& expected) {
  throw ConfigError("config " + where + ": '" + text + "' is not " + expected);
}

double to_double(const std::string& where, const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v)) {
    bad_value(where, text, "a finite number");
  }
  return v;
}

std::uint64_t to_u64(const std::string& where, const std::string& text) {
  const std::string t = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
    bad_value(where, text, "a non-negative integer");
  }
  return v;
}

bool is_integer_text(const std::string& text) {
  const std::string t = trim(text);
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  return !t.empty() && ec == std::errc() && ptr == t.data() + t.size();
}

bool to_bool(const std::string& where, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  bad_value(where, text, "a boolean");
}

std::vector<Eigen::Index> to_widths(const std::string& where,
                                    const std::string& text) {
  std::vector<Eigen::Index> out;
  for (const auto& part : split_on(text, ',')) {
    out.push_back(static_cast<Eigen::Index>(to_u64(where, part)));
  }
  if (out.empty()) bad_value(where, text, "a comma-separated width list");
  return out;
}

std::string widths_text(const std::vector<Eigen::Index>& widths) {
  std::string out;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(widths[i]);
  }
  return out;
}

// Reads `section.key` through `parse` when present.
class SectionReader {
 public:
  SectionReader(const ptree& tree, std::string section)
      : section_(std::move(section)) {
    if (auto child = tree.get_child_optional(section_)) node_ = &*child;
  }

  template <typename F>
  void read(const std::string& key, F&& parse) const {
    if (node_ == nullptr) return;
    if (auto v = node_->get_optional<std::string>(ptree::path_type(key, '/'))) {
      const std::string where = section_ + "." + key;
      parse(where, *v);
    }
  }

 private:
  std::string section_;
  const ptree* node_ = nullptr;
};

void check_known(const ptree& tree) {
  for (const auto& [section, node] : tree) {
    const auto it = known_keys().find(section);
    if (it == known_keys().end()) {
      throw ConfigError("config: unknown section [" + section + "]");
    }
    for (const auto& [key, value] : node) {
      if (section == "sweep" &&
          (key.starts_with("range.") || key.starts_with("choice."))) {
        continue;
      }
      if (!it->second.contains(key)) {
        throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
      }
    }
  }
}

SearchDimension parse_dimension(const std::string& key, const std::string& value) {
  const std::string where = "sweep." + key;
  SearchDimension dim;
  const bool range = key.starts_with("range.");
  const std::string target = key.substr(range ? 6 : 7);
  const auto dot = target.find('.');
  if (dot == std::string::npos) {
    throw ConfigError("config " + where + ": expected <section>.<key> after '" +
                      (range ? "range." : "choice.") + "'");
  }
  dim.section = target.substr(0, dot);
  dim.key = target.substr(dot + 1);
  const auto known = known_keys().find(dim.section);
  if (dim.section == "sweep" || dim.section == "output" || dim.section == "data" ||
      known == known_keys().end() || !known->second.contains(dim.key) ||
      dim.key == "seed") {
    throw ConfigError("config " + where + ": '" + target +
                      "' cannot be searched over");
  }
  dim.is_range = range;
  if (range) {
    const auto parts = split_on(value, ':');
    if (parts.size() < 2 || parts.size() > 3 ||
        (parts.size() == 3 && parts[2] != "log")) {
      bad_value(where, value, "of the form low:high or low:high:log");
    }
    dim.low = to_double(where, parts[0]);
    dim.high = to_double(where, parts[1]);
    dim.log = parts.size() == 3;
    dim.integer = is_integer_text(parts[0]) && is_integer_text(parts[1]);
    if (!(dim.low <= dim.high)) bad_value(where, value, "an increasing range");
    if (dim.log && !(dim.low > 0.0)) {
      bad_value(where, value, "a positive range (log scale)");
    }
  } else {
    dim.choices = split_on(value, '|');
    for (const auto& c : dim.choices) {
      if (c.empty()) bad_value(where, value, "a '|'-separated list of values");
    }
  }
  return dim;
}

std::filesystem::path resolve_data_path(const std::filesystem::path& raw,
                                        const std::filesystem::path& base_dir,
                                        const ConfigOverrides& overrides) {
  if (raw.is_absolute()) return raw;
  if (overrides.data_dir) return *overrides.data_dir / raw;
  if (const char* env = std::getenv("RECFUSION_DATA_DIR"); env && *env) {
    return std::filesystem::path(env) / raw;
  }
  return base_dir / raw;
}

}  // namespace

ExperimentConfig parse_config(const ptree& tree,
                              const std::filesystem::path& base_dir,
                              const ConfigOverrides& overrides) {
  check_known(tree);
  ExperimentConfig c;
  c.source = tree;
  c.base_dir = base_dir;

  const SectionReader data(tree, "data");
  data.read("path", [&](auto&, const std::string& v) {
    c.data.path = resolve_data_path(trim(v), base_dir, overrides);
  });
  data.read("format", [&](auto& w, const std::string& v) {
    try {
      c.data.format = parse_ratings_format(trim(v));
    } catch (const std::exception&) {
      bad_value(w, v, "a ratings format (movielens-dat or csv)");
    }
  });
  data.read("rating_threshold",
            [&](auto& w, auto& v) { c.data.rating_threshold = to_double(w, v); });
  data.read("min_items_per_user",
            [&](auto& w, auto& v) { c.data.min_items_per_user = to_u64(w, v); });
  data.read("min_users_per_item",
            [&](auto& w, auto& v) { c.data.min_users_per_item = to_u64(w, v); });
  if (c.data.min_items_per_user < 1 || c.data.min_users_per_item < 1) {
    throw ConfigError("config data: minimum counts must be >= 1");
  }

  const SectionReader split(tree, "split");
  split.read("train", [&](auto& w, auto& v) { c.split.ratios.train = to_double(w, v); });
  split.read("val", [&](auto& w, auto& v) { c.split.ratios.val = to_double(w, v); });
  split.read("test", [&](auto& w, auto& v) { c.split.ratios.test = to_double(w, v); });
  split.read("fold_in_fraction",
             [&](auto& w, auto& v) { c.split.fold_in_fraction = to_double(w, v); });
  bool have_seed = false;
  split.read("seed", [&](auto& w, auto& v) {
    c.split.seed = to_u64(w, v);
    have_seed = true;
  });
  if (overrides.seed) {
    c.split.seed = *overrides.seed;
    have_seed = true;
  }
  if (!have_seed) {
    throw ConfigError("config split.seed is required (or pass --seed)");
  }
  const auto& r = c.split.ratios;
  if (r.train < 0.0 || r.val < 0.0 || r.test < 0.0 ||
      std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw ConfigError("config split: train/val/test ratios must be >= 0 and sum to 1");
  }
  if (!(c.split.fold_in_fraction > 0.0 && c.split.fold_in_fraction < 1.0)) {
    throw ConfigError("config split.fold_in_fraction must lie in (0, 1)");
  }

  const SectionReader model(tree, "model");
  model.read("variant", [&](auto& w, const std::string& v) {
    try {
      c.model.variant = parse_variant(trim(v));
    } catch (const std::exception&) {
      bad_value(w, v, "a model variant");
    }
  });
  model.read("hidden", [&](auto& w, auto& v) { c.model.hidden = to_widths(w, v); });
  model.read("steps", [&](auto& w, auto& v) {
    c.model.steps = static_cast<int>(to_u64(w, v));
  });
  model.read("schedule", [&](auto& w, const std::string& v) {
    if (trim(v) == "linear") {
      c.model.linear_schedule = true;
    } else if (trim(v) == "constant") {
      c.model.linear_schedule = false;
    } else {
      bad_value(w, v, "'constant' or 'linear'");
    }
  });
  bool have_beta_end = false;
  model.read("beta_start", [&](auto& w, auto& v) { c.model.beta_start = to_double(w, v); });
  model.read("beta_end", [&](auto& w, auto& v) {
    c.model.beta_end = to_double(w, v);
    have_beta_end = true;
  });
  if (!c.model.linear_schedule && !have_beta_end) c.model.beta_end = c.model.beta_start;
  model.read("full_elbo", [&](auto& w, auto& v) { c.model.full_elbo = to_bool(w, v); });
  model.read("ease_lambda", [&](auto& w, auto& v) { c.model.ease_lambda = to_double(w, v); });
  model.read("latent_dim", [&](auto& w, auto& v) {
    c.model.latent_dim = static_cast<Eigen::Index>(to_u64(w, v));
  });
  model.read("dropout", [&](auto& w, auto& v) { c.model.dropout = to_double(w, v); });
  model.read("kl_cap", [&](auto& w, auto& v) { c.model.kl_cap = to_double(w, v); });
  model.read("kl_anneal_fraction",
             [&](auto& w, auto& v) { c.model.kl_anneal_fraction = to_double(w, v); });

  c.train.seed = c.split.seed;
  const SectionReader train(tree, "train");
  train.read("epochs", [&](auto& w, auto& v) {
    c.train.epochs = static_cast<int>(to_u64(w, v));
  });
  train.read("batch_size", [&](auto& w, auto& v) { c.train.batch_size = to_u64(w, v); });
  train.read("learning_rate",
             [&](auto& w, auto& v) { c.train.learning_rate = to_double(w, v); });
  train.read("seed", [&](auto& w, auto& v) { c.train.seed = to_u64(w, v); });
  if (overrides.seed) c.train.seed = *overrides.seed;
  train.read("patience", [&](auto& w, auto& v) {
    c.train.patience = static_cast<int>(to_u64(w, v));
  });
  train.read("eval_every", [&](auto& w, auto& v) {
    c.train.eval_every = static_cast<int>(to_u64(w, v));
  });

  c.output_dir = base_dir / "out";
  const SectionReader output(tree, "output");
  output.read("dir", [&](auto&, const std::string& v) {
    const std::filesystem::path p = trim(v);
    c.output_dir = p.is_absolute() ? p : base_dir / p;
  });
  if (overrides.output_dir) c.output_dir = *overrides.output_dir;

  if (auto sweep = tree.get_child_optional("sweep")) {
    for (const auto& [key, value] : *sweep) {
      const std::string text = value.get_value<std::string>();
      if (key == "trials") {
        c.sweep.trials = to_u64("sweep.trials", text);
      } else if (key == "seed") {
        c.sweep.seed = to_u64("sweep.seed", text);
      } else {
        c.sweep.space.push_back(parse_dimension(key, text));
      }
    }
  }

  try {
    c.model.validate();
    c.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const ConfigOverrides& overrides) {
  ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot read config: " + std::string(e.what()));
  }
  const auto base = std::filesystem::absolute(path).parent_path();
  return parse_config(tree, base, overrides);
}

ptree effective_tree(const ExperimentConfig& c, bool with_sweep) {
  auto put = [](ptree& t, const std::string& section, const std::string& key,
                const std::string& value) {
    t.put(ptree::path_type(section + "/" + key, '/'), value);
  };
  ptree t;
  if (!c.data.path.empty()) put(t, "data", "path", c.data.path.string());
  put(t, "data", "format", to_string(c.data.format));
  put(t, "data", "rating_threshold", format_double(c.data.rating_threshold));
  put(t, "data", "min_items_per_user", std::to_string(c.data.min_items_per_user));
  put(t, "data", "min_users_per_item", std::to_string(c.data.min_users_per_item));

  put(t, "split", "train", format_double(c.split.ratios.train));
  put(t, "split", "val", format_double(c.split.ratios.val));
  put(t, "split", "test", format_double(c.split.ratios.test));
  put(t, "split", "fold_in_fraction", format_double(c.split.fold_in_fraction));
  put(t, "split", "seed", std::to_string(c.split.seed));

  const ModelSpec& m = c.model;
  put(t, "model", "variant", to_string(m.variant));
  put(t, "model", "hidden", widths_text(m.hidden));
  put(t, "model", "steps", std::to_string(m.steps));
  put(t, "model", "schedule", m.linear_schedule ? "linear" : "constant");
  put(t, "model", "beta_start", format_double(m.beta_start));
  put(t, "model", "beta_end", format_double(m.beta_end));
  put(t, "model", "full_elbo", m.full_elbo ? "true" : "false");
  put(t, "model", "ease_lambda", format_double(m.ease_lambda));
  put(t, "model", "latent_dim", std::to_string(m.latent_dim));
  put(t, "model", "dropout", format_double(m.dropout));
  put(t, "model", "kl_cap", format_double(m.kl_cap));
  put(t, "model", "kl_anneal_fraction", format_double(m.kl_anneal_fraction));

  put(t, "train", "epochs", std::to_string(c.train.epochs));
  put(t, "train", "batch_size", std::to_string(c.train.batch_size));
  put(t, "train", "learning_rate", format_double(c.train.learning_rate));
  put(t, "train", "seed", std::to_string(c.train.seed));
  put(t, "train", "patience", std::to_string(c.train.patience));
  put(t, "train", "eval_every", std::to_string(c.train.eval_every));

  put(t, "output", "dir", c.output_dir.string());

  if (with_sweep) {
    put(t, "sweep", "trials", std::to_string(c.sweep.trials));
    put(t, "sweep", "seed", std::to_string(c.sweep.seed));
    for (const auto& d : c.sweep.space) {
      const std::string target = d.section + "." + d.key;
      if (d.is_range) {
        put(t, "sweep", "range." + target,
            format_double(d.low) + ":" + format_double(d.high) +
                (d.log ? ":log" : ""));
      } else {
        std::string joined;
        for (std::size_t i = 0; i < d.choices.size(); ++i) {
          joined += (i ? "|" : "") + d.choices[i];
        }
        put(t, "sweep", "choice." + target, joined);
      }
    }
  }
  return t;
}

std::string to_ini(const ptree& tree) {
  std::ostringstream out;
  bool first = true;
  for (const auto& [section, node] : tree) {
    if (!first) out << '\n';
    first = false;
    out << '[' << section << "]\n";
    for (const auto& [key, value] : node) {
      out << key << " = " << value.get_value<std::string>() << '\n';
    }
  }
  return out.str();
}

TrialAssignment sample_trial(const SweepConfig& sweep, Rng& rng) {
  TrialAssignment out;
  for (const auto& d : sweep.space) {
    std::string value;
    if (!d.is_range) {
      value = d.choices[rng.uniform_index(d.choices.size())];
    } else if (d.integer && !d.log) {
      const auto lo = static_cast<std::int64_t>(d.low);
      const auto span = static_cast<std::uint64_t>(static_cast<std::int64_t>(d.high) - lo) + 1;
      value = std::to_string(lo + static_cast<std::int64_t>(rng.uniform_index(span)));
    } else {
      const double u = rng.uniform();
      double v = d.log ? std::exp(std::log(d.low) + u * (std::log(d.high) - std::log(d.low)))
                       : d.low + u * (d.high - d.low);
      if (d.integer) {
        value = std::to_string(static_cast<std::int64_t>(std::llround(v)));
      } else {
        value = format_double(v);
      }
    }
    out.emplace_back(d.section + "." + d.key, value);
  }
  return out;
}

ExperimentConfig apply_assignment(const ExperimentConfig& config,
                                  const TrialAssignment& assignment) {
  ptree tree = config.source;
  for (const auto& [target, value] : assignment) {
    tree.put(ptree::path_type(target, '.'), value);
  }
  ExperimentConfig out;
  try {
    out = parse_config(tree, config.base_dir,
                       {.seed = config.split.seed,
                        .output_dir = config.output_dir,
                        .data_dir = std::nullopt});
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("sweep trial: ") + e.what());
  }
  out.data.path = config.data.path;
  out.train.seed = config.train.seed;
  out.source = config.source;
  return out;
}

}  // namespace recfusion
