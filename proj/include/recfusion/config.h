#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ptree.hpp>

#include "recfusion/dataset.h"
#include "recfusion/models.h"
#include "recfusion/random.h"
#include "recfusion/training.h"

namespace recfusion {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  // Resolved path; empty when the config names no dataset.
  std::filesystem::path path;
  RatingsFormat format = RatingsFormat::kCsv;
  double rating_threshold = 4.0;
  std::size_t min_items_per_user = 5;
  std::size_t min_users_per_item = 5;
};

struct SplitConfig {
  SplitRatios ratios;
  double fold_in_fraction = 0.8;
  std::uint64_t seed = 0;
};

// One hyperparameter of a random search. Ranges are sampled uniformly (in log
// space when `log` is set; integers when both bounds are integers), choices
// uniformly from the listed values.
struct SearchDimension {
  std::string section;
  std::string key;
  bool is_range = true;
  double low = 0.0;
  double high = 0.0;
  bool log = false;
  bool integer = false;
  std::vector<std::string> choices;
};

struct SweepConfig {
  std::size_t trials = 20;
  std::uint64_t seed = 0;
  std::vector<SearchDimension> space;
};

struct ExperimentConfig {
  DataConfig data;
  SplitConfig split;
  ModelSpec model;
  TrainConfig train;
  std::filesystem::path output_dir;
  SweepConfig sweep;
  // Values as read, before defaults; the sweep re-parses modified copies.
  boost::property_tree::ptree source;
  std::filesystem::path base_dir;
};

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;  // replaces both split and train seeds
  std::optional<std::filesystem::path> output_dir;
  std::optional<std::filesystem::path> data_dir;
};

// Reads an INI file with sections [data], [split], [model], [train],
// [output] and [sweep]. Unknown sections or keys, malformed values and a
// missing [split] seed raise ConfigError. A relative data path resolves
// against the data directory override, then RECFUSION_DATA_DIR, then the
// config file's directory.
ExperimentConfig load_config(const std::filesystem::path& path,
                             const ConfigOverrides& overrides = {});
ExperimentConfig parse_config(const boost::property_tree::ptree& tree,
                              const std::filesystem::path& base_dir,
                              const ConfigOverrides& overrides = {});

// Every setting with defaults filled in and paths resolved. `with_sweep`
// controls whether the [sweep] section is included.
boost::property_tree::ptree effective_tree(const ExperimentConfig& config,
                                           bool with_sweep = true);
std::string to_ini(const boost::property_tree::ptree& tree);

// One sampled value per search dimension, formatted as config text.
using TrialAssignment = std::vector<std::pair<std::string, std::string>>;
TrialAssignment sample_trial(const SweepConfig& sweep, Rng& rng);

// The config with `assignment` applied ("section.key" -> value). Seeds,
// paths and the output directory keep their resolved values.
ExperimentConfig apply_assignment(const ExperimentConfig& config,
                                  const TrialAssignment& assignment);

}  // namespace recfusion
