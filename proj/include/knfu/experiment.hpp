#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "knfu/data/dataset.hpp"
#include "knfu/federation/federation.hpp"
#include "knfu/metrics/report.hpp"

namespace knfu {

enum class DatasetId { Mnist, Cifar10, Synthetic };

/// Every knob of one experiment. The text format is one `key = value` per
/// line, `#` starts a comment, lists are comma separated.
struct ExperimentConfig {
  DatasetId dataset = DatasetId::Mnist;
  std::size_t clients = 20;
  double alpha = 0.5;
  std::size_t shard_size = 100;
  /// 0 means "same as shard_size".
  std::size_t transfer_size = 0;
  std::size_t test_size = 200;
  /// 0 means "from the dataset" (10 for MNIST / CIFAR-10).
  std::size_t classes = 0;
  std::size_t local_epochs = 1;
  std::size_t finetune_epochs = 1;
  std::size_t rounds = 50;
  double lambda = 1.0;
  double beta = 10.0;
  double eps_d = 1e-6;
  /// Unset means ln(C) / 2.
  std::optional<double> tau;
  double learning_rate = 0.01;
  /// 0 follows the shard-size schedule.
  std::size_t batch_size = 0;
  /// m1, m2 or mlp; empty picks m1 for MNIST, m2 for CIFAR-10, mlp otherwise.
  std::string model;
  std::size_t mlp_hidden = 32;
  std::vector<fusion::StrategyId> strategies{fusion::StrategyId::KnFu, fusion::StrategyId::FedMD,
                                             fusion::StrategyId::SelectiveFD,
                                             fusion::StrategyId::Local};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string data_dir;
  std::string output = "results";
  federation::LocalMode local_mode = federation::LocalMode::Transfer;
  std::size_t threads = 1;
  bool dump_fusion = false;
  /// Final client models go to <output>/checkpoints.
  bool save_checkpoints = false;

  std::size_t synth_dim = 20;
  std::size_t synth_per_class = 600;
  std::size_t synth_test_per_class = 300;
  double synth_separation = 3.0;
  std::uint64_t synth_seed = 1234;
};

std::string_view to_string(DatasetId id);

/// Parses and validates; omitted keys keep their defaults.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::filesystem::path& path);

/// Sets one key as if it appeared in a config file (no validation).
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);

/// Throws ConfigError naming the first bad field.
void validate(const ExperimentConfig& config);

/// Sorted key=value lines of every field that affects results (seeds,
/// strategies, output, data location and thread count are left out).
std::string canonical_form(const ExperimentConfig& config);
/// FNV-1a 64 of the canonical form, as 16 hex digits.
std::string fingerprint(const ExperimentConfig& config);

/// Root holding dataset files: data_dir, else $KNFU_DATA_DIR.
std::optional<std::filesystem::path> data_root(const ExperimentConfig& config);

struct DataSources {
  data::LabeledSet train;
  data::LabeledSet test;
};

DataSources load_sources(const ExperimentConfig& config);
nn::ModelSpec model_spec(const ExperimentConfig& config, const data::LabeledSet& sample);
federation::RunOptions run_options(const ExperimentConfig& config);

struct CurveSet {
  fusion::StrategyId strategy;
  std::uint64_t seed;
  std::vector<federation::RoundRecord> records;
};

struct ExperimentOutput {
  std::vector<CurveSet> curves;
  std::vector<metrics::SeedRun> runs;
  std::vector<metrics::SeedAggregate> aggregates;
  federation::Counters counters;
};

using Progress = std::function<void(const federation::RoundRecord&)>;

/// Every seed and strategy of one configuration. Data and initial models are
/// shared across strategies for a given seed.
ExperimentOutput run_experiment(const ExperimentConfig& config, const DataSources& sources,
                                const Progress& progress = {});

/// Curve files into `dir`; returns their paths.
std::vector<std::filesystem::path> write_curves(const ExperimentOutput& output,
                                                const std::filesystem::path& dir);

}  // namespace knfu
