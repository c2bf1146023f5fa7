#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "noisyfs/classify.hpp"
#include "noisyfs/noise.hpp"
#include "noisyfs/tranfs.hpp"

namespace noisyfs {

struct SourceConfig {
  enum class Kind { kNone, kSynthetic, kFile };
  Kind kind = Kind::kNone;
  SyntheticWorldConfig synthetic;
  std::filesystem::path path;

  PoolSet load() const;
};

struct TranfsMethodConfig {
  /// Load this checkpoint instead of training.
  std::optional<std::filesystem::path> checkpoint;
  TranfsConfig model;
  MetaTrainConfig train;
  std::uint64_t seed = 3;
  /// Meta-training classes; must not overlap the evaluation classes.
  SourceConfig train_source;
};

struct ExperimentConfig {
  SourceConfig source;
  /// Pool for outlier noise, disjoint from `source`.
  SourceConfig outliers;
  int n_ways = 5;
  int k_shots = 5;
  int q_queries = 15;
  int num_episodes = 2000;
  std::uint64_t seed = 0;
  std::vector<NoiseSpec> eval_noise;
  /// Method slugs: mean, median, weighted-sq, weighted-abs, weighted-cos,
  /// knn1, knn3, knn5 (any knnK), matching, linear, oracle, tranfs.
  std::vector<std::string> methods;
  MedianConfig median;
  double temperature_sq = 25.0;
  double temperature_abs = 25.0;
  double temperature_cos = 0.2;
  LinearClassifierConfig linear;
  TranfsMethodConfig tranfs;
  int threads = 1;
  std::filesystem::path out_dir = "results";

  void validate() const;
  bool uses_tranfs() const;
  /// Everything that determines the numbers (no threads, no output paths).
  nlohmann::json echo() const;
};

/// Reads the INI-style config. ConfigError messages name the file, section
/// and key.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(std::istream& in, const std::string& source_name = "<config>");

struct Cell {
  std::string method;
  NoiseKind noise_kind = NoiseKind::kNone;
  double noise_proportion = 0.0;
  double mean_accuracy = 0.0;
  double ci_half_width = 0.0;
  int episodes = 0;
  /// Per-episode accuracies in stream order (not serialized).
  std::vector<double> per_episode;
};

struct RunReport {
  std::vector<Cell> cells;
  nlohmann::json config;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;

  const Cell& cell(const std::string& method, NoiseKind kind, double proportion) const;
};

/// Sample mean and 1.96 * s / sqrt(n) (zero for n = 1).
std::pair<double, double> mean_and_ci(const std::vector<double>& values);

/// Ready-to-evaluate state: loaded pools and an optional TraNFS model.
struct PreparedExperiment {
  ExperimentConfig config;
  std::shared_ptr<const PoolSet> pools;
  std::shared_ptr<const PoolSet> outlier_pool;
  std::shared_ptr<const TranfsModel> tranfs;
};

PreparedExperiment prepare(const ExperimentConfig& config);
PreparedExperiment prepare(const ExperimentConfig& config, std::shared_ptr<const PoolSet> pools,
                           std::shared_ptr<const PoolSet> outlier_pool,
                           std::shared_ptr<const TranfsModel> tranfs);

/// Trains (or loads) the TraNFS model the config describes.
TranfsModel obtain_tranfs(const ExperimentConfig& config);

/// Evaluates every method on one shared episode stream per noise spec.
RunReport run(const PreparedExperiment& experiment);
RunReport run(const ExperimentConfig& config);

nlohmann::json report_json(const RunReport& report);
void write_report_json(const RunReport& report, const std::filesystem::path& path);

/// Long-format CSV: method,noise_kind,noise_proportion,mean_acc,ci_half_width.
void emit_plot_data(const RunReport& report, std::ostream& out);
void emit_plot_data(const std::vector<RunReport>& reports, std::ostream& out);
/// Reads emit_plot_data output back (per_episode stays empty).
std::vector<Cell> parse_plot_data(std::istream& in);

enum class SweepAxis { kTemperature, kLambdaClean, kLambdaBin, kNoiseProportion, kLayers };

SweepAxis parse_sweep_axis(const std::string& name);
std::string to_string(SweepAxis axis);

/// One run per value. Method slugs carry "@axis=value" except for the
/// noise_proportion axis, where the cells' own noise fields vary.
std::vector<RunReport> sweep(const ExperimentConfig& base, SweepAxis axis,
                             const std::vector<double>& values);

}  // namespace noisyfs
