#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "noisyfs/common.hpp"

namespace noisyfs {

/// A labelled bag of embeddings; columns of `embeddings` are samples.
struct ClassPool {
  int class_id = 0;
  Eigen::MatrixXd embeddings;  // D x n

  Eigen::Index dimension() const { return embeddings.rows(); }
  Eigen::Index size() const { return embeddings.cols(); }

  friend bool operator==(const ClassPool&, const ClassPool&) = default;
};

using PoolSet = std::vector<ClassPool>;

struct SyntheticWorldConfig {
  int dimension = 64;
  int num_classes = 20;
  double class_mean_radius = 2.9;
  double within_class_sigma = 1.0;
  int samples_per_class = 600;
  std::uint64_t seed = 1;
  /// Id given to the first generated class; lets disjoint worlds coexist
  /// (e.g. an outlier pool next to the episode classes).
  int first_class_id = 0;

  void validate() const;
};

/// Where a support sample really came from.
struct SampleSource {
  enum class Kind { kEpisodeClass, kOutlierClass };
  Kind kind = Kind::kEpisodeClass;
  /// Episode class index for kEpisodeClass, pool class id for kOutlierClass.
  int index = 0;

  friend bool operator==(const SampleSource&, const SampleSource&) = default;
};

struct SupportSample {
  Embedding embedding;
  int assigned_label = 0;
  bool noise_flag = false;
  SampleSource true_source;
};

/// An N-way K-shot episode. Support is stored class-major: the slot for
/// (label c, shot i) is c * K + i.
struct Episode {
  int n_ways = 0;
  int k_shots = 0;
  int q_queries = 0;
  std::vector<SupportSample> support;
  Eigen::MatrixXd queries;         // D x (N * Q), class-major
  std::vector<int> query_labels;   // N * Q
  /// Pool index (into the pool set the episode was drawn from) per label.
  std::vector<std::size_t> source_pools;
  /// Sample indices already drawn from each episode class's pool; injectors
  /// never reuse these.
  std::vector<std::vector<Eigen::Index>> used_samples;

  Eigen::Index dimension() const { return queries.rows(); }
  const SupportSample& shot(int label, int i) const {
    return support[static_cast<std::size_t>(label * k_shots + i)];
  }
  SupportSample& shot(int label, int i) {
    return support[static_cast<std::size_t>(label * k_shots + i)];
  }

  /// D x K matrix of the shots assigned to `label`.
  Eigen::MatrixXd support_matrix(int label) const;
  /// D x (number of clean shots) for `label`.
  Eigen::MatrixXd clean_support_matrix(int label) const;
  /// (N*K) x D, rows in slot order.
  Eigen::MatrixXd support_rows() const;
  int noisy_count(int label) const;
};

/// Draws `num_classes` isotropic Gaussian classes with means uniform on the
/// sphere of radius `class_mean_radius`. Deterministic in `seed`.
PoolSet generate_synthetic_world(const SyntheticWorldConfig& config);

/// Reads the plain-text embedding record format:
///   <class_id> <v_1> ... <v_D>
/// with `#` comment lines. Pools come out in order of first appearance.
PoolSet load_embeddings(const std::filesystem::path& path);
PoolSet parse_embeddings(std::istream& in, const std::string& source_name = "<stream>");

/// Writes pools in the record format with shortest round-trip float text.
void save_embeddings(const PoolSet& pools, const std::filesystem::path& path);
void write_embeddings(const PoolSet& pools, std::ostream& out);

/// Samples an episode: `n_ways` pools without replacement, then K + Q samples
/// without replacement inside each pool, and a fresh label permutation.
Episode sample_episode(const PoolSet& pools, int n_ways, int k_shots, int q_queries, Rng& rng);

}  // namespace noisyfs
