#pragma once

#include <memory>
#include <string>
#include <vector>

#include "noisyfs/embedding_space.hpp"

namespace noisyfs {

enum class NoiseKind { kNone, kSymmetric, kPaired, kOutlier };

std::string to_string(NoiseKind kind);
NoiseKind parse_noise_kind(const std::string& name);

/// How an episode's support set gets corrupted. `proportion` is a fraction of
/// the K shots of every class; proportion * K must be an integer.
struct NoiseSpec {
  NoiseKind kind = NoiseKind::kNone;
  double proportion = 0.0;
  /// Classes outside the episode; required iff kind == kOutlier.
  std::shared_ptr<const PoolSet> outlier_pool;
};

/// Number of noisy shots per class, or NoiseError if proportion * K is not
/// integral or proportion is outside [0, 1).
int noisy_shots_per_class(double proportion, int k_shots);

/// Replaces m shots per class with fresh samples from the other N - 1 episode
/// classes, drawn uniformly per slot and re-drawn as a whole whenever one
/// source class would reach K - m samples.
Episode inject_symmetric(const Episode& episode, const PoolSet& pools, double proportion, Rng& rng);

/// Draws a uniform derangement pi and replaces m shots of class c with fresh
/// samples of class pi(c).
Episode inject_paired(const Episode& episode, const PoolSet& pools, double proportion, Rng& rng);

/// Replaces m shots per class with samples from classes outside the episode
/// (class chosen uniformly, then a sample).
Episode inject_outlier(const Episode& episode, const PoolSet& pools, double proportion,
                       const PoolSet& outlier_pool, Rng& rng);

Episode apply(const NoiseSpec& spec, const Episode& episode, const PoolSet& pools, Rng& rng);

/// Uniform random derangement of [0, n) by rejection; NoiseError for n < 2.
std::vector<int> random_derangement(int n, Rng& rng);

}  // namespace noisyfs
