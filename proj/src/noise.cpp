#include "noisyfs/noise.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace noisyfs {

std::string to_string(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::kNone: return "none";
    case NoiseKind::kSymmetric: return "symmetric";
    case NoiseKind::kPaired: return "paired";
    case NoiseKind::kOutlier: return "outlier";
  }
  return "unknown";
}

NoiseKind parse_noise_kind(const std::string& name) {
  if (name == "none") return NoiseKind::kNone;
  if (name == "symmetric") return NoiseKind::kSymmetric;
  if (name == "paired") return NoiseKind::kPaired;
  if (name == "outlier") return NoiseKind::kOutlier;
  throw ConfigError("unknown noise kind '" + name + "'");
}

int noisy_shots_per_class(double proportion, int k_shots) {
  if (!(proportion >= 0.0 && proportion < 1.0))
    throw NoiseError("noise proportion must lie in [0, 1), got " + std::to_string(proportion));
  const double m = proportion * k_shots;
  const double rounded = std::round(m);
  if (std::abs(m - rounded) > 1e-9)
    throw NoiseError("noise proportion " + std::to_string(proportion) + " of " +
                     std::to_string(k_shots) + " shots is not an integral count");
  return static_cast<int>(rounded);
}

namespace {

// m distinct slots out of K, uniformly.
std::vector<int> pick_slots(int k_shots, int m, Rng& rng) {
  std::vector<int> slots(static_cast<std::size_t>(k_shots));
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), rng);
  slots.resize(static_cast<std::size_t>(m));
  std::sort(slots.begin(), slots.end());
  return slots;
}

// A sample of episode class `source` not yet present anywhere in the episode.
Eigen::Index fresh_sample(Episode& ep, const PoolSet& pools, int source, Rng& rng) {
  const auto& pool = pools.at(ep.source_pools[static_cast<std::size_t>(source)]);
  auto& used = ep.used_samples[static_cast<std::size_t>(source)];
  const auto available = pool.size() - static_cast<Eigen::Index>(used.size());
  if (available <= 0)
    throw NoiseError("pool " + std::to_string(pool.class_id) + " has no unused samples left");
  // Rank-select among unused indices: pick r-th free index.
  std::uniform_int_distribution<Eigen::Index> pick(0, available - 1);
  Eigen::Index r = pick(rng);
  std::vector<Eigen::Index> sorted = used;
  std::sort(sorted.begin(), sorted.end());
  Eigen::Index candidate = r;
  for (const auto u : sorted) {
    if (u <= candidate) ++candidate;
    else break;
  }
  used.push_back(candidate);
  return candidate;
}

void check_pools(const Episode& ep, const PoolSet& pools) {
  for (const auto p : ep.source_pools)
    if (p >= pools.size()) throw NoiseError("episode refers to a pool outside the given pool set");
}

void replace_slot(Episode& ep, const PoolSet& pools, int label, int slot, int source, Rng& rng) {
  const auto idx = fresh_sample(ep, pools, source, rng);
  auto& s = ep.shot(label, slot);
  s.embedding = pools[ep.source_pools[static_cast<std::size_t>(source)]].embeddings.col(idx);
  s.noise_flag = true;
  s.true_source = {SampleSource::Kind::kEpisodeClass, source};
}

}  // namespace

Episode inject_symmetric(const Episode& episode, const PoolSet& pools, double proportion,
                         Rng& rng) {
  const int m = noisy_shots_per_class(proportion, episode.k_shots);
  if (m == 0) return episode;
  const int n = episode.n_ways;
  const int k = episode.k_shots;
  if (n < 2) throw NoiseError("symmetric noise needs at least 2 classes");
  // Smallest achievable max count over N - 1 sources must stay below K - m.
  const int min_max = (m + (n - 2)) / (n - 1);
  if (min_max >= k - m)
    throw NoiseError("symmetric noise with " + std::to_string(m) + " of " + std::to_string(k) +
                     " shots over " + std::to_string(n) +
                     " classes cannot keep the clean class a strict plurality");
  check_pools(episode, pools);

  Episode out = episode;
  std::uniform_int_distribution<int> other(0, n - 2);
  std::vector<int> sources(static_cast<std::size_t>(m));
  std::vector<int> counts(static_cast<std::size_t>(n));
  for (int c = 0; c < n; ++c) {
    while (true) {
      std::fill(counts.begin(), counts.end(), 0);
      for (auto& s : sources) {
        s = other(rng);
        if (s >= c) ++s;
        ++counts[static_cast<std::size_t>(s)];
      }
      if (*std::max_element(counts.begin(), counts.end()) < k - m) break;
    }
    const auto slots = pick_slots(k, m, rng);
    for (int j = 0; j < m; ++j)
      replace_slot(out, pools, c, slots[static_cast<std::size_t>(j)],
                   sources[static_cast<std::size_t>(j)], rng);
  }
  return out;
}

std::vector<int> random_derangement(int n, Rng& rng) {
  if (n < 2) throw NoiseError("no derangement exists for fewer than 2 classes");
  std::vector<int> perm(static_cast<std::size_t>(n));
  while (true) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    bool fixed = false;
    for (int i = 0; i < n; ++i) fixed = fixed || perm[static_cast<std::size_t>(i)] == i;
    if (!fixed) return perm;
  }
}

Episode inject_paired(const Episode& episode, const PoolSet& pools, double proportion, Rng& rng) {
  const int m = noisy_shots_per_class(proportion, episode.k_shots);
  if (episode.n_ways < 2) throw NoiseError("paired noise needs at least 2 classes");
  if (m >= episode.k_shots - m)
    throw NoiseError("paired noise requires fewer noisy than clean shots per class");
  if (m == 0) return episode;
  check_pools(episode, pools);

  Episode out = episode;
  const auto pi = random_derangement(episode.n_ways, rng);
  for (int c = 0; c < episode.n_ways; ++c) {
    const auto slots = pick_slots(episode.k_shots, m, rng);
    for (const int slot : slots) replace_slot(out, pools, c, slot, pi[static_cast<std::size_t>(c)], rng);
  }
  return out;
}

Episode inject_outlier(const Episode& episode, const PoolSet& pools, double proportion,
                       const PoolSet& outlier_pool, Rng& rng) {
  const int m = noisy_shots_per_class(proportion, episode.k_shots);
  if (outlier_pool.empty()) throw NoiseError("outlier pool is empty");
  check_pools(episode, pools);

  std::set<int> episode_ids;
  for (const auto p : episode.source_pools) episode_ids.insert(pools[p].class_id);
  for (const auto& pool : outlier_pool) {
    if (episode_ids.count(pool.class_id) != 0)
      throw NoiseError("outlier pool class " + std::to_string(pool.class_id) +
                       " is also an episode class");
    if (pool.size() == 0) throw NoiseError("outlier pool class has no samples");
    if (pool.dimension() != episode.dimension()) throw NoiseError("outlier pool dimension mismatch");
  }
  if (m == 0) return episode;

  Episode out = episode;
  const auto needed = static_cast<Eigen::Index>(m) * episode.n_ways;
  Eigen::Index total = 0;
  for (const auto& pool : outlier_pool) total += pool.size();
  if (total < needed) throw NoiseError("outlier pool has too few samples for this episode");

  std::uniform_int_distribution<std::size_t> pick_class(0, outlier_pool.size() - 1);
  std::set<std::pair<std::size_t, Eigen::Index>> taken;
  for (int c = 0; c < episode.n_ways; ++c) {
    const auto slots = pick_slots(episode.k_shots, m, rng);
    for (const int slot : slots) {
      std::size_t oc = 0;
      Eigen::Index idx = 0;
      do {
        oc = pick_class(rng);
        std::uniform_int_distribution<Eigen::Index> pick(0, outlier_pool[oc].size() - 1);
        idx = pick(rng);
      } while (!taken.emplace(oc, idx).second);
      auto& s = out.shot(c, slot);
      s.embedding = outlier_pool[oc].embeddings.col(idx);
      s.noise_flag = true;
      s.true_source = {SampleSource::Kind::kOutlierClass, outlier_pool[oc].class_id};
    }
  }
  return out;
}

Episode apply(const NoiseSpec& spec, const Episode& episode, const PoolSet& pools, Rng& rng) {
  switch (spec.kind) {
    case NoiseKind::kNone: return episode;
    case NoiseKind::kSymmetric: return inject_symmetric(episode, pools, spec.proportion, rng);
    case NoiseKind::kPaired: return inject_paired(episode, pools, spec.proportion, rng);
    case NoiseKind::kOutlier:
      if (!spec.outlier_pool) throw ConfigError("outlier noise requires an outlier pool");
      return inject_outlier(episode, pools, spec.proportion, *spec.outlier_pool, rng);
  }
  throw ConfigError("unknown noise kind");
}

}  // namespace noisyfs
