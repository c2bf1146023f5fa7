#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "noisyfs/noise.hpp"

using namespace noisyfs;

namespace {

PoolSet pools_for(int classes, int samples = 40, int first_id = 0, std::uint64_t seed = 9) {
  SyntheticWorldConfig w;
  w.dimension = 4;
  w.num_classes = classes;
  w.samples_per_class = samples;
  w.seed = seed;
  w.first_class_id = first_id;
  return generate_synthetic_world(w);
}

void check_queries_untouched(const Episode& before, const Episode& after) {
  CHECK(before.queries == after.queries);
  CHECK(before.query_labels == after.query_labels);
}

// Source class counts among class c's noisy shots.
std::map<int, int> noisy_sources(const Episode& ep, int c) {
  std::map<int, int> counts;
  for (int i = 0; i < ep.k_shots; ++i) {
    const auto& s = ep.shot(c, i);
    if (s.noise_flag) ++counts[s.true_source.index];
  }
  return counts;
}

}  // namespace

TEST_CASE("noisy shot counts must be integral") {
  CHECK(noisy_shots_per_class(0.4, 5) == 2);
  CHECK(noisy_shots_per_class(0.2, 5) == 1);
  CHECK(noisy_shots_per_class(0.0, 5) == 0);
  CHECK_THROWS_AS(noisy_shots_per_class(0.3, 5), NoiseError);
  CHECK_THROWS_AS(noisy_shots_per_class(1.0, 5), NoiseError);
  CHECK_THROWS_AS(noisy_shots_per_class(-0.2, 5), NoiseError);
}

TEST_CASE("symmetric noise replaces two shots per class at 40%") {
  const auto pools = pools_for(8);
  Rng rng(1);
  const auto clean = sample_episode(pools, 5, 5, 15, rng);
  const auto noisy = inject_symmetric(clean, pools, 0.4, rng);
  for (int c = 0; c < 5; ++c) {
    CHECK(noisy.noisy_count(c) == 2);
    for (int i = 0; i < 5; ++i) {
      const auto& s = noisy.shot(c, i);
      CHECK(s.assigned_label == c);
      // Flag iff the sample came from another episode class.
      CHECK(s.noise_flag == (s.true_source.index != c));
      if (!s.noise_flag) CHECK(s.embedding == clean.shot(c, i).embedding);
    }
  }
  check_queries_untouched(clean, noisy);
}

TEST_CASE("symmetric noise at 0% is the identity") {
  const auto pools = pools_for(6);
  Rng rng(2);
  const auto clean = sample_episode(pools, 5, 5, 15, rng);
  const auto same = inject_symmetric(clean, pools, 0.0, rng);
  for (std::size_t i = 0; i < clean.support.size(); ++i) {
    CHECK(same.support[i].embedding == clean.support[i].embedding);
    CHECK_FALSE(same.support[i].noise_flag);
  }
}

TEST_CASE("symmetric noise never lets a source class tie the clean class") {
  const auto pools = pools_for(6);
  Rng rng(3);
  int violations = 0;
  for (int t = 0; t < 10000; ++t) {
    const auto clean = sample_episode(pools, 5, 5, 2, rng);
    const auto noisy = inject_symmetric(clean, pools, 0.4, rng);
    for (int c = 0; c < 5; ++c)
      for (const auto& [src, n] : noisy_sources(noisy, c))
        if (n >= 3 || src == c) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("symmetric noise rejects unsatisfiable settings") {
  const auto pools = pools_for(4);
  Rng rng(4);
  // Two ways: m = 2 stays below K - m = 3, m = 3 reaches K - m = 2.
  const auto two_way = sample_episode(pools, 2, 5, 2, rng);
  CHECK_NOTHROW(inject_symmetric(two_way, pools, 0.4, rng));
  CHECK_THROWS_AS(inject_symmetric(two_way, pools, 0.6, rng), NoiseError);
  const auto one_way = sample_episode(pools, 1, 5, 2, rng);
  CHECK_THROWS_AS(inject_symmetric(one_way, pools, 0.4, rng), NoiseError);
}

TEST_CASE("injected samples are fresh") {
  const auto pools = pools_for(6, 30);
  Rng rng(5);
  for (int t = 0; t < 300; ++t) {
    const auto clean = sample_episode(pools, 5, 5, 4, rng);
    const auto noisy = inject_symmetric(clean, pools, 0.4, rng);
    for (const auto& used : noisy.used_samples)
      CHECK(std::set<Eigen::Index>(used.begin(), used.end()).size() == used.size());
    // No noisy embedding equals any clean support or query embedding.
    for (const auto& s : noisy.support) {
      if (!s.noise_flag) continue;
      for (Eigen::Index q = 0; q < noisy.queries.cols(); ++q) CHECK(noisy.queries.col(q) != s.embedding);
    }
  }
}

TEST_CASE("paired noise draws every class's noise from one partner") {
  const auto pools = pools_for(8);
  Rng rng(6);
  for (int t = 0; t < 200; ++t) {
    const auto clean = sample_episode(pools, 5, 5, 3, rng);
    const auto noisy = inject_paired(clean, pools, 0.4, rng);
    std::set<int> partners;
    for (int c = 0; c < 5; ++c) {
      const auto src = noisy_sources(noisy, c);
      REQUIRE(src.size() == 1);
      CHECK(src.begin()->first != c);
      CHECK(src.begin()->second == 2);
      partners.insert(src.begin()->first);
    }
    CHECK(partners.size() == 5);  // a permutation
    check_queries_untouched(clean, noisy);
  }
}

TEST_CASE("paired noise with two classes swaps them") {
  const auto pools = pools_for(4);
  Rng rng(7);
  const auto clean = sample_episode(pools, 2, 5, 3, rng);
  const auto noisy = inject_paired(clean, pools, 0.2, rng);
  CHECK(noisy_sources(noisy, 0).begin()->first == 1);
  CHECK(noisy_sources(noisy, 1).begin()->first == 0);
}

TEST_CASE("paired noise preconditions") {
  const auto pools = pools_for(4);
  Rng rng(8);
  const auto ep = sample_episode(pools, 3, 5, 3, rng);
  CHECK_THROWS_AS(inject_paired(ep, pools, 0.6, rng), NoiseError);
  CHECK_THROWS_AS(inject_paired(ep, pools, 0.3, rng), NoiseError);
  const auto one = sample_episode(pools, 1, 5, 3, rng);
  CHECK_THROWS_AS(inject_paired(one, pools, 0.2, rng), NoiseError);
  CHECK_THROWS_AS(random_derangement(1, rng), NoiseError);
}

TEST_CASE("derangements of four are uniform") {
  // Enumerate the 9 derangements of S4, then chi-square 90000 draws.
  std::vector<int> perm{0, 1, 2, 3};
  std::map<std::vector<int>, int> counts;
  do {
    bool fixed = false;
    for (int i = 0; i < 4; ++i) fixed = fixed || perm[static_cast<std::size_t>(i)] == i;
    if (!fixed) counts[perm] = 0;
  } while (std::next_permutation(perm.begin(), perm.end()));
  REQUIRE(counts.size() == 9);

  Rng rng(12);
  const int draws = 90000;
  for (int t = 0; t < draws; ++t) {
    const auto d = random_derangement(4, rng);
    REQUIRE(counts.count(d) == 1);
    ++counts[d];
  }
  double chi2 = 0.0;
  const double expected = draws / 9.0;
  for (const auto& [p, n] : counts) chi2 += (n - expected) * (n - expected) / expected;
  // p = 0.001 critical value of chi-square with 8 degrees of freedom.
  CHECK(chi2 < 26.124);
}

TEST_CASE("outlier noise draws from outside the episode") {
  const auto pools = pools_for(8);
  const auto outliers = pools_for(5, 40, 100, 77);
  Rng rng(13);
  for (int t = 0; t < 1000; ++t) {
    const auto clean = sample_episode(pools, 5, 5, 3, rng);
    const auto noisy = inject_outlier(clean, pools, 0.6, outliers, rng);
    std::set<int> episode_ids;
    for (const auto p : noisy.source_pools) episode_ids.insert(pools[p].class_id);
    for (int c = 0; c < 5; ++c) {
      CHECK(noisy.noisy_count(c) == 3);
      for (int i = 0; i < 5; ++i) {
        const auto& s = noisy.shot(c, i);
        if (!s.noise_flag) continue;
        CHECK(s.true_source.kind == SampleSource::Kind::kOutlierClass);
        CHECK(episode_ids.count(s.true_source.index) == 0);
      }
    }
    check_queries_untouched(clean, noisy);
  }
}

TEST_CASE("outlier noise preconditions") {
  const auto pools = pools_for(8);
  Rng rng(14);
  const auto ep = sample_episode(pools, 5, 5, 3, rng);
  CHECK_THROWS_AS(inject_outlier(ep, pools, 0.4, PoolSet{}, rng), NoiseError);
  // Overlapping ids: reuse the episode pools as the outlier pool.
  CHECK_THROWS_AS(inject_outlier(ep, pools, 0.4, pools, rng), NoiseError);
  const auto tiny = pools_for(1, 3, 500);
  CHECK_THROWS_AS(inject_outlier(ep, pools, 0.4, tiny, rng), NoiseError);
}

TEST_CASE("apply dispatches on the spec") {
  const auto pools = pools_for(6);
  Rng rng(15);
  const auto ep = sample_episode(pools, 5, 5, 3, rng);
  const auto none = apply({NoiseKind::kNone, 0.0, nullptr}, ep, pools, rng);
  for (std::size_t i = 0; i < ep.support.size(); ++i)
    CHECK(none.support[i].embedding == ep.support[i].embedding);
  const auto sym = apply({NoiseKind::kSymmetric, 0.2, nullptr}, ep, pools, rng);
  for (int c = 0; c < 5; ++c) CHECK(sym.noisy_count(c) == 1);
  CHECK_THROWS_AS(apply({NoiseKind::kOutlier, 0.2, nullptr}, ep, pools, rng), ConfigError);
  CHECK(parse_noise_kind("paired") == NoiseKind::kPaired);
  CHECK_THROWS_AS(parse_noise_kind("gaussian"), ConfigError);
}
