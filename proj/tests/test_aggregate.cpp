#include <doctest.h>

#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>

#include "noisyfs/aggregate.hpp"
#include "oracles.hpp"

using namespace noisyfs;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd cols(std::initializer_list<std::initializer_list<double>> points) {
  const auto k = static_cast<Eigen::Index>(points.size());
  const auto d = static_cast<Eigen::Index>(points.begin()->size());
  MatrixXd m(d, k);
  Eigen::Index j = 0;
  for (const auto& p : points) {
    Eigen::Index i = 0;
    for (double v : p) m(i++, j) = v;
    ++j;
  }
  return m;
}

MatrixXd random_shots(std::mt19937_64& rng, Eigen::Index d, Eigen::Index k, double spread = 1.0) {
  std::normal_distribution<double> n(0.0, spread);
  MatrixXd m(d, k);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

MatrixXd permute_cols(const MatrixXd& m, std::mt19937_64& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.cols()));
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) out.col(j) = m.col(idx[static_cast<std::size_t>(j)]);
  return out;
}

SimilarityConfig sim(SimilarityMetric m, double t) {
  SimilarityConfig c;
  c.metric = m;
  c.temperature = t;
  return c;
}

}  // namespace

TEST_CASE("mean prototype examples") {
  CHECK(mean_prototype(cols({{1, 2}})).vector.isApprox(VectorXd{{1, 2}}));
  CHECK(mean_prototype(cols({{0, 0}, {2, 2}})).vector.isApprox(VectorXd{{1, 1}}));
  CHECK(mean_prototype(cols({{1, 0}, {0, 1}, {-1, -1}})).vector.norm() < 1e-15);
  const auto p = mean_prototype(cols({{1, 0}, {0, 1}, {-1, -1}, {2, 2}}));
  CHECK(p.shot_weights->isApprox(VectorXd::Constant(4, 0.25)));
  CHECK_THROWS_AS(mean_prototype(MatrixXd(3, 0)), AggregationError);
}

TEST_CASE("pseudo-Huber objective examples") {
  const MatrixXd same = cols({{1, 2}, {1, 2}, {1, 2}});
  CHECK(pseudo_huber_objective(VectorXd{{1, 2}}, same, 0.5) == 0.0);
  const MatrixXd one = cols({{3, 0}});
  CHECK(std::abs(pseudo_huber_objective(VectorXd{{0, 0}}, one, 1e-8) - 3.0) < 1e-6);
  const MatrixXd two = cols({{3, 4}, {0, 0}});
  const double value = pseudo_huber_objective(VectorXd{{0, 0}}, two, 1.0);
  CHECK(value == doctest::Approx(std::sqrt(26.0) - 1.0).epsilon(1e-14));
  CHECK(value == doctest::Approx(4.0990).epsilon(1e-4));
  CHECK(value == doctest::Approx(oracle::pseudo_huber(VectorXd{{0, 0}}, two, 1.0)).epsilon(1e-14));
  CHECK_THROWS_AS(pseudo_huber_objective(VectorXd{{0, 0, 0}}, two, 1.0), AggregationError);
  CHECK_THROWS_AS(pseudo_huber_objective(VectorXd{{0, 0}}, two, 0.0), AggregationError);
}

TEST_CASE("pseudo-Huber gradient matches finite differences") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const MatrixXd h = random_shots(rng, 4, 6);
    const VectorXd p = random_shots(rng, 4, 1);
    const double eps = 0.3;
    const auto f = [&](const MatrixXd& x) { return oracle::pseudo_huber(x.col(0), h, eps); };
    const MatrixXd fd = oracle::numeric_gradient(f, p, 1e-5);
    CHECK(oracle::relative_error(pseudo_huber_gradient(p, h, eps), fd) < 1e-6);
    // Full Hessian against differences of the gradient.
    const MatrixXd hess = pseudo_huber_hessian(p, h, eps);
    for (Eigen::Index d = 0; d < 4; ++d) {
      const auto gd = [&](const MatrixXd& x) { return pseudo_huber_gradient(VectorXd(x.col(0)), h, eps)(d); };
      const MatrixXd row = oracle::numeric_gradient(gd, p, 1e-5);
      CHECK(oracle::relative_error(hess.row(d).transpose(), row, 1e-4) < 1e-5);
    }
  }
}

TEST_CASE("median of identical shots is that shot") {
  const MatrixXd h = cols({{2, -1, 3}, {2, -1, 3}, {2, -1, 3}});
  const auto p = median_prototype(h);
  CHECK((p.vector - h.col(0)).norm() < 1e-12);
  CHECK(p.diagnostics->iterations <= 1);
}

TEST_CASE("median of two shots is their midpoint") {
  MedianConfig cfg;
  cfg.epsilon = 1e-6;
  const MatrixXd h = cols({{0, 0}, {4, -2}});
  CHECK((median_prototype(h, cfg).vector - VectorXd{{2, -1}}).norm() < 1e-4);
}

TEST_CASE("1-D median agrees with a grid search") {
  MedianConfig cfg;
  cfg.epsilon = 1e-3;
  const MatrixXd h = cols({{0}, {0}, {0}, {10}});
  const double step = 1e-3;
  const VectorXd grid = oracle::grid_argmin(h, 1e-3, step);
  const VectorXd got = median_prototype(h, cfg).vector;
  CHECK(std::abs(got(0) - grid(0)) <= 2 * step);
}

TEST_CASE("1-D median with an even shot count reaches the flat minimum") {
  // Between the two middle shots the objective is flat to O(eps^2); the plain
  // diagonal step crawls there and the doubling safeguard has to carry it.
  std::mt19937_64 rng(12);
  for (int t = 0; t < 30; ++t) {
    const MatrixXd h = random_shots(rng, 1, 6);
    MedianConfig cfg;
    cfg.epsilon = 1e-3;
    const double step = 1e-3 * oracle::data_range(h);
    const auto p = median_prototype(h, cfg);
    CHECK(std::abs(p.vector(0) - oracle::grid_argmin(h, 1e-3, step)(0)) <= 2 * step);

    MedianConfig plain = cfg;
    plain.max_extensions = 0;
    CHECK(median_prototype(h, plain).diagnostics->step_extensions == 0);
  }
}

TEST_CASE("2-D median agrees with Weiszfeld") {
  MedianConfig cfg;
  cfg.epsilon = 1e-4;
  cfg.max_iterations = 1000;
  cfg.tolerance = 1e-10;
  const MatrixXd h = cols({{0, 0}, {1, 0}, {0, 1}, {5, 5}});
  const VectorXd w = oracle::weiszfeld(h, 1e-8);
  CHECK((median_prototype(h, cfg).vector - w).norm() < 1e-3);
}

TEST_CASE("median agrees with the grid oracle in 2-D") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 5; ++t) {
    const MatrixXd h = random_shots(rng, 2, 5);
    MedianConfig cfg;
    cfg.epsilon = 1e-3;
    cfg.max_iterations = 1000;
    cfg.tolerance = 1e-10;
    const double step = 1e-3;
    const VectorXd grid = oracle::grid_argmin(h, 1e-3, step);
    const VectorXd got = median_prototype(h, cfg).vector;
    // Both are minimisers of the same convex objective: compare values.
    CHECK(oracle::pseudo_huber(got, h, 1e-3) <= oracle::pseudo_huber(grid, h, 1e-3) + 1e-9);
    CHECK((got - grid).norm() < 5 * step);
  }
}

TEST_CASE("median stationarity and monotone objective") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const MatrixXd h = random_shots(rng, 8, 5);
    MedianConfig cfg;
    const auto p = median_prototype(h, cfg);
    const auto& trace = p.diagnostics->objective_trace;
    REQUIRE(trace.size() >= 1);
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1]);
    CHECK(trace.back() == p.diagnostics->final_objective);
    const double eps = median_epsilon(h, cfg);
    const double scale = mean_pairwise_distance(h);
    const auto s = pseudo_huber_inverse_distances(p.vector, h, eps);
    CHECK(pseudo_huber_gradient(p.vector, h, eps).norm() <= 10 * cfg.tolerance * scale * s.sum());
  }
}

TEST_CASE("similarity score examples") {
  const MatrixXd h = cols({{0, 0}, {0, 0}, {3, 4}});
  const VectorXd sq = similarity_scores(h, SimilarityMetric::kSqEuclidean);
  CHECK(sq.isApprox(VectorXd{{-12.5, -12.5, -25}}));
  const VectorXd abs = similarity_scores(h, SimilarityMetric::kAbsolute);
  CHECK(abs.isApprox(VectorXd{{-3.5, -3.5, -7}}));
  const VectorXd cos = similarity_scores(cols({{1, 0}, {0, 1}}), SimilarityMetric::kCosine);
  CHECK(cos.norm() < 1e-15);
  CHECK_THROWS_AS(similarity_scores(cols({{1, 0}}), SimilarityMetric::kSqEuclidean), AggregationError);
  CHECK_THROWS_AS(similarity_scores(h, SimilarityMetric::kCosine), NumericError);
}

TEST_CASE("temperature limits") {
  std::mt19937_64 rng(6);
  const MatrixXd h = random_shots(rng, 5, 5, 3.0);
  for (auto m : {SimilarityMetric::kSqEuclidean, SimilarityMetric::kAbsolute, SimilarityMetric::kCosine}) {
    const auto p = weighted_prototype(h, sim(m, 1e9));
    CHECK((p.shot_weights->array() - 0.2).abs().maxCoeff() < 1e-6);
    CHECK((p.vector - h.rowwise().mean()).norm() < 1e-6);
  }
  const MatrixXd tie = cols({{0, 0}, {0, 0}, {3, 4}});
  const auto p = weighted_prototype(tie, sim(SimilarityMetric::kSqEuclidean, 1e-6));
  CHECK((*p.shot_weights)(0) + (*p.shot_weights)(1) >= 1 - 1e-9);
  CHECK((*p.shot_weights)(0) == doctest::Approx(0.5));
  CHECK(p.vector.norm() < 1e-6);
}

TEST_CASE("default temperatures") {
  CHECK(default_temperature(SimilarityMetric::kSqEuclidean) == 25.0);
  CHECK(default_temperature(SimilarityMetric::kAbsolute) == 25.0);
  CHECK(default_temperature(SimilarityMetric::kCosine) == 0.2);
  CHECK(parse_similarity_metric("cos") == SimilarityMetric::kCosine);
  CHECK_THROWS_AS(parse_similarity_metric("l3"), ConfigError);
  CHECK_THROWS_AS(weighted_prototype(cols({{0, 0}, {1, 1}}), sim(SimilarityMetric::kCosine, 0.0)), ConfigError);
}

TEST_CASE("aggregators are permutation invariant") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 30; ++t) {
    const MatrixXd h = random_shots(rng, 6, 5);
    const MatrixXd perm = permute_cols(h, rng);
    CHECK((mean_prototype(h).vector - mean_prototype(perm).vector).norm() < 1e-12);
    CHECK((median_prototype(h).vector - median_prototype(perm).vector).norm() < 1e-5);
    for (auto m : {SimilarityMetric::kSqEuclidean, SimilarityMetric::kAbsolute, SimilarityMetric::kCosine}) {
      const auto c = sim(m, default_temperature(m));
      CHECK((weighted_prototype(h, c).vector - weighted_prototype(perm, c).vector).norm() < 1e-12);
    }
  }
}

TEST_CASE("aggregators are translation equivariant") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 30; ++t) {
    const MatrixXd h = random_shots(rng, 6, 5);
    const VectorXd v = random_shots(rng, 6, 1, 5.0);
    const MatrixXd moved = h.colwise() + v;
    CHECK((mean_prototype(moved).vector - mean_prototype(h).vector - v).norm() < 1e-12);
    CHECK((median_prototype(moved).vector - median_prototype(h).vector - v).norm() < 1e-5);
    for (auto m : {SimilarityMetric::kSqEuclidean, SimilarityMetric::kAbsolute}) {
      const auto c = sim(m, 25.0);
      CHECK((weighted_prototype(moved, c).vector - weighted_prototype(h, c).vector - v).norm() < 1e-10);
    }
  }
}

TEST_CASE("weights lie on the simplex") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const MatrixXd h = random_shots(rng, 16, 5, 4.0);
    for (auto m : {SimilarityMetric::kSqEuclidean, SimilarityMetric::kAbsolute, SimilarityMetric::kCosine}) {
      for (double temp : {1e-3, 0.2, 25.0, 1e6}) {
        const auto w = *weighted_prototype(h, sim(m, temp)).shot_weights;
        CHECK(w.minCoeff() >= 0.0);
        CHECK(std::abs(w.sum() - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("median resists gross outliers where the mean does not") {
  std::mt19937_64 rng(10);
  const double sigma = 1.0;
  for (int t = 0; t < 20; ++t) {
    MatrixXd h(2, 5);
    std::uniform_real_distribution<double> u(-sigma, sigma);
    for (int i = 0; i < 3; ++i) h.col(i) = VectorXd{{u(rng), u(rng)}} * 0.7;
    h.col(3) = VectorXd{{100 * sigma + 5, 3}};
    h.col(4) = VectorXd{{-2, 100 * sigma + 7}};
    // The cluster sits in the radius-sigma ball; its 2 sigma dilation is the
    // radius-3 sigma ball.
    CHECK(median_prototype(h).vector.norm() <= 3 * sigma);
    CHECK(mean_prototype(h).vector.norm() > 3 * sigma);
  }
}

TEST_CASE("dropped Hessian term is positive semidefinite") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 50; ++t) {
    const MatrixXd h = random_shots(rng, 5, 4);
    const VectorXd p = random_shots(rng, 5, 1);
    const double eps = 0.1;
    const MatrixXd u = pseudo_huber_hessian_factor(p, h, eps);
    const Eigen::SelfAdjointEigenSolver<MatrixXd> es(u * u.transpose());
    CHECK(es.eigenvalues().minCoeff() >= -1e-12);
    const MatrixXd full = pseudo_huber_hessian(p, h, eps);
    const double ssum = pseudo_huber_inverse_distances(p, h, eps).sum();
    const MatrixXd dropped = full - ssum * MatrixXd::Identity(5, 5);
    const Eigen::SelfAdjointEigenSolver<MatrixXd> ed(dropped);
    CHECK(ed.eigenvalues().cwiseAbs().maxCoeff() <= ssum + 1e-12);
  }
}
