#pragma once

// Static prototype aggregators over a class's shots. Shots are passed as a
// D x K matrix (one column per shot), so anything Eigen can evaluate to a
// dense matrix works as input.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "noisyfs/common.hpp"

namespace noisyfs {

struct MedianDiagnostics {
  int iterations = 0;
  double final_objective = 0.0;
  double final_step_norm = 0.0;
  int step_halvings = 0;
  int step_extensions = 0;
  /// Objective at the start and after every accepted update.
  std::vector<double> objective_trace;
};

template <typename Scalar>
struct Prototype {
  int class_index = 0;
  Vector<Scalar> vector;
  std::optional<Vector<Scalar>> shot_weights;
  std::optional<MedianDiagnostics> diagnostics;
};

struct MedianConfig {
  /// Pseudo-Huber smoothing; unset means 1e-6 x mean pairwise shot distance
  /// (floored at 1e-12).
  std::optional<double> epsilon;
  int max_iterations = 100;
  /// Step-norm stopping threshold, in units of the data scale (mean pairwise
  /// distance, or 1 when all shots coincide).
  double tolerance = 1e-6;
  /// Halvings tried when a raw update increases the objective.
  int max_halvings = 20;
  /// Doublings tried while a descending update keeps lowering the objective.
  /// The diagonal step is far too short where the objective is nearly flat
  /// along one direction (e.g. between the two middle shots in 1-D); 0 gives
  /// the plain iteration.
  int max_extensions = 30;

  void validate() const {
    if (epsilon && !(*epsilon > 0.0)) throw ConfigError("median: epsilon must be > 0");
    if (!(tolerance > 0.0)) throw ConfigError("median: tolerance must be > 0");
    if (max_iterations < 1) throw ConfigError("median: max_iterations must be >= 1");
    if (max_halvings < 0 || max_extensions < 0) throw ConfigError("median: max_halvings and max_extensions must be >= 0");
  }
};

enum class SimilarityMetric { kSqEuclidean, kAbsolute, kCosine };

inline std::string to_string(SimilarityMetric m) {
  switch (m) {
    case SimilarityMetric::kSqEuclidean: return "sq_euclidean";
    case SimilarityMetric::kAbsolute: return "absolute";
    case SimilarityMetric::kCosine: return "cosine";
  }
  return "unknown";
}

inline SimilarityMetric parse_similarity_metric(const std::string& name) {
  if (name == "sq_euclidean" || name == "sq") return SimilarityMetric::kSqEuclidean;
  if (name == "absolute" || name == "abs") return SimilarityMetric::kAbsolute;
  if (name == "cosine" || name == "cos") return SimilarityMetric::kCosine;
  throw ConfigError("unknown similarity metric '" + name + "'");
}

/// Temperatures that work well for each metric on unit-scale features.
inline double default_temperature(SimilarityMetric m) {
  return m == SimilarityMetric::kCosine ? 0.2 : 25.0;
}

struct SimilarityConfig {
  SimilarityMetric metric = SimilarityMetric::kSqEuclidean;
  double temperature = 25.0;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("weighted: temperature must be > 0");
  }
};

namespace detail {

template <typename Derived>
void require_shots(const Eigen::MatrixBase<Derived>& shots) {
  if (shots.cols() == 0) throw AggregationError("cannot aggregate an empty shot list");
  if (shots.rows() == 0) throw AggregationError("shots must have dimension >= 1");
}

template <typename DerivedP, typename DerivedH>
void require_same_dim(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedH>& shots) {
  if (p.size() != shots.rows())
    throw AggregationError("dimension mismatch: point has " + std::to_string(p.size()) +
                           ", shots have " + std::to_string(shots.rows()));
}

}  // namespace detail

template <typename Derived>
auto mean_prototype(const Eigen::MatrixBase<Derived>& shots) {
  using Scalar = typename Derived::Scalar;
  detail::require_shots(shots);
  const auto k = shots.cols();
  Prototype<Scalar> out;
  out.vector = shots.rowwise().mean();
  out.shot_weights = Vector<Scalar>::Constant(k, Scalar(1) / Scalar(k));
  return out;
}

/// Mean Euclidean distance over distinct shot pairs (0 for K = 1).
template <typename Derived>
typename Derived::Scalar mean_pairwise_distance(const Eigen::MatrixBase<Derived>& shots) {
  using Scalar = typename Derived::Scalar;
  const auto k = shots.cols();
  if (k < 2) return Scalar(0);
  Scalar total(0);
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) total += (shots.col(i) - shots.col(j)).norm();
  return total / Scalar(k * (k - 1) / 2);
}

/// Sum over shots of sqrt(|p - h_i|^2 + eps^2) - eps.
template <typename DerivedP, typename DerivedH>
typename DerivedH::Scalar pseudo_huber_objective(const Eigen::MatrixBase<DerivedP>& p,
                                                 const Eigen::MatrixBase<DerivedH>& shots,
                                                 typename DerivedH::Scalar epsilon) {
  using Scalar = typename DerivedH::Scalar;
  detail::require_same_dim(p, shots);
  if (!(epsilon > Scalar(0))) throw AggregationError("pseudo-Huber epsilon must be > 0");
  Scalar total(0);
  for (Eigen::Index i = 0; i < shots.cols(); ++i) {
    const Scalar r2 = (p - shots.col(i)).squaredNorm();
    // sqrt(r2 + e^2) - e, written to avoid cancellation when r2 << e^2.
    total += r2 / (std::sqrt(r2 + epsilon * epsilon) + epsilon);
  }
  return total;
}

/// Per-shot inverse smoothed distances s_i = 1 / sqrt(|p - h_i|^2 + eps^2).
template <typename DerivedP, typename DerivedH>
Vector<typename DerivedH::Scalar> pseudo_huber_inverse_distances(
    const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedH>& shots,
    typename DerivedH::Scalar epsilon) {
  using Scalar = typename DerivedH::Scalar;
  detail::require_same_dim(p, shots);
  Vector<Scalar> s(shots.cols());
  for (Eigen::Index i = 0; i < shots.cols(); ++i)
    s(i) = Scalar(1) / std::sqrt((p - shots.col(i)).squaredNorm() + epsilon * epsilon);
  return s;
}

template <typename DerivedP, typename DerivedH>
Vector<typename DerivedH::Scalar> pseudo_huber_gradient(const Eigen::MatrixBase<DerivedP>& p,
                                                        const Eigen::MatrixBase<DerivedH>& shots,
                                                        typename DerivedH::Scalar epsilon) {
  const auto s = pseudo_huber_inverse_distances(p, shots, epsilon);
  return (shots.colwise() - p).eval() * (-s);
}

/// D x K matrix U with columns u_i = (p - h_i) / (|p - h_i|^2 + eps^2)^(3/4).
template <typename DerivedP, typename DerivedH>
Matrix<typename DerivedH::Scalar> pseudo_huber_hessian_factor(
    const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedH>& shots,
    typename DerivedH::Scalar epsilon) {
  using Scalar = typename DerivedH::Scalar;
  const auto s = pseudo_huber_inverse_distances(p, shots, epsilon);
  Matrix<Scalar> u(shots.rows(), shots.cols());
  for (Eigen::Index i = 0; i < shots.cols(); ++i)
    u.col(i) = (p - shots.col(i)) * std::pow(s(i), Scalar(1.5));
  return u;
}

/// Full Hessian (sum_i s_i) I - U U^T. The median iteration keeps only the
/// diagonal part.
template <typename DerivedP, typename DerivedH>
Matrix<typename DerivedH::Scalar> pseudo_huber_hessian(const Eigen::MatrixBase<DerivedP>& p,
                                                       const Eigen::MatrixBase<DerivedH>& shots,
                                                       typename DerivedH::Scalar epsilon) {
  using Scalar = typename DerivedH::Scalar;
  const auto s = pseudo_huber_inverse_distances(p, shots, epsilon);
  const auto u = pseudo_huber_hessian_factor(p, shots, epsilon);
  Matrix<Scalar> h = -u * u.transpose();
  h.diagonal().array() += s.sum();
  return h;
}

/// Smoothing constant actually used for these shots under `config`.
template <typename Derived>
typename Derived::Scalar median_epsilon(const Eigen::MatrixBase<Derived>& shots,
                                        const MedianConfig& config) {
  using Scalar = typename Derived::Scalar;
  if (config.epsilon) return Scalar(*config.epsilon);
  return std::max(Scalar(1e-6) * mean_pairwise_distance(shots), Scalar(1e-12));
}

/// Spatial median under the pseudo-Huber loss. Starts from the mean and takes
/// diagonal-Hessian Newton steps p <- p - grad / sum_i s_i; a step that raises
/// the objective is halved until it does not, and one that lowers it is
/// doubled while that lowers it further.
template <typename Derived>
auto median_prototype(const Eigen::MatrixBase<Derived>& shots, const MedianConfig& config = {}) {
  using Scalar = typename Derived::Scalar;
  detail::require_shots(shots);
  config.validate();
  const Matrix<Scalar> h = shots;
  const Scalar eps = median_epsilon(h, config);
  const Scalar scale = [&] {
    const Scalar d = mean_pairwise_distance(h);
    return d > Scalar(0) ? d : Scalar(1);
  }();
  const Scalar tol = Scalar(config.tolerance) * scale;

  Vector<Scalar> p = h.rowwise().mean();
  Scalar objective = pseudo_huber_objective(p, h, eps);
  MedianDiagnostics diag;
  diag.objective_trace.push_back(static_cast<double>(objective));

  for (int it = 0; it < config.max_iterations; ++it) {
    const auto s = pseudo_huber_inverse_distances(p, h, eps);
    const Vector<Scalar> grad = (h.colwise() - p) * (-s);
    Vector<Scalar> step = grad / s.sum();
    if (!step.allFinite()) throw NumericError("median: non-finite update");

    Vector<Scalar> next = p - step;
    Scalar next_objective = pseudo_huber_objective(next, h, eps);
    int halvings = 0;
    while (next_objective > objective && halvings < config.max_halvings) {
      step *= Scalar(0.5);
      next = p - step;
      next_objective = pseudo_huber_objective(next, h, eps);
      ++halvings;
    }
    int extensions = 0;
    if (halvings == 0 && next_objective < objective) {
      while (extensions < config.max_extensions) {
        const Vector<Scalar> longer = p - Scalar(2) * step;
        const Scalar longer_objective = pseudo_huber_objective(longer, h, eps);
        if (!(longer_objective < next_objective)) break;
        step *= Scalar(2);
        next = longer;
        next_objective = longer_objective;
        ++extensions;
      }
    }
    diag.step_halvings += halvings;
    diag.step_extensions += extensions;
    ++diag.iterations;
    diag.final_step_norm = static_cast<double>(step.norm());
    if (!(next_objective <= objective)) break;  // no descent direction left at this precision

    p = std::move(next);
    objective = next_objective;
    diag.objective_trace.push_back(static_cast<double>(objective));
    if (step.norm() < tol) break;
  }
  if (!p.allFinite()) throw NumericError("median: non-finite result");

  diag.final_objective = static_cast<double>(objective);
  Prototype<Scalar> out;
  out.vector = std::move(p);
  out.diagnostics = diag;
  return out;
}

/// Leave-one-out similarity of each shot to the rest (higher = more central).
template <typename Derived>
Vector<typename Derived::Scalar> similarity_scores(const Eigen::MatrixBase<Derived>& shots,
                                                   SimilarityMetric metric) {
  using Scalar = typename Derived::Scalar;
  detail::require_shots(shots);
  const auto k = shots.cols();
  if (k < 2) throw AggregationError("similarity scores need at least 2 shots");

  Matrix<Scalar> h = shots;
  if (metric == SimilarityMetric::kCosine) {
    for (Eigen::Index i = 0; i < k; ++i) {
      const Scalar n = h.col(i).norm();
      if (!(n > Scalar(0))) throw NumericError("cosine similarity of a zero-norm embedding");
      h.col(i) /= n;
    }
  }

  Vector<Scalar> a = Vector<Scalar>::Zero(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      if (i == j) continue;
      switch (metric) {
        case SimilarityMetric::kSqEuclidean: a(i) -= (h.col(i) - h.col(j)).squaredNorm(); break;
        case SimilarityMetric::kAbsolute: a(i) -= (h.col(i) - h.col(j)).template lpNorm<1>(); break;
        case SimilarityMetric::kCosine: a(i) += h.col(i).dot(h.col(j)); break;
      }
    }
  }
  return a / Scalar(k - 1);
}

/// Softmax of scores / temperature, stabilised by max subtraction.
template <typename Derived>
Vector<typename Derived::Scalar> softmax_weights(const Eigen::MatrixBase<Derived>& scores,
                                                 typename Derived::Scalar temperature) {
  using Scalar = typename Derived::Scalar;
  const Scalar top = scores.maxCoeff();
  Vector<Scalar> w = ((scores.array() - top) / temperature).exp().matrix();
  return w / w.sum();
}

template <typename Derived>
auto weighted_prototype(const Eigen::MatrixBase<Derived>& shots, const SimilarityConfig& config) {
  using Scalar = typename Derived::Scalar;
  config.validate();
  const auto scores = similarity_scores(shots, config.metric);
  Prototype<Scalar> out;
  out.shot_weights = softmax_weights(scores, Scalar(config.temperature));
  out.vector = shots * *out.shot_weights;
  return out;
}

}  // namespace noisyfs
