#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "noisyfs/aggregate.hpp"
#include "noisyfs/embedding_space.hpp"

namespace noisyfs {

struct EpisodeResult {
  double episode_accuracy = 0.0;
  std::vector<bool> per_query_correct;
  std::string method_tag;
  /// Classes for which the oracle had no clean shot and used the noisy ones.
  std::vector<int> oracle_fallback_classes;
};

/// Index of the prototype column closest to `query` in squared Euclidean
/// distance; ties go to the lowest index.
template <typename DerivedQ, typename DerivedP>
int nearest_prototype(const Eigen::MatrixBase<DerivedQ>& query,
                      const Eigen::MatrixBase<DerivedP>& prototypes) {
  using Scalar = typename DerivedP::Scalar;
  if (prototypes.cols() == 0) throw ClassificationError("no prototypes");
  if (query.size() != prototypes.rows())
    throw ClassificationError("query dimension " + std::to_string(query.size()) +
                              " does not match prototype dimension " +
                              std::to_string(prototypes.rows()));
  int best = 0;
  Scalar best_d = std::numeric_limits<Scalar>::infinity();
  for (Eigen::Index c = 0; c < prototypes.cols(); ++c) {
    const Scalar d = (query - prototypes.col(c)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

template <typename DerivedQ, typename Scalar>
int nearest_prototype(const Eigen::MatrixBase<DerivedQ>& query,
                      std::span<const Prototype<Scalar>> prototypes) {
  if (prototypes.empty()) throw ClassificationError("no prototypes");
  Matrix<Scalar> cols(prototypes.front().vector.size(), static_cast<Eigen::Index>(prototypes.size()));
  for (std::size_t c = 0; c < prototypes.size(); ++c) {
    if (prototypes[c].vector.size() != cols.rows())
      throw ClassificationError("prototypes disagree on dimension");
    cols.col(static_cast<Eigen::Index>(c)) = prototypes[c].vector;
  }
  return nearest_prototype(query, cols);
}

/// A named shots -> prototype map (mean, median, weighted, ...).
struct Aggregator {
  std::string tag;
  std::function<Prototype<double>(const Eigen::MatrixXd&)> aggregate;
};

Aggregator mean_aggregator();
Aggregator median_aggregator(const MedianConfig& config = {});
Aggregator weighted_aggregator(const SimilarityConfig& config);

/// Accuracy from per-query predictions (class-major query order).
EpisodeResult score_predictions(const Episode& episode, const std::vector<int>& predictions,
                                std::string tag);

/// Prototypes from the support set, one column per class.
Eigen::MatrixXd episode_prototypes(const Episode& episode, const Aggregator& aggregator,
                                   bool oracle = false, std::vector<int>* fallback = nullptr);

/// Aggregates prototypes and classifies every query by nearest prototype.
/// With `oracle`, noise-flagged shots are dropped first; a class left with no
/// clean shot falls back to its full noisy support.
EpisodeResult classify_episode(const Episode& episode, const Aggregator& aggregator,
                               bool oracle = false);

/// Plurality vote of the k nearest support samples; ties between classes are
/// broken uniformly at random.
int knn_classify(const Eigen::Ref<const Eigen::VectorXd>& query, const Episode& episode, int k,
                 Rng& rng);

/// Matching-network style attention: softmax over cosine(query, h_i), mass
/// summed per assigned label, argmax (lowest index on ties).
int matching_classify(const Eigen::Ref<const Eigen::VectorXd>& query, const Episode& episode);

struct LinearClassifierConfig {
  int steps = 100;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
};

struct LinearClassifierFit {
  Eigen::MatrixXd weights;  // N x D
  Eigen::VectorXd bias;     // N
  /// Support-set cross-entropy before each step and after the last one.
  std::vector<double> loss_history;
};

/// Fits an affine D -> N softmax classifier on the (noisy) support set with
/// full-batch AdamW from zero initialisation.
LinearClassifierFit fit_linear_classifier(const Episode& episode,
                                          const LinearClassifierConfig& config = {});

EpisodeResult linear_classify(const Episode& episode, const LinearClassifierConfig& config = {});

}  // namespace noisyfs
