#include "noisyfs/classify.hpp"

#include <algorithm>
#include <cmath>

#include "noisyfs/autodiff.hpp"

namespace noisyfs {

Aggregator mean_aggregator() {
  return {"mean", [](const Eigen::MatrixXd& shots) { return mean_prototype(shots); }};
}

Aggregator median_aggregator(const MedianConfig& config) {
  config.validate();
  return {"median", [config](const Eigen::MatrixXd& shots) { return median_prototype(shots, config); }};
}

Aggregator weighted_aggregator(const SimilarityConfig& config) {
  config.validate();
  static constexpr const char* kShort[] = {"sq", "abs", "cos"};
  return {std::string("weighted-") + kShort[static_cast<int>(config.metric)],
          [config](const Eigen::MatrixXd& shots) { return weighted_prototype(shots, config); }};
}

EpisodeResult score_predictions(const Episode& episode, const std::vector<int>& predictions,
                                std::string tag) {
  if (predictions.size() != episode.query_labels.size())
    throw ClassificationError("expected " + std::to_string(episode.query_labels.size()) +
                              " predictions, got " + std::to_string(predictions.size()));
  EpisodeResult r;
  r.method_tag = std::move(tag);
  r.per_query_correct.resize(predictions.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    r.per_query_correct[i] = predictions[i] == episode.query_labels[i];
    hits += r.per_query_correct[i] ? 1 : 0;
  }
  r.episode_accuracy =
      predictions.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(predictions.size());
  return r;
}

Eigen::MatrixXd episode_prototypes(const Episode& episode, const Aggregator& aggregator, bool oracle,
                                   std::vector<int>* fallback) {
  Eigen::MatrixXd protos(episode.dimension(), episode.n_ways);
  for (int c = 0; c < episode.n_ways; ++c) {
    Eigen::MatrixXd shots;
    if (oracle) {
      shots = episode.clean_support_matrix(c);
      if (shots.cols() == 0) {
        shots = episode.support_matrix(c);
        if (fallback != nullptr) fallback->push_back(c);
      }
    } else {
      shots = episode.support_matrix(c);
    }
    protos.col(c) = aggregator.aggregate(shots).vector;
  }
  return protos;
}

EpisodeResult classify_episode(const Episode& episode, const Aggregator& aggregator, bool oracle) {
  std::vector<int> fallback;
  const auto protos = episode_prototypes(episode, aggregator, oracle, &fallback);
  std::vector<int> preds(static_cast<std::size_t>(episode.queries.cols()));
  for (Eigen::Index q = 0; q < episode.queries.cols(); ++q)
    preds[static_cast<std::size_t>(q)] = nearest_prototype(episode.queries.col(q), protos);
  auto r = score_predictions(episode, preds, oracle ? "oracle" : aggregator.tag);
  r.oracle_fallback_classes = std::move(fallback);
  return r;
}

int knn_classify(const Eigen::Ref<const Eigen::VectorXd>& query, const Episode& episode, int k,
                 Rng& rng) {
  if (k < 1) throw ClassificationError("k must be >= 1, got " + std::to_string(k));
  const auto n = episode.support.size();
  if (static_cast<std::size_t>(k) > n)
    throw ClassificationError("k = " + std::to_string(k) + " exceeds the support size " +
                              std::to_string(n));
  if (query.size() != episode.dimension()) throw ClassificationError("query dimension mismatch");

  std::vector<std::pair<double, int>> dist(n);
  for (std::size_t i = 0; i < n; ++i)
    dist[i] = {(query - episode.support[i].embedding).squaredNorm(), episode.support[i].assigned_label};
  std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

  std::vector<int> votes(static_cast<std::size_t>(episode.n_ways), 0);
  for (int i = 0; i < k; ++i) ++votes[static_cast<std::size_t>(dist[static_cast<std::size_t>(i)].second)];
  const int top = *std::max_element(votes.begin(), votes.end());
  std::vector<int> tied;
  for (int c = 0; c < episode.n_ways; ++c)
    if (votes[static_cast<std::size_t>(c)] == top) tied.push_back(c);
  if (tied.size() == 1) return tied.front();
  std::uniform_int_distribution<std::size_t> pick(0, tied.size() - 1);
  return tied[pick(rng)];
}

int matching_classify(const Eigen::Ref<const Eigen::VectorXd>& query, const Episode& episode) {
  if (query.size() != episode.dimension()) throw ClassificationError("query dimension mismatch");
  const double qn = query.norm();
  if (qn == 0.0) throw NumericError("matching attention: query has zero norm");
  const auto n = episode.support.size();
  Eigen::VectorXd cos(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& h = episode.support[i].embedding;
    const double hn = h.norm();
    if (hn == 0.0) throw NumericError("matching attention: support sample has zero norm");
    cos(static_cast<Eigen::Index>(i)) = query.dot(h) / (qn * hn);
  }
  const Eigen::VectorXd w = (cos.array() - cos.maxCoeff()).exp();
  std::vector<double> mass(static_cast<std::size_t>(episode.n_ways), 0.0);
  for (std::size_t i = 0; i < n; ++i)
    mass[static_cast<std::size_t>(episode.support[i].assigned_label)] += w(static_cast<Eigen::Index>(i));
  return static_cast<int>(std::max_element(mass.begin(), mass.end()) - mass.begin());
}

namespace {

// Mean softmax cross-entropy of logits (n x N) against labels; fills the
// gradient w.r.t. the logits.
double cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels,
                     Eigen::MatrixXd* dlogits) {
  const auto n = logits.rows();
  double loss = 0.0;
  if (dlogits != nullptr) dlogits->resize(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double top = logits.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(r).array() - top).exp();
    const double z = e.sum();
    const int y = labels[static_cast<std::size_t>(r)];
    loss -= logits(r, y) - top - std::log(z);
    if (dlogits != nullptr) {
      dlogits->row(r) = e / z;
      (*dlogits)(r, y) -= 1.0;
    }
  }
  if (dlogits != nullptr) *dlogits /= static_cast<double>(n);
  return loss / static_cast<double>(n);
}

}  // namespace

LinearClassifierFit fit_linear_classifier(const Episode& episode, const LinearClassifierConfig& config) {
  if (config.steps < 0) throw ConfigError("linear classifier steps must be >= 0");
  const Eigen::MatrixXd x = episode.support_rows();  // NK x D
  std::vector<int> labels(episode.support.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = episode.support[i].assigned_label;

  LinearClassifierFit fit;
  fit.weights = Eigen::MatrixXd::Zero(episode.n_ways, x.cols());
  fit.bias = Eigen::VectorXd::Zero(episode.n_ways);
  ad::AdamWConfig opt{config.learning_rate, config.weight_decay};
  ad::AdamState sw;
  ad::AdamState sb;
  Eigen::MatrixXd bias_col = fit.bias;

  Eigen::MatrixXd dlogits;
  for (int step = 0; step <= config.steps; ++step) {
    const Eigen::MatrixXd logits = (x * fit.weights.transpose()).rowwise() + fit.bias.transpose();
    const double loss = cross_entropy(logits, labels, step < config.steps ? &dlogits : nullptr);
    if (!std::isfinite(loss)) throw NumericError("linear classifier loss is not finite");
    fit.loss_history.push_back(loss);
    if (step == config.steps) break;
    const Eigen::MatrixXd gw = dlogits.transpose() * x;
    const Eigen::MatrixXd gb = dlogits.colwise().sum().transpose();
    ad::adamw_update(fit.weights, gw, sw, opt);
    bias_col = fit.bias;
    ad::adamw_update(bias_col, gb, sb, opt);
    fit.bias = bias_col;
  }
  return fit;
}

EpisodeResult linear_classify(const Episode& episode, const LinearClassifierConfig& config) {
  const auto fit = fit_linear_classifier(episode, config);
  const Eigen::MatrixXd logits =
      (fit.weights * episode.queries).colwise() + fit.bias;  // N x (NQ)
  std::vector<int> preds(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index q = 0; q < logits.cols(); ++q) {
    Eigen::Index best = 0;
    logits.col(q).maxCoeff(&best);
    preds[static_cast<std::size_t>(q)] = static_cast<int>(best);
  }
  return score_predictions(episode, preds, "linear");
}

}  // namespace noisyfs
