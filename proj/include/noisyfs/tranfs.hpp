#pragma once

// Transformer aggregator: support embeddings plus one CLS token per class go
// through a small pre-norm encoder; the CLS outputs, projected back to the
// embedding space, are the class prototypes.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "noisyfs/autodiff.hpp"
#include "noisyfs/embedding_space.hpp"
#include "noisyfs/noise.hpp"

namespace noisyfs {

enum class ClsMode { kRandomConstant, kLearnable, kMeanPrototype };
enum class PosMode { kLearnable, kRandomConstant };

std::string to_string(ClsMode m);
std::string to_string(PosMode m);
ClsMode parse_cls_mode(const std::string& name);
PosMode parse_pos_mode(const std::string& name);

struct NoiseMixEntry {
  NoiseSpec spec;
  double probability = 0.0;
};

struct TranfsConfig {
  int num_layers = 2;
  int num_heads = 4;
  int model_dim = 32;
  int input_dim = 64;
  /// Largest N the model accepts; one POS (and CLS) row per class slot.
  int max_ways = 5;
  ClsMode cls_mode = ClsMode::kRandomConstant;
  PosMode pos_mode = PosMode::kLearnable;
  double lambda_clean = 5.0;
  double lambda_bin = 0.5;
  /// Noise drawn per training episode. Defaults to {0, 20, 40}% symmetric.
  std::vector<NoiseMixEntry> train_noise_mix = default_noise_mix();

  static std::vector<NoiseMixEntry> default_noise_mix();
  void validate() const;
};

struct TranfsLayer {
  ad::Parameter ln1_gain, ln1_bias;
  ad::Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Parameter ln2_gain, ln2_bias;
  ad::Parameter w1, b1, w2, b2;
};

struct TranfsModel {
  TranfsConfig config;
  ad::Parameter down;  // D x d
  ad::Parameter up;    // d x D
  ad::Parameter pos;   // max_ways x d
  ad::Parameter cls;   // max_ways x d (unused under kMeanPrototype)
  std::vector<TranfsLayer> layers;
  ad::Parameter bin_weight;  // d x 1
  ad::Parameter bin_bias;    // 1 x 1

  TranfsModel() = default;
  /// Fresh model: orthonormal `down` columns with up = down^T, identity
  /// attention projections, Gaussian feedforward and POS, CLS with std 1/sqrt(d).
  TranfsModel(const TranfsConfig& config, Rng& rng);

  /// All parameters in a fixed order (the checkpoint order).
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  void zero_grad();
};

struct TranfsOutput {
  Eigen::MatrixXd prototypes;       // D x N
  Eigen::MatrixXd support_outputs;  // (N*K) x d, slot order
  Eigen::VectorXd outlier_logits;   // N*K
  /// attention[layer][head], each (N*K + N) square and row-stochastic.
  std::vector<std::vector<Eigen::MatrixXd>> attention;
};

/// Token sequence before the first layer, (N*K + N) x d: support tokens in
/// slot order, then CLS^(0..N-1). CapacityError when N > max_ways.
Eigen::MatrixXd build_sequence(const TranfsModel& model, const Episode& episode);

TranfsOutput forward(const TranfsModel& model, const Episode& episode);

/// Prototypes only, D x N.
Eigen::MatrixXd tranfs_prototypes(const TranfsModel& model, const Episode& episode);

// Loss terms on graph nodes. Prototypes are N x D rows, queries M x D rows.

/// Softmax cross-entropy over negative squared distances, averaged over queries.
ad::Var loss_xent(ad::Var prototypes, const Eigen::MatrixXd& queries, const std::vector<int>& labels);
/// (1/N) sum_c ||p_c - clean_c||^2 with clean_c rows N x D.
ad::Var loss_clean(ad::Var prototypes, const Eigen::MatrixXd& clean_means);
/// Mean binary cross-entropy of sigmoid(logits) (M x 1) against 0/1 flags.
ad::Var loss_bin(ad::Var logits, const Eigen::VectorXd& flags);

// The same terms on plain matrices (prototypes and clean means D x N, queries D x M).
double loss_xent(const Eigen::MatrixXd& prototypes, const Eigen::MatrixXd& queries,
                 const std::vector<int>& labels);
double loss_clean(const Eigen::MatrixXd& prototypes, const Eigen::MatrixXd& clean_means);
double loss_bin(const Eigen::VectorXd& logits, const Eigen::VectorXd& flags);

/// Per-class mean of the clean shots, N x D. LossError for a class without one.
Eigen::MatrixXd clean_means(const Episode& episode);

struct LossBreakdown {
  double total = 0.0;
  double xent = 0.0;
  double clean = 0.0;
  double bin = 0.0;
};

double total_loss(const LossBreakdown& parts, const TranfsConfig& config);

/// Loss of the model on one episode.
LossBreakdown episode_loss(const TranfsModel& model, const Episode& episode);
/// Same, and leaves d(total)/d(param) in every trainable parameter's grad
/// (gradients are reset first).
LossBreakdown episode_loss_and_gradients(TranfsModel& model, const Episode& episode);

struct MetaTrainConfig {
  int episodes = 5000;
  int n_ways = 5;
  int k_shots = 5;
  int q_queries = 15;
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  double decay_factor = 0.7;
  /// Episodes between learning-rate decays.
  int decay_interval = 625;

  void validate() const;
};

struct TrainingLogEntry {
  LossBreakdown loss;
  double learning_rate = 0.0;
  std::string noise;
};

/// Meta-trains `model` in place on episodes drawn from `pools`.
std::vector<TrainingLogEntry> meta_train(TranfsModel& model, const PoolSet& pools,
                                         const MetaTrainConfig& config, Rng& rng);

// Attention export.

struct AttentionMap {
  int layer = 0;
  int head = 0;
  Eigen::MatrixXd probabilities;

  friend bool operator==(const AttentionMap& a, const AttentionMap& b) {
    return a.layer == b.layer && a.head == b.head &&
           a.probabilities.rows() == b.probabilities.rows() &&
           a.probabilities.cols() == b.probabilities.cols() && a.probabilities == b.probabilities;
  }
};

struct AttentionDump {
  int n_ways = 0;
  int k_shots = 0;
  /// One label per sequence position: "S<class>.<shot>" or "CLS<class>".
  std::vector<std::string> legend;
  /// Noise flag per support position.
  std::vector<int> noise_flags;
  std::vector<AttentionMap> maps;

  friend bool operator==(const AttentionDump&, const AttentionDump&) = default;
};

AttentionDump export_attention(const TranfsModel& model, const Episode& episode);
void write_attention_dump(const AttentionDump& dump, std::ostream& out);
AttentionDump parse_attention_dump(std::istream& in);

/// Mean final-layer attention (over heads and classes) from CLS^(c) to the
/// clean and to the noise-flagged shots of class c. NaN when a side is empty.
std::pair<double, double> cls_attention_to_own_shots(const AttentionDump& dump);

// Checkpoints.

void save_checkpoint(const TranfsModel& model, const std::filesystem::path& path,
                     const Rng* rng = nullptr);

struct LoadedCheckpoint {
  TranfsModel model;
  std::optional<Rng> rng;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Area under the ROC curve of `scores` for binary `labels` (ties count half).
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace noisyfs
