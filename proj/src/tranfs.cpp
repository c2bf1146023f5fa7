#include "noisyfs/tranfs.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include <Eigen/QR>
#include <json.hpp>

namespace noisyfs {

using ad::Axis;
using ad::Graph;
using ad::Parameter;
using ad::Tensor;
using ad::Var;

std::string to_string(ClsMode m) {
  switch (m) {
    case ClsMode::kRandomConstant: return "random_constant";
    case ClsMode::kLearnable: return "learnable";
    case ClsMode::kMeanPrototype: return "mean_prototype";
  }
  return "unknown";
}

std::string to_string(PosMode m) {
  switch (m) {
    case PosMode::kLearnable: return "learnable";
    case PosMode::kRandomConstant: return "random_constant";
  }
  return "unknown";
}

ClsMode parse_cls_mode(const std::string& name) {
  if (name == "random_constant") return ClsMode::kRandomConstant;
  if (name == "learnable") return ClsMode::kLearnable;
  if (name == "mean_prototype") return ClsMode::kMeanPrototype;
  throw ConfigError("unknown cls_mode '" + name + "'");
}

PosMode parse_pos_mode(const std::string& name) {
  if (name == "learnable") return PosMode::kLearnable;
  if (name == "random_constant") return PosMode::kRandomConstant;
  throw ConfigError("unknown pos_mode '" + name + "'");
}

std::vector<NoiseMixEntry> TranfsConfig::default_noise_mix() {
  const double third = 1.0 / 3.0;
  return {{{NoiseKind::kSymmetric, 0.0, nullptr}, third},
          {{NoiseKind::kSymmetric, 0.2, nullptr}, third},
          {{NoiseKind::kSymmetric, 0.4, nullptr}, third}};
}

void TranfsConfig::validate() const {
  if (num_layers < 0) throw ConfigError("tranfs: num_layers must be >= 0");
  if (num_heads < 1) throw ConfigError("tranfs: num_heads must be >= 1");
  if (model_dim < 1 || input_dim < 1) throw ConfigError("tranfs: dimensions must be positive");
  if (model_dim % num_heads != 0)
    throw ConfigError("tranfs: num_heads (" + std::to_string(num_heads) +
                      ") must divide model_dim (" + std::to_string(model_dim) + ")");
  if (max_ways < 1) throw ConfigError("tranfs: max_ways must be >= 1");
  if (!(lambda_clean >= 0.0) || !(lambda_bin >= 0.0))
    throw ConfigError("tranfs: loss weights must be >= 0");
  if (train_noise_mix.empty()) throw ConfigError("tranfs: train_noise_mix is empty");
  double total = 0.0;
  for (const auto& e : train_noise_mix) {
    if (!(e.probability >= 0.0)) throw ConfigError("tranfs: noise mix probabilities must be >= 0");
    total += e.probability;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError("tranfs: noise mix probabilities sum to " + std::to_string(total) + ", not 1");
}

namespace {

Tensor gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) t(i, j) = n(rng);
  return t;
}

// Orthonormal columns (rows when rows < cols) from the QR of a Gaussian.
Tensor orthogonal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const bool tall = rows >= cols;
  const Eigen::Index m = tall ? rows : cols;
  const Eigen::Index n = tall ? cols : rows;
  const Tensor g = gaussian(m, n, 1.0, rng);
  Eigen::HouseholderQR<Tensor> qr(g);
  Tensor q = qr.householderQ() * Tensor::Identity(m, n);
  const Tensor r = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return tall ? q : Tensor(q.transpose());
}

Parameter xavier(std::string name, Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return {std::move(name), gaussian(fan_in, fan_out, sd, rng)};
}

Parameter zeros(std::string name, Eigen::Index rows, Eigen::Index cols) {
  return {std::move(name), Tensor::Zero(rows, cols)};
}

Parameter ones(std::string name, Eigen::Index rows, Eigen::Index cols) {
  return {std::move(name), Tensor::Ones(rows, cols)};
}

Parameter identity(std::string name, Eigen::Index d) {
  return {std::move(name), Tensor::Identity(d, d)};
}

}  // namespace

TranfsModel::TranfsModel(const TranfsConfig& cfg, Rng& rng) : config(cfg) {
  config.validate();
  const Eigen::Index big_d = config.input_dim;
  const Eigen::Index d = config.model_dim;
  down = Parameter("down", orthogonal(big_d, d, rng));
  up = Parameter("up", down.value.transpose());
  pos = Parameter("pos", gaussian(config.max_ways, d, 1.0, rng),
                  config.pos_mode == PosMode::kLearnable);
  cls = Parameter("cls", gaussian(config.max_ways, d, 1.0 / std::sqrt(static_cast<double>(d)), rng),
                  config.cls_mode == ClsMode::kLearnable);
  for (int l = 0; l < config.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    TranfsLayer layer;
    layer.ln1_gain = ones(p + "ln1.gain", 1, d);
    layer.ln1_bias = zeros(p + "ln1.bias", 1, d);
    layer.wq = identity(p + "attn.wq", d);
    layer.bq = zeros(p + "attn.bq", 1, d);
    layer.wk = identity(p + "attn.wk", d);
    layer.bk = zeros(p + "attn.bk", 1, d);
    layer.wv = identity(p + "attn.wv", d);
    layer.bv = zeros(p + "attn.bv", 1, d);
    layer.wo = identity(p + "attn.wo", d);
    layer.bo = zeros(p + "attn.bo", 1, d);
    layer.ln2_gain = ones(p + "ln2.gain", 1, d);
    layer.ln2_bias = zeros(p + "ln2.bias", 1, d);
    layer.w1 = xavier(p + "ff.w1", d, 4 * d, rng);
    layer.b1 = zeros(p + "ff.b1", 1, 4 * d);
    layer.w2 = xavier(p + "ff.w2", 4 * d, d, rng);
    layer.b2 = zeros(p + "ff.b2", 1, d);
    layers.push_back(std::move(layer));
  }
  bin_weight = xavier("bin.weight", d, 1, rng);
  bin_bias = zeros("bin.bias", 1, 1);
}

std::vector<Parameter*> TranfsModel::parameters() {
  std::vector<Parameter*> out{&down, &up, &pos, &cls};
  for (auto& l : layers) {
    for (auto* p : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo,
                    &l.bo, &l.ln2_gain, &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2})
      out.push_back(p);
  }
  out.push_back(&bin_weight);
  out.push_back(&bin_bias);
  return out;
}

std::vector<const Parameter*> TranfsModel::parameters() const {
  auto mut = const_cast<TranfsModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

void TranfsModel::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

namespace {

struct GraphOutputs {
  Var prototypes;  // N x D
  Var support;     // NK x d
  Var logits;      // NK x 1
  std::vector<std::vector<Tensor>> attention;
};

Tensor class_onehot(int rows_per_class, int n_ways, int width) {
  Tensor t = Tensor::Zero(static_cast<Eigen::Index>(rows_per_class) * n_ways, width);
  for (int c = 0; c < n_ways; ++c)
    for (int i = 0; i < rows_per_class; ++i) t(c * rows_per_class + i, c) = 1.0;
  return t;
}

void check_episode(const TranfsModel& model, const Episode& ep) {
  if (ep.n_ways > model.config.max_ways)
    throw CapacityError("episode has " + std::to_string(ep.n_ways) + " classes but the model holds " +
                        std::to_string(model.config.max_ways));
  if (ep.dimension() != model.config.input_dim)
    throw ShapeError("episode dimension " + std::to_string(ep.dimension()) +
                     " does not match model input_dim " + std::to_string(model.config.input_dim));
}

// With `train`, parameters are bound as graph leaves that receive gradients;
// the caller owns the model mutably in that case.
GraphOutputs run(Graph& g, const TranfsModel& model, const Episode& ep, bool train) {
  check_episode(model, ep);
  auto bind = [&](const Parameter& p) {
    return train ? g.parameter(const_cast<Parameter&>(p)) : g.constant(p.value);
  };
  const int n = ep.n_ways;
  const int k = ep.k_shots;
  const int nk = n * k;
  const int heads = model.config.num_heads;
  const Eigen::Index dh = model.config.model_dim / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  const Var down = bind(model.down);
  const Var pos = bind(model.pos);
  const Var support_pos = matmul(g.constant(class_onehot(k, n, model.config.max_ways)), pos);
  const Var cls_select = g.constant(class_onehot(1, n, model.config.max_ways));
  const Var tokens = add(matmul(g.constant(ep.support_rows()), down), support_pos);

  Var cls_rows;
  if (model.config.cls_mode == ClsMode::kMeanPrototype) {
    Tensor means(n, ep.dimension());
    for (int c = 0; c < n; ++c) means.row(c) = ep.support_matrix(c).rowwise().mean().transpose();
    cls_rows = matmul(g.constant(std::move(means)), down);
  } else {
    cls_rows = matmul(cls_select, bind(model.cls));
  }
  cls_rows = add(cls_rows, matmul(cls_select, pos));
  Var x = concat({tokens, cls_rows}, Axis::kRows);

  GraphOutputs out;
  for (const auto& layer : model.layers) {
    const Var y = layer_normalize(x, bind(layer.ln1_gain), bind(layer.ln1_bias));
    const Var q = add_row(matmul(y, bind(layer.wq)), bind(layer.bq));
    const Var kk = add_row(matmul(y, bind(layer.wk)), bind(layer.bk));
    const Var v = add_row(matmul(y, bind(layer.wv)), bind(layer.bv));
    std::vector<Var> head_out;
    std::vector<Tensor> maps;
    for (int h = 0; h < heads; ++h) {
      const Var qh = slice(q, Axis::kCols, h * dh, dh);
      const Var kh = slice(kk, Axis::kCols, h * dh, dh);
      const Var vh = slice(v, Axis::kCols, h * dh, dh);
      const Var a = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dh), Axis::kCols);
      maps.push_back(a.value());
      head_out.push_back(matmul(a, vh));
    }
    out.attention.push_back(std::move(maps));
    const Var attended =
        add_row(matmul(concat(head_out, Axis::kCols), bind(layer.wo)), bind(layer.bo));
    x = add(x, attended);
    const Var y2 = layer_normalize(x, bind(layer.ln2_gain), bind(layer.ln2_bias));
    const Var hidden = gelu(add_row(matmul(y2, bind(layer.w1)), bind(layer.b1)));
    x = add(x, add_row(matmul(hidden, bind(layer.w2)), bind(layer.b2)));
  }

  out.support = slice(x, Axis::kRows, 0, nk);
  out.prototypes = matmul(slice(x, Axis::kRows, nk, n), bind(model.up));
  out.logits = add_row(matmul(out.support, bind(model.bin_weight)), bind(model.bin_bias));
  if (!out.prototypes.value().allFinite() || !out.logits.value().allFinite())
    throw NumericError("tranfs forward produced non-finite values");
  return out;
}

Eigen::VectorXd noise_flags(const Episode& ep) {
  Eigen::VectorXd f(static_cast<Eigen::Index>(ep.support.size()));
  for (std::size_t i = 0; i < ep.support.size(); ++i)
    f(static_cast<Eigen::Index>(i)) = ep.support[i].noise_flag ? 1.0 : 0.0;
  return f;
}

struct LossVars {
  Var xent, clean, bin, total;
};

LossVars build_loss(Graph& g, const TranfsModel& model, const Episode& ep, bool train) {
  const auto out = run(g, model, ep, train);
  LossVars l;
  l.xent = loss_xent(out.prototypes, ep.queries.transpose(), ep.query_labels);
  l.clean = loss_clean(out.prototypes, clean_means(ep));
  l.bin = loss_bin(out.logits, noise_flags(ep));
  l.total = add(add(l.xent, scale(l.clean, model.config.lambda_clean)),
                scale(l.bin, model.config.lambda_bin));
  return l;
}

LossBreakdown breakdown(const LossVars& l) {
  return {l.total.scalar(), l.xent.scalar(), l.clean.scalar(), l.bin.scalar()};
}

}  // namespace

Eigen::MatrixXd build_sequence(const TranfsModel& model, const Episode& episode) {
  check_episode(model, episode);
  const int n = episode.n_ways;
  const int k = episode.k_shots;
  const Tensor support_pos = class_onehot(k, n, model.config.max_ways) * model.pos.value;
  const Tensor cls_pos = model.pos.value.topRows(n);
  Tensor seq(n * k + n, model.config.model_dim);
  seq.topRows(n * k) = episode.support_rows() * model.down.value + support_pos;
  if (model.config.cls_mode == ClsMode::kMeanPrototype) {
    for (int c = 0; c < n; ++c)
      seq.row(n * k + c) =
          episode.support_matrix(c).rowwise().mean().transpose() * model.down.value + cls_pos.row(c);
  } else {
    seq.bottomRows(n) = model.cls.value.topRows(n) + cls_pos;
  }
  return seq;
}

TranfsOutput forward(const TranfsModel& model, const Episode& episode) {
  Graph g;
  auto out = run(g, model, episode, false);
  TranfsOutput r;
  r.prototypes = out.prototypes.value().transpose();
  r.support_outputs = out.support.value();
  r.outlier_logits = out.logits.value().col(0);
  r.attention = std::move(out.attention);
  return r;
}

Eigen::MatrixXd tranfs_prototypes(const TranfsModel& model, const Episode& episode) {
  Graph g;
  return run(g, model, episode, false).prototypes.value().transpose();
}

Var loss_xent(Var prototypes, const Eigen::MatrixXd& queries, const std::vector<int>& labels) {
  auto& g = prototypes.graph();
  const auto m = queries.rows();
  const auto n = prototypes.rows();
  if (m == 0) throw LossError("cross-entropy needs at least one query");
  if (queries.cols() != prototypes.cols())
    throw ShapeError("query dimension does not match prototype dimension");
  if (static_cast<Eigen::Index>(labels.size()) != m)
    throw ShapeError("expected one label per query");
  Tensor onehot = Tensor::Zero(m, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= n) throw ShapeError("query label out of range");
    onehot(i, y) = 1.0;
  }
  // -||q - p||^2 = 2 q.p - ||p||^2 - ||q||^2; the last term is constant per
  // row and cancels inside the softmax.
  const Var dots = matmul(g.constant(queries), transpose(prototypes));
  const Var sq_norms = transpose(sum(mul(prototypes, prototypes), Axis::kCols));
  const Var logits = add_row(scale(dots, 2.0), scale(sq_norms, -1.0));
  const Var picked = mul(log_softmax(logits, Axis::kCols), g.constant(std::move(onehot)));
  return scale(sum(picked), -1.0 / static_cast<double>(m));
}

Var loss_clean(Var prototypes, const Eigen::MatrixXd& clean) {
  auto& g = prototypes.graph();
  const Var diff = squared_difference(prototypes, g.constant(clean));
  return scale(sum(diff), 1.0 / static_cast<double>(prototypes.rows()));
}

Var loss_bin(Var logits, const Eigen::VectorXd& flags) {
  auto& g = logits.graph();
  if (logits.cols() != 1 || logits.rows() != flags.size())
    throw ShapeError("binary loss: " + std::to_string(logits.rows()) + " logits vs " +
                     std::to_string(flags.size()) + " flags");
  if (flags.size() == 0) throw LossError("binary loss over no positions");
  const Var pos_term = mul(g.constant(flags), log_sigmoid(logits));
  const Var neg_term =
      mul(g.constant((1.0 - flags.array()).matrix()), log_sigmoid(scale(logits, -1.0)));
  return scale(sum(add(pos_term, neg_term)), -1.0 / static_cast<double>(flags.size()));
}

double loss_xent(const Eigen::MatrixXd& prototypes, const Eigen::MatrixXd& queries,
                 const std::vector<int>& labels) {
  Graph g;
  return loss_xent(g.constant(prototypes.transpose()), queries.transpose(), labels).scalar();
}

double loss_clean(const Eigen::MatrixXd& prototypes, const Eigen::MatrixXd& clean) {
  Graph g;
  return loss_clean(g.constant(prototypes.transpose()), clean.transpose()).scalar();
}

double loss_bin(const Eigen::VectorXd& logits, const Eigen::VectorXd& flags) {
  Graph g;
  return loss_bin(g.constant(logits), flags).scalar();
}

Eigen::MatrixXd clean_means(const Episode& episode) {
  Eigen::MatrixXd out(episode.n_ways, episode.dimension());
  for (int c = 0; c < episode.n_ways; ++c) {
    const auto clean = episode.clean_support_matrix(c);
    if (clean.cols() == 0)
      throw LossError("class " + std::to_string(c) + " has no clean shot to anchor the clean loss");
    out.row(c) = clean.rowwise().mean().transpose();
  }
  return out;
}

double total_loss(const LossBreakdown& parts, const TranfsConfig& config) {
  return parts.xent + config.lambda_clean * parts.clean + config.lambda_bin * parts.bin;
}

LossBreakdown episode_loss(const TranfsModel& model, const Episode& episode) {
  Graph g;
  return breakdown(build_loss(g, model, episode, false));
}

LossBreakdown episode_loss_and_gradients(TranfsModel& model, const Episode& episode) {
  model.zero_grad();
  Graph g;
  const auto l = build_loss(g, model, episode, true);
  g.backward(l.total);
  return breakdown(l);
}

void MetaTrainConfig::validate() const {
  if (episodes < 0) throw ConfigError("meta-train: episodes must be >= 0");
  if (n_ways < 1 || k_shots < 1 || q_queries < 1)
    throw ConfigError("meta-train: episode shape needs N, K, Q >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("meta-train: learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("meta-train: weight_decay must be >= 0");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0))
    throw ConfigError("meta-train: decay_factor must lie in (0, 1]");
  if (decay_interval < 1) throw ConfigError("meta-train: decay_interval must be >= 1");
}

std::vector<TrainingLogEntry> meta_train(TranfsModel& model, const PoolSet& pools,
                                         const MetaTrainConfig& config, Rng& rng) {
  config.validate();
  model.config.validate();
  if (config.n_ways > model.config.max_ways)
    throw CapacityError("training episodes have more classes than the model holds");

  std::vector<double> weights;
  for (const auto& e : model.config.train_noise_mix) weights.push_back(e.probability);
  std::discrete_distribution<std::size_t> pick_noise(weights.begin(), weights.end());

  auto params = model.parameters();
  std::vector<ad::AdamState> states(params.size());
  std::vector<TrainingLogEntry> log;
  log.reserve(static_cast<std::size_t>(config.episodes));
  for (int e = 0; e < config.episodes; ++e) {
    const double lr =
        config.learning_rate * std::pow(config.decay_factor, static_cast<double>(e / config.decay_interval));
    const auto clean = sample_episode(pools, config.n_ways, config.k_shots, config.q_queries, rng);
    const auto& mix = model.config.train_noise_mix[pick_noise(rng)];
    const auto episode = apply(mix.spec, clean, pools, rng);
    const auto loss = episode_loss_and_gradients(model, episode);
    if (!std::isfinite(loss.total))
      throw NumericError("non-finite training loss at episode " + std::to_string(e));
    ad::adamw_step(params, states, {lr, config.weight_decay});

    std::ostringstream tag;
    tag << to_string(mix.spec.kind) << '@' << mix.spec.proportion;
    log.push_back({loss, lr, tag.str()});
  }
  return log;
}

AttentionDump export_attention(const TranfsModel& model, const Episode& episode) {
  const auto out = forward(model, episode);
  AttentionDump dump;
  dump.n_ways = episode.n_ways;
  dump.k_shots = episode.k_shots;
  for (int c = 0; c < episode.n_ways; ++c)
    for (int i = 0; i < episode.k_shots; ++i)
      dump.legend.push_back("S" + std::to_string(c) + "." + std::to_string(i));
  for (int c = 0; c < episode.n_ways; ++c) dump.legend.push_back("CLS" + std::to_string(c));
  for (const auto& s : episode.support) dump.noise_flags.push_back(s.noise_flag ? 1 : 0);
  for (std::size_t l = 0; l < out.attention.size(); ++l)
    for (std::size_t h = 0; h < out.attention[l].size(); ++h)
      dump.maps.push_back({static_cast<int>(l), static_cast<int>(h), out.attention[l][h]});
  return dump;
}

void write_attention_dump(const AttentionDump& dump, std::ostream& out) {
  char buf[64];
  out << "attention-dump 1\n";
  out << "ways " << dump.n_ways << " shots " << dump.k_shots << '\n';
  out << "legend";
  for (const auto& s : dump.legend) out << ' ' << s;
  out << "\nflags";
  for (const int f : dump.noise_flags) out << ' ' << f;
  out << '\n';
  for (const auto& m : dump.maps) {
    const auto& p = m.probabilities;
    out << "map " << m.layer << ' ' << m.head << ' ' << p.rows() << ' ' << p.cols() << '\n';
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.cols(); ++c) {
        const auto res = std::to_chars(buf, buf + sizeof(buf), p(r, c));
        if (c > 0) out << ' ';
        out << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
      }
      out << '\n';
    }
  }
  out << "end\n";
}

namespace {

std::vector<std::string> split_words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

template <typename T>
T parse_number(const std::string& s, int line_no) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw FormatError("attention dump line " + std::to_string(line_no) + ": bad number '" + s + "'");
  return v;
}

}  // namespace

AttentionDump parse_attention_dump(std::istream& in) {
  AttentionDump dump;
  int line_no = 0;
  std::string line;
  auto next = [&]() -> std::vector<std::string> {
    if (!std::getline(in, line))
      throw FormatError("attention dump: unexpected end after line " + std::to_string(line_no));
    ++line_no;
    return split_words(line);
  };
  auto fail = [&](const std::string& what) {
    throw FormatError("attention dump line " + std::to_string(line_no) + ": " + what);
  };

  auto w = next();
  if (w.size() != 2 || w[0] != "attention-dump" || w[1] != "1") fail("missing 'attention-dump 1' header");
  w = next();
  if (w.size() != 4 || w[0] != "ways" || w[2] != "shots") fail("expected 'ways N shots K'");
  dump.n_ways = parse_number<int>(w[1], line_no);
  dump.k_shots = parse_number<int>(w[3], line_no);
  const auto len = static_cast<std::size_t>(dump.n_ways * dump.k_shots + dump.n_ways);
  w = next();
  if (w.empty() || w[0] != "legend" || w.size() != len + 1) fail("legend length does not match the sequence");
  dump.legend.assign(w.begin() + 1, w.end());
  w = next();
  if (w.empty() || w[0] != "flags" || w.size() != len - static_cast<std::size_t>(dump.n_ways) + 1)
    fail("flags length does not match the support size");
  for (std::size_t i = 1; i < w.size(); ++i) dump.noise_flags.push_back(parse_number<int>(w[i], line_no));

  while (true) {
    w = next();
    if (w.size() == 1 && w[0] == "end") break;
    if (w.size() != 5 || w[0] != "map") fail("expected 'map layer head rows cols' or 'end'");
    AttentionMap m;
    m.layer = parse_number<int>(w[1], line_no);
    m.head = parse_number<int>(w[2], line_no);
    const auto rows = parse_number<Eigen::Index>(w[3], line_no);
    const auto cols = parse_number<Eigen::Index>(w[4], line_no);
    if (rows != static_cast<Eigen::Index>(len) || cols != rows) fail("map is not sequence-square");
    m.probabilities.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      w = next();
      if (static_cast<Eigen::Index>(w.size()) != cols) fail("row has the wrong number of values");
      for (Eigen::Index c = 0; c < cols; ++c)
        m.probabilities(r, c) = parse_number<double>(w[static_cast<std::size_t>(c)], line_no);
    }
    dump.maps.push_back(std::move(m));
  }
  return dump;
}

std::pair<double, double> cls_attention_to_own_shots(const AttentionDump& dump) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (dump.maps.empty()) return {nan, nan};
  int last = 0;
  for (const auto& m : dump.maps) last = std::max(last, m.layer);
  const int nk = dump.n_ways * dump.k_shots;
  double clean_sum = 0.0;
  double noisy_sum = 0.0;
  long clean_n = 0;
  long noisy_n = 0;
  for (const auto& m : dump.maps) {
    if (m.layer != last) continue;
    for (int c = 0; c < dump.n_ways; ++c) {
      for (int i = 0; i < dump.k_shots; ++i) {
        const int slot = c * dump.k_shots + i;
        const double a = m.probabilities(nk + c, slot);
        if (dump.noise_flags[static_cast<std::size_t>(slot)] != 0) {
          noisy_sum += a;
          ++noisy_n;
        } else {
          clean_sum += a;
          ++clean_n;
        }
      }
    }
  }
  return {clean_n > 0 ? clean_sum / static_cast<double>(clean_n) : nan,
          noisy_n > 0 ? noisy_sum / static_cast<double>(noisy_n) : nan};
}

namespace {

constexpr char kMagic[8] = {'N', 'F', 'S', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

void put_f64(std::ostream& out, double v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64(out, bits);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint is truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double get_f64(std::istream& in) {
  const auto bits = get_u64(in);
  double v = 0.0;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::string get_string(std::istream& in, std::uint64_t limit = 1u << 26) {
  const auto n = get_u64(in);
  if (n > limit) throw FormatError("checkpoint string length is implausible");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw FormatError("checkpoint is truncated");
  return s;
}

nlohmann::json config_to_json(const TranfsConfig& c) {
  nlohmann::json mix = nlohmann::json::array();
  for (const auto& e : c.train_noise_mix)
    mix.push_back({{"kind", to_string(e.spec.kind)},
                   {"proportion", e.spec.proportion},
                   {"probability", e.probability}});
  return {{"num_layers", c.num_layers},     {"num_heads", c.num_heads},
          {"model_dim", c.model_dim},       {"input_dim", c.input_dim},
          {"max_ways", c.max_ways},         {"cls_mode", to_string(c.cls_mode)},
          {"pos_mode", to_string(c.pos_mode)}, {"lambda_clean", c.lambda_clean},
          {"lambda_bin", c.lambda_bin},     {"train_noise_mix", mix}};
}

TranfsConfig config_from_json(const nlohmann::json& j) {
  TranfsConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.max_ways = j.at("max_ways").get<int>();
  c.cls_mode = parse_cls_mode(j.at("cls_mode").get<std::string>());
  c.pos_mode = parse_pos_mode(j.at("pos_mode").get<std::string>());
  c.lambda_clean = j.at("lambda_clean").get<double>();
  c.lambda_bin = j.at("lambda_bin").get<double>();
  c.train_noise_mix.clear();
  for (const auto& e : j.at("train_noise_mix")) {
    NoiseMixEntry entry;
    entry.spec.kind = parse_noise_kind(e.at("kind").get<std::string>());
    entry.spec.proportion = e.at("proportion").get<double>();
    entry.probability = e.at("probability").get<double>();
    c.train_noise_mix.push_back(entry);
  }
  return c;
}

}  // namespace

void save_checkpoint(const TranfsModel& model, const std::filesystem::path& path, const Rng* rng) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  put_u64(out, kCheckpointVersion);
  put_string(out, config_to_json(model.config).dump());
  const auto params = model.parameters();
  put_u64(out, params.size());
  for (const auto* p : params) {
    put_string(out, p->name);
    put_u64(out, static_cast<std::uint64_t>(p->value.rows()));
    put_u64(out, static_cast<std::uint64_t>(p->value.cols()));
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) put_f64(out, p->value(r, c));
  }
  std::string rng_text;
  if (rng != nullptr) {
    std::ostringstream os;
    os << *rng;
    rng_text = os.str();
  }
  put_string(out, rng_text);
  if (!out) throw FileError("write failed for " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  const auto version = get_u64(in);
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));

  TranfsConfig config;
  try {
    config = config_from_json(nlohmann::json::parse(get_string(in)));
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad config record: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": bad config record: " + e.what());
  }

  LoadedCheckpoint ck;
  Rng scratch(0);
  ck.model = TranfsModel(config, scratch);
  auto params = ck.model.parameters();
  const auto count = get_u64(in);
  if (count != params.size())
    throw FormatError(path.string() + ": expected " + std::to_string(params.size()) +
                      " parameters, found " + std::to_string(count));
  for (auto* p : params) {
    const auto name = get_string(in, 1024);
    const auto rows = get_u64(in);
    const auto cols = get_u64(in);
    if (name != p->name || rows != static_cast<std::uint64_t>(p->value.rows()) ||
        cols != static_cast<std::uint64_t>(p->value.cols()))
      throw FormatError(path.string() + ": parameter '" + name + "' does not match the config");
    for (Eigen::Index r = 0; r < p->value.rows(); ++r)
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) p->value(r, c) = get_f64(in);
  }
  const auto rng_text = get_string(in);
  if (!rng_text.empty()) {
    std::istringstream is(rng_text);
    Rng r;
    if (!(is >> r)) throw FormatError(path.string() + ": unreadable RNG state");
    ck.rng = r;
  }
  return ck;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney U with mid-ranks for ties.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  std::size_t neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] != 0) {
        rank_sum += mid;
        ++pos;
      } else {
        ++neg;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

}  // namespace noisyfs
