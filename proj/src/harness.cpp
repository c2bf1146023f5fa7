#include "noisyfs/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace noisyfs {

namespace pt = boost::property_tree;
using nlohmann::json;

PoolSet SourceConfig::load() const {
  switch (kind) {
    case Kind::kNone: return {};
    case Kind::kSynthetic: return generate_synthetic_world(synthetic);
    case Kind::kFile: return load_embeddings(path);
  }
  return {};
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, sep);) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Typed access to an INI tree that remembers which keys were read, so
// leftovers can be reported as typos.
class IniReader {
 public:
  IniReader(const pt::ptree& tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  bool has_section(const std::string& section) const {
    return tree_.get_child_optional(section).has_value();
  }

  std::optional<std::string> raw(const std::string& section, const std::string& key) {
    seen_.insert(section + "." + key);
    const auto child = tree_.get_child_optional(pt::ptree::path_type(section + "." + key, '.'));
    if (!child) return std::nullopt;
    return trim(child->data());
  }

  std::string text(const std::string& section, const std::string& key, const std::string& fallback) {
    const auto v = raw(section, key);
    return v && !v->empty() ? *v : fallback;
  }

  template <typename T>
  T number(const std::string& section, const std::string& key, T fallback) {
    const auto v = raw(section, key);
    if (!v || v->empty()) return fallback;
    T out{};
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size())
      fail(section, key, "expected a number, got '" + *v + "'");
    return out;
  }

  template <typename T>
  std::optional<T> optional_number(const std::string& section, const std::string& key) {
    const auto v = raw(section, key);
    if (!v || v->empty()) return std::nullopt;
    return number<T>(section, key, T{});
  }

  [[noreturn]] void fail(const std::string& section, const std::string& key, const std::string& what) const {
    throw ConfigError(name_ + ": [" + section + "] " + key + ": " + what);
  }

  void reject_unknown() const {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty())
        throw ConfigError(name_ + ": key '" + section + "' outside any section");
      for (const auto& [key, value] : body)
        if (seen_.count(section + "." + key) == 0)
          throw ConfigError(name_ + ": [" + section + "] unknown key '" + key + "'");
    }
  }

 private:
  const pt::ptree& tree_;
  std::string name_;
  std::set<std::string> seen_;
};

SourceConfig read_source(IniReader& ini, const std::string& section, SourceConfig fallback) {
  SourceConfig s = std::move(fallback);
  const auto type = ini.text(section, "type", "");
  if (type == "synthetic") s.kind = SourceConfig::Kind::kSynthetic;
  else if (type == "file") s.kind = SourceConfig::Kind::kFile;
  else if (type == "none") s.kind = SourceConfig::Kind::kNone;
  else if (!type.empty()) ini.fail(section, "type", "expected synthetic, file or none, got '" + type + "'");

  auto& w = s.synthetic;
  w.dimension = ini.number(section, "dimension", w.dimension);
  w.num_classes = ini.number(section, "num_classes", w.num_classes);
  w.class_mean_radius = ini.number(section, "class_mean_radius", w.class_mean_radius);
  w.within_class_sigma = ini.number(section, "within_class_sigma", w.within_class_sigma);
  w.samples_per_class = ini.number(section, "samples_per_class", w.samples_per_class);
  w.seed = ini.number(section, "seed", w.seed);
  w.first_class_id = ini.number(section, "first_class_id", w.first_class_id);
  s.path = ini.text(section, "path", s.path.string());

  if (s.kind == SourceConfig::Kind::kFile && s.path.empty())
    ini.fail(section, "path", "required when type = file");
  if (s.kind == SourceConfig::Kind::kSynthetic) {
    try {
      w.validate();
    } catch (const ConfigError& e) {
      ini.fail(section, "type", e.what());
    }
  }
  return s;
}

NoiseSpec parse_noise_item(const std::string& item) {
  NoiseSpec spec;
  const auto colon = item.find(':');
  spec.kind = parse_noise_kind(trim(item.substr(0, colon)));
  if (colon != std::string::npos) {
    const auto num = trim(item.substr(colon + 1));
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), spec.proportion);
    if (ec != std::errc() || ptr != num.data() + num.size())
      throw ConfigError("bad noise proportion in '" + item + "'");
  } else if (spec.kind != NoiseKind::kNone) {
    throw ConfigError("noise spec '" + item + "' needs a proportion, e.g. " + item + ":0.4");
  }
  if (spec.kind == NoiseKind::kNone) spec.proportion = 0.0;
  return spec;
}

// "symmetric:0.4@0.5": kind, proportion, optional probability.
std::vector<NoiseMixEntry> parse_noise_mix(const std::string& text) {
  std::vector<NoiseMixEntry> mix;
  bool any_explicit = false;
  for (const auto& item : split_list(text)) {
    NoiseMixEntry e;
    const auto at = item.find('@');
    e.spec = parse_noise_item(item.substr(0, at));
    if (at != std::string::npos) {
      const auto num = trim(item.substr(at + 1));
      const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), e.probability);
      if (ec != std::errc() || ptr != num.data() + num.size())
        throw ConfigError("bad probability in '" + item + "'");
      any_explicit = true;
    }
    mix.push_back(e);
  }
  if (!any_explicit)
    for (auto& e : mix) e.probability = 1.0 / static_cast<double>(mix.size());
  return mix;
}

std::string noise_mix_text(const std::vector<NoiseMixEntry>& mix) {
  std::ostringstream os;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    if (i > 0) os << ", ";
    os << to_string(mix[i].spec.kind) << ':' << mix[i].spec.proportion << '@' << mix[i].probability;
  }
  return os.str();
}

json source_json(const SourceConfig& s) {
  switch (s.kind) {
    case SourceConfig::Kind::kNone: return {{"type", "none"}};
    case SourceConfig::Kind::kFile: return {{"type", "file"}, {"path", s.path.string()}};
    case SourceConfig::Kind::kSynthetic: {
      const auto& w = s.synthetic;
      return {{"type", "synthetic"},
              {"dimension", w.dimension},
              {"num_classes", w.num_classes},
              {"class_mean_radius", w.class_mean_radius},
              {"within_class_sigma", w.within_class_sigma},
              {"samples_per_class", w.samples_per_class},
              {"seed", w.seed},
              {"first_class_id", w.first_class_id}};
    }
  }
  return {};
}

// Method slugs resolved once per run.
struct Method {
  enum class Kind { kAggregator, kOracle, kKnn, kMatching, kLinear, kTranfs };
  std::string slug;
  Kind kind = Kind::kAggregator;
  Aggregator aggregator;
  int k = 1;
};

Method resolve_method(const std::string& slug, const ExperimentConfig& c) {
  Method m;
  m.slug = slug;
  if (slug == "mean") {
    m.aggregator = mean_aggregator();
  } else if (slug == "median") {
    m.aggregator = median_aggregator(c.median);
  } else if (slug == "weighted-sq") {
    m.aggregator = weighted_aggregator({SimilarityMetric::kSqEuclidean, c.temperature_sq});
  } else if (slug == "weighted-abs") {
    m.aggregator = weighted_aggregator({SimilarityMetric::kAbsolute, c.temperature_abs});
  } else if (slug == "weighted-cos") {
    m.aggregator = weighted_aggregator({SimilarityMetric::kCosine, c.temperature_cos});
  } else if (slug == "oracle") {
    m.kind = Method::Kind::kOracle;
    m.aggregator = mean_aggregator();
  } else if (slug.rfind("knn", 0) == 0) {
    m.kind = Method::Kind::kKnn;
    const auto digits = slug.substr(3);
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), m.k);
    if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size() || m.k < 1)
      throw ConfigError("method '" + slug + "': expected knn<k> with k >= 1");
  } else if (slug == "matching") {
    m.kind = Method::Kind::kMatching;
  } else if (slug == "linear") {
    m.kind = Method::Kind::kLinear;
  } else if (slug == "tranfs") {
    m.kind = Method::Kind::kTranfs;
  } else {
    throw ConfigError("unknown method '" + slug + "'");
  }
  return m;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double evaluate(const Method& m, const Episode& ep, const TranfsModel* tranfs, const LinearClassifierConfig& linear,
                Rng& rng) {
  const auto nq = ep.queries.cols();
  std::vector<int> preds(static_cast<std::size_t>(nq));
  switch (m.kind) {
    case Method::Kind::kAggregator: return classify_episode(ep, m.aggregator, false).episode_accuracy;
    case Method::Kind::kOracle: return classify_episode(ep, m.aggregator, true).episode_accuracy;
    case Method::Kind::kKnn:
      for (Eigen::Index q = 0; q < nq; ++q)
        preds[static_cast<std::size_t>(q)] = knn_classify(ep.queries.col(q), ep, m.k, rng);
      break;
    case Method::Kind::kMatching:
      for (Eigen::Index q = 0; q < nq; ++q)
        preds[static_cast<std::size_t>(q)] = matching_classify(ep.queries.col(q), ep);
      break;
    case Method::Kind::kLinear: return linear_classify(ep, linear).episode_accuracy;
    case Method::Kind::kTranfs: {
      const auto protos = tranfs_prototypes(*tranfs, ep);
      for (Eigen::Index q = 0; q < nq; ++q)
        preds[static_cast<std::size_t>(q)] = nearest_prototype(ep.queries.col(q), protos);
      break;
    }
  }
  return score_predictions(ep, preds, m.slug).episode_accuracy;
}

// Runs body(i) for i in [0, n) on `threads` workers; rethrows the first error.
template <typename F>
void parallel_for(int n, int threads, F&& body) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const int workers = std::min(threads, n);
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

}  // namespace

void ExperimentConfig::validate() const {
  if (source.kind == SourceConfig::Kind::kNone) throw ConfigError("[source] type must be synthetic or file");
  if (n_ways < 1 || k_shots < 1 || q_queries < 1)
    throw ConfigError("[episode] n_ways, k_shots and q_queries must be >= 1");
  if (num_episodes < 1) throw ConfigError("[episode] num_episodes must be >= 1");
  if (methods.empty()) throw ConfigError("[methods] list must name at least one method");
  if (eval_noise.empty()) throw ConfigError("[noise] specs must name at least one noise setting");
  if (threads < 1) throw ConfigError("[run] threads must be >= 1");
  for (const auto& s : eval_noise) {
    if (s.kind == NoiseKind::kOutlier && outliers.kind == SourceConfig::Kind::kNone)
      throw ConfigError("[noise] outlier noise needs an [outliers] source");
    try {
      noisy_shots_per_class(s.proportion, k_shots);
    } catch (const NoiseError& e) {
      throw ConfigError(std::string("[noise] ") + e.what());
    }
  }
  median.validate();
  for (const double t : {temperature_sq, temperature_abs, temperature_cos})
    if (!(t > 0.0)) throw ConfigError("[weighted] temperatures must be > 0");
  if (linear.steps < 0) throw ConfigError("[linear] steps must be >= 0");
  for (const auto& m : methods) resolve_method(m, *this);
  if (uses_tranfs()) {
    tranfs.model.validate();
    tranfs.train.validate();
    if (!tranfs.checkpoint && tranfs.train_source.kind == SourceConfig::Kind::kNone)
      throw ConfigError("[tranfs_train_source] is required to train tranfs");
  }
}

bool ExperimentConfig::uses_tranfs() const {
  return std::find(methods.begin(), methods.end(), "tranfs") != methods.end();
}

json ExperimentConfig::echo() const {
  json noise = json::array();
  for (const auto& s : eval_noise)
    noise.push_back({{"kind", to_string(s.kind)}, {"proportion", s.proportion}});
  json j = {
      {"source", source_json(source)},
      {"outliers", source_json(outliers)},
      {"episode",
       {{"n_ways", n_ways}, {"k_shots", k_shots}, {"q_queries", q_queries}, {"num_episodes", num_episodes},
        {"seed", seed}}},
      {"noise", noise},
      {"methods", methods},
      {"median",
       {{"epsilon", median.epsilon ? json(*median.epsilon) : json(nullptr)},
        {"max_iterations", median.max_iterations},
        {"tolerance", median.tolerance},
        {"max_halvings", median.max_halvings},
        {"max_extensions", median.max_extensions}}},
      {"weighted",
       {{"temperature_sq", temperature_sq}, {"temperature_abs", temperature_abs},
        {"temperature_cos", temperature_cos}}},
      {"linear",
       {{"steps", linear.steps}, {"learning_rate", linear.learning_rate}, {"weight_decay", linear.weight_decay}}},
  };
  if (uses_tranfs()) {
    const auto& m = tranfs.model;
    const auto& t = tranfs.train;
    j["tranfs"] = {{"checkpoint", tranfs.checkpoint ? json(tranfs.checkpoint->string()) : json(nullptr)},
                   {"num_layers", m.num_layers},
                   {"num_heads", m.num_heads},
                   {"model_dim", m.model_dim},
                   {"max_ways", m.max_ways},
                   {"cls_mode", to_string(m.cls_mode)},
                   {"pos_mode", to_string(m.pos_mode)},
                   {"lambda_clean", m.lambda_clean},
                   {"lambda_bin", m.lambda_bin},
                   {"train_noise_mix", noise_mix_text(m.train_noise_mix)},
                   {"episodes", t.episodes},
                   {"learning_rate", t.learning_rate},
                   {"weight_decay", t.weight_decay},
                   {"decay_factor", t.decay_factor},
                   {"decay_interval", t.decay_interval},
                   {"seed", tranfs.seed},
                   {"train_source", source_json(tranfs.train_source)}};
  }
  return j;
}

ExperimentConfig parse_config(std::istream& in, const std::string& source_name) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(source_name + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  IniReader ini(tree, source_name);
  ExperimentConfig c;

  if (!ini.has_section("source")) throw ConfigError(source_name + ": missing [source] section");
  SourceConfig src;
  src.kind = SourceConfig::Kind::kSynthetic;
  c.source = read_source(ini, "source", src);

  SourceConfig out_default;
  out_default.synthetic = c.source.synthetic;
  out_default.synthetic.seed = c.source.synthetic.seed + 100;
  out_default.synthetic.first_class_id = 1000;
  c.outliers = read_source(ini, "outliers", out_default);

  c.n_ways = ini.number("episode", "n_ways", c.n_ways);
  c.k_shots = ini.number("episode", "k_shots", c.k_shots);
  c.q_queries = ini.number("episode", "q_queries", c.q_queries);
  c.num_episodes = ini.number("episode", "num_episodes", c.num_episodes);
  c.seed = ini.number("episode", "seed", c.seed);

  try {
    for (const auto& item : split_list(ini.text("noise", "specs", "none")))
      c.eval_noise.push_back(parse_noise_item(item));
  } catch (const ConfigError& e) {
    ini.fail("noise", "specs", e.what());
  }
  c.methods = split_list(ini.text("methods", "list", ""));

  c.median.epsilon = ini.optional_number<double>("median", "epsilon");
  c.median.max_iterations = ini.number("median", "max_iterations", c.median.max_iterations);
  c.median.tolerance = ini.number("median", "tolerance", c.median.tolerance);
  c.median.max_halvings = ini.number("median", "max_halvings", c.median.max_halvings);
  c.median.max_extensions = ini.number("median", "max_extensions", c.median.max_extensions);

  c.temperature_sq = ini.number("weighted", "temperature_sq", c.temperature_sq);
  c.temperature_abs = ini.number("weighted", "temperature_abs", c.temperature_abs);
  c.temperature_cos = ini.number("weighted", "temperature_cos", c.temperature_cos);

  c.linear.steps = ini.number("linear", "steps", c.linear.steps);
  c.linear.learning_rate = ini.number("linear", "learning_rate", c.linear.learning_rate);
  c.linear.weight_decay = ini.number("linear", "weight_decay", c.linear.weight_decay);

  auto& t = c.tranfs;
  if (const auto ck = ini.raw("tranfs", "checkpoint"); ck && !ck->empty()) t.checkpoint = *ck;
  t.model.num_layers = ini.number("tranfs", "num_layers", t.model.num_layers);
  t.model.num_heads = ini.number("tranfs", "num_heads", t.model.num_heads);
  t.model.model_dim = ini.number("tranfs", "model_dim", t.model.model_dim);
  t.model.max_ways = ini.number("tranfs", "max_ways", std::max(t.model.max_ways, c.n_ways));
  t.model.input_dim = c.source.synthetic.dimension;
  try {
    t.model.cls_mode = parse_cls_mode(ini.text("tranfs", "cls_mode", to_string(t.model.cls_mode)));
    t.model.pos_mode = parse_pos_mode(ini.text("tranfs", "pos_mode", to_string(t.model.pos_mode)));
  } catch (const ConfigError& e) {
    ini.fail("tranfs", "cls_mode/pos_mode", e.what());
  }
  t.model.lambda_clean = ini.number("tranfs", "lambda_clean", t.model.lambda_clean);
  t.model.lambda_bin = ini.number("tranfs", "lambda_bin", t.model.lambda_bin);
  if (const auto mix = ini.raw("tranfs", "train_noise_mix"); mix && !mix->empty()) {
    try {
      t.model.train_noise_mix = parse_noise_mix(*mix);
    } catch (const ConfigError& e) {
      ini.fail("tranfs", "train_noise_mix", e.what());
    }
  }
  t.train.episodes = ini.number("tranfs", "episodes", t.train.episodes);
  t.train.learning_rate = ini.number("tranfs", "learning_rate", t.train.learning_rate);
  t.train.weight_decay = ini.number("tranfs", "weight_decay", t.train.weight_decay);
  t.train.decay_factor = ini.number("tranfs", "decay_factor", t.train.decay_factor);
  t.train.decay_interval = ini.number("tranfs", "decay_interval", t.train.decay_interval);
  t.train.n_ways = c.n_ways;
  t.train.k_shots = c.k_shots;
  t.train.q_queries = c.q_queries;
  t.seed = ini.number("tranfs", "seed", t.seed);

  SourceConfig train_default;
  train_default.kind = SourceConfig::Kind::kSynthetic;
  train_default.synthetic = c.source.synthetic;
  train_default.synthetic.num_classes = 64;
  train_default.synthetic.seed = c.source.synthetic.seed + 1000;
  c.tranfs.train_source = read_source(ini, "tranfs_train_source", train_default);

  c.threads = ini.number("run", "threads", c.threads);
  c.out_dir = ini.text("run", "out", c.out_dir.string());

  ini.reject_unknown();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, path.string());
}

const Cell& RunReport::cell(const std::string& method, NoiseKind kind, double proportion) const {
  for (const auto& c : cells)
    if (c.method == method && c.noise_kind == kind && std::abs(c.noise_proportion - proportion) < 1e-12)
      return c;
  throw ContractError("no cell for " + method + " / " + to_string(kind));
}

std::pair<double, double> mean_and_ci(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("mean_and_ci of an empty sample");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (const double v : values) mean += v;
  mean /= n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (const double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, 1.96 * sd / std::sqrt(n)};
}

TranfsModel obtain_tranfs(const ExperimentConfig& config) {
  const auto& t = config.tranfs;
  if (t.checkpoint) return load_checkpoint(*t.checkpoint).model;
  const auto pools = t.train_source.load();
  if (pools.empty()) throw ConfigError("[tranfs_train_source] yields no classes");
  auto model_cfg = t.model;
  model_cfg.input_dim = static_cast<int>(pools.front().dimension());
  Rng rng(t.seed);
  TranfsModel model(model_cfg, rng);
  meta_train(model, pools, t.train, rng);
  return model;
}

PreparedExperiment prepare(const ExperimentConfig& config, std::shared_ptr<const PoolSet> pools,
                           std::shared_ptr<const PoolSet> outlier_pool,
                           std::shared_ptr<const TranfsModel> tranfs) {
  config.validate();
  PreparedExperiment p{config, std::move(pools), std::move(outlier_pool), std::move(tranfs)};
  if (!p.pools || p.pools->empty()) throw ConfigError("[source] yields no classes");
  if (config.uses_tranfs()) {
    if (!p.tranfs) throw ContractError("tranfs method requested without a model");
    if (p.tranfs->config.input_dim != p.pools->front().dimension())
      throw ConfigError("tranfs model input_dim " + std::to_string(p.tranfs->config.input_dim) +
                        " does not match the embedding dimension " +
                        std::to_string(p.pools->front().dimension()));
  }
  return p;
}

PreparedExperiment prepare(const ExperimentConfig& config) {
  config.validate();
  auto pools = std::make_shared<const PoolSet>(config.source.load());
  std::shared_ptr<const PoolSet> outliers;
  if (config.outliers.kind != SourceConfig::Kind::kNone)
    outliers = std::make_shared<const PoolSet>(config.outliers.load());
  std::shared_ptr<const TranfsModel> model;
  if (config.uses_tranfs()) model = std::make_shared<const TranfsModel>(obtain_tranfs(config));
  return prepare(config, std::move(pools), std::move(outliers), std::move(model));
}

RunReport run(const PreparedExperiment& experiment) {
  const auto start = std::chrono::steady_clock::now();
  const auto& c = experiment.config;
  std::vector<Method> methods;
  for (const auto& slug : c.methods) methods.push_back(resolve_method(slug, c));

  RunReport report;
  report.config = c.echo();
  report.seed = c.seed;
  for (const auto& base_spec : c.eval_noise) {
    NoiseSpec spec = base_spec;
    if (spec.kind == NoiseKind::kOutlier) spec.outlier_pool = experiment.outlier_pool;
    const auto kind_code = static_cast<std::uint64_t>(spec.kind) + 1;

    std::vector<std::vector<double>> acc(methods.size(), std::vector<double>(static_cast<std::size_t>(c.num_episodes)));
    parallel_for(c.num_episodes, c.threads, [&](int e) {
      const auto idx = static_cast<std::uint64_t>(e);
      Rng episode_rng(derive_seed(c.seed, idx));
      const auto clean = sample_episode(*experiment.pools, c.n_ways, c.k_shots, c.q_queries, episode_rng);
      Rng noise_rng(derive_seed(c.seed, idx, kind_code));
      const auto episode = apply(spec, clean, *experiment.pools, noise_rng);
      for (std::size_t m = 0; m < methods.size(); ++m) {
        Rng method_rng(derive_seed(c.seed, idx, kind_code ^ fnv1a(methods[m].slug)));
        acc[m][static_cast<std::size_t>(e)] =
            evaluate(methods[m], episode, experiment.tranfs.get(), c.linear, method_rng);
      }
    });

    for (std::size_t m = 0; m < methods.size(); ++m) {
      Cell cell;
      cell.method = methods[m].slug;
      cell.noise_kind = spec.kind;
      cell.noise_proportion = spec.proportion;
      std::tie(cell.mean_accuracy, cell.ci_half_width) = mean_and_ci(acc[m]);
      cell.episodes = c.num_episodes;
      cell.per_episode = std::move(acc[m]);
      report.cells.push_back(std::move(cell));
    }
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

RunReport run(const ExperimentConfig& config) { return run(prepare(config)); }

json report_json(const RunReport& report) {
  json cells = json::array();
  for (const auto& c : report.cells)
    cells.push_back({{"method", c.method},
                     {"noise_kind", to_string(c.noise_kind)},
                     {"noise_proportion", c.noise_proportion},
                     {"mean_accuracy", c.mean_accuracy},
                     {"ci_half_width", c.ci_half_width},
                     {"episodes", c.episodes}});
  return {{"version", kVersion},
          {"seed", report.seed},
          {"config", report.config},
          {"cells", cells},
          {"timestamp", {{"utc", utc_now()}, {"wall_seconds", report.wall_seconds}}}};
}

void write_report_json(const RunReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write report " + path.string());
  out << report_json(report).dump(2) << '\n';
  if (!out) throw FileError("write failed for " + path.string());
}

void emit_plot_data(const std::vector<RunReport>& reports, std::ostream& out) {
  out << "method,noise_kind,noise_proportion,mean_acc,ci_half_width\n";
  for (const auto& r : reports)
    for (const auto& c : r.cells)
      out << c.method << ',' << to_string(c.noise_kind) << ',' << format_double(c.noise_proportion) << ','
          << format_double(c.mean_accuracy) << ',' << format_double(c.ci_half_width) << '\n';
}

void emit_plot_data(const RunReport& report, std::ostream& out) { emit_plot_data(std::vector{report}, out); }

std::vector<Cell> parse_plot_data(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "method,noise_kind,noise_proportion,mean_acc,ci_half_width")
    throw FormatError("plot data: missing header");
  std::vector<Cell> cells;
  int line_no = 1;
  auto num = [&](const std::string& s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw FormatError("plot data line " + std::to_string(line_no) + ": bad number '" + s + "'");
    return v;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string item; std::getline(ss, item, ',');) f.push_back(trim(item));
    if (f.size() != 5) throw FormatError("plot data line " + std::to_string(line_no) + ": expected 5 fields");
    Cell c;
    c.method = f[0];
    try {
      c.noise_kind = parse_noise_kind(f[1]);
    } catch (const ConfigError& e) {
      throw FormatError("plot data line " + std::to_string(line_no) + ": " + e.what());
    }
    c.noise_proportion = num(f[2]);
    c.mean_accuracy = num(f[3]);
    c.ci_half_width = num(f[4]);
    cells.push_back(std::move(c));
  }
  return cells;
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "temperature") return SweepAxis::kTemperature;
  if (name == "lambda_c" || name == "lambda_clean") return SweepAxis::kLambdaClean;
  if (name == "lambda_b" || name == "lambda_bin") return SweepAxis::kLambdaBin;
  if (name == "noise_proportion") return SweepAxis::kNoiseProportion;
  if (name == "layers") return SweepAxis::kLayers;
  throw ConfigError("unknown sweep axis '" + name + "'");
}

std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kTemperature: return "temperature";
    case SweepAxis::kLambdaClean: return "lambda_c";
    case SweepAxis::kLambdaBin: return "lambda_b";
    case SweepAxis::kNoiseProportion: return "noise_proportion";
    case SweepAxis::kLayers: return "layers";
  }
  return "unknown";
}

std::vector<RunReport> sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  base.validate();
  const bool has_weighted = std::any_of(base.methods.begin(), base.methods.end(),
                                        [](const std::string& m) { return m.rfind("weighted-", 0) == 0; });
  const bool retrains = axis == SweepAxis::kLambdaClean || axis == SweepAxis::kLambdaBin || axis == SweepAxis::kLayers;
  if (axis == SweepAxis::kTemperature && !has_weighted)
    throw ConfigError("sweep axis temperature needs a weighted-* method");
  if (retrains && !base.uses_tranfs())
    throw ConfigError("sweep axis " + to_string(axis) + " needs the tranfs method");
  if (retrains && base.tranfs.checkpoint)
    throw ConfigError("sweep axis " + to_string(axis) + " retrains tranfs; remove [tranfs] checkpoint");
  if (axis == SweepAxis::kNoiseProportion &&
      std::none_of(base.eval_noise.begin(), base.eval_noise.end(),
                   [](const NoiseSpec& s) { return s.kind != NoiseKind::kNone; }))
    throw ConfigError("sweep axis noise_proportion needs a noise kind other than none");

  auto pools = std::make_shared<const PoolSet>(base.source.load());
  std::shared_ptr<const PoolSet> outliers;
  if (base.outliers.kind != SourceConfig::Kind::kNone)
    outliers = std::make_shared<const PoolSet>(base.outliers.load());
  std::shared_ptr<const TranfsModel> shared_model;
  if (base.uses_tranfs() && !retrains) shared_model = std::make_shared<const TranfsModel>(obtain_tranfs(base));

  std::vector<RunReport> reports;
  for (const double v : values) {
    ExperimentConfig c = base;
    switch (axis) {
      case SweepAxis::kTemperature: c.temperature_sq = c.temperature_abs = c.temperature_cos = v; break;
      case SweepAxis::kLambdaClean: c.tranfs.model.lambda_clean = v; break;
      case SweepAxis::kLambdaBin: c.tranfs.model.lambda_bin = v; break;
      case SweepAxis::kLayers:
        if (v < 0 || v != std::floor(v)) throw ConfigError("layers sweep values must be whole numbers");
        c.tranfs.model.num_layers = static_cast<int>(v);
        break;
      case SweepAxis::kNoiseProportion:
        for (auto& s : c.eval_noise)
          if (s.kind != NoiseKind::kNone) s.proportion = v;
        break;
    }
    auto model = shared_model;
    if (retrains) {
      c.validate();
      model = std::make_shared<const TranfsModel>(obtain_tranfs(c));
    }
    auto report = run(prepare(c, pools, outliers, model));
    report.config["sweep"] = {{"axis", to_string(axis)}, {"value", v}};
    if (axis != SweepAxis::kNoiseProportion) {
      for (auto& cell : report.cells) {
        const bool affected = axis == SweepAxis::kTemperature ? cell.method.rfind("weighted-", 0) == 0
                                                              : cell.method == "tranfs";
        if (affected) cell.method += "@" + to_string(axis) + "=" + format_double(v);
      }
    }
    reports.push_back(std::move(report));
  }
  return reports;
}

}  // namespace noisyfs
