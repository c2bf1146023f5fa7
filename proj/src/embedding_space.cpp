#include "noisyfs/embedding_space.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace noisyfs {

void SyntheticWorldConfig::validate() const {
  if (dimension < 1) throw ConfigError("synthetic world: dimension must be >= 1");
  if (num_classes < 1) throw ConfigError("synthetic world: num_classes must be >= 1");
  if (!(class_mean_radius > 0.0) || !std::isfinite(class_mean_radius))
    throw ConfigError("synthetic world: class_mean_radius must be > 0");
  if (!(within_class_sigma > 0.0) || !std::isfinite(within_class_sigma))
    throw ConfigError("synthetic world: within_class_sigma must be > 0");
  if (samples_per_class < 1) throw ConfigError("synthetic world: samples_per_class must be >= 1");
}

Eigen::MatrixXd Episode::support_matrix(int label) const {
  Eigen::MatrixXd shots(dimension(), k_shots);
  for (int i = 0; i < k_shots; ++i) shots.col(i) = shot(label, i).embedding;
  return shots;
}

Eigen::MatrixXd Episode::clean_support_matrix(int label) const {
  Eigen::MatrixXd shots(dimension(), k_shots - noisy_count(label));
  Eigen::Index j = 0;
  for (int i = 0; i < k_shots; ++i)
    if (!shot(label, i).noise_flag) shots.col(j++) = shot(label, i).embedding;
  return shots;
}

Eigen::MatrixXd Episode::support_rows() const {
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(support.size()), dimension());
  for (std::size_t s = 0; s < support.size(); ++s)
    rows.row(static_cast<Eigen::Index>(s)) = support[s].embedding.transpose();
  return rows;
}

int Episode::noisy_count(int label) const {
  int count = 0;
  for (int i = 0; i < k_shots; ++i) count += shot(label, i).noise_flag ? 1 : 0;
  return count;
}

PoolSet generate_synthetic_world(const SyntheticWorldConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto dim = static_cast<Eigen::Index>(config.dimension);

  PoolSet pools;
  pools.reserve(static_cast<std::size_t>(config.num_classes));
  for (int c = 0; c < config.num_classes; ++c) {
    Eigen::VectorXd mean(dim);
    do {
      for (Eigen::Index d = 0; d < dim; ++d) mean(d) = normal(rng);
    } while (mean.norm() == 0.0);
    mean *= config.class_mean_radius / mean.norm();

    ClassPool pool;
    pool.class_id = config.first_class_id + c;
    pool.embeddings.resize(dim, config.samples_per_class);
    for (int s = 0; s < config.samples_per_class; ++s)
      for (Eigen::Index d = 0; d < dim; ++d)
        pool.embeddings(d, s) = mean(d) + config.within_class_sigma * normal(rng);
    pools.push_back(std::move(pool));
  }
  return pools;
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

}  // namespace

PoolSet parse_embeddings(std::istream& in, const std::string& source_name) {
  std::map<int, std::size_t> index_of;
  std::vector<int> order;
  std::vector<std::vector<double>> values;  // flat per class
  Eigen::Index dim = -1;

  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw FormatError(source_name + ":" + std::to_string(line_no) + ": " + what);
  };

  while (std::getline(in, line)) {
    ++line_no;
    const auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;

    std::vector<std::string_view> fields;
    std::size_t pos = 0;
    while (pos < body.size()) {
      const auto start = body.find_first_not_of(" \t", pos);
      if (start == std::string_view::npos) break;
      auto end = body.find_first_of(" \t", start);
      if (end == std::string_view::npos) end = body.size();
      fields.push_back(body.substr(start, end - start));
      pos = end;
    }
    if (fields.size() < 2) fail("record needs a class id and at least one value");

    int class_id = 0;
    {
      const auto f = fields[0];
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), class_id);
      if (ec != std::errc() || ptr != f.data() + f.size() || class_id < 0)
        fail("bad class id '" + std::string(f) + "'");
    }

    const auto record_dim = static_cast<Eigen::Index>(fields.size() - 1);
    if (dim < 0) {
      dim = record_dim;
    } else if (record_dim != dim) {
      fail("dimension mismatch: expected " + std::to_string(dim) + " values, got " +
           std::to_string(record_dim));
    }

    auto [it, inserted] = index_of.try_emplace(class_id, order.size());
    if (inserted) {
      order.push_back(class_id);
      values.emplace_back();
    }
    auto& flat = values[it->second];
    for (std::size_t k = 1; k < fields.size(); ++k) {
      const auto f = fields[k];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(v))
        fail("unreadable value '" + std::string(f) + "'");
      flat.push_back(v);
    }
  }
  if (order.empty()) throw FormatError(source_name + ": no embedding records");

  PoolSet pools;
  pools.reserve(order.size());
  for (std::size_t c = 0; c < order.size(); ++c) {
    ClassPool pool;
    pool.class_id = order[c];
    const auto n = static_cast<Eigen::Index>(values[c].size()) / dim;
    pool.embeddings = Eigen::Map<const Eigen::MatrixXd>(values[c].data(), dim, n);
    pools.push_back(std::move(pool));
  }
  return pools;
}

PoolSet load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot open embeddings file " + path.string());
  return parse_embeddings(in, path.string());
}

void write_embeddings(const PoolSet& pools, std::ostream& out) {
  char buf[64];
  for (const auto& pool : pools) {
    for (Eigen::Index s = 0; s < pool.size(); ++s) {
      out << pool.class_id;
      for (Eigen::Index d = 0; d < pool.dimension(); ++d) {
        const auto res = std::to_chars(buf, buf + sizeof(buf), pool.embeddings(d, s));
        out << ' ' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
      }
      out << '\n';
    }
  }
}

void save_embeddings(const PoolSet& pools, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write embeddings file " + path.string());
  out << "# class_id v_1 ... v_D\n";
  write_embeddings(pools, out);
  if (!out) throw FileError("write failed for " + path.string());
}

Episode sample_episode(const PoolSet& pools, int n_ways, int k_shots, int q_queries, Rng& rng) {
  if (n_ways < 1 || k_shots < 1 || q_queries < 0)
    throw SamplingError("episode shape must have N >= 1, K >= 1, Q >= 0");
  if (pools.size() < static_cast<std::size_t>(n_ways))
    throw SamplingError("need " + std::to_string(n_ways) + " pools, have " +
                        std::to_string(pools.size()));
  const Eigen::Index dim = pools.front().dimension();

  std::vector<std::size_t> pool_order(pools.size());
  std::iota(pool_order.begin(), pool_order.end(), std::size_t{0});
  std::shuffle(pool_order.begin(), pool_order.end(), rng);
  pool_order.resize(static_cast<std::size_t>(n_ways));

  Episode ep;
  ep.n_ways = n_ways;
  ep.k_shots = k_shots;
  ep.q_queries = q_queries;
  ep.source_pools = pool_order;
  ep.support.resize(static_cast<std::size_t>(n_ways * k_shots));
  ep.queries.resize(dim, n_ways * q_queries);
  ep.query_labels.resize(static_cast<std::size_t>(n_ways * q_queries));
  ep.used_samples.resize(static_cast<std::size_t>(n_ways));

  const auto need = static_cast<Eigen::Index>(k_shots + q_queries);
  for (int c = 0; c < n_ways; ++c) {
    const auto& pool = pools[pool_order[static_cast<std::size_t>(c)]];
    if (pool.dimension() != dim) throw SamplingError("pools disagree on dimension");
    if (pool.size() < need)
      throw SamplingError("pool " + std::to_string(pool.class_id) + " has " +
                          std::to_string(pool.size()) + " samples, need " + std::to_string(need));

    // Partial Fisher-Yates: first `need` entries are a uniform draw without replacement.
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(pool.size()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    for (Eigen::Index i = 0; i < need; ++i) {
      std::uniform_int_distribution<Eigen::Index> pick(i, pool.size() - 1);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
    }
    idx.resize(static_cast<std::size_t>(need));

    for (int i = 0; i < k_shots; ++i) {
      auto& s = ep.shot(c, i);
      s.embedding = pool.embeddings.col(idx[static_cast<std::size_t>(i)]);
      s.assigned_label = c;
      s.noise_flag = false;
      s.true_source = {SampleSource::Kind::kEpisodeClass, c};
    }
    for (int q = 0; q < q_queries; ++q) {
      const auto col = c * q_queries + q;
      ep.queries.col(col) = pool.embeddings.col(idx[static_cast<std::size_t>(k_shots + q)]);
      ep.query_labels[static_cast<std::size_t>(col)] = c;
    }
    ep.used_samples[static_cast<std::size_t>(c)] = std::move(idx);
  }
  return ep;
}

}  // namespace noisyfs
