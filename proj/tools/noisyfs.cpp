// Command-line front end: run, sweep, train-tranfs, attn-dump, gen-synthetic.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "noisyfs/harness.hpp"

namespace fs = std::filesystem;
using namespace noisyfs;

namespace {

void print_table(const std::vector<RunReport>& reports) {
  std::cout << std::left << std::setw(34) << "method" << std::setw(12) << "noise" << std::setw(8) << "prop"
            << "accuracy\n";
  for (const auto& r : reports)
    for (const auto& c : r.cells)
      std::cout << std::left << std::setw(34) << c.method << std::setw(12) << to_string(c.noise_kind)
                << std::setw(8) << c.noise_proportion << std::fixed << std::setprecision(2)
                << 100.0 * c.mean_accuracy << " +- " << 100.0 * c.ci_half_width << '\n'
                << std::defaultfloat;
}

void write_csv(const std::vector<RunReport>& reports, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw FileError("cannot write " + path.string());
  emit_plot_data(reports, out);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw FileError("cannot create output directory " + dir.string() + ": " + ec.message());
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> values;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--values: '" + item + "' is not a number");
    }
  }
  return values;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-robust few-shot prototype aggregation experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;

  auto* run_cmd = app.add_subcommand("run", "Evaluate all configured methods and write report.json + plot_data.csv");
  run_cmd->add_option("--config", config_path, "INI config")->required();
  run_cmd->add_option("--seed", seed, "Override [episode] seed");
  run_cmd->add_option("--threads", threads, "Worker threads");
  run_cmd->add_option("--out", out, "Output directory (default [run] out)");

  std::string axis;
  std::string values;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run once per value of one axis");
  sweep_cmd->add_option("--config", config_path, "INI config")->required();
  sweep_cmd->add_option("--axis", axis, "temperature | lambda_c | lambda_b | noise_proportion | layers")->required();
  sweep_cmd->add_option("--values", values, "Comma-separated values")->required();
  sweep_cmd->add_option("--seed", seed, "Override [episode] seed");
  sweep_cmd->add_option("--threads", threads, "Worker threads");
  sweep_cmd->add_option("--out", out, "Output directory (default [run] out)");

  int episodes = -1;
  std::string log_path;
  auto* train_cmd = app.add_subcommand("train-tranfs", "Meta-train TraNFS and save a checkpoint");
  train_cmd->add_option("--config", config_path, "INI config")->required();
  train_cmd->add_option("--episodes", episodes, "Training episodes (default [tranfs] episodes)");
  train_cmd->add_option("--out", out, "Checkpoint path")->required();
  train_cmd->add_option("--log", log_path, "Write the per-episode training log as CSV");

  std::string checkpoint;
  int episode_index = 0;
  std::string noise_text;
  auto* attn_cmd = app.add_subcommand("attn-dump", "Write attention maps for one evaluation episode");
  attn_cmd->add_option("--checkpoint", checkpoint, "TraNFS checkpoint")->required();
  attn_cmd->add_option("--config", config_path, "INI config")->required();
  attn_cmd->add_option("--out", out, "Dump path")->required();
  attn_cmd->add_option("--episode", episode_index, "Episode index in the evaluation stream");
  attn_cmd->add_option("--noise", noise_text, "Noise spec, e.g. symmetric:0.4 (default: first [noise] spec)");

  std::string which = "source";
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write a configured synthetic world as an embeddings file");
  gen_cmd->add_option("--config", config_path, "INI config")->required();
  gen_cmd->add_option("--out", out, "Embeddings path")->required();
  gen_cmd->add_option("--which", which, "source | outliers | train")
      ->check(CLI::IsMember({"source", "outliers", "train"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    auto config = load_config(config_path);
    if (seed) config.seed = *seed;
    if (threads) config.threads = *threads;
    config.validate();

    if (run_cmd->parsed()) {
      const fs::path dir = out.empty() ? config.out_dir : fs::path(out);
      ensure_dir(dir);
      const auto report = run(config);
      write_report_json(report, dir / "report.json");
      write_csv({report}, dir / "plot_data.csv");
      print_table({report});
    } else if (sweep_cmd->parsed()) {
      const fs::path dir = out.empty() ? config.out_dir : fs::path(out);
      ensure_dir(dir);
      const auto ax = parse_sweep_axis(axis);
      const auto reports = sweep(config, ax, parse_values(values));
      nlohmann::json j = nlohmann::json::array();
      for (const auto& r : reports) j.push_back(report_json(r));
      std::ofstream json_out(dir / ("sweep_" + to_string(ax) + ".json"));
      json_out << j.dump(2) << '\n';
      if (!json_out) throw FileError("cannot write sweep report in " + dir.string());
      write_csv(reports, dir / ("sweep_" + to_string(ax) + ".csv"));
      print_table(reports);
    } else if (train_cmd->parsed()) {
      auto& t = config.tranfs;
      if (episodes >= 0) t.train.episodes = episodes;
      const auto pools = t.train_source.load();
      if (pools.empty()) throw ConfigError("[tranfs_train_source] yields no classes");
      auto model_cfg = t.model;
      model_cfg.input_dim = static_cast<int>(pools.front().dimension());
      Rng rng(t.seed);
      TranfsModel model(model_cfg, rng);
      const auto log = meta_train(model, pools, t.train, rng);
      save_checkpoint(model, out, &rng);
      if (!log_path.empty()) {
        std::ofstream lo(log_path);
        if (!lo) throw FileError("cannot write " + log_path);
        lo << "episode,total,xent,clean,bin,learning_rate,noise\n";
        for (std::size_t i = 0; i < log.size(); ++i)
          lo << i << ',' << log[i].loss.total << ',' << log[i].loss.xent << ',' << log[i].loss.clean << ','
             << log[i].loss.bin << ',' << log[i].learning_rate << ',' << log[i].noise << '\n';
      }
      if (!log.empty())
        std::cout << "trained " << log.size() << " episodes, final loss " << log.back().loss.total << '\n';
      std::cout << "checkpoint written to " << out << '\n';
    } else if (attn_cmd->parsed()) {
      const auto model = load_checkpoint(checkpoint).model;
      const auto pools = config.source.load();
      NoiseSpec spec = config.eval_noise.front();
      if (!noise_text.empty()) {
        const auto colon = noise_text.find(':');
        spec.kind = parse_noise_kind(noise_text.substr(0, colon));
        spec.proportion = colon == std::string::npos ? 0.0 : parse_values(noise_text.substr(colon + 1)).at(0);
      }
      if (spec.kind == NoiseKind::kOutlier) {
        if (config.outliers.kind == SourceConfig::Kind::kNone)
          throw ConfigError("outlier noise needs an [outliers] source");
        spec.outlier_pool = std::make_shared<const PoolSet>(config.outliers.load());
      }
      if (episode_index < 0) throw ConfigError("--episode must be >= 0");
      // Same stream as `run` uses for this episode index.
      const auto idx = static_cast<std::uint64_t>(episode_index);
      Rng episode_rng(derive_seed(config.seed, idx));
      const auto clean = sample_episode(pools, config.n_ways, config.k_shots, config.q_queries, episode_rng);
      Rng noise_rng(derive_seed(config.seed, idx, static_cast<std::uint64_t>(spec.kind) + 1));
      const auto episode = apply(spec, clean, pools, noise_rng);
      std::ofstream o(out);
      if (!o) throw FileError("cannot write " + out);
      write_attention_dump(export_attention(model, episode), o);
      if (!o) throw FileError("write failed for " + out);
    } else if (gen_cmd->parsed()) {
      const auto& src = which == "source" ? config.source
                        : which == "outliers" ? config.outliers
                                              : config.tranfs.train_source;
      if (src.kind != SourceConfig::Kind::kSynthetic)
        throw ConfigError("[" + which + "] is not a synthetic source");
      save_embeddings(src.load(), out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e);
  }
  return kExitOk;
}
