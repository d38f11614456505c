#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "knfu/errors.hpp"
#include "knfu/experiment.hpp"

namespace knfu::cli {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> strategies;
  std::string out;
  std::size_t threads = 0;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Experiment config file (key = value lines)");
  cmd->add_option("--seed", f.seeds, "Seeds, overriding the config")->delimiter(',');
  cmd->add_option("--strategy", f.strategies, "knfu, fedmd, selective_fd, local")->delimiter(',');
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_option("--threads", f.threads, "Worker threads per experiment");
  cmd->add_option("--set", f.sets, "Extra key=value overrides")->take_all();
}

ExperimentConfig load(const CommonFlags& f) {
  std::string text;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw IoError(f.config, "cannot open config");
    std::stringstream ss;
    ss << in.rdbuf();
    text = ss.str();
  }
  // Overrides are appended as extra lines after dropping the keys they
  // replace, so they go through the same parser and validation.
  std::vector<std::pair<std::string, std::string>> extra;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(s, "--set expects key=value");
    extra.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  if (!f.seeds.empty()) {
    std::string v;
    for (auto s : f.seeds) v += (v.empty() ? "" : ",") + std::to_string(s);
    extra.emplace_back("seeds", v);
  }
  if (!f.strategies.empty()) {
    std::string v;
    for (const auto& s : f.strategies) v += (v.empty() ? "" : ",") + s;
    extra.emplace_back("strategies", v);
  }
  if (!f.out.empty()) extra.emplace_back("output", f.out);
  if (f.threads) extra.emplace_back("threads", std::to_string(f.threads));

  std::istringstream lines(text);
  std::string merged;
  for (std::string line; std::getline(lines, line);) {
    auto key = line.substr(0, line.find('='));
    key.erase(0, key.find_first_not_of(" \t"));
    key.erase(key.find_last_not_of(" \t\r") + 1);
    bool replaced = false;
    for (const auto& [k, v] : extra) replaced |= k == key;
    if (!replaced) merged += line + "\n";
  }
  for (const auto& [k, v] : extra) merged += k + " = " + v + "\n";
  return parse_config_text(merged);
}

Progress progress_printer(std::ostream& err, const ExperimentConfig& c, const std::string& cell) {
  return [&err, rounds = c.rounds, cell](const federation::RoundRecord& r) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "alma=%.4f (%.2fs)", r.alma, r.wall_seconds);
    err << "[knfu] " << cell << (cell.empty() ? "" : " ") << fusion::to_string(r.strategy)
        << " seed=" << r.seed << " round " << r.round << "/" << rounds << " " << buf << '\n';
  };
}

/// Runs one configuration into `dir` and returns its summary rows.
std::vector<metrics::SeedAggregate> run_cell(const ExperimentConfig& c, const DataSources& src,
                                             const fs::path& dir, std::ostream& err,
                                             const std::string& cell) {
  const auto output = run_experiment(c, src, progress_printer(err, c, cell));
  write_curves(output, dir);
  data::FederationOptions fo;
  fo.clients = c.clients;
  fo.alpha = c.alpha;
  fo.shard_size = c.shard_size;
  fo.transfer_size = c.transfer_size;
  fo.test_size = c.test_size;
  for (auto seed : c.seeds) {
    fo.seed = seed;
    data::write_partition_manifest(data::build_federation(src.train, src.test, fo),
                                   dir / ("partition_seed" + std::to_string(seed) + ".json"));
  }
  std::ofstream(dir / "config.txt") << canonical_form(c);
  return output.aggregates;
}

std::string cell_name(const ExperimentConfig& c) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s_alpha%g_k%zu", std::string(to_string(c.dataset)).c_str(), c.alpha,
                c.shard_size);
  return buf;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated knowledge fusion experiments", "knfu"};
  app.require_subcommand(1);

  CommonFlags run_flags, sweep_flags;
  auto* run_cmd = app.add_subcommand("run", "Run one configuration over its seeds and strategies");
  add_common(run_cmd, run_flags);

  auto* sweep_cmd = app.add_subcommand("sweep", "Cross alpha and shard-size grids");
  add_common(sweep_cmd, sweep_flags);
  std::vector<double> alphas;
  std::vector<std::size_t> sizes;
  sweep_cmd->add_option("--alpha", alphas, "Dirichlet concentrations")->delimiter(',')->required();
  sweep_cmd->add_option("--size", sizes, "Local shard sizes")->delimiter(',')->required();

  auto* report_cmd = app.add_subcommand("report", "Render summary files as a table");
  std::vector<std::string> inputs;
  report_cmd->add_option("paths", inputs, "summary.json files or directories holding one")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*run_cmd) {
      const auto c = load(run_flags);
      const fs::path dir = c.output;
      fs::create_directories(dir);
      const auto src = load_sources(c);
      const auto rows = run_cell(c, src, dir, err, "");
      metrics::write_summary(dir / "summary.json", rows);
      out << metrics::render_table(rows);
    } else if (*sweep_cmd) {
      const auto base = load(sweep_flags);
      const fs::path root = base.output;
      fs::create_directories(root);
      const auto src = load_sources(base);
      std::vector<metrics::SeedAggregate> rows;
      for (double a : alphas)
        for (auto k : sizes) {
          auto c = base;
          c.alpha = a;
          c.shard_size = k;
          validate(c);
          const auto name = cell_name(c);
          for (auto& r : run_cell(c, src, root / name, err, name)) rows.push_back(std::move(r));
          metrics::write_summary(root / "summary.json", rows);
        }
      out << metrics::render_table(rows);
    } else if (*report_cmd) {
      std::vector<metrics::SeedAggregate> rows;
      for (const fs::path p : inputs) {
        const auto file = fs::is_directory(p) ? p / "summary.json" : p;
        for (auto& r : metrics::read_summary(file)) rows.push_back(std::move(r));
      }
      out << metrics::render_table(rows);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace knfu::cli
