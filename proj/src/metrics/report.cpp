#include "knfu/metrics/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "knfu/errors.hpp"

namespace knfu::metrics {

namespace {

constexpr const char* kCurveHeader = "round,client_id,accuracy,alma,strategy,seed";

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

// Display width of a UTF-8 string (continuation bytes do not count).
std::size_t width(const std::string& s) {
  return static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xc0) != 0x80; }));
}

std::string pad(const std::string& s, std::size_t w) {
  const std::size_t n = width(s);
  return n >= w ? s : s + std::string(w - n, ' ');
}

std::string label(StrategyId id) {
  switch (id) {
    case StrategyId::KnFu: return "KnFu";
    case StrategyId::FedMD: return "FedMD";
    case StrategyId::SelectiveFD: return "Selective-FD";
    case StrategyId::Local: return "Local";
  }
  return "?";
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

double alma(std::span<const double> accuracies) {
  if (accuracies.empty()) throw InputError("ALMA needs at least one client");
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  return sum / static_cast<double>(accuracies.size());
}

double alma(std::span<const federation::ClientState> clients) {
  std::vector<double> acc;
  for (const auto& c : clients) acc.push_back(federation::accuracy(c.model, c.test));
  return alma(acc);
}

std::vector<SeedAggregate> aggregate_seeds(std::span<const SeedRun> runs) {
  if (runs.empty()) throw InputError("aggregate_seeds needs at least one run");
  const auto& first = runs.front();
  std::vector<SeedAggregate> out;
  for (const auto& r : runs) {
    if (r.fingerprint != first.fingerprint)
      throw InputError("runs come from different configurations (" + first.fingerprint +
                       " vs " + r.fingerprint + ")");
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& a) { return a.strategy == r.strategy; });
    if (it == out.end()) {
      out.push_back({r.fingerprint, r.dataset, r.alpha, r.shard_size, r.strategy, {}, {}, 0, 0, false});
      it = std::prev(out.end());
    }
    if (std::find(it->seeds.begin(), it->seeds.end(), r.seed) != it->seeds.end())
      throw InputError("seed " + std::to_string(r.seed) + " appears twice for " + label(r.strategy));
    it->seeds.push_back(r.seed);
    it->values.push_back(r.final_alma);
  }
  for (auto& a : out) {
    std::vector<std::size_t> order(a.seeds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](auto x, auto y) { return a.seeds[x] < a.seeds[y]; });
    std::vector<std::uint64_t> seeds;
    std::vector<double> values;
    for (auto i : order) {
      seeds.push_back(a.seeds[i]);
      values.push_back(a.values[i]);
    }
    a.seeds = std::move(seeds);
    a.values = std::move(values);
    const double n = static_cast<double>(a.values.size());
    double sum = 0.0;
    for (double v : a.values) sum += v;
    a.mean = sum / n;
    a.single_seed = a.values.size() == 1;
    if (!a.single_seed) {
      double ss = 0.0;
      for (double v : a.values) ss += (v - a.mean) * (v - a.mean);
      a.stddev = std::sqrt(ss / (n - 1.0));
    }
  }
  return out;
}

std::string format_mean_std(double mean, double stddev, int decimals) {
  return fixed(mean, decimals) + " ± " + fixed(stddev, decimals);
}

std::string curve_filename(StrategyId strategy, std::uint64_t seed) {
  return "curve_" + std::string(fusion::to_string(strategy)) + "_seed" + std::to_string(seed) + ".csv";
}

void write_curve(const std::filesystem::path& path, std::span<const RoundRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << kCurveHeader << '\n';
  for (const auto& r : records)
    for (std::size_t n = 0; n < r.accuracy.size(); ++n)
      out << r.round << ',' << n << ',' << g17(r.accuracy[n]) << ',' << g17(r.alma) << ','
          << fusion::to_string(r.strategy) << ',' << r.seed << '\n';
  out.flush();
  if (!out) throw IoError(path.string(), "write failed");
}

std::vector<RoundRecord> read_curve(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  std::string line;
  if (!std::getline(in, line) || line != kCurveHeader)
    throw InputError(path.string() + ": unexpected curve header");
  std::vector<RoundRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 6)
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected 6 fields");
    const std::size_t round = std::stoull(f[0]), client = std::stoull(f[1]);
    if (out.empty() || out.back().round != round) {
      RoundRecord rec;
      rec.round = round;
      rec.alma = std::strtod(f[3].c_str(), nullptr);
      rec.strategy = fusion::parse_strategy(f[4]);
      rec.seed = std::stoull(f[5]);
      out.push_back(std::move(rec));
    }
    auto& rec = out.back();
    if (client != rec.accuracy.size())
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": client ids out of order");
    rec.accuracy.push_back(std::strtod(f[2].c_str(), nullptr));
  }
  return out;
}

void write_summary(const std::filesystem::path& path, std::span<const SeedAggregate> rows) {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows)
    j["rows"].push_back({{"dataset", r.dataset},
                         {"alpha", r.alpha},
                         {"shard_size", r.shard_size},
                         {"strategy", fusion::to_string(r.strategy)},
                         {"mean", r.mean},
                         {"std", r.stddev},
                         {"seeds", r.seeds},
                         {"values", r.values},
                         {"single_seed", r.single_seed},
                         {"fingerprint", r.fingerprint}});
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << j.dump(2) << '\n';
  out.flush();
  if (!out) throw IoError(path.string(), "write failed");
}

std::vector<SeedAggregate> read_summary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  std::vector<SeedAggregate> out;
  try {
    for (const auto& r : j.at("rows")) {
      SeedAggregate a;
      a.dataset = r.at("dataset").get<std::string>();
      a.alpha = r.at("alpha").get<double>();
      a.shard_size = r.at("shard_size").get<std::size_t>();
      a.strategy = fusion::parse_strategy(r.at("strategy").get<std::string>());
      a.mean = r.at("mean").get<double>();
      a.stddev = r.at("std").get<double>();
      a.seeds = r.at("seeds").get<std::vector<std::uint64_t>>();
      a.values = r.at("values").get<std::vector<double>>();
      a.single_seed = r.at("single_seed").get<bool>();
      a.fingerprint = r.at("fingerprint").get<std::string>();
      out.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return out;
}

std::string render_table(std::span<const SeedAggregate> rows) {
  static constexpr StrategyId kColumns[] = {StrategyId::KnFu, StrategyId::FedMD, StrategyId::Local,
                                            StrategyId::SelectiveFD};
  constexpr std::size_t kCell = 15, kLead = 12;
  std::set<std::string> datasets;
  for (const auto& r : rows) datasets.insert(r.dataset);

  std::ostringstream out;
  for (const auto& ds : datasets) {
    std::set<double> alphas;
    std::set<std::size_t> sizes;
    std::map<std::tuple<double, std::size_t, StrategyId>, const SeedAggregate*> cell;
    for (const auto& r : rows) {
      if (r.dataset != ds) continue;
      alphas.insert(r.alpha);
      sizes.insert(r.shard_size);
      cell[{r.alpha, r.shard_size, r.strategy}] = &r;
    }
    out << "ALMA (%) on " << ds << ", mean ± std over seeds; * marks the best in each block\n";
    std::string head = pad("Het. level", kLead), sub = std::string(kLead, ' ');
    for (auto k : sizes) {
      head += "| " + pad("|D_n| = " + std::to_string(k), kCell * 4);
      sub += "| ";
      for (auto s : kColumns) sub += pad(label(s), kCell);
    }
    out << head << '\n' << sub << '\n';
    for (double a : alphas) {
      char name[32];
      std::snprintf(name, sizeof name, "alpha=%g", a);
      std::string line = pad(name, kLead);
      for (auto k : sizes) {
        const SeedAggregate* best = nullptr;
        for (auto s : kColumns) {
          auto it = cell.find({a, k, s});
          if (it != cell.end() && (!best || it->second->mean > best->mean)) best = it->second;
        }
        line += "| ";
        for (auto s : kColumns) {
          auto it = cell.find({a, k, s});
          std::string text = "-";
          if (it != cell.end()) {
            text = format_mean_std(it->second->mean * 100.0, it->second->stddev * 100.0);
            if (it->second == best) text += "*";
          }
          line += pad(text, kCell);
        }
      }
      out << line << '\n';
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace knfu::metrics
