#include "knfu/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "knfu/errors.hpp"
#include "knfu/nn/checkpoint.hpp"
#include "knfu/rng.hpp"

namespace knfu {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& key, const std::string& value) {
  std::vector<std::string> out;
  std::istringstream in(value);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (item.empty()) throw ConfigError(key, "empty list entry");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError(key, "list must not be empty");
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc() || ptr != end || value.empty())
    throw ConfigError(key, "expected a nonnegative integer, got '" + value + "'");
  return v;
}

double to_real(const std::string& key, const std::string& value) {
  char* end = nullptr;
  const double v = std::strtod(value.c_str(), &end);
  if (value.empty() || end != value.c_str() + value.size())
    throw ConfigError(key, "expected a number, got '" + value + "'");
  if (!std::isfinite(v)) throw ConfigError(key, "must be finite");
  return v;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + value + "'");
}

std::string real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

using Setter = void (*)(ExperimentConfig&, const std::string& key, const std::string& value);

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table{
      {"dataset",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         if (v == "mnist") c.dataset = DatasetId::Mnist;
         else if (v == "cifar10" || v == "cifar-10") c.dataset = DatasetId::Cifar10;
         else if (v == "synthetic") c.dataset = DatasetId::Synthetic;
         else throw ConfigError(k, "unknown dataset '" + v + "'");
       }},
      {"clients", [](auto& c, const auto& k, const auto& v) { c.clients = to_uint(k, v); }},
      {"alpha", [](auto& c, const auto& k, const auto& v) { c.alpha = to_real(k, v); }},
      {"shard_size", [](auto& c, const auto& k, const auto& v) { c.shard_size = to_uint(k, v); }},
      {"transfer_size", [](auto& c, const auto& k, const auto& v) { c.transfer_size = to_uint(k, v); }},
      {"test_size", [](auto& c, const auto& k, const auto& v) { c.test_size = to_uint(k, v); }},
      {"classes", [](auto& c, const auto& k, const auto& v) { c.classes = to_uint(k, v); }},
      {"local_epochs", [](auto& c, const auto& k, const auto& v) { c.local_epochs = to_uint(k, v); }},
      {"finetune_epochs", [](auto& c, const auto& k, const auto& v) { c.finetune_epochs = to_uint(k, v); }},
      {"rounds", [](auto& c, const auto& k, const auto& v) { c.rounds = to_uint(k, v); }},
      {"lambda", [](auto& c, const auto& k, const auto& v) { c.lambda = to_real(k, v); }},
      {"beta", [](auto& c, const auto& k, const auto& v) { c.beta = to_real(k, v); }},
      {"eps_d", [](auto& c, const auto& k, const auto& v) { c.eps_d = to_real(k, v); }},
      {"tau", [](auto& c, const auto& k, const auto& v) { c.tau = to_real(k, v); }},
      {"learning_rate", [](auto& c, const auto& k, const auto& v) { c.learning_rate = to_real(k, v); }},
      {"batch_size", [](auto& c, const auto& k, const auto& v) { c.batch_size = to_uint(k, v); }},
      {"model",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         if (v != "m1" && v != "m2" && v != "mlp") throw ConfigError(k, "unknown model '" + v + "'");
         c.model = v;
       }},
      {"mlp_hidden", [](auto& c, const auto& k, const auto& v) { c.mlp_hidden = to_uint(k, v); }},
      {"strategies",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.strategies.clear();
         for (const auto& s : split_list(k, v)) {
           try {
             c.strategies.push_back(fusion::parse_strategy(s));
           } catch (const InputError& e) {
             throw ConfigError(k, e.what());
           }
         }
       }},
      {"seeds",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         c.seeds.clear();
         for (const auto& s : split_list(k, v)) c.seeds.push_back(to_uint(k, s));
       }},
      {"data_dir", [](auto& c, const auto&, const auto& v) { c.data_dir = v; }},
      {"output", [](auto& c, const auto&, const auto& v) { c.output = v; }},
      {"local_mode",
       [](ExperimentConfig& c, const std::string& k, const std::string& v) {
         if (v == "transfer") c.local_mode = federation::LocalMode::Transfer;
         else if (v == "local_only") c.local_mode = federation::LocalMode::LocalOnly;
         else throw ConfigError(k, "expected transfer or local_only");
       }},
      {"threads", [](auto& c, const auto& k, const auto& v) { c.threads = to_uint(k, v); }},
      {"dump_fusion", [](auto& c, const auto& k, const auto& v) { c.dump_fusion = to_bool(k, v); }},
      {"save_checkpoints",
       [](auto& c, const auto& k, const auto& v) { c.save_checkpoints = to_bool(k, v); }},
      {"synth_dim", [](auto& c, const auto& k, const auto& v) { c.synth_dim = to_uint(k, v); }},
      {"synth_per_class", [](auto& c, const auto& k, const auto& v) { c.synth_per_class = to_uint(k, v); }},
      {"synth_test_per_class",
       [](auto& c, const auto& k, const auto& v) { c.synth_test_per_class = to_uint(k, v); }},
      {"synth_separation", [](auto& c, const auto& k, const auto& v) { c.synth_separation = to_real(k, v); }},
      {"synth_seed", [](auto& c, const auto& k, const auto& v) { c.synth_seed = to_uint(k, v); }},
  };
  return table;
}

std::size_t resolved_classes(const ExperimentConfig& c) {
  if (c.classes) return c.classes;
  return 10;
}

std::string resolved_model(const ExperimentConfig& c) {
  if (!c.model.empty()) return c.model;
  switch (c.dataset) {
    case DatasetId::Mnist: return "m1";
    case DatasetId::Cifar10: return "m2";
    case DatasetId::Synthetic: return "mlp";
  }
  return "mlp";
}

std::filesystem::path find_file(const std::vector<std::filesystem::path>& dirs,
                                const std::vector<std::string>& names) {
  for (const auto& d : dirs)
    for (const auto& n : names)
      for (const char* ext : {"", ".gz"}) {
        auto p = d / (n + ext);
        if (std::filesystem::exists(p)) return p;
      }
  std::string tried;
  for (const auto& d : dirs) tried += (tried.empty() ? "" : ", ") + d.string();
  throw IoError(names.front(), "not found under " + tried);
}

}  // namespace

std::string_view to_string(DatasetId id) {
  switch (id) {
    case DatasetId::Mnist: return "mnist";
    case DatasetId::Cifar10: return "cifar10";
    case DatasetId::Synthetic: return "synthetic";
  }
  return "?";
}

void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError(key, "unknown key");
  it->second(config, key, value);
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(key, "given more than once");
    set_config_value(c, key, value);
  }
  validate(c);
  return c;
}

ExperimentConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open config");
  return parse_config(in);
}

void validate(const ExperimentConfig& c) {
  auto require = [](bool ok, const char* field, const char* what) {
    if (!ok) throw ConfigError(field, what);
  };
  require(c.clients >= 1, "clients", "must be at least 1");
  require(c.alpha > 0.0, "alpha", "must be positive");
  require(c.shard_size >= 1, "shard_size", "must be at least 1");
  require(c.test_size >= 1, "test_size", "must be at least 1");
  require(c.local_epochs >= 1, "local_epochs", "must be at least 1");
  require(c.finetune_epochs >= 1, "finetune_epochs", "must be at least 1");
  require(c.lambda >= 0.0, "lambda", "must be nonnegative");
  require(c.beta > 0.0, "beta", "must be positive");
  require(c.eps_d > 0.0, "eps_d", "must be positive");
  require(!c.tau || *c.tau >= 0.0, "tau", "must be nonnegative");
  require(c.learning_rate > 0.0, "learning_rate", "must be positive");
  require(c.mlp_hidden >= 1, "mlp_hidden", "must be at least 1");
  require(!c.strategies.empty(), "strategies", "must not be empty");
  require(std::set(c.strategies.begin(), c.strategies.end()).size() == c.strategies.size(),
          "strategies", "duplicate entry");
  require(!c.seeds.empty(), "seeds", "must not be empty");
  require(std::set(c.seeds.begin(), c.seeds.end()).size() == c.seeds.size(), "seeds",
          "duplicate entry");
  require(c.threads >= 1, "threads", "must be at least 1");
  require(!c.output.empty(), "output", "must not be empty");
  if (c.dataset == DatasetId::Synthetic) {
    require(c.classes == 0 || c.classes >= 2, "classes", "must be at least 2");
    require(c.synth_dim >= 1, "synth_dim", "must be at least 1");
    require(c.synth_per_class >= 1, "synth_per_class", "must be at least 1");
    require(c.synth_test_per_class >= 1, "synth_test_per_class", "must be at least 1");
    require(c.synth_separation > 0.0, "synth_separation", "must be positive");
    require(resolved_model(c) == "mlp", "model", "synthetic data needs the mlp model");
  } else {
    require(c.classes == 0 || c.classes == 10, "classes", "MNIST and CIFAR-10 have 10 classes");
    const auto m = resolved_model(c);
    if (c.dataset == DatasetId::Mnist)
      require(m != "m2", "model", "m2 expects 3x32x32 inputs");
    else
      require(m != "m1", "model", "m1 expects 1x28x28 inputs");
    require(data_root(c).has_value(), "data_dir", "set data_dir or KNFU_DATA_DIR for this dataset");
  }
}

std::optional<std::filesystem::path> data_root(const ExperimentConfig& c) {
  if (!c.data_dir.empty()) return std::filesystem::path(c.data_dir);
  if (const char* env = std::getenv("KNFU_DATA_DIR"); env && *env) return std::filesystem::path(env);
  return std::nullopt;
}

std::string canonical_form(const ExperimentConfig& c) {
  std::map<std::string, std::string> kv{
      {"dataset", std::string(to_string(c.dataset))},
      {"clients", std::to_string(c.clients)},
      {"alpha", real(c.alpha)},
      {"shard_size", std::to_string(c.shard_size)},
      {"transfer_size", std::to_string(c.transfer_size ? c.transfer_size : c.shard_size)},
      {"test_size", std::to_string(c.test_size)},
      {"classes", std::to_string(resolved_classes(c))},
      {"local_epochs", std::to_string(c.local_epochs)},
      {"finetune_epochs", std::to_string(c.finetune_epochs)},
      {"rounds", std::to_string(c.rounds)},
      {"lambda", real(c.lambda)},
      {"beta", real(c.beta)},
      {"eps_d", real(c.eps_d)},
      {"tau", c.tau ? real(*c.tau) : "default"},
      {"learning_rate", real(c.learning_rate)},
      {"batch_size", std::to_string(c.batch_size ? c.batch_size
                                                 : federation::batch_size_for(c.shard_size))},
      {"model", resolved_model(c)},
      {"local_mode", c.local_mode == federation::LocalMode::Transfer ? "transfer" : "local_only"},
  };
  if (resolved_model(c) == "mlp") kv["mlp_hidden"] = std::to_string(c.mlp_hidden);
  if (c.dataset == DatasetId::Synthetic) {
    kv["synth_dim"] = std::to_string(c.synth_dim);
    kv["synth_per_class"] = std::to_string(c.synth_per_class);
    kv["synth_test_per_class"] = std::to_string(c.synth_test_per_class);
    kv["synth_separation"] = real(c.synth_separation);
    kv["synth_seed"] = std::to_string(c.synth_seed);
  }
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string fingerprint(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : canonical_form(c)) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

DataSources load_sources(const ExperimentConfig& c) {
  if (c.dataset == DatasetId::Synthetic) {
    const std::size_t C = resolved_classes(c);
    return {data::synth_dataset(C, c.synth_per_class, c.synth_dim, c.synth_seed, c.synth_separation),
            data::synth_dataset(C, c.synth_test_per_class, c.synth_dim,
                                derive_seed(c.synth_seed, {0x7e57}), c.synth_separation)};
  }
  const auto root = data_root(c);
  if (!root) throw ConfigError("data_dir", "set data_dir or KNFU_DATA_DIR for this dataset");
  if (c.dataset == DatasetId::Mnist) {
    const std::vector<std::filesystem::path> dirs{*root, *root / "mnist"};
    return {data::load_mnist(find_file(dirs, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"}),
                             find_file(dirs, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"})),
            data::load_mnist(find_file(dirs, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"}),
                             find_file(dirs, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"}))};
  }
  const std::vector<std::filesystem::path> dirs{*root, *root / "cifar-10-batches-bin", *root / "cifar10"};
  std::vector<std::filesystem::path> train;
  for (int i = 1; i <= 5; ++i) train.push_back(find_file(dirs, {"data_batch_" + std::to_string(i) + ".bin"}));
  const std::vector<std::filesystem::path> test{find_file(dirs, {"test_batch.bin"})};
  return {data::load_cifar10(train), data::load_cifar10(test)};
}

nn::ModelSpec model_spec(const ExperimentConfig& c, const data::LabeledSet& sample) {
  const auto m = resolved_model(c);
  if (m == "m1") return nn::ModelSpec::m1();
  if (m == "m2") return nn::ModelSpec::m2();
  return nn::ModelSpec::mlp_small(sample.sample_shape().size(), c.mlp_hidden, sample.num_classes);
}

federation::RunOptions run_options(const ExperimentConfig& c) {
  federation::RunOptions o;
  o.rounds = c.rounds;
  o.local_epochs = c.local_epochs;
  o.finetune_epochs = c.finetune_epochs;
  o.lambda = c.lambda;
  o.learning_rate = c.learning_rate;
  o.batch_size = c.batch_size;
  o.fusion = {c.beta, c.eps_d, c.tau};
  o.local_mode = c.local_mode;
  o.threads = c.threads;
  if (c.dump_fusion) o.dump_dir = std::filesystem::path(c.output) / "fusion";
  return o;
}

ExperimentOutput run_experiment(const ExperimentConfig& c, const DataSources& sources,
                                const Progress& progress) {
  validate(c);
  const auto spec = model_spec(c, sources.train);
  auto options = run_options(c);
  options.on_round = progress;
  const auto fp = fingerprint(c);

  data::FederationOptions fo;
  fo.clients = c.clients;
  fo.alpha = c.alpha;
  fo.shard_size = c.shard_size;
  fo.transfer_size = c.transfer_size;
  fo.test_size = c.test_size;

  ExperimentOutput out;
  for (auto seed : c.seeds) {
    fo.seed = seed;
    const auto fed = data::build_federation(sources.train, sources.test, fo);
    for (auto strategy : c.strategies) {
      auto r = federation::run_federation(fed, spec, strategy, seed, options);
      out.counters.weight_matrices += r.counters.weight_matrices;
      out.counters.soft_labels_shared += r.counters.soft_labels_shared;
      out.counters.fallback_samples += r.counters.fallback_samples;
      out.counters.clipped_components += r.counters.clipped_components;
      if (c.save_checkpoints) {
        const auto dir = std::filesystem::path(c.output) / "checkpoints";
        std::filesystem::create_directories(dir);
        for (const auto& client : r.clients)
          nn::save_checkpoint(client.model,
                              dir / ("model_" + std::string(fusion::to_string(strategy)) + "_seed" +
                                     std::to_string(seed) + "_client" + std::to_string(client.id) +
                                     ".knfu"));
      }
      const double final_alma = r.records.empty() ? metrics::alma(r.clients) : r.records.back().alma;
      out.runs.push_back({fp, std::string(to_string(c.dataset)), c.alpha, c.shard_size, strategy, seed,
                          final_alma});
      out.curves.push_back({strategy, seed, std::move(r.records)});
    }
  }
  out.aggregates = metrics::aggregate_seeds(out.runs);
  return out;
}

std::vector<std::filesystem::path> write_curves(const ExperimentOutput& output,
                                                const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), ec.message());
  std::vector<std::filesystem::path> files;
  for (const auto& c : output.curves) {
    files.push_back(dir / metrics::curve_filename(c.strategy, c.seed));
    metrics::write_curve(files.back(), c.records);
  }
  return files;
}

}  // namespace knfu
