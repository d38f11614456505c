#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <numeric>
#include <random>

#include "knfu/data/partition.hpp"
#include "knfu/errors.hpp"
#include "knfu/experiment.hpp"
#include "knfu/fusion/fusion.hpp"
#include "knfu/metrics/report.hpp"
#include "knfu/nn/losses.hpp"
#include "knfu/nn/training.hpp"

namespace py = pybind11;
using namespace knfu;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

nn::Tensor to_tensor(const Array& a) {
  if (a.ndim() < 1) throw InputError("expected an array with at least one dimension");
  std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
  return nn::Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_array(const nn::Tensor& t) {
  py::array_t<double> out(t.shape());
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::array_t<double> to_array(const fusion::Matrix& m) {
  const std::size_t rows = m.size(), cols = rows ? m[0].size() : 0;
  py::array_t<double> out({rows, cols});
  auto v = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) v(i, j) = m[i][j];
  return out;
}

fusion::Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw InputError("expected a 2-d array");
  auto v = a.unchecked<2>();
  fusion::Matrix m(v.shape(0), std::vector<double>(v.shape(1)));
  for (py::ssize_t i = 0; i < v.shape(0); ++i)
    for (py::ssize_t j = 0; j < v.shape(1); ++j) m[i][j] = v(i, j);
  return m;
}

std::vector<fusion::SoftLabelMatrix> soft_labels(const std::vector<Array>& fs) {
  std::vector<fusion::SoftLabelMatrix> out;
  out.reserve(fs.size());
  for (std::size_t n = 0; n < fs.size(); ++n) {
    if (fs[n].ndim() != 2) throw InputError("soft-label matrices must be 2-d");
    out.push_back({n, to_tensor(fs[n])});
  }
  return out;
}

py::dict fused_dict(const fusion::FusedKnowledge& f) {
  py::dict d;
  py::list agg;
  for (const auto& t : f.aggregated) agg.append(to_array(t));
  d["aggregated"] = agg;
  if (!f.epds.empty()) {
    py::array_t<double> epds({f.epds.size(), f.epds[0].distribution.size()});
    auto v = epds.mutable_unchecked<2>();
    for (std::size_t n = 0; n < f.epds.size(); ++n)
      for (std::size_t c = 0; c < f.epds[n].distribution.size(); ++c)
        v(n, c) = f.epds[n].distribution[c];
    d["epds"] = epds;
  }
  if (f.weights) {
    d["distances"] = to_array(f.weights->distances);
    d["weights"] = to_array(f.weights->normalized);
  }
  if (!f.fallback.empty())
    d["fallback"] = std::vector<bool>(f.fallback.begin(), f.fallback.end());
  return d;
}

py::dict aggregate_dict(const metrics::SeedAggregate& a) {
  py::dict d;
  d["strategy"] = std::string(fusion::to_string(a.strategy));
  d["dataset"] = a.dataset;
  d["alpha"] = a.alpha;
  d["shard_size"] = a.shard_size;
  d["seeds"] = a.seeds;
  d["values"] = a.values;
  d["mean"] = a.mean;
  d["stddev"] = a.stddev;
  return d;
}

}  // namespace

PYBIND11_MODULE(_knfu, m) {
  m.doc() = "Knowledge-fusion federated distillation core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<PartitionError>(m, "PartitionError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<PhaseError>(m, "PhaseError", base.ptr());

  m.def("compute_epd", [](const Array& f) {
    return fusion::compute_epd({0, to_tensor(f)}).distribution;
  }, py::arg("soft_labels"));

  m.def("pairwise_kl", [](const Array& epds) {
    const auto rows = to_matrix(epds);
    std::vector<fusion::Epd> e;
    for (std::size_t n = 0; n < rows.size(); ++n) e.push_back({n, rows[n]});
    return to_array(fusion::pairwise_kl(e));
  }, py::arg("epds"));

  m.def("weight_matrix", [](const Array& d, double beta, double eps_d) {
    return to_array(fusion::weight_matrix(to_matrix(d), beta, eps_d).normalized);
  }, py::arg("distances"), py::arg("beta") = fusion::kDefaultBeta,
     py::arg("eps_d") = fusion::kEpsDistance);

  m.def("knfu_fuse", [](const std::vector<Array>& fs, double beta, double eps_d) {
    return fused_dict(fusion::knfu_fuse(soft_labels(fs), beta, eps_d));
  }, py::arg("soft_labels"), py::arg("beta") = fusion::kDefaultBeta,
     py::arg("eps_d") = fusion::kEpsDistance);

  m.def("fedmd_fuse", [](const std::vector<Array>& fs) {
    return fused_dict(fusion::fedmd_fuse(soft_labels(fs)));
  }, py::arg("soft_labels"));

  m.def("selective_fd_fuse",
        [](const std::vector<Array>& fs, const std::vector<int>& labels,
           std::optional<double> tau) {
          return fused_dict(fusion::selective_fd_fuse(soft_labels(fs), labels, tau));
        },
        py::arg("soft_labels"), py::arg("labels"), py::arg("tau") = py::none());

  m.def("default_entropy_threshold", &fusion::default_entropy_threshold,
        py::arg("num_classes"));

  m.def("kl_loss", [](const Array& s, const Array& t) {
    return nn::kl_loss(to_tensor(s), to_tensor(t));
  }, py::arg("student"), py::arg("target"));

  m.def("mlp_gradient_check",
        [](std::size_t dim, std::size_t hidden, std::size_t classes, std::size_t batch,
           double lambda, std::uint64_t seed, bool cross_entropy) {
          const auto spec = nn::ModelSpec::mlp_small(dim, hidden, classes);
          nn::Model model(spec, seed);
          Rng rng = make_rng(seed, {1});
          std::normal_distribution<double> normal;
          std::vector<double> x(batch * dim);
          for (auto& v : x) v = normal(rng);
          std::vector<int> labels(batch);
          for (std::size_t i = 0; i < batch; ++i) labels[i] = static_cast<int>(i % classes);
          nn::Tensor target;
          if (lambda > 0.0) {
            std::vector<double> z(batch * classes);
            for (auto& v : z) v = normal(rng);
            target = nn::softmax(nn::Tensor::matrix(batch, classes, z), 1.0);
          }
          nn::LossSpec loss{labels, lambda > 0.0 ? &target : nullptr, lambda};
          loss.cross_entropy = cross_entropy;
          return nn::gradient_check(model, nn::Tensor::matrix(batch, dim, x), loss);
        },
        py::arg("dim") = 6, py::arg("hidden") = 5, py::arg("classes") = 3,
        py::arg("batch") = 8, py::arg("lam") = 0.0, py::arg("seed") = 0,
        py::arg("cross_entropy") = true);

  m.def("largest_remainder", [](const std::vector<double>& w, std::size_t total) {
    return data::largest_remainder(w, total);
  }, py::arg("weights"), py::arg("total"));

  m.def("dirichlet_partition",
        [](const std::vector<int>& labels, std::size_t num_classes, std::size_t clients,
           double alpha, std::size_t shard_size, std::uint64_t seed) {
          std::vector<std::size_t> pool(labels.size());
          std::iota(pool.begin(), pool.end(), std::size_t{0});
          auto p = data::dirichlet_partition(labels, num_classes, pool, clients, alpha,
                                             shard_size, seed);
          return py::make_tuple(p.shards, p.plan.proportions,
                                data::mean_kl_to_global(p, labels, num_classes));
        },
        py::arg("labels"), py::arg("num_classes"), py::arg("clients"), py::arg("alpha"),
        py::arg("shard_size"), py::arg("seed"));

  m.def("synth_dataset",
        [](std::size_t classes, std::size_t per_class, std::size_t dim, std::uint64_t seed,
           double separation) {
          auto s = data::synth_dataset(classes, per_class, dim, seed, separation);
          py::array_t<double> x({s.size(), dim});
          std::copy(s.inputs.values().begin(), s.inputs.values().end(), x.mutable_data());
          return py::make_tuple(x, s.labels);
        },
        py::arg("num_classes"), py::arg("per_class"), py::arg("dim"), py::arg("seed"),
        py::arg("separation") = 3.0);

  m.def("config_fingerprint", [](const std::string& text) {
    return fingerprint(parse_config_text(text));
  }, py::arg("text"));

  m.def("run_experiment",
        [](const std::string& text, std::optional<std::string> output) {
          auto cfg = parse_config_text(text);
          validate(cfg);
          DataSources sources;
          ExperimentOutput out;
          {
            py::gil_scoped_release release;
            sources = load_sources(cfg);
            out = run_experiment(cfg, sources);
            if (output) {
              write_curves(out, *output);
              metrics::write_summary(std::filesystem::path(*output) / "summary.json",
                                     out.aggregates);
            }
          }
          py::dict result;
          py::list rows;
          for (const auto& a : out.aggregates) rows.append(aggregate_dict(a));
          result["aggregates"] = rows;
          py::dict curves;
          for (const auto& c : out.curves) {
            std::vector<double> alma;
            for (const auto& r : c.records) alma.push_back(r.alma);
            curves[py::make_tuple(std::string(fusion::to_string(c.strategy)), c.seed)] = alma;
          }
          result["curves"] = curves;
          result["fingerprint"] = fingerprint(cfg);
          return result;
        },
        py::arg("config_text"), py::arg("output") = py::none());

  m.def("render_table", [](const std::string& summary_path) {
    const auto rows = metrics::read_summary(summary_path);
    return metrics::render_table(rows);
  }, py::arg("summary_path"));
}
