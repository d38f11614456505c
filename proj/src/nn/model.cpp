#include "knfu/nn/model.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "knfu/errors.hpp"
#include "knfu/rng.hpp"
#include "network.hpp"

namespace knfu::nn {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;

char activation_code(Activation a) {
  switch (a) {
    case Activation::Relu:
      return 'r';
    case Activation::Tanh:
      return 't';
    case Activation::None:
      return 'n';
  }
  return '?';
}

const char* arch_name(Arch a) {
  switch (a) {
    case Arch::M1:
      return "m1";
    case Arch::M2:
      return "m2";
    case Arch::MlpSmall:
      return "mlp-small";
    case Arch::Custom:
      return "custom";
  }
  return "custom";
}

void activate(std::span<double> v, Activation a) {
  switch (a) {
    case Activation::Relu:
      for (double& x : v) x = x > 0.0 ? x : 0.0;
      break;
    case Activation::Tanh:
      for (double& x : v) x = std::tanh(x);
      break;
    case Activation::None:
      break;
  }
}

// delta *= f'(z), expressed through the activated value a = f(z).
void activation_backward(std::span<double> delta, std::span<const double> a,
                         Activation act) {
  switch (act) {
    case Activation::Relu:
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (!(a[i] > 0.0)) delta[i] = 0.0;
      break;
    case Activation::Tanh:
      for (std::size_t i = 0; i < delta.size(); ++i)
        delta[i] *= 1.0 - a[i] * a[i];
      break;
    case Activation::None:
      break;
  }
}

void check_finite(std::span<const double> v, std::size_t layer) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericError(
          "non-finite activation at layer " + std::to_string(layer), layer);
}

// Writes the patch matrix of one sample into columns [col_offset, +P) of a
// row-major (patch x ld) matrix.
void im2col(const detail::ConvPlan& p, const double* x, double* col,
            std::size_t ld) {
  const std::size_t H = p.in.height, W = p.in.width;
  const std::size_t Ho = p.conv_out.height, Wo = p.conv_out.width;
  const std::size_t k = p.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(p.pad);
  for (std::size_t c = 0; c < p.in.channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* dst = col + ((c * k + ky) * k + kx) * ld;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - pad;
          double* row = dst + oy * Wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(row, row + Wo, 0.0);
            continue;
          }
          const double* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * p.stride + kx) - pad;
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W))
                          ? 0.0
                          : src[ix];
          }
        }
      }
}

void col2im(const detail::ConvPlan& p, const double* col, std::size_t ld,
            double* dx) {
  const std::size_t H = p.in.height, W = p.in.width;
  const std::size_t Ho = p.conv_out.height, Wo = p.conv_out.width;
  const std::size_t k = p.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(p.pad);
  for (std::size_t c = 0; c < p.in.channels; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* src = col + ((c * k + ky) * k + kx) * ld;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          double* dst = dx + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox * p.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
            dst[ix] += src[oy * Wo + ox];
          }
        }
      }
}

// Convolution runs as one GEMM per batch: weights (Cout x patch) times the
// patch matrix (patch x batch*positions). Sample b owns columns
// [b*P, (b+1)*P). The activated map stays in that layout inside the cache.
Buffer conv_forward(const detail::ConvPlan& p, std::span<const double> params,
                    std::span<const double> in, std::size_t batch,
                    detail::LayerCache* cache) {
  const std::size_t K = p.patch(), P = p.positions(), ld = batch * P;
  const std::size_t Cout = p.conv_out.channels;
  const std::size_t in_size = p.in.size();
  ConstMatrixMap w(params.data() + p.weight_offset, Cout, K);
  const double* bias = params.data() + p.bias_offset;

  Buffer local_columns;
  Buffer& columns = cache ? cache->columns : local_columns;
  columns.resize(K * ld);
  for (std::size_t b = 0; b < batch; ++b)
    im2col(p, in.data() + b * in_size, columns.data() + b * P, ld);

  Buffer local_z;
  Buffer& z = cache ? cache->activated : local_z;
  z.resize(Cout * ld);
  MatrixMap(z.data(), Cout, ld).noalias() =
      w * ConstMatrixMap(columns.data(), K, ld);
  for (std::size_t c = 0; c < Cout; ++c) {
    double* row = z.data() + c * ld;
    for (std::size_t i = 0; i < ld; ++i) row[i] += bias[c];
    activate(std::span<double>(row, ld), p.activation);
  }

  const std::size_t out_size = p.out.size();
  Buffer out(batch * out_size);
  if (!p.pool) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < Cout; ++c)
        std::copy_n(z.data() + c * ld + b * P, P,
                    out.data() + b * out_size + c * P);
    return out;
  }

  const std::size_t Wc = p.conv_out.width;
  const std::size_t Ho = p.out.height, Wo = p.out.width;
  std::vector<std::int32_t> index(cache ? batch * out_size : 0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < Cout; ++c) {
      const std::size_t base = c * ld + b * P;
      const double* a = z.data() + base;
      double* o = out.data() + b * out_size + c * Ho * Wo;
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const std::size_t i00 = 2 * oy * Wc + 2 * ox;
          std::size_t best = i00;
          if (a[i00 + 1] > a[best]) best = i00 + 1;
          if (a[i00 + Wc] > a[best]) best = i00 + Wc;
          if (a[i00 + Wc + 1] > a[best]) best = i00 + Wc + 1;
          o[oy * Wo + ox] = a[best];
          if (cache)
            index[b * out_size + c * Ho * Wo + oy * Wo + ox] =
                static_cast<std::int32_t>(base + best);
        }
    }
  if (cache) cache->pool_index = std::move(index);
  return out;
}

Buffer conv_backward(const detail::ConvPlan& p, std::span<const double> params,
                     const detail::LayerCache& cache, Buffer delta,
                     std::size_t batch, std::span<double> grad,
                     bool need_input) {
  const std::size_t K = p.patch(), P = p.positions(), ld = batch * P;
  const std::size_t Cout = p.conv_out.channels;

  // dz in the (Cout x batch*P) GEMM layout.
  Buffer dz(Cout * ld, 0.0);
  if (p.pool) {
    for (std::size_t i = 0; i < delta.size(); ++i)
      dz[static_cast<std::size_t>(cache.pool_index[i])] += delta[i];
  } else {
    const std::size_t out_size = p.out.size();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < Cout; ++c)
        std::copy_n(delta.data() + b * out_size + c * P, P,
                    dz.data() + c * ld + b * P);
  }
  activation_backward(dz, cache.activated, p.activation);

  ConstMatrixMap dzm(dz.data(), Cout, ld);
  ConstMatrixMap columns(cache.columns.data(), K, ld);
  MatrixMap dw(grad.data() + p.weight_offset, Cout, K);
  Eigen::Map<Eigen::VectorXd> db(grad.data() + p.bias_offset, Cout);
  dw.noalias() += dzm * columns.transpose();
  db += dzm.rowwise().sum();
  if (!need_input) return {};

  ConstMatrixMap w(params.data() + p.weight_offset, Cout, K);
  RowMatrix dcol(K, ld);
  dcol.noalias() = w.transpose() * dzm;
  Buffer dx(batch * p.in.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    col2im(p, dcol.data() + b * P, ld, dx.data() + b * p.in.size());
  return dx;
}

Buffer dense_forward(const detail::DensePlan& p,
                                  std::span<const double> params,
                                  std::span<const double> in, std::size_t batch,
                                  detail::LayerCache* cache) {
  ConstMatrixMap x(in.data(), batch, p.in);
  ConstMatrixMap w(params.data() + p.weight_offset, p.out, p.in);
  ConstVectorMap bias(params.data() + p.bias_offset, p.out);
  Buffer out(batch * p.out);
  MatrixMap z(out.data(), batch, p.out);
  z.noalias() = x * w.transpose();
  z.rowwise() += bias.transpose();
  activate(out, p.activation);
  if (cache) cache->activated = out;
  return out;
}

Buffer dense_backward(const detail::DensePlan& p,
                                   std::span<const double> params,
                                   const detail::LayerCache& cache,
                                   Buffer delta,
                                   std::size_t batch, std::span<double> grad,
                                   bool need_input) {
  activation_backward(delta, cache.activated, p.activation);
  ConstMatrixMap dz(delta.data(), batch, p.out);
  ConstMatrixMap x(cache.input.data(), batch, p.in);
  MatrixMap dw(grad.data() + p.weight_offset, p.out, p.in);
  Eigen::Map<Eigen::VectorXd> db(grad.data() + p.bias_offset, p.out);
  dw.noalias() += dz.transpose() * x;
  db += dz.colwise().sum().transpose();
  if (!need_input) return {};
  Buffer dx(batch * p.in);
  ConstMatrixMap w(params.data() + p.weight_offset, p.out, p.in);
  MatrixMap(dx.data(), batch, p.in).noalias() = dz * w;
  return dx;
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelSpec

ModelSpec ModelSpec::m1() {
  ModelSpec s;
  s.arch = Arch::M1;
  s.input = {1, 28, 28};
  s.num_classes = 10;
  s.layers = {
      ConvDesc{32, 3, 1, Padding::Valid, Activation::Relu, true},
      ConvDesc{64, 3, 1, Padding::Valid, Activation::Relu, true},
      DenseDesc{64, Activation::Relu},
      DenseDesc{32, Activation::Relu},
      DenseDesc{10, Activation::None},
  };
  return s;
}

ModelSpec ModelSpec::m2() {
  ModelSpec s;
  s.arch = Arch::M2;
  s.input = {3, 32, 32};
  s.num_classes = 10;
  s.layers = {
      ConvDesc{16, 3, 1, Padding::Same, Activation::Relu, true},
      ConvDesc{16, 3, 1, Padding::Same, Activation::Relu, true},
      ConvDesc{32, 3, 1, Padding::Same, Activation::Relu, true},
      ConvDesc{32, 3, 1, Padding::Same, Activation::Relu, true},
      DenseDesc{128, Activation::Relu},
      DenseDesc{10, Activation::None},
  };
  return s;
}

ModelSpec ModelSpec::mlp_small(std::size_t input_dim, std::size_t hidden,
                               std::size_t num_classes) {
  ModelSpec s;
  s.arch = Arch::MlpSmall;
  s.input = {1, 1, input_dim};
  s.num_classes = num_classes;
  s.layers = {DenseDesc{hidden, Activation::Relu},
              DenseDesc{num_classes, Activation::None}};
  return s;
}

std::string ModelSpec::id() const {
  std::string s = arch_name(arch);
  s += ':' + std::to_string(input.channels) + 'x' +
       std::to_string(input.height) + 'x' + std::to_string(input.width);
  for (const auto& layer : layers) {
    s += '|';
    if (const auto* c = std::get_if<ConvDesc>(&layer)) {
      s += 'c' + std::to_string(c->out_channels) + 'k' +
           std::to_string(c->kernel) + 's' + std::to_string(c->stride) +
           (c->padding == Padding::Same ? 's' : 'v') +
           activation_code(c->activation) + (c->pool ? "p" : "");
    } else {
      const auto& d = std::get<DenseDesc>(layer);
      s += "fc" + std::to_string(d.width) + activation_code(d.activation);
    }
  }
  return s;
}

void ModelSpec::validate() const { (void)detail::compile(*this); }

std::size_t ModelSpec::parameter_count() const {
  return detail::compile(*this).parameter_count;
}

// ---------------------------------------------------------------------------
// Plan

namespace detail {

Plan compile(const ModelSpec& spec) {
  if (spec.layers.empty()) throw InputError("model spec has no layers");
  if (spec.num_classes < 1) throw InputError("model spec has no classes");
  if (spec.input.size() == 0) throw InputError("model input shape is empty");

  Plan plan;
  plan.input_size = spec.input.size();
  plan.num_classes = spec.num_classes;
  Shape3 shape = spec.input;
  bool seen_dense = false;
  std::size_t offset = 0;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto where = "layer " + std::to_string(i) + ": ";
    if (const auto* c = std::get_if<ConvDesc>(&spec.layers[i])) {
      if (seen_dense)
        throw InputError(where + "convolution after a dense layer");
      if (c->out_channels == 0 || c->kernel == 0 || c->stride == 0)
        throw InputError(where + "convolution sizes must be positive");
      ConvPlan p;
      p.in = shape;
      p.kernel = c->kernel;
      p.stride = c->stride;
      p.pad = c->padding == Padding::Same ? (c->kernel - 1) / 2 : 0;
      p.activation = c->activation;
      p.pool = c->pool;
      const auto span_h = shape.height + 2 * p.pad;
      const auto span_w = shape.width + 2 * p.pad;
      if (span_h < c->kernel || span_w < c->kernel)
        throw InputError(where + "kernel larger than input");
      p.conv_out = {c->out_channels, (span_h - c->kernel) / c->stride + 1,
                    (span_w - c->kernel) / c->stride + 1};
      p.out = p.conv_out;
      if (p.pool) {
        if (p.conv_out.height < 2 || p.conv_out.width < 2)
          throw InputError(where + "feature map too small to pool");
        p.out.height /= 2;
        p.out.width /= 2;
      }
      p.weight_offset = offset;
      offset += c->out_channels * p.patch();
      p.bias_offset = offset;
      offset += c->out_channels;
      shape = p.out;
      plan.layers.emplace_back(p);
    } else {
      const auto& d = std::get<DenseDesc>(spec.layers[i]);
      if (d.width == 0) throw InputError(where + "dense width must be positive");
      seen_dense = true;
      DensePlan p;
      p.in = shape.size();
      p.out = d.width;
      p.activation = d.activation;
      p.weight_offset = offset;
      offset += p.in * p.out;
      p.bias_offset = offset;
      offset += p.out;
      shape = {1, 1, d.width};
      plan.layers.emplace_back(p);
    }
  }

  const auto* last = std::get_if<DensePlan>(&plan.layers.back());
  if (!last || last->out != spec.num_classes)
    throw InputError("final layer must be dense with width equal to the class count");
  if (last->activation != Activation::None)
    throw InputError("final layer must not have an activation");
  plan.parameter_count = offset;
  return plan;
}

Buffer run_forward(const Plan& plan, std::span<const double> params,
                                std::span<const double> input,
                                std::size_t batch, Trace* trace) {
  if (trace) {
    trace->batch = batch;
    trace->layers.assign(plan.layers.size(), {});
  }
  Buffer cur(input.begin(), input.end());
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    LayerCache* cache = trace ? &trace->layers[i] : nullptr;
    Buffer next = std::visit(
        [&](const auto& p) {
          if constexpr (std::is_same_v<std::decay_t<decltype(p)>, ConvPlan>)
            return conv_forward(p, params, cur, batch, cache);
          else
            return dense_forward(p, params, cur, batch, cache);
        },
        plan.layers[i]);
    check_finite(next, i);
    if (cache) cache->input = std::move(cur);
    cur = std::move(next);
  }
  return cur;
}

void run_backward(const Plan& plan, std::span<const double> params,
                  const Trace& trace, std::span<const double> dlogits,
                  std::span<double> grad) {
  Buffer delta(dlogits.begin(), dlogits.end());
  for (std::size_t i = plan.layers.size(); i-- > 0;) {
    const bool need_input = i > 0;
    delta = std::visit(
        [&](const auto& p) {
          if constexpr (std::is_same_v<std::decay_t<decltype(p)>, ConvPlan>)
            return conv_backward(p, params, trace.layers[i], std::move(delta),
                                 trace.batch, grad, need_input);
          else
            return dense_backward(p, params, trace.layers[i], std::move(delta),
                                  trace.batch, grad, need_input);
        },
        plan.layers[i]);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  const auto plan = detail::compile(spec_);
  params_.resize(plan.parameter_count);
  Rng rng = make_rng(seed, {0x1417});
  auto fill = [&](std::size_t begin, std::size_t end, std::size_t fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-s, s);
    for (std::size_t i = begin; i < end; ++i) params_[i] = dist(rng);
  };
  for (const auto& layer : plan.layers) {
    std::visit(
        [&](const auto& p) {
          std::size_t fan_in;
          std::size_t bias_count;
          if constexpr (std::is_same_v<std::decay_t<decltype(p)>,
                                       detail::ConvPlan>) {
            fan_in = p.patch();
            bias_count = p.conv_out.channels;
          } else {
            fan_in = p.in;
            bias_count = p.out;
          }
          fill(p.weight_offset, p.bias_offset, fan_in);
          fill(p.bias_offset, p.bias_offset + bias_count, fan_in);
        },
        layer);
  }
}

Model::Model(ModelSpec spec, std::vector<double> parameters)
    : spec_(std::move(spec)), params_(parameters.begin(), parameters.end()) {
  const auto expected = spec_.parameter_count();
  if (params_.size() != expected)
    throw InputError("parameter vector has " + std::to_string(params_.size()) +
                     " values, spec needs " + std::to_string(expected));
}

namespace {
constexpr std::size_t kInferenceChunk = 32;
}

Tensor logits(const Model& model, const Tensor& batch) {
  const auto plan = detail::compile(model.spec());
  if (batch.shape().size() < 2 || batch.row_size() != plan.input_size)
    throw InputError("batch rows have " + std::to_string(batch.row_size()) +
                     " values, model expects " +
                     std::to_string(plan.input_size));
  const std::size_t n = batch.rows(), C = plan.num_classes;
  Buffer out(n * C);
  for (std::size_t start = 0; start < n; start += kInferenceChunk) {
    const std::size_t count = std::min(kInferenceChunk, n - start);
    auto z = detail::run_forward(
        plan, model.parameters(),
        batch.values().subspan(start * plan.input_size, count * plan.input_size),
        count, nullptr);
    std::copy(z.begin(), z.end(), out.begin() + static_cast<std::ptrdiff_t>(start * C));
  }
  return Tensor({n, C}, std::move(out));
}

Tensor softmax(const Tensor& z, double temperature) {
  if (!(temperature > 0.0)) throw InputError("temperature must be positive");
  Tensor out = z;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double m = -std::numeric_limits<double>::infinity();
    for (double& v : row) {
      v /= temperature;
      m = std::max(m, v);
    }
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - m);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

Tensor forward(const Model& model, const Tensor& batch, double temperature) {
  if (!(temperature > 0.0)) throw InputError("temperature must be positive");
  return softmax(logits(model, batch), temperature);
}

}  // namespace knfu::nn
