#include "network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <malloc.h>
#include <map>
#include <sstream>

#include <Eigen/Core>

#include "error.hpp"
#include "rng.hpp"

namespace {

// Activation tensors are a few MB each. Keeping them on the heap rather than in
// fresh mmap'd pages avoids a page-fault and zeroing storm on every layer.
[[maybe_unused]] const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  return true;
}();

}  // namespace

namespace oodb {

namespace fs = std::filesystem;

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Residual: return "residual";
  }
  return "?";
}

LayerSpec LayerSpec::dense(int out) {
  LayerSpec s;
  s.kind = LayerKind::Dense;
  s.units = out;
  return s;
}

LayerSpec LayerSpec::conv(int out_channels, int kernel, int stride, int pad) {
  LayerSpec s;
  s.kind = LayerKind::Conv;
  s.units = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  return s;
}

LayerSpec LayerSpec::batchnorm(double momentum, double epsilon) {
  LayerSpec s;
  s.kind = LayerKind::BatchNorm;
  s.momentum = momentum;
  s.epsilon = epsilon;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::avgpool(int kernel) {
  LayerSpec s;
  s.kind = LayerKind::AvgPool;
  s.kernel = kernel;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::Flatten;
  return s;
}

LayerSpec LayerSpec::residual(std::vector<LayerSpec> body) {
  LayerSpec s;
  s.kind = LayerKind::Residual;
  s.inner = std::move(body);
  return s;
}

NetworkSpec NetworkSpec::mini_resnet(Shape input_shape, int num_classes, double bn_momentum,
                                     double bn_epsilon, int channels, int hidden) {
  NetworkSpec spec;
  spec.input_shape = std::move(input_shape);
  spec.num_classes = num_classes;
  const int k = 3, pad = 1;
  spec.layers = {
      LayerSpec::conv(channels, k, 1, pad),
      LayerSpec::batchnorm(bn_momentum, bn_epsilon),
      LayerSpec::relu(),
      LayerSpec::residual({LayerSpec::conv(channels, k, 1, pad),
                           LayerSpec::batchnorm(bn_momentum, bn_epsilon), LayerSpec::relu(),
                           LayerSpec::conv(channels, k, 1, pad),
                           LayerSpec::batchnorm(bn_momentum, bn_epsilon)}),
      LayerSpec::relu(),
      LayerSpec::avgpool(2),
      LayerSpec::flatten(),
      LayerSpec::dense(hidden),
      LayerSpec::relu(),
      LayerSpec::dense(num_classes),
  };
  spec.probe_index = 8;
  return spec;
}

namespace {

void set_momentum(std::vector<LayerSpec>& layers, double momentum) {
  for (auto& l : layers) {
    if (l.kind == LayerKind::BatchNorm) l.momentum = momentum;
    set_momentum(l.inner, momentum);
  }
}

}  // namespace

void NetworkSpec::set_bn_momentum(double momentum) { set_momentum(layers, momentum); }

// ---- plan --------------------------------------------------------------------

namespace {

struct PlanBuilder {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<bool> trainable;
  std::vector<std::pair<int, int>> fans;  // glorot fans, (0,0) for non-weights
  std::vector<BnSlot> bn;

  int add(std::string name, Shape shape, bool train, int fan_in = 0, int fan_out = 0) {
    names.push_back(std::move(name));
    shapes.push_back(std::move(shape));
    trainable.push_back(train);
    fans.emplace_back(fan_in, fan_out);
    return static_cast<int>(names.size()) - 1;
  }

  std::vector<Node> build(const std::vector<LayerSpec>& layers, Shape shape, const std::string& prefix,
                          Shape* out_shape) {
    std::vector<Node> nodes;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string where = prefix + "L" + std::to_string(i);
      auto shape_error = [&](const std::string& what) {
        fail(ErrorKind::Shape, "layer " + where + " (" + to_string(l.kind) + "): " + what +
                                   ", input shape " + shape_string(shape));
      };
      Node node;
      node.kind = l.kind;
      node.spec = l;
      node.spec.inner.clear();
      node.in_shape = shape;
      switch (l.kind) {
        case LayerKind::Dense: {
          if (shape.size() != 1) shape_error("dense needs a flat input");
          if (l.units < 1) shape_error("dense needs >= 1 output");
          node.param = add(where + ".dense.weight", {l.units, shape[0]}, true, shape[0], l.units);
          add(where + ".dense.bias", {l.units}, true);
          node.out_shape = {l.units};
          break;
        }
        case LayerKind::Conv: {
          if (shape.size() != 3) shape_error("conv needs a (C,H,W) input");
          if (l.units < 1 || l.kernel < 1 || l.stride < 1 || l.pad < 0) shape_error("bad conv geometry");
          const int ho = (shape[1] + 2 * l.pad - l.kernel) / l.stride + 1;
          const int wo = (shape[2] + 2 * l.pad - l.kernel) / l.stride + 1;
          if (ho < 1 || wo < 1) shape_error("kernel larger than padded input");
          const int kk = l.kernel * l.kernel;
          node.param = add(where + ".conv.weight", {l.units, shape[0], l.kernel, l.kernel}, true,
                           shape[0] * kk, l.units * kk);
          add(where + ".conv.bias", {l.units}, true);
          node.out_shape = {l.units, ho, wo};
          break;
        }
        case LayerKind::BatchNorm: {
          if (shape.size() != 3 && shape.size() != 1) shape_error("batchnorm needs (C,H,W) or (F)");
          if (l.momentum < 0.0 || l.momentum > 1.0)
            fail(ErrorKind::InvalidArgument, "layer " + where + ": momentum outside [0,1]");
          if (l.epsilon <= 0.0) fail(ErrorKind::InvalidArgument, "layer " + where + ": epsilon must be > 0");
          const int ch = shape[0];
          node.param = add(where + ".bn.gamma", {ch}, true);
          add(where + ".bn.beta", {ch}, true);
          BnSlot slot;
          slot.running_mean = add(where + ".bn.running_mean", {ch}, false);
          slot.running_var = add(where + ".bn.running_var", {ch}, false);
          slot.momentum = l.momentum;
          slot.epsilon = l.epsilon;
          node.bn = static_cast<int>(bn.size());
          bn.push_back(slot);
          node.out_shape = shape;
          break;
        }
        case LayerKind::Relu:
          node.out_shape = shape;
          break;
        case LayerKind::AvgPool: {
          if (shape.size() != 3) shape_error("avgpool needs a (C,H,W) input");
          if (l.kernel < 1 || shape[1] / l.kernel < 1 || shape[2] / l.kernel < 1)
            shape_error("bad pooling kernel");
          node.out_shape = {shape[0], shape[1] / l.kernel, shape[2] / l.kernel};
          break;
        }
        case LayerKind::Flatten:
          node.out_shape = {static_cast<int>(shape_size(shape))};
          break;
        case LayerKind::Residual: {
          Shape body_out;
          node.inner = build(l.inner, shape, where + ".res.", &body_out);
          if (body_out != shape)
            shape_error("residual body maps to " + shape_string(body_out));
          node.out_shape = shape;
          break;
        }
      }
      shape = node.out_shape;
      nodes.push_back(std::move(node));
    }
    *out_shape = shape;
    return nodes;
  }
};

struct Plan {
  PlanBuilder builder;
  std::vector<Node> nodes;
};

Plan make_plan(const NetworkSpec& spec) {
  require(!spec.input_shape.empty(), ErrorKind::Shape, "network input shape is empty");
  Plan plan;
  Shape out;
  plan.nodes = plan.builder.build(spec.layers, spec.input_shape, "", &out);
  require(out == Shape{spec.num_classes}, ErrorKind::Shape,
          "final layer produces " + shape_string(out) + ", expected (" +
              std::to_string(spec.num_classes) + ")");
  require(spec.probe_index >= 0 && spec.probe_index < static_cast<int>(spec.layers.size()) &&
              spec.layers[spec.probe_index].kind == LayerKind::Relu,
          ErrorKind::InvalidArgument,
          "probe_index " + std::to_string(spec.probe_index) + " does not address a relu layer");
  return plan;
}

}  // namespace

template <typename T>
Tensor<T> glorot_uniform(int fan_in, int fan_out, const Shape& shape, std::uint64_t seed) {
  require(fan_in >= 1 && fan_out >= 1, ErrorKind::InvalidArgument, "glorot fans must be >= 1");
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Rng rng(seed);
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

template <typename T>
std::size_t ParamStore<T>::num_trainable_values() const {
  std::size_t n = 0;
  for (const auto& t : tensors)
    if (t.trainable) n += t.value.size();
  return n;
}

template <typename T>
std::uint64_t ParamStore<T>::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors) {
    h = fnv1a64(t.name.data(), t.name.size(), h);
    for (int d : t.value.shape) h = fnv1a64(&d, sizeof d, h);
    for (T v : t.value.data) {
      const float f = static_cast<float>(v);
      h = fnv1a64(&f, sizeof f, h);
    }
  }
  return h;
}

template <typename T>
void reinitialize(Model<T>& model, std::uint64_t seed) {
  const Plan plan = make_plan(model.spec);
  const auto& b = plan.builder;
  auto& tensors = model.store.tensors;
  tensors.clear();
  for (std::size_t i = 0; i < b.names.size(); ++i) {
    ParamTensor<T> p;
    p.name = b.names[i];
    p.trainable = b.trainable[i];
    const auto [fan_in, fan_out] = b.fans[i];
    if (fan_in > 0) {
      p.value = glorot_uniform<T>(fan_in, fan_out, b.shapes[i], hash64({seed, i}));
    } else {
      const bool ones = p.name.ends_with(".gamma") || p.name.ends_with(".running_var");
      p.value = Tensor<T>(b.shapes[i], ones ? T(1) : T(0));
    }
    tensors.push_back(std::move(p));
  }
  model.store.bn = b.bn;
  model.nodes = plan.nodes;
}

template <typename T>
Model<T> make_model(const NetworkSpec& spec, std::uint64_t seed) {
  Model<T> m;
  m.spec = spec;
  reinitialize(m, seed);
  return m;
}

template <typename To, typename From>
Model<To> model_cast(const Model<From>& model) {
  Model<To> out;
  out.spec = model.spec;
  out.nodes = model.nodes;
  out.store.bn = model.store.bn;
  for (const auto& t : model.store.tensors)
    out.store.tensors.push_back({t.name, tensor_cast<To>(t.value), t.trainable});
  return out;
}

// ---- kernels -------------------------------------------------------------------

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  int c, h, w, o, k, stride, pad, ho, wo;
  int rows() const { return c * k * k; }
  int cols() const { return ho * wo; }
};

ConvGeom conv_geom(const Node& node) {
  return {node.in_shape[0], node.in_shape[1], node.in_shape[2], node.spec.units,
          node.spec.kernel, node.spec.stride, node.spec.pad, node.out_shape[1], node.out_shape[2]};
}

// Output columns [lo, hi) whose input column ox * stride - pad + kx is inside [0, w).
inline std::pair<int, int> valid_cols(const ConvGeom& g, int kx) {
  const int shift = g.pad - kx;
  int lo = shift > 0 ? (shift + g.stride - 1) / g.stride : 0;
  int hi = (g.w - 1 + shift) >= 0 ? (g.w - 1 + shift) / g.stride + 1 : 0;
  lo = std::min(lo, g.wo);
  hi = std::clamp(hi, lo, g.wo);
  return {lo, hi};
}

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  for (int c = 0; c < g.c; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.cols();
        const auto [lo, hi] = valid_cols(g, kx);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int y = oy * g.stride - g.pad + ky;
          T* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (y < 0 || y >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * g.h + y) * g.w - g.pad + kx;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  for (int c = 0; c < g.c; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.cols();
        const auto [lo, hi] = valid_cols(g, kx);
        for (int oy = 0; oy < g.ho; ++oy) {
          const int y = oy * g.stride - g.pad + ky;
          if (y < 0 || y >= g.h) continue;
          T* dst = img + (static_cast<std::size_t>(c) * g.h + y) * g.w - g.pad + kx;
          const T* src = row + static_cast<std::size_t>(oy) * g.wo;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
}

// Reductions in double with eight independent lanes; the lane order is fixed,
// so results stay bitwise reproducible.
template <typename T>
double lane_sum(const T* p, int n) {
  double acc[8] = {};
  int s = 0;
  for (; s + 8 <= n; s += 8)
    for (int l = 0; l < 8; ++l) acc[l] += p[s + l];
  double t = 0.0;
  for (; s < n; ++s) t += p[s];
  for (double a : acc) t += a;
  return t;
}

template <typename T>
double lane_sq_dev(const T* p, int n, double mean) {
  double acc[8] = {};
  int s = 0;
  for (; s + 8 <= n; s += 8)
    for (int l = 0; l < 8; ++l) {
      const double d = p[s + l] - mean;
      acc[l] += d * d;
    }
  double t = 0.0;
  for (; s < n; ++s) t += (p[s] - mean) * (p[s] - mean);
  for (double a : acc) t += a;
  return t;
}

template <typename T>
double lane_dot(const T* a, const T* b, int n) {
  double acc[8] = {};
  int s = 0;
  for (; s + 8 <= n; s += 8)
    for (int l = 0; l < 8; ++l) acc[l] += static_cast<double>(a[s + l]) * b[s + l];
  double t = 0.0;
  for (; s < n; ++s) t += static_cast<double>(a[s]) * b[s];
  for (double x : acc) t += x;
  return t;
}

template <typename T>
Shape batch_shape(int n, const Shape& item) {
  Shape s{n};
  s.insert(s.end(), item.begin(), item.end());
  return s;
}

// (channels, spatial) view of an item shape for batch norm.
std::pair<int, int> bn_dims(const Shape& item) {
  if (item.size() == 1) return {item[0], 1};
  return {item[0], item[1] * item[2]};
}

template <typename T>
struct Engine {
  const ParamStore<T>& store;
  ForwardOptions options;
  std::uint64_t* mask_hash = nullptr;
  std::vector<BatchStats>* bn_stats = nullptr;

  const Tensor<T>& param(int idx) const { return store.tensors[idx].value; }

  Tensor<T> forward_node(const Node& node, const Tensor<T>& in, Mode mode, LayerCache<T>& cache) {
    const int n = in.dim(0);
    Tensor<T> out(batch_shape<T>(n, node.out_shape));
    switch (node.kind) {
      case LayerKind::Dense: {
        const auto& w = param(node.param);
        const auto& b = param(node.param + 1);
        const int f = node.in_shape[0], o = node.out_shape[0];
        CMapMat<T> x(in.ptr(), n, f);
        CMapMat<T> wm(w.ptr(), o, f);
        MapMat<T> y(out.ptr(), n, o);
        y.noalias() = x * wm.transpose();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < o; ++j) y(i, j) += b[j];
        break;
      }
      case LayerKind::Conv: {
        const auto g = conv_geom(node);
        const auto& w = param(node.param);
        const auto& b = param(node.param + 1);
        std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
        CMapMat<T> wm(w.ptr(), g.o, g.rows());
        for (int i = 0; i < n; ++i) {
          im2col(in.ptr() + i * in.item_size(), g, col.data());
          CMapMat<T> cm(col.data(), g.rows(), g.cols());
          MapMat<T> y(out.ptr() + i * out.item_size(), g.o, g.cols());
          y.noalias() = wm * cm;
          for (int oc = 0; oc < g.o; ++oc) y.row(oc).array() += b[oc];
        }
        break;
      }
      case LayerKind::BatchNorm: {
        const auto [ch, sp] = bn_dims(node.in_shape);
        const auto& gamma = param(node.param);
        const auto& beta = param(node.param + 1);
        const BnSlot& slot = store.bn[node.bn];
        if (mode == Mode::Train) {
          if (n < 2)
            fail(ErrorKind::InvalidArgument,
                 "batch norm in train mode needs batch size >= 2, got " + std::to_string(n));
          const double m = static_cast<double>(n) * sp;
          BatchStats stats{std::vector<double>(ch), std::vector<double>(ch)};
          cache.aux = Tensor<T>(in.shape);
          cache.vec.assign(ch, T(0));
          for (int c = 0; c < ch; ++c) {
            double sum = 0.0;
            for (int i = 0; i < n; ++i) sum += lane_sum(in.ptr() + (static_cast<std::size_t>(i) * ch + c) * sp, sp);
            const double mean = sum / m;
            double sq = 0.0;
            for (int i = 0; i < n; ++i)
              sq += lane_sq_dev(in.ptr() + (static_cast<std::size_t>(i) * ch + c) * sp, sp, mean);
            const double var = sq / m;
            stats.mean[c] = mean;
            stats.var[c] = var;
            const T inv_std = static_cast<T>(1.0 / std::sqrt(var + slot.epsilon));
            cache.vec[c] = inv_std;
            const T mu = static_cast<T>(mean);
            const T g = gamma[c], b = beta[c];
            for (int i = 0; i < n; ++i) {
              const std::size_t off = (static_cast<std::size_t>(i) * ch + c) * sp;
              const T* x = in.ptr() + off;
              T* xh = cache.aux.ptr() + off;
              T* y = out.ptr() + off;
              for (int s = 0; s < sp; ++s) {
                xh[s] = (x[s] - mu) * inv_std;
                y[s] = g * xh[s] + b;
              }
            }
          }
          if (bn_stats) (*bn_stats)[node.bn] = std::move(stats);
        } else {
          const auto& rm = param(slot.running_mean);
          const auto& rv = param(slot.running_var);
          for (int c = 0; c < ch; ++c) {
            const T inv_std = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + slot.epsilon));
            const T scale = gamma[c] * inv_std;
            const T shift = beta[c] - rm[c] * scale;
            for (int i = 0; i < n; ++i) {
              const std::size_t off = (static_cast<std::size_t>(i) * ch + c) * sp;
              for (int s = 0; s < sp; ++s) out[off + s] = in[off + s] * scale + shift;
            }
          }
        }
        break;
      }
      case LayerKind::Relu: {
        for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
        if (mask_hash) {
          std::uint64_t h = *mask_hash;
          std::uint64_t word = 0;
          for (std::size_t i = 0; i < in.size(); ++i) {
            word = (word << 1) | (in[i] > T(0) ? 1u : 0u);
            if ((i & 63) == 63) {
              h = fnv1a64(&word, sizeof word, h);
              word = 0;
            }
          }
          *mask_hash = fnv1a64(&word, sizeof word, h);
        }
        break;
      }
      case LayerKind::AvgPool: {
        const int k = node.spec.kernel;
        const int c = node.in_shape[0], h = node.in_shape[1], w = node.in_shape[2];
        const int ho = node.out_shape[1], wo = node.out_shape[2];
        const T inv = T(1) / static_cast<T>(k * k);
        for (int i = 0; i < n; ++i)
          for (int ch = 0; ch < c; ++ch) {
            const T* src = in.ptr() + (static_cast<std::size_t>(i) * c + ch) * h * w;
            T* dst = out.ptr() + (static_cast<std::size_t>(i) * c + ch) * ho * wo;
            for (int oy = 0; oy < ho; ++oy)
              for (int ox = 0; ox < wo; ++ox) {
                T acc = 0;
                for (int dy = 0; dy < k; ++dy)
                  for (int dx = 0; dx < k; ++dx) acc += src[(oy * k + dy) * w + ox * k + dx];
                dst[oy * wo + ox] = acc * inv;
              }
          }
        break;
      }
      case LayerKind::Flatten:
        out.data = in.data;
        break;
      case LayerKind::Residual: {
        // acts[j] is the output of body layer j; the block input lives in the parent trace.
        cache.acts.clear();
        cache.inner.assign(node.inner.size(), {});
        for (std::size_t j = 0; j < node.inner.size(); ++j) {
          const Tensor<T>& x = j == 0 ? in : cache.acts.back();
          Tensor<T> y = forward_node(node.inner[j], x, mode, cache.inner[j]);
          cache.acts.push_back(std::move(y));
        }
        const auto& body = cache.acts.back();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] + body[i];
        break;
      }
    }
    return out;
  }
};

template <typename T>
struct BackEngine {
  const ParamStore<T>& store;
  Gradients<T>& grads;

  const Tensor<T>& param(int idx) const { return store.tensors[idx].value; }

  // Returns dL/d(in) given dL/d(out).
  Tensor<T> backward_node(const Node& node, const Tensor<T>& in, const Tensor<T>& out,
                          const Tensor<T>& gout, const LayerCache<T>& cache) {
    const int n = in.dim(0);
    Tensor<T> gin(in.shape);
    switch (node.kind) {
      case LayerKind::Dense: {
        const int f = node.in_shape[0], o = node.out_shape[0];
        const auto& w = param(node.param);
        CMapMat<T> x(in.ptr(), n, f);
        CMapMat<T> wm(w.ptr(), o, f);
        CMapMat<T> gy(gout.ptr(), n, o);
        MapMat<T> gw(grads[node.param].ptr(), o, f);
        gw.noalias() += gy.transpose() * x;
        auto& gb = grads[node.param + 1];
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < o; ++j) gb[j] += gy(i, j);
        MapMat<T> gx(gin.ptr(), n, f);
        gx.noalias() = gy * wm;
        break;
      }
      case LayerKind::Conv: {
        const auto g = conv_geom(node);
        const auto& w = param(node.param);
        CMapMat<T> wm(w.ptr(), g.o, g.rows());
        MapMat<T> gw(grads[node.param].ptr(), g.o, g.rows());
        auto& gb = grads[node.param + 1];
        std::vector<T> col(static_cast<std::size_t>(g.rows()) * g.cols());
        std::vector<T> gcol(col.size());
        for (int i = 0; i < n; ++i) {
          im2col(in.ptr() + i * in.item_size(), g, col.data());
          CMapMat<T> cm(col.data(), g.rows(), g.cols());
          CMapMat<T> gy(gout.ptr() + i * gout.item_size(), g.o, g.cols());
          gw.noalias() += gy * cm.transpose();
          for (int oc = 0; oc < g.o; ++oc)
            gb[oc] += static_cast<T>(lane_sum(gout.ptr() + i * gout.item_size() + static_cast<std::size_t>(oc) * g.cols(), g.cols()));
          MapMat<T> gc(gcol.data(), g.rows(), g.cols());
          gc.noalias() = wm.transpose() * gy;
          col2im(gcol.data(), g, gin.ptr() + i * gin.item_size());
        }
        break;
      }
      case LayerKind::BatchNorm: {
        const auto [ch, sp] = bn_dims(node.in_shape);
        const auto& gamma = param(node.param);
        auto& ggamma = grads[node.param];
        auto& gbeta = grads[node.param + 1];
        const double m = static_cast<double>(n) * sp;
        for (int c = 0; c < ch; ++c) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (int i = 0; i < n; ++i) {
            const std::size_t off = (static_cast<std::size_t>(i) * ch + c) * sp;
            sum_dy += lane_sum(gout.ptr() + off, sp);
            sum_dy_xh += lane_dot(gout.ptr() + off, cache.aux.ptr() + off, sp);
          }
          ggamma[c] += static_cast<T>(sum_dy_xh);
          gbeta[c] += static_cast<T>(sum_dy);
          // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
          const T k = static_cast<T>(gamma[c] * cache.vec[c] / m);
          const T s_dy = static_cast<T>(sum_dy);
          const T s_dyx = static_cast<T>(sum_dy_xh);
          const T mt = static_cast<T>(m);
          for (int i = 0; i < n; ++i) {
            const std::size_t off = (static_cast<std::size_t>(i) * ch + c) * sp;
            const T* dy = gout.ptr() + off;
            const T* xh = cache.aux.ptr() + off;
            T* dx = gin.ptr() + off;
            for (int s = 0; s < sp; ++s) dx[s] = k * (mt * dy[s] - s_dy - xh[s] * s_dyx);
          }
        }
        break;
      }
      case LayerKind::Relu:
        for (std::size_t i = 0; i < in.size(); ++i) gin[i] = in[i] > T(0) ? gout[i] : T(0);
        break;
      case LayerKind::AvgPool: {
        const int k = node.spec.kernel;
        const int c = node.in_shape[0], h = node.in_shape[1], w = node.in_shape[2];
        const int ho = node.out_shape[1], wo = node.out_shape[2];
        const T inv = T(1) / static_cast<T>(k * k);
        for (int i = 0; i < n; ++i)
          for (int ch = 0; ch < c; ++ch) {
            T* dst = gin.ptr() + (static_cast<std::size_t>(i) * c + ch) * h * w;
            const T* src = gout.ptr() + (static_cast<std::size_t>(i) * c + ch) * ho * wo;
            for (int oy = 0; oy < ho; ++oy)
              for (int ox = 0; ox < wo; ++ox) {
                const T v = src[oy * wo + ox] * inv;
                for (int dy = 0; dy < k; ++dy)
                  for (int dx = 0; dx < k; ++dx) dst[(oy * k + dy) * w + ox * k + dx] = v;
              }
          }
        break;
      }
      case LayerKind::Flatten:
        gin.data = gout.data;
        break;
      case LayerKind::Residual: {
        Tensor<T> g = gout;
        for (std::size_t j = node.inner.size(); j-- > 0;) {
          const Tensor<T>& jin = j == 0 ? in : cache.acts[j - 1];
          g = backward_node(node.inner[j], jin, cache.acts[j], g, cache.inner[j]);
        }
        for (std::size_t i = 0; i < gin.size(); ++i) gin[i] = gout[i] + g[i];
        break;
      }
    }
    (void)out;
    return gin;
  }
};

}  // namespace

template <typename T>
ForwardTrace<T> forward(const Model<T>& model, const Tensor<T>& batch, Mode mode,
                        ForwardOptions options) {
  const Shape& item = model.spec.input_shape;
  require(batch.rank() == static_cast<int>(item.size()) + 1 &&
              std::equal(item.begin(), item.end(), batch.shape.begin() + 1),
          ErrorKind::Shape,
          "input batch " + shape_string(batch.shape) + " does not match network input " +
              shape_string(item));
  require(batch.dim(0) >= 1, ErrorKind::Shape, "empty batch");

  ForwardTrace<T> trace;
  trace.mode = mode;
  trace.probe_index = model.spec.probe_index;
  trace.bn_stats.resize(model.store.bn.size());
  trace.caches.resize(model.nodes.size());
  trace.acts.reserve(model.nodes.size() + 1);
  trace.acts.push_back(batch);

  Engine<T> eng{model.store, options};
  if (options.hash_relu_masks) eng.mask_hash = &trace.relu_mask_hash;
  eng.bn_stats = &trace.bn_stats;
  const std::size_t last =
      options.stop_at_probe ? static_cast<std::size_t>(model.spec.probe_index) + 1 : model.nodes.size();
  for (std::size_t i = 0; i < last; ++i)
    trace.acts.push_back(eng.forward_node(model.nodes[i], trace.acts.back(), mode, trace.caches[i]));
  return trace;
}

template <typename T>
Gradients<T> backward(const Model<T>& model, const ForwardTrace<T>& trace,
                      const Tensor<T>& logit_grad, const Tensor<T>& probe_grad) {
  require(trace.valid() && trace.acts.size() == model.nodes.size() + 1, ErrorKind::State,
          "backward needs a complete forward trace");
  require(trace.mode == Mode::Train, ErrorKind::State, "backward needs a train-mode trace");
  require(logit_grad.shape == trace.logits().shape, ErrorKind::Shape,
          "logit gradient shape " + shape_string(logit_grad.shape) + " != logits " +
              shape_string(trace.logits().shape));
  if (!probe_grad.empty())
    require(probe_grad.shape == trace.probe().shape, ErrorKind::Shape,
            "probe gradient shape " + shape_string(probe_grad.shape) + " != probe " +
                shape_string(trace.probe().shape));

  Gradients<T> grads;
  grads.reserve(model.store.tensors.size());
  for (const auto& t : model.store.tensors) grads.emplace_back(t.value.shape, T(0));

  BackEngine<T> eng{model.store, grads};
  Tensor<T> g = logit_grad;
  for (std::size_t i = model.nodes.size(); i-- > 0;) {
    if (static_cast<int>(i) == model.spec.probe_index && !probe_grad.empty())
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += probe_grad[k];
    g = eng.backward_node(model.nodes[i], trace.acts[i], trace.acts[i + 1], g, trace.caches[i]);
  }
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!model.store.tensors[i].trainable) grads[i].fill(T(0));
  return grads;
}

namespace {

template <typename T>
void bn_update_impl(std::span<T> running, std::span<const double> batch, double momentum) {
  require(momentum >= 0.0 && momentum <= 1.0, ErrorKind::InvalidArgument,
          "batch norm momentum " + std::to_string(momentum) + " outside [0,1]");
  require(running.size() == batch.size(), ErrorKind::Shape, "running statistic size mismatch");
  for (std::size_t i = 0; i < running.size(); ++i)
    running[i] = static_cast<T>((1.0 - momentum) * batch[i] + momentum * static_cast<double>(running[i]));
}

}  // namespace

void bn_update_running(std::span<float> running, std::span<const double> batch, double momentum) {
  bn_update_impl(running, batch, momentum);
}

void bn_update_running(std::span<double> running, std::span<const double> batch, double momentum) {
  bn_update_impl(running, batch, momentum);
}

template <typename T>
void apply_running_updates(Model<T>& model, const ForwardTrace<T>& trace) {
  require(trace.mode == Mode::Train, ErrorKind::State, "running statistics need a train-mode trace");
  for (std::size_t b = 0; b < model.store.bn.size(); ++b) {
    const auto& slot = model.store.bn[b];
    const auto& stats = trace.bn_stats[b];
    if (stats.mean.empty()) continue;  // layer not reached (stop_at_probe)
    bn_update_running(model.store.tensors[slot.running_mean].value.span(), stats.mean, slot.momentum);
    bn_update_running(model.store.tensors[slot.running_var].value.span(), stats.var, slot.momentum);
  }
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'O', 'O', 'D', 'B'};
constexpr std::uint32_t kVersion = 1;

void put_le32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_be32(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string where;

  void need(std::size_t n) {
    require(pos + n <= bytes.size(), ErrorKind::Format, where + ": truncated checkpoint");
  }
  std::uint32_t le32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint32_t be32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[pos + i]);
    pos += 4;
    return v;
  }
};

}  // namespace

std::string checkpoint_bytes(const ParamStore<float>& store) {
  std::string out(kMagic, 4);
  put_le32(out, kVersion);
  for (const auto& t : store.tensors) {
    put_le32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_le32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (int d : t.value.shape) put_be32(out, static_cast<std::uint32_t>(d));
    for (float v : t.value.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_le32(out, bits);
    }
  }
  return out;
}

void save_checkpoint(const ParamStore<float>& store, const fs::path& path) {
  const std::string bytes = checkpoint_bytes(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void load_checkpoint(ParamStore<float>& store, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  Reader r{bytes, 0, path.string()};
  r.need(4);
  require(bytes.compare(0, 4, kMagic, 4) == 0, ErrorKind::Format, path.string() + ": bad checkpoint magic");
  r.pos = 4;
  const auto version = r.le32();
  require(version == kVersion, ErrorKind::Format,
          path.string() + ": unsupported checkpoint version " + std::to_string(version));
  std::map<std::string, Tensor<float>> loaded;
  while (r.pos < bytes.size()) {
    const auto len = r.le32();
    r.need(len);
    std::string name = bytes.substr(r.pos, len);
    r.pos += len;
    const auto rank = r.le32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(r.be32()));
    Tensor<float> t(shape);
    for (auto& v : t.data) {
      const std::uint32_t bits = r.le32();
      std::memcpy(&v, &bits, 4);
    }
    loaded.emplace(std::move(name), std::move(t));
  }
  require(loaded.size() == store.tensors.size(), ErrorKind::Consistency,
          path.string() + ": checkpoint holds " + std::to_string(loaded.size()) +
              " tensors, network expects " + std::to_string(store.tensors.size()));
  for (auto& t : store.tensors) {
    auto it = loaded.find(t.name);
    require(it != loaded.end(), ErrorKind::Consistency, path.string() + ": missing tensor " + t.name);
    require(it->second.shape == t.value.shape, ErrorKind::Consistency,
            path.string() + ": tensor " + t.name + " has shape " + shape_string(it->second.shape));
    t.value = std::move(it->second);
  }
}

// ---- finite differences ------------------------------------------------------------

GradCheckReport finite_difference_check(Model<double>& model, const Tensor<double>& batch,
                                        const LossFn& loss_fn, double h, double tol,
                                        std::size_t coords_per_tensor, std::uint64_t seed) {
  ForwardOptions opts;
  opts.hash_relu_masks = true;
  const auto base = forward(model, batch, Mode::Train, opts);
  const LossEval base_loss = loss_fn(base);
  const auto grads = backward(model, base, base_loss.logit_grad, base_loss.probe_grad);

  GradCheckReport report;
  Rng rng(seed);
  for (std::size_t ti = 0; ti < model.store.tensors.size(); ++ti) {
    auto& pt = model.store.tensors[ti];
    if (!pt.trainable) continue;
    std::vector<std::size_t> coords(pt.value.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    rng.shuffle(coords);
    double tensor_max = 0.0;
    std::size_t done = 0;
    for (std::size_t idx : coords) {
      if (done >= coords_per_tensor) break;
      const double orig = pt.value[idx];
      pt.value[idx] = orig + h;
      const auto plus = forward(model, batch, Mode::Train, opts);
      const double lp = loss_fn(plus).loss;
      pt.value[idx] = orig - h;
      const auto minus = forward(model, batch, Mode::Train, opts);
      const double lm = loss_fn(minus).loss;
      pt.value[idx] = orig;
      if (plus.relu_mask_hash != base.relu_mask_hash || minus.relu_mask_hash != base.relu_mask_hash) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = grads[ti][idx];
      // The floor keeps exact-zero gradients (e.g. conv bias feeding BN) from
      // turning roundoff of order eps*|L|/h into a large ratio.
      const double rel =
          std::abs(analytic - numeric) / std::max(1e-6, std::abs(analytic) + std::abs(numeric));
      ++done;
      ++report.checked;
      tensor_max = std::max(tensor_max, rel);
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = pt.name;
        report.worst_index = idx;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
    report.per_tensor.emplace_back(pt.name, tensor_max);
  }
  report.passed = report.checked > 0 && report.max_rel_error <= tol;
  return report;
}

// ---- instantiations -------------------------------------------------------------

template Tensor<float> glorot_uniform<float>(int, int, const Shape&, std::uint64_t);
template Tensor<double> glorot_uniform<double>(int, int, const Shape&, std::uint64_t);
template struct ParamStore<float>;
template struct ParamStore<double>;
template Model<float> make_model<float>(const NetworkSpec&, std::uint64_t);
template Model<double> make_model<double>(const NetworkSpec&, std::uint64_t);
template void reinitialize<float>(Model<float>&, std::uint64_t);
template void reinitialize<double>(Model<double>&, std::uint64_t);
template Model<double> model_cast<double, float>(const Model<float>&);
template Model<float> model_cast<float, double>(const Model<double>&);
template Model<float> model_cast<float, float>(const Model<float>&);
template ForwardTrace<float> forward<float>(const Model<float>&, const Tensor<float>&, Mode, ForwardOptions);
template ForwardTrace<double> forward<double>(const Model<double>&, const Tensor<double>&, Mode, ForwardOptions);
template Gradients<float> backward<float>(const Model<float>&, const ForwardTrace<float>&,
                                          const Tensor<float>&, const Tensor<float>&);
template Gradients<double> backward<double>(const Model<double>&, const ForwardTrace<double>&,
                                            const Tensor<double>&, const Tensor<double>&);
template void apply_running_updates<float>(Model<float>&, const ForwardTrace<float>&);
template void apply_running_updates<double>(Model<double>&, const ForwardTrace<double>&);

}  // namespace oodb
