#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sgz/error.hpp"
#include "sgz/rng.hpp"
#include "sgz/tensor.hpp"

namespace sgz {

enum class LayerKind {
  Conv,
  Dense,
  Relu,
  MaxPool,
  Dropout,
  BatchNorm,
  Flatten,
  GlobalAvgPool,
  Concat,
  ResidualAdd,
  SoftmaxHead,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::GlobalAvgPool: return "gap";
    case LayerKind::Concat: return "concat";
    case LayerKind::ResidualAdd: return "residual-add";
    case LayerKind::SoftmaxHead: return "softmax-head";
  }
  return "?";
}

enum class Mode { Train, Eval };

// A differentiable unit. `params` and `grads` are congruent key-for-key;
// `state` carries batch-norm running statistics, which are updated by
// train-mode forward rather than by the optimizer. Frozen layers keep both
// params and state fixed.
struct Layer {
  LayerKind kind{};
  std::map<std::string, Tensor> params;
  std::map<std::string, Tensor> grads;
  std::map<std::string, Tensor> state;
  bool frozen = false;

  int stride = 1;
  int padding = 0;
  int window = 2;      // maxpool
  float rate = 0.5f;   // dropout
  float momentum = 0.9f;  // batch-norm running-stat blend
  float epsilon = 1e-5f;  // batch-norm

  void zero_grads() {
    for (auto& [k, g] : grads) std::fill(g.data(), g.data() + g.size(), 0.0f);
  }
};

// Activations saved by a train-mode forward, sufficient for an exact backward.
struct ForwardCache {
  bool valid = false;
  std::vector<Tensor> inputs;
  std::vector<int> argmax;        // maxpool: flat batched-input indices
  Tensor mask;                    // dropout: per-element multiplier
  Tensor xhat;                    // batchnorm: normalized input
  std::vector<float> inv_std;     // batchnorm: per-channel 1/sqrt(var+eps)
  bool stats_fixed = false;       // batchnorm ran with running stats
  std::vector<int> out_shape;
};

struct BackwardResult {
  std::vector<Tensor> input_grads;
  std::map<std::string, Tensor> param_grads;
};

// ---------------------------------------------------------------------------
// Factories (He-uniform init for layers feeding ReLU, unit gamma, zero bias).

namespace detail {
inline void alloc_grads(Layer& l) {
  for (const auto& [k, p] : l.params) l.grads[k] = Tensor::zeros(p.shape());
}
}  // namespace detail

inline Layer make_conv(int in_ch, int out_ch, int k, int stride, int padding,
                       Rng& rng) {
  if (in_ch < 1 || out_ch < 1 || k < 1 || stride < 1 || padding < 0)
    throw ConfigError("invalid conv hyperparameters");
  Layer l;
  l.kind = LayerKind::Conv;
  l.stride = stride;
  l.padding = padding;
  const float limit = std::sqrt(6.0f / (static_cast<float>(in_ch) * k * k));
  l.params["weight"] = Tensor::uniform({out_ch, in_ch, k, k}, -limit, limit, rng);
  l.params["bias"] = Tensor::zeros({out_ch});
  detail::alloc_grads(l);
  return l;
}

inline Layer make_dense(int in_features, int out_features, Rng& rng) {
  if (in_features < 1 || out_features < 1)
    throw ConfigError("invalid dense dimensions");
  Layer l;
  l.kind = LayerKind::Dense;
  const float limit = std::sqrt(6.0f / static_cast<float>(in_features));
  l.params["weight"] =
      Tensor::uniform({out_features, in_features}, -limit, limit, rng);
  l.params["bias"] = Tensor::zeros({out_features});
  detail::alloc_grads(l);
  return l;
}

inline Layer make_relu() {
  Layer l;
  l.kind = LayerKind::Relu;
  return l;
}

inline Layer make_maxpool(int window, int stride, int padding = 0) {
  if (window < 1 || stride < 1 || padding < 0)
    throw ConfigError("invalid maxpool hyperparameters");
  Layer l;
  l.kind = LayerKind::MaxPool;
  l.window = window;
  l.stride = stride;
  l.padding = padding;
  return l;
}

inline Layer make_dropout(float rate) {
  if (rate < 0.0f || rate >= 1.0f)
    throw ConfigError("dropout rate must lie in [0,1)");
  Layer l;
  l.kind = LayerKind::Dropout;
  l.rate = rate;
  return l;
}

inline Layer make_batchnorm(int channels, float momentum = 0.9f,
                            float epsilon = 1e-5f) {
  if (channels < 1) throw ConfigError("batchnorm needs >= 1 channel");
  Layer l;
  l.kind = LayerKind::BatchNorm;
  l.momentum = momentum;
  l.epsilon = epsilon;
  l.params["gamma"] = Tensor::full({channels}, 1.0f);
  l.params["beta"] = Tensor::zeros({channels});
  l.state["running_mean"] = Tensor::zeros({channels});
  l.state["running_var"] = Tensor::full({channels}, 1.0f);
  detail::alloc_grads(l);
  return l;
}

inline Layer make_flatten() {
  Layer l;
  l.kind = LayerKind::Flatten;
  return l;
}

inline Layer make_global_avg_pool() {
  Layer l;
  l.kind = LayerKind::GlobalAvgPool;
  return l;
}

inline Layer make_concat() {
  Layer l;
  l.kind = LayerKind::Concat;
  return l;
}

inline Layer make_residual_add() {
  Layer l;
  l.kind = LayerKind::ResidualAdd;
  return l;
}

inline Layer make_softmax_head() {
  Layer l;
  l.kind = LayerKind::SoftmaxHead;
  return l;
}

// ---------------------------------------------------------------------------
// Shape rules (batched shapes, leading dim = N). Single source of truth for
// graph shape inference; the kernels check again at run time.

inline std::vector<int> layer_output_shape(
    const Layer& layer, const std::vector<std::vector<int>>& in) {
  auto require = [&](bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(std::string(kind_name(layer.kind)) + ": " + msg);
  };
  require(!in.empty(), "no inputs");
  const auto& a = in[0];
  switch (layer.kind) {
    case LayerKind::Conv: {
      require(in.size() == 1 && a.size() == 4, "expects one (N,C,H,W) input");
      const auto& w = layer.params.at("weight");
      require(a[1] == w.dim(1), "input channels " + std::to_string(a[1]) +
                                    " != kernel channels " +
                                    std::to_string(w.dim(1)));
      const int oh = conv_out_size(a[2], w.dim(2), layer.stride, layer.padding);
      const int ow = conv_out_size(a[3], w.dim(3), layer.stride, layer.padding);
      require(oh >= 1 && ow >= 1, "non-positive output size");
      return {a[0], w.dim(0), oh, ow};
    }
    case LayerKind::Dense: {
      require(in.size() == 1 && a.size() == 2, "expects one (N,F) input");
      const auto& w = layer.params.at("weight");
      require(a[1] == w.dim(1), "input features " + std::to_string(a[1]) +
                                    " != weight columns " +
                                    std::to_string(w.dim(1)));
      return {a[0], w.dim(0)};
    }
    case LayerKind::Relu:
    case LayerKind::Dropout:
      require(in.size() == 1, "expects one input");
      return a;
    case LayerKind::MaxPool: {
      require(in.size() == 1 && a.size() == 4, "expects one (N,C,H,W) input");
      require(layer.window <= a[2] + 2 * layer.padding &&
                  layer.window <= a[3] + 2 * layer.padding,
              "window larger than padded input");
      const int oh = conv_out_size(a[2], layer.window, layer.stride, layer.padding);
      const int ow = conv_out_size(a[3], layer.window, layer.stride, layer.padding);
      require(oh >= 1 && ow >= 1, "non-positive output size");
      return {a[0], a[1], oh, ow};
    }
    case LayerKind::BatchNorm: {
      require(in.size() == 1 && (a.size() == 2 || a.size() == 4),
              "expects one (N,F) or (N,C,H,W) input");
      const int c = a[1];
      require(c == layer.params.at("gamma").dim(0), "channel count mismatch");
      return a;
    }
    case LayerKind::Flatten: {
      require(in.size() == 1 && a.size() >= 2, "expects one rank>=2 input");
      int f = 1;
      for (std::size_t i = 1; i < a.size(); ++i) f *= a[i];
      return {a[0], f};
    }
    case LayerKind::GlobalAvgPool:
      require(in.size() == 1 && a.size() == 4, "expects one (N,C,H,W) input");
      return {a[0], a[1]};
    case LayerKind::Concat: {
      require(a.size() == 4, "expects (N,C,H,W) inputs");
      int c = 0;
      for (const auto& s : in) {
        require(s.size() == 4 && s[0] == a[0] && s[2] == a[2] && s[3] == a[3],
                "spatial/batch mismatch between branches");
        c += s[1];
      }
      return {a[0], c, a[2], a[3]};
    }
    case LayerKind::ResidualAdd:
      require(in.size() == 2 && in[0] == in[1],
              "expects two identically shaped inputs");
      return a;
    case LayerKind::SoftmaxHead:
      require(in.size() == 1 && a.size() == 2, "expects one (N,K) input");
      return a;
  }
  throw ShapeError("unknown layer kind");
}

// ---------------------------------------------------------------------------
// Forward

namespace detail {

inline void conv_sample_forward(const float* in, int C, int H, int W,
                                const Tensor& kernel, const Tensor& bias,
                                int stride, int padding, int oh, int ow,
                                float* out) {
  const int O = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  for (int o = 0; o < O; ++o) {
    const float b = bias[static_cast<std::size_t>(o)];
    for (int y = 0; y < oh; ++y) {
      const int y0 = y * stride - padding;
      for (int x = 0; x < ow; ++x) {
        const int x0 = x * stride - padding;
        float acc = b;
        for (int c = 0; c < C; ++c) {
          const float* in_c = in + static_cast<std::size_t>(c) * H * W;
          const float* k_c = kernel.data() +
              (static_cast<std::size_t>(o) * C + c) * kh * kw;
          for (int i = 0; i < kh; ++i) {
            const int yy = y0 + i;
            if (yy < 0 || yy >= H) continue;
            const float* in_row = in_c + static_cast<std::size_t>(yy) * W;
            const float* k_row = k_c + static_cast<std::size_t>(i) * kw;
            for (int j = 0; j < kw; ++j) {
              const int xx = x0 + j;
              if (xx < 0 || xx >= W) continue;
              acc += in_row[xx] * k_row[j];
            }
          }
        }
        out[(static_cast<std::size_t>(o) * oh + y) * ow + x] = acc;
      }
    }
  }
}

inline void conv_sample_backward(const float* in, const float* up, int C,
                                 int H, int W, const Tensor& kernel,
                                 int stride, int padding, int oh, int ow,
                                 float* din, float* dkernel, float* dbias) {
  const int O = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  for (int o = 0; o < O; ++o) {
    for (int y = 0; y < oh; ++y) {
      const int y0 = y * stride - padding;
      for (int x = 0; x < ow; ++x) {
        const int x0 = x * stride - padding;
        const float g = up[(static_cast<std::size_t>(o) * oh + y) * ow + x];
        dbias[o] += g;
        for (int c = 0; c < C; ++c) {
          const std::size_t base_in = static_cast<std::size_t>(c) * H * W;
          const std::size_t base_k =
              (static_cast<std::size_t>(o) * C + c) * kh * kw;
          for (int i = 0; i < kh; ++i) {
            const int yy = y0 + i;
            if (yy < 0 || yy >= H) continue;
            const float* in_row = in + base_in + static_cast<std::size_t>(yy) * W;
            float* din_row = din + base_in + static_cast<std::size_t>(yy) * W;
            const float* k_row = kernel.data() + base_k + static_cast<std::size_t>(i) * kw;
            float* dk_row = dkernel + base_k + static_cast<std::size_t>(i) * kw;
            for (int j = 0; j < kw; ++j) {
              const int xx = x0 + j;
              if (xx < 0 || xx >= W) continue;
              dk_row[j] += g * in_row[xx];
              din_row[xx] += g * k_row[j];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor layer_forward(Layer& layer,
                            const std::vector<const Tensor*>& inputs,
                            Mode mode, Rng* rng = nullptr,
                            ForwardCache* cache = nullptr) {
  std::vector<std::vector<int>> in_shapes;
  in_shapes.reserve(inputs.size());
  for (const Tensor* t : inputs) in_shapes.push_back(t->shape());
  const std::vector<int> out_shape = layer_output_shape(layer, in_shapes);

  const bool train = mode == Mode::Train;
  if (cache) {
    *cache = ForwardCache{};
    cache->out_shape = out_shape;
  }
  auto save_inputs = [&] {
    if (!cache) return;
    cache->valid = true;
    for (const Tensor* t : inputs) cache->inputs.push_back(*t);
  };

  const Tensor& x = *inputs[0];
  switch (layer.kind) {
    case LayerKind::Conv: {
      const Tensor& w = layer.params.at("weight");
      const Tensor& b = layer.params.at("bias");
      const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int oh = out_shape[2], ow = out_shape[3];
      Tensor out(out_shape);
      const std::size_t in_stride = static_cast<std::size_t>(C) * H * W;
      const std::size_t out_stride =
          static_cast<std::size_t>(out_shape[1]) * oh * ow;
      for (int n = 0; n < N; ++n)
        detail::conv_sample_forward(x.data() + n * in_stride, C, H, W, w, b,
                                    layer.stride, layer.padding, oh, ow,
                                    out.data() + n * out_stride);
      save_inputs();
      return out;
    }
    case LayerKind::Dense: {
      const Tensor& w = layer.params.at("weight");
      const Tensor& b = layer.params.at("bias");
      const int N = x.dim(0), F = x.dim(1), O = w.dim(0);
      Tensor out({N, O});
      for (int n = 0; n < N; ++n) {
        const float* xr = x.data() + static_cast<std::size_t>(n) * F;
        float* or_ = out.data() + static_cast<std::size_t>(n) * O;
        for (int o = 0; o < O; ++o) {
          const float* wr = w.data() + static_cast<std::size_t>(o) * F;
          float acc = b[static_cast<std::size_t>(o)];
          for (int f = 0; f < F; ++f) acc += xr[f] * wr[f];
          or_[o] = acc;
        }
      }
      save_inputs();
      return out;
    }
    case LayerKind::Relu: {
      Tensor out = x;
      for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] < 0.0f) out[i] = 0.0f;
      save_inputs();
      return out;
    }
    case LayerKind::MaxPool: {
      const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int oh = out_shape[2], ow = out_shape[3];
      Tensor out(out_shape);
      std::vector<int> argmax(out.size());
      const std::size_t in_stride = static_cast<std::size_t>(C) * H * W;
      const std::size_t out_stride = static_cast<std::size_t>(C) * oh * ow;
      for (int n = 0; n < N; ++n) {
        Tensor sample({C, H, W},
                      std::vector<float>(x.data() + n * in_stride,
                                         x.data() + (n + 1) * in_stride));
        auto r = maxpool2d(sample, layer.window, layer.stride, layer.padding);
        std::copy(r.output.data(), r.output.data() + r.output.size(),
                  out.data() + n * out_stride);
        for (std::size_t i = 0; i < r.argmax.size(); ++i)
          argmax[n * out_stride + i] =
              static_cast<int>(n * in_stride) + r.argmax[i];
      }
      if (cache) {
        cache->valid = true;
        cache->argmax = std::move(argmax);
        cache->inputs.push_back(Tensor::zeros(x.shape()));  // shape carrier
      }
      return out;
    }
    case LayerKind::Dropout: {
      if (!train || layer.frozen || layer.rate == 0.0f) {
        if (cache && train) {
          cache->valid = true;
          cache->mask = Tensor::full(x.shape(), 1.0f);
        }
        return x;
      }
      if (!rng) throw StateError("dropout train-mode forward needs an rng");
      const float keep_scale = 1.0f / (1.0f - layer.rate);
      Tensor mask(x.shape());
      Tensor out(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const float m = rng->bernoulli(layer.rate) ? 0.0f : keep_scale;
        mask[i] = m;
        out[i] = x[i] * m;
      }
      if (cache) {
        cache->valid = true;
        cache->mask = std::move(mask);
      }
      return out;
    }
    case LayerKind::BatchNorm: {
      const Tensor& gamma = layer.params.at("gamma");
      const Tensor& beta = layer.params.at("beta");
      const int C = x.dim(1);
      const bool spatial = x.rank() == 4;
      const std::size_t hw = spatial ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1;
      const std::size_t N = x.dim(0);
      const std::size_t count = N * hw;
      const std::size_t chan_stride = static_cast<std::size_t>(C) * hw;
      auto channel_loop = [&](int c, auto&& fn) {
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t base = n * chan_stride + static_cast<std::size_t>(c) * hw;
          for (std::size_t s = 0; s < hw; ++s) fn(base + s);
        }
      };

      const bool use_batch_stats = train && !layer.frozen;
      Tensor out(x.shape());
      Tensor xhat(x.shape());
      std::vector<float> inv_std(C);
      Tensor& rmean = layer.state.at("running_mean");
      Tensor& rvar = layer.state.at("running_var");
      for (int c = 0; c < C; ++c) {
        float mean, var;
        if (use_batch_stats) {
          double sum = 0.0;
          channel_loop(c, [&](std::size_t i) { sum += x[i]; });
          mean = static_cast<float>(sum / static_cast<double>(count));
          double sq = 0.0;
          channel_loop(c, [&](std::size_t i) {
            const double d = x[i] - mean;
            sq += d * d;
          });
          var = static_cast<float>(sq / static_cast<double>(count));
          rmean[c] = layer.momentum * rmean[c] + (1.0f - layer.momentum) * mean;
          rvar[c] = layer.momentum * rvar[c] + (1.0f - layer.momentum) * var;
        } else {
          mean = rmean[c];
          var = rvar[c];
        }
        const float istd = 1.0f / std::sqrt(var + layer.epsilon);
        inv_std[c] = istd;
        const float g = gamma[c], bt = beta[c];
        channel_loop(c, [&](std::size_t i) {
          const float xh = (x[i] - mean) * istd;
          xhat[i] = xh;
          out[i] = g * xh + bt;
        });
      }
      if (cache) {
        cache->valid = true;
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
        cache->stats_fixed = !use_batch_stats;
      }
      return out;
    }
    case LayerKind::Flatten: {
      save_inputs();
      return x.reshaped(out_shape);
    }
    case LayerKind::GlobalAvgPool: {
      const int N = x.dim(0), C = x.dim(1);
      const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
      Tensor out({N, C});
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const float* p = x.data() + (static_cast<std::size_t>(n) * C + c) * hw;
          double acc = 0.0;
          for (std::size_t s = 0; s < hw; ++s) acc += p[s];
          out.at(n, c) = static_cast<float>(acc / static_cast<double>(hw));
        }
      if (cache) {
        cache->valid = true;
        cache->inputs.push_back(Tensor::zeros(x.shape()));  // shape carrier
      }
      return out;
    }
    case LayerKind::Concat: {
      Tensor out(out_shape);
      const int N = out_shape[0];
      const std::size_t hw = static_cast<std::size_t>(out_shape[2]) * out_shape[3];
      const std::size_t out_stride = static_cast<std::size_t>(out_shape[1]) * hw;
      for (int n = 0; n < N; ++n) {
        float* dst = out.data() + n * out_stride;
        for (const Tensor* t : inputs) {
          const std::size_t sz = static_cast<std::size_t>(t->dim(1)) * hw;
          std::copy(t->data() + n * sz, t->data() + (n + 1) * sz, dst);
          dst += sz;
        }
      }
      if (cache) {
        cache->valid = true;
        for (const Tensor* t : inputs)
          cache->inputs.push_back(Tensor::zeros(t->shape()));  // shape carriers
      }
      return out;
    }
    case LayerKind::ResidualAdd: {
      Tensor out = add_elementwise(*inputs[0], *inputs[1]);
      if (cache) cache->valid = true;
      return out;
    }
    case LayerKind::SoftmaxHead: {
      const int N = x.dim(0), K = x.dim(1);
      Tensor out({N, K});
      for (int n = 0; n < N; ++n) {
        const float* row = x.data() + static_cast<std::size_t>(n) * K;
        float m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        double sum = 0.0;
        for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(row[k]) - m);
        float* orow = out.data() + static_cast<std::size_t>(n) * K;
        for (int k = 0; k < K; ++k)
          orow[k] = static_cast<float>(std::exp(static_cast<double>(row[k]) - m) / sum);
      }
      if (cache) cache->valid = true;
      return out;
    }
  }
  throw StateError("unknown layer kind in forward");
}

inline Tensor layer_forward(Layer& layer, const Tensor& input, Mode mode,
                            Rng* rng = nullptr, ForwardCache* cache = nullptr) {
  return layer_forward(layer, std::vector<const Tensor*>{&input}, mode, rng,
                       cache);
}

// ---------------------------------------------------------------------------
// Backward

inline BackwardResult layer_backward(const Layer& layer, const Tensor& upstream,
                                     const ForwardCache& cache) {
  if (!cache.valid)
    throw StateError(std::string(kind_name(layer.kind)) +
                     " backward without a train-mode forward cache");
  if (upstream.shape() != cache.out_shape)
    throw StateError(std::string(kind_name(layer.kind)) +
                     " upstream shape " + upstream.shape_string() +
                     " does not match forward output " +
                     Tensor::shape_string(cache.out_shape));
  BackwardResult r;
  switch (layer.kind) {
    case LayerKind::Conv: {
      const Tensor& x = cache.inputs.at(0);
      const Tensor& w = layer.params.at("weight");
      const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int oh = cache.out_shape[2], ow = cache.out_shape[3];
      Tensor din = Tensor::zeros(x.shape());
      Tensor dw = Tensor::zeros(w.shape());
      Tensor db = Tensor::zeros(layer.params.at("bias").shape());
      const std::size_t in_stride = static_cast<std::size_t>(C) * H * W;
      const std::size_t out_stride =
          static_cast<std::size_t>(cache.out_shape[1]) * oh * ow;
      for (int n = 0; n < N; ++n)
        detail::conv_sample_backward(
            x.data() + n * in_stride, upstream.data() + n * out_stride, C, H,
            W, w, layer.stride, layer.padding, oh, ow, din.data() + n * in_stride,
            dw.data(), db.data());
      r.input_grads.push_back(std::move(din));
      r.param_grads["weight"] = std::move(dw);
      r.param_grads["bias"] = std::move(db);
      return r;
    }
    case LayerKind::Dense: {
      const Tensor& x = cache.inputs.at(0);
      const Tensor& w = layer.params.at("weight");
      const int N = x.dim(0), F = x.dim(1), O = w.dim(0);
      Tensor din = Tensor::zeros(x.shape());
      Tensor dw = Tensor::zeros(w.shape());
      Tensor db = Tensor::zeros({O});
      for (int n = 0; n < N; ++n) {
        const float* xr = x.data() + static_cast<std::size_t>(n) * F;
        const float* gr = upstream.data() + static_cast<std::size_t>(n) * O;
        float* dr = din.data() + static_cast<std::size_t>(n) * F;
        for (int o = 0; o < O; ++o) {
          const float g = gr[o];
          if (g == 0.0f) continue;
          db[static_cast<std::size_t>(o)] += g;
          const float* wr = w.data() + static_cast<std::size_t>(o) * F;
          float* dwr = dw.data() + static_cast<std::size_t>(o) * F;
          for (int f = 0; f < F; ++f) {
            dwr[f] += g * xr[f];
            dr[f] += g * wr[f];
          }
        }
      }
      r.input_grads.push_back(std::move(din));
      r.param_grads["weight"] = std::move(dw);
      r.param_grads["bias"] = std::move(db);
      return r;
    }
    case LayerKind::Relu: {
      const Tensor& x = cache.inputs.at(0);
      Tensor din = upstream;
      for (std::size_t i = 0; i < din.size(); ++i)
        if (x[i] <= 0.0f) din[i] = 0.0f;
      r.input_grads.push_back(std::move(din));
      return r;
    }
    case LayerKind::MaxPool: {
      Tensor din = Tensor::zeros(cache.inputs.at(0).shape());
      for (std::size_t i = 0; i < upstream.size(); ++i)
        din[static_cast<std::size_t>(cache.argmax[i])] += upstream[i];
      r.input_grads.push_back(std::move(din));
      return r;
    }
    case LayerKind::Dropout: {
      Tensor din = upstream;
      for (std::size_t i = 0; i < din.size(); ++i) din[i] *= cache.mask[i];
      r.input_grads.push_back(std::move(din));
      return r;
    }
    case LayerKind::BatchNorm: {
      const Tensor& gamma = layer.params.at("gamma");
      const Tensor& xhat = cache.xhat;
      const int C = xhat.dim(1);
      const bool spatial = xhat.rank() == 4;
      const std::size_t hw =
          spatial ? static_cast<std::size_t>(xhat.dim(2)) * xhat.dim(3) : 1;
      const std::size_t N = xhat.dim(0);
      const std::size_t count = N * hw;
      const std::size_t chan_stride = static_cast<std::size_t>(C) * hw;
      Tensor din(xhat.shape());
      Tensor dgamma = Tensor::zeros({C});
      Tensor dbeta = Tensor::zeros({C});
      for (int c = 0; c < C; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t base = n * chan_stride + static_cast<std::size_t>(c) * hw;
          for (std::size_t s = 0; s < hw; ++s) {
            sum_g += upstream[base + s];
            sum_gx += static_cast<double>(upstream[base + s]) * xhat[base + s];
          }
        }
        dbeta[c] = static_cast<float>(sum_g);
        dgamma[c] = static_cast<float>(sum_gx);
        const float g = gamma[c];
        const float istd = cache.inv_std[c];
        if (cache.stats_fixed) {
          // Statistics were constants (eval/frozen); the map is affine.
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = n * chan_stride + static_cast<std::size_t>(c) * hw;
            for (std::size_t s = 0; s < hw; ++s)
              din[base + s] = upstream[base + s] * g * istd;
          }
        } else {
          const double inv_count = 1.0 / static_cast<double>(count);
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t base = n * chan_stride + static_cast<std::size_t>(c) * hw;
            for (std::size_t s = 0; s < hw; ++s) {
              const double dxhat = static_cast<double>(upstream[base + s]) * g;
              const double term = dxhat - inv_count * (sum_g * g) -
                                  inv_count * xhat[base + s] * (sum_gx * g);
              din[base + s] = static_cast<float>(term * istd);
            }
          }
        }
      }
      r.input_grads.push_back(std::move(din));
      r.param_grads["gamma"] = std::move(dgamma);
      r.param_grads["beta"] = std::move(dbeta);
      return r;
    }
    case LayerKind::Flatten: {
      r.input_grads.push_back(upstream.reshaped(cache.inputs.at(0).shape()));
      return r;
    }
    case LayerKind::GlobalAvgPool: {
      const auto& in_shape = cache.inputs.at(0).shape();
      const int N = in_shape[0], C = in_shape[1];
      const std::size_t hw = static_cast<std::size_t>(in_shape[2]) * in_shape[3];
      const float scale = 1.0f / static_cast<float>(hw);
      Tensor din(in_shape);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const float g = upstream.at(n, c) * scale;
          float* p = din.data() + (static_cast<std::size_t>(n) * C + c) * hw;
          for (std::size_t s = 0; s < hw; ++s) p[s] = g;
        }
      r.input_grads.push_back(std::move(din));
      return r;
    }
    case LayerKind::Concat: {
      const int N = cache.out_shape[0];
      const std::size_t hw =
          static_cast<std::size_t>(cache.out_shape[2]) * cache.out_shape[3];
      const std::size_t up_stride =
          static_cast<std::size_t>(cache.out_shape[1]) * hw;
      std::size_t offset = 0;
      for (const Tensor& carrier : cache.inputs) {
        Tensor g(carrier.shape());
        const std::size_t sz = static_cast<std::size_t>(carrier.dim(1)) * hw;
        for (int n = 0; n < N; ++n)
          std::copy(upstream.data() + n * up_stride + offset,
                    upstream.data() + n * up_stride + offset + sz,
                    g.data() + n * sz);
        offset += sz;
        r.input_grads.push_back(std::move(g));
      }
      return r;
    }
    case LayerKind::ResidualAdd: {
      r.input_grads.push_back(upstream);
      r.input_grads.push_back(upstream);
      return r;
    }
    case LayerKind::SoftmaxHead:
      throw StateError(
          "softmax head has no standalone backward; training couples it with "
          "the cross-entropy loss");
  }
  throw StateError("unknown layer kind in backward");
}

// ---------------------------------------------------------------------------
// Softmax + cross-entropy head (batch-mean loss, max-subtraction stability).

struct SoftmaxCeResult {
  float loss = 0.0f;
  Tensor logits_grad;
};

// `class_weights` is optional; when non-empty the loss is the weighted mean
// with per-sample weight w[label]. Empty weights give the plain batch mean.
inline SoftmaxCeResult softmax_ce(const Tensor& logits,
                                  std::span<const int> labels,
                                  std::span<const float> class_weights = {}) {
  if (logits.rank() != 2)
    throw ShapeError("softmax_ce expects (batch, classes) logits");
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::size_t>(N) != labels.size())
    throw LabelError("softmax_ce: label count != batch size");
  if (!class_weights.empty() && static_cast<int>(class_weights.size()) != K)
    throw LabelError("softmax_ce: class weight count != classes");
  SoftmaxCeResult r;
  r.logits_grad = Tensor::zeros(logits.shape());
  double loss_acc = 0.0, weight_acc = 0.0;
  std::vector<double> probs(K);
  for (int n = 0; n < N; ++n) {
    const int label = labels[n];
    if (label < 0 || label >= K)
      throw LabelError("softmax_ce: label " + std::to_string(label) +
                       " out of range [0," + std::to_string(K) + ")");
    const float* row = logits.data() + static_cast<std::size_t>(n) * K;
    double m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, static_cast<double>(row[k]));
    double sum = 0.0;
    for (int k = 0; k < K; ++k) {
      probs[k] = std::exp(static_cast<double>(row[k]) - m);
      sum += probs[k];
    }
    const double wn =
        class_weights.empty() ? 1.0 : static_cast<double>(class_weights[label]);
    loss_acc += wn * (std::log(sum) + m - static_cast<double>(row[label]));
    weight_acc += wn;
    float* grow = r.logits_grad.data() + static_cast<std::size_t>(n) * K;
    for (int k = 0; k < K; ++k)
      grow[k] = static_cast<float>(wn * (probs[k] / sum - (k == label ? 1.0 : 0.0)));
  }
  if (weight_acc <= 0.0) throw LabelError("softmax_ce: zero total weight");
  r.loss = static_cast<float>(loss_acc / weight_acc);
  const float inv = static_cast<float>(1.0 / weight_acc);
  for (std::size_t i = 0; i < r.logits_grad.size(); ++i) r.logits_grad[i] *= inv;
  return r;
}

}  // namespace sgz
