#pragma once

// Central finite-difference gradient checking for every layer kind. The
// objective is a random linear functional of the layer output, L = sum(W * y),
// whose analytic gradient is exactly the backward pass fed with W upstream.
//
// The FD side evaluates an independent double-precision re-implementation of
// the layer function (naive loops). Differencing the float32 forward directly
// at epsilon = 1e-3 would drown small gradient entries in rounding noise;
// the fp64 oracle keeps the comparison about calculus, not about ulps.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sgz/layer.hpp"
#include "sgz/rng.hpp"
#include "sgz/tensor.hpp"

namespace sgz {

namespace detail {

// Shuffled arithmetic grid: all values distinct, spaced 0.02 apart and at
// least 0.01 from zero. Keeps maxpool argmaxes and relu gates stable under
// +-epsilon perturbation.
inline Tensor distinct_grid(const std::vector<int>& shape, Rng& rng) {
  Tensor t(shape);
  const std::size_t n = t.size();
  std::vector<float> vals(n);
  for (std::size_t i = 0; i < n; ++i) {
    float v = (static_cast<float>(i) - static_cast<float>(n) / 2.0f) * 0.02f;
    vals[i] = v >= 0.0f ? v + 0.01f : v - 0.01f;
  }
  rng.shuffle(vals);
  for (std::size_t i = 0; i < n; ++i) t[i] = vals[i];
  return t;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Naive fp64 re-evaluation of the layer function. Dropout applies the cached
// mask so the differentiated function is fixed across perturbations; frozen
// or eval-mode batchnorm uses the stored running statistics as constants.
inline std::vector<double> ref_forward(const Layer& l,
                                       const std::vector<Tensor>& in,
                                       const ForwardCache& cache) {
  const Tensor& x = in[0];
  switch (l.kind) {
    case LayerKind::Conv: {
      const Tensor& w = l.params.at("weight");
      const Tensor& b = l.params.at("bias");
      const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const int oh = conv_out_size(H, kh, l.stride, l.padding);
      const int ow = conv_out_size(W, kw, l.stride, l.padding);
      std::vector<double> out(static_cast<std::size_t>(N) * O * oh * ow);
      std::size_t oi = 0;
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
          for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx, ++oi) {
              double acc = b[static_cast<std::size_t>(o)];
              for (int c = 0; c < C; ++c)
                for (int i = 0; i < kh; ++i)
                  for (int j = 0; j < kw; ++j) {
                    const int yy = y * l.stride - l.padding + i;
                    const int xj = xx * l.stride - l.padding + j;
                    if (yy < 0 || yy >= H || xj < 0 || xj >= W) continue;
                    acc += static_cast<double>(x.at(n, c, yy, xj)) *
                           w.at(o, c, i, j);
                  }
              out[oi] = acc;
            }
      return out;
    }
    case LayerKind::Dense: {
      const Tensor& w = l.params.at("weight");
      const Tensor& b = l.params.at("bias");
      const int N = x.dim(0), F = x.dim(1), O = w.dim(0);
      std::vector<double> out(static_cast<std::size_t>(N) * O);
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) {
          double acc = b[static_cast<std::size_t>(o)];
          for (int f = 0; f < F; ++f)
            acc += static_cast<double>(x.at(n, f)) * w.at(o, f);
          out[static_cast<std::size_t>(n) * O + o] = acc;
        }
      return out;
    }
    case LayerKind::Relu: {
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = x[i] > 0.0f ? static_cast<double>(x[i]) : 0.0;
      return out;
    }
    case LayerKind::MaxPool: {
      const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int oh = conv_out_size(H, l.window, l.stride, l.padding);
      const int ow = conv_out_size(W, l.window, l.stride, l.padding);
      std::vector<double> out;
      out.reserve(static_cast<std::size_t>(N) * C * oh * ow);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx) {
              double best = -1e300;
              for (int i = 0; i < l.window; ++i)
                for (int j = 0; j < l.window; ++j) {
                  const int yy = y * l.stride - l.padding + i;
                  const int xj = xx * l.stride - l.padding + j;
                  if (yy < 0 || yy >= H || xj < 0 || xj >= W) continue;
                  best = std::max(best, static_cast<double>(x.at(n, c, yy, xj)));
                }
              out.push_back(best);
            }
      return out;
    }
    case LayerKind::Dropout: {
      std::vector<double> out(x.size());
      for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = static_cast<double>(x[i]) * cache.mask[i];
      return out;
    }
    case LayerKind::BatchNorm: {
      const Tensor& gamma = l.params.at("gamma");
      const Tensor& beta = l.params.at("beta");
      const int C = x.dim(1);
      const bool spatial = x.rank() == 4;
      const std::size_t hw =
          spatial ? static_cast<std::size_t>(x.dim(2)) * x.dim(3) : 1;
      const std::size_t N = x.dim(0);
      const std::size_t chan_stride = static_cast<std::size_t>(C) * hw;
      std::vector<double> out(x.size());
      for (int c = 0; c < C; ++c) {
        double mean, var;
        if (cache.stats_fixed) {
          mean = l.state.at("running_mean")[c];
          var = l.state.at("running_var")[c];
        } else {
          double sum = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < hw; ++s)
              sum += x[n * chan_stride + static_cast<std::size_t>(c) * hw + s];
          mean = sum / static_cast<double>(N * hw);
          double sq = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t s = 0; s < hw; ++s) {
              const double d =
                  x[n * chan_stride + static_cast<std::size_t>(c) * hw + s] - mean;
              sq += d * d;
            }
          var = sq / static_cast<double>(N * hw);
        }
        const double istd = 1.0 / std::sqrt(var + static_cast<double>(l.epsilon));
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t s = 0; s < hw; ++s) {
            const std::size_t i =
                n * chan_stride + static_cast<std::size_t>(c) * hw + s;
            out[i] = static_cast<double>(gamma[c]) * (x[i] - mean) * istd +
                     beta[c];
          }
      }
      return out;
    }
    case LayerKind::Flatten:
    case LayerKind::ResidualAdd:
    case LayerKind::GlobalAvgPool:
    case LayerKind::Concat: {
      if (l.kind == LayerKind::Flatten) {
        return std::vector<double>(x.data(), x.data() + x.size());
      }
      if (l.kind == LayerKind::ResidualAdd) {
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
          out[i] = static_cast<double>(x[i]) + in[1][i];
        return out;
      }
      if (l.kind == LayerKind::GlobalAvgPool) {
        const int N = x.dim(0), C = x.dim(1);
        const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
        std::vector<double> out(static_cast<std::size_t>(N) * C);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            const float* p =
                x.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t s = 0; s < hw; ++s) acc += p[s];
            out[static_cast<std::size_t>(n) * C + c] =
                acc / static_cast<double>(hw);
          }
        return out;
      }
      // Concat.
      const int N = x.dim(0);
      const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
      std::vector<double> out;
      for (int n = 0; n < N; ++n)
        for (const Tensor& t : in) {
          const std::size_t sz = static_cast<std::size_t>(t.dim(1)) * hw;
          for (std::size_t s = 0; s < sz; ++s) out.push_back(t[n * sz + s]);
        }
      return out;
    }
    case LayerKind::SoftmaxHead: {
      const int N = x.dim(0), K = x.dim(1);
      std::vector<double> out(x.size());
      for (int n = 0; n < N; ++n) {
        double m = x.at(n, 0);
        for (int k = 1; k < K; ++k) m = std::max(m, static_cast<double>(x.at(n, k)));
        double sum = 0.0;
        for (int k = 0; k < K; ++k) sum += std::exp(static_cast<double>(x.at(n, k)) - m);
        for (int k = 0; k < K; ++k)
          out[static_cast<std::size_t>(n) * K + k] =
              std::exp(static_cast<double>(x.at(n, k)) - m) / sum;
      }
      return out;
    }
  }
  throw StateError("unknown layer kind in gradcheck reference");
}

}  // namespace detail

// Max relative error between analytic and central-difference gradients over
// every input element and every parameter element, using
// |a-b| / max(|a|, |b|, 1e-8).
inline double grad_check(const Layer& proto,
                         const std::vector<std::vector<int>>& input_shapes,
                         double epsilon, std::uint64_t seed,
                         bool distinct_inputs = false) {
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < input_shapes.size(); ++i) {
    Rng gen(mix_seed(seed, i));
    inputs.push_back(distinct_inputs
                         ? detail::distinct_grid(input_shapes[i], gen)
                         : Tensor::uniform(input_shapes[i], -1.0f, 1.0f, gen));
  }

  // Analytic pass through the real float32 implementation.
  Layer work = proto;  // running stats may move; keep the prototype intact
  std::vector<const Tensor*> ptrs;
  for (const auto& t : inputs) ptrs.push_back(&t);
  Rng drop(mix_seed(seed, 0x0d0d));
  ForwardCache cache;
  Tensor out = layer_forward(work, ptrs, Mode::Train, &drop, &cache);

  Rng wgen(mix_seed(seed, 0xc0ffee));
  Tensor weights = Tensor::uniform(out.shape(), -1.0f, 1.0f, wgen);
  BackwardResult analytic = layer_backward(proto, weights, cache);

  auto objective = [&](const Layer& l) {
    std::vector<double> y = detail::ref_forward(l, inputs, cache);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
      acc += static_cast<double>(weights[i]) * y[i];
    return acc;
  };

  double max_err = 0.0;
  auto fd_at = [&](float& slot, const Layer& l) {
    const float saved = slot;
    slot = static_cast<float>(saved + epsilon);
    const double hi = static_cast<double>(slot);
    const double lp = objective(l);
    slot = static_cast<float>(saved - epsilon);
    const double lo = static_cast<double>(slot);
    const double lm = objective(l);
    slot = saved;
    return (lp - lm) / (hi - lo);
  };

  for (std::size_t t = 0; t < inputs.size(); ++t)
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double fd = fd_at(inputs[t][i], proto);
      max_err =
          std::max(max_err, detail::rel_err(analytic.input_grads[t][i], fd));
    }

  Layer perturbed = proto;
  for (auto& [name, p] : perturbed.params) {
    const Tensor& g = analytic.param_grads.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double fd = fd_at(p[i], perturbed);
      max_err = std::max(max_err, detail::rel_err(g[i], fd));
    }
  }
  return max_err;
}

inline double grad_check(const Layer& proto, const std::vector<int>& input_shape,
                         double epsilon, std::uint64_t seed,
                         bool distinct_inputs = false) {
  return grad_check(proto, std::vector<std::vector<int>>{input_shape}, epsilon,
                    seed, distinct_inputs);
}

// FD check of the fused softmax + cross-entropy gradient. The loss side is
// recomputed in double for the same reason ref_forward exists.
inline double grad_check_softmax_ce(int batch, int classes, double epsilon,
                                    std::uint64_t seed) {
  Rng gen(seed);
  Tensor logits = Tensor::uniform({batch, classes}, -2.0f, 2.0f, gen);
  std::vector<int> labels(batch);
  for (int& l : labels) l = static_cast<int>(gen.uniform_index(classes));

  auto loss64 = [&]() {
    double acc = 0.0;
    for (int n = 0; n < batch; ++n) {
      const float* row = logits.data() + static_cast<std::size_t>(n) * classes;
      double m = row[0];
      for (int k = 1; k < classes; ++k) m = std::max(m, static_cast<double>(row[k]));
      double sum = 0.0;
      for (int k = 0; k < classes; ++k) sum += std::exp(static_cast<double>(row[k]) - m);
      acc += std::log(sum) + m - static_cast<double>(row[labels[n]]);
    }
    return acc / static_cast<double>(batch);
  };

  SoftmaxCeResult res = softmax_ce(logits, labels);
  double max_err = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const float saved = logits[i];
    logits[i] = static_cast<float>(saved + epsilon);
    const double hi = static_cast<double>(logits[i]);
    const double lp = loss64();
    logits[i] = static_cast<float>(saved - epsilon);
    const double lo = static_cast<double>(logits[i]);
    const double lm = loss64();
    logits[i] = saved;
    const double fd = (lp - lm) / (hi - lo);
    max_err = std::max(max_err, detail::rel_err(res.logits_grad[i], fd));
  }
  return max_err;
}

// One gradcheck fixture per layer kind, small enough to run in seconds.
struct GradCheckEntry {
  std::string kind;
  double max_rel_err = 0.0;
  double threshold = 0.0;
  bool passed() const { return max_rel_err <= threshold; }
};

inline std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  std::vector<GradCheckEntry> out;
  Rng init(mix_seed(seed, 0x1417));
  auto add = [&](const std::string& kind, double err, double thr) {
    out.push_back({kind, err, thr});
  };

  {
    Layer conv = make_conv(2, 3, 3, 1, 1, init);
    add("conv", grad_check(conv, {1, 2, 6, 6}, 1e-3, seed), 1e-3);
  }
  {
    Layer dense = make_dense(10, 7, init);
    add("dense", grad_check(dense, {3, 10}, 1e-3, seed), 1e-3);
  }
  add("relu", grad_check(make_relu(), {2, 20}, 1e-3, seed, true), 1e-3);
  add("maxpool",
      grad_check(make_maxpool(3, 2, 1), {1, 2, 6, 6}, 1e-3, seed, true), 1e-3);
  add("dropout", grad_check(make_dropout(0.3f), {2, 15}, 1e-3, seed), 1e-3);
  add("batchnorm", grad_check(make_batchnorm(3), {4, 3, 5, 5}, 1e-3, seed),
      1e-2);
  add("flatten", grad_check(make_flatten(), {2, 3, 4, 4}, 1e-3, seed), 1e-3);
  add("gap", grad_check(make_global_avg_pool(), {2, 3, 4, 4}, 1e-3, seed),
      1e-3);
  add("concat",
      grad_check(make_concat(), {{1, 2, 3, 3}, {1, 3, 3, 3}}, 1e-3, seed),
      1e-3);
  add("residual-add",
      grad_check(make_residual_add(), {{2, 3, 4, 4}, {2, 3, 4, 4}}, 1e-3, seed),
      1e-3);
  add("softmax-ce", grad_check_softmax_ce(4, 5, 1e-3, seed), 1e-3);
  return out;
}

}  // namespace sgz
