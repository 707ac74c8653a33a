#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sgz/error.hpp"
#include "sgz/rng.hpp"

namespace sgz {

// Dense N-dimensional float32 array, row-major. Shapes are fixed after
// construction; reshape requires an identical element count.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_size(shape_), 0.0f);
  }

  Tensor(std::vector<int> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size())
      throw ShapeError("tensor data length does not match shape " +
                       shape_string(shape_));
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor uniform(std::vector<int> shape, float lo, float hi, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.uniform(lo, hi);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(int i) { return data_[static_cast<std::size_t>(i)]; }

  // Multi-index access, row-major.
  float& at(int i, int j) { return data_[idx2(i, j)]; }
  float at(int i, int j) const { return data_[idx2(i, j)]; }
  float& at(int i, int j, int k) { return data_[idx3(i, j, k)]; }
  float at(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
  float& at(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
  float at(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

  Tensor reshaped(std::vector<int> shape) const {
    if (checked_size(shape) != data_.size())
      throw ShapeError("reshape from " + shape_string(shape_) + " to " +
                       shape_string(shape) + " changes element count");
    return Tensor(std::move(shape), data_);
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static std::string shape_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }

  std::string shape_string() const { return shape_string(shape_); }

 private:
  static std::size_t checked_size(const std::vector<int>& shape) {
    if (shape.empty()) throw ShapeError("empty shape list");
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 1)
        throw ShapeError("non-positive dimension in shape " + shape_string(shape));
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::size_t idx2(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t idx3(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t idx4(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) *
               shape_[3] + l;
  }

  std::vector<int> shape_;
  std::vector<float> data_;
};

inline std::size_t shape_product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

// Convolution filter bank: kernel (out_channels, in_channels, kh, kw),
// bias (out_channels), zero padding applied symmetrically.
struct ConvParams {
  Tensor kernel;
  Tensor bias;
  int stride = 1;
  int padding = 0;

  int out_channels() const { return kernel.dim(0); }
  int in_channels() const { return kernel.dim(1); }
  int kh() const { return kernel.dim(2); }
  int kw() const { return kernel.dim(3); }
};

inline int conv_out_size(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

// Standard matrix product, (m x k) * (k x n) -> (m x n).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 tensors, got " + a.shape_string() +
                     " and " + b.shape_string());
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dimensions differ: " + a.shape_string() +
                     " vs " + b.shape_string());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    float* out_row = out.data() + static_cast<std::size_t>(i) * n;
    const float* a_row = a.data() + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = a_row[p];
      const float* b_row = b.data() + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) out_row[j] += av * b_row[j];
    }
  }
  return out;
}

// Cross-correlation (no kernel flip) of a (C,H,W) input with a filter bank,
// plus per-output-channel bias.
inline Tensor conv2d(const Tensor& input, const ConvParams& p) {
  if (input.rank() != 3)
    throw ShapeError("conv2d expects a (C,H,W) input, got " + input.shape_string());
  if (p.kernel.rank() != 4)
    throw ShapeError("conv2d kernel must be rank 4, got " + p.kernel.shape_string());
  if (input.dim(0) != p.in_channels())
    throw ShapeError("conv2d channel mismatch: input has " +
                     std::to_string(input.dim(0)) + ", kernel expects " +
                     std::to_string(p.in_channels()));
  if (p.bias.rank() != 1 || p.bias.dim(0) != p.out_channels())
    throw ShapeError("conv2d bias shape must be (out_channels)");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int oh = conv_out_size(H, p.kh(), p.stride, p.padding);
  const int ow = conv_out_size(W, p.kw(), p.stride, p.padding);
  if (oh < 1 || ow < 1)
    throw ShapeError("conv2d output size is non-positive for input " +
                     input.shape_string());
  const int O = p.out_channels(), kh = p.kh(), kw = p.kw();
  Tensor out({O, oh, ow});
  for (int o = 0; o < O; ++o) {
    const float b = p.bias[static_cast<std::size_t>(o)];
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        float acc = b;
        const int y0 = y * p.stride - p.padding;
        const int x0 = x * p.stride - p.padding;
        for (int c = 0; c < C; ++c) {
          for (int i = 0; i < kh; ++i) {
            const int yy = y0 + i;
            if (yy < 0 || yy >= H) continue;
            const float* in_row = input.data() +
                (static_cast<std::size_t>(c) * H + yy) * W;
            const float* k_row = p.kernel.data() +
                ((static_cast<std::size_t>(o) * C + c) * kh + i) * kw;
            for (int j = 0; j < kw; ++j) {
              const int xx = x0 + j;
              if (xx < 0 || xx >= W) continue;
              acc += in_row[xx] * k_row[j];
            }
          }
        }
        out.at(o, y, x) = acc;
      }
    }
  }
  return out;
}

struct MaxPoolResult {
  Tensor output;
  // Flat (C*H*W) source index of each output element, for backward routing.
  std::vector<int> argmax;
};

// Per-window maxima over a (C,H,W) input. Ties break to the first element in
// row-major scan order. Padding cells never win against real cells.
inline MaxPoolResult maxpool2d(const Tensor& input, int window, int stride,
                               int padding = 0) {
  if (input.rank() != 3)
    throw ShapeError("maxpool2d expects a (C,H,W) input, got " +
                     input.shape_string());
  if (window < 1 || stride < 1 || padding < 0)
    throw ConfigError("maxpool2d window/stride must be >= 1, padding >= 0");
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  if (window > H + 2 * padding || window > W + 2 * padding)
    throw ShapeError("maxpool2d window larger than padded input");
  const int oh = conv_out_size(H, window, stride, padding);
  const int ow = conv_out_size(W, window, stride, padding);
  if (oh < 1 || ow < 1)
    throw ShapeError("maxpool2d output size is non-positive");
  MaxPoolResult r{Tensor({C, oh, ow}), {}};
  r.argmax.assign(static_cast<std::size_t>(C) * oh * ow, -1);
  std::size_t oi = 0;
  for (int c = 0; c < C; ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x, ++oi) {
        float best = -std::numeric_limits<float>::infinity();
        int best_idx = -1;
        const int y0 = y * stride - padding;
        const int x0 = x * stride - padding;
        for (int i = 0; i < window; ++i) {
          const int yy = y0 + i;
          if (yy < 0 || yy >= H) continue;
          for (int j = 0; j < window; ++j) {
            const int xx = x0 + j;
            if (xx < 0 || xx >= W) continue;
            const float v = input.at(c, yy, xx);
            if (v > best) {
              best = v;
              best_idx = (c * H + yy) * W + xx;
            }
          }
        }
        r.output[oi] = best;
        r.argmax[oi] = best_idx;
      }
    }
  }
  return r;
}

// Channel-axis concatenation of (C_i,H,W) tensors sharing H and W.
inline Tensor concat_channels(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels on empty list");
  const int H = inputs[0].dim(1), W = inputs[0].dim(2);
  int total_c = 0;
  for (const auto& t : inputs) {
    if (t.rank() != 3)
      throw ShapeError("concat_channels expects (C,H,W) inputs");
    if (t.dim(1) != H || t.dim(2) != W)
      throw ShapeError("concat_channels spatial mismatch: " + t.shape_string());
    total_c += t.dim(0);
  }
  Tensor out({total_c, H, W});
  float* dst = out.data();
  for (const auto& t : inputs) {
    std::copy(t.data(), t.data() + t.size(), dst);
    dst += t.size();
  }
  return out;
}

inline Tensor add_elementwise(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b))
    throw ShapeError("add_elementwise shape mismatch: " + a.shape_string() +
                     " vs " + b.shape_string());
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

}  // namespace sgz
