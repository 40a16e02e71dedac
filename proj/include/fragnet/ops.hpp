#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "fragnet/blas.hpp"
#include "fragnet/error.hpp"
#include "fragnet/parallel.hpp"
#include "fragnet/tensor.hpp"

namespace fragnet {

enum class Mode { Train, Eval };

namespace detail {

template <typename T>
void expect_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                     shape_str(t.shape()));
  }
}

// Unpacks a [(kh,kw,ci) x co] patch matrix around each output pixel, matching
// the kernel transposed below. Rows are output pixels in row-major order.
template <typename T>
void im2col3x3(const T* img, int h, int w, int ci, T* col) {
  const int k = 9 * ci;
  for (int oh = 0; oh < h; ++oh) {
    for (int ow = 0; ow < w; ++ow) {
      T* dst = col + (static_cast<std::int64_t>(oh) * w + ow) * k;
      for (int kh = 0; kh < 3; ++kh) {
        const int ih = oh + kh - 1;
        for (int kw = 0; kw < 3; ++kw) {
          const int iw = ow + kw - 1;
          T* cell = dst + (kh * 3 + kw) * ci;
          if (ih < 0 || ih >= h || iw < 0 || iw >= w) {
            std::fill(cell, cell + ci, T(0));
          } else {
            std::memcpy(cell, img + (static_cast<std::int64_t>(ih) * w + iw) * ci,
                        sizeof(T) * static_cast<std::size_t>(ci));
          }
        }
      }
    }
  }
}

// Scatter-add of a patch-gradient matrix back onto the input image.
template <typename T>
void col2im3x3(const T* col, int h, int w, int ci, T* img_grad) {
  const int k = 9 * ci;
  for (int oh = 0; oh < h; ++oh) {
    for (int ow = 0; ow < w; ++ow) {
      const T* src = col + (static_cast<std::int64_t>(oh) * w + ow) * k;
      for (int kh = 0; kh < 3; ++kh) {
        const int ih = oh + kh - 1;
        if (ih < 0 || ih >= h) continue;
        for (int kw = 0; kw < 3; ++kw) {
          const int iw = ow + kw - 1;
          if (iw < 0 || iw >= w) continue;
          const T* cell = src + (kh * 3 + kw) * ci;
          T* dst = img_grad + (static_cast<std::int64_t>(ih) * w + iw) * ci;
          for (int c = 0; c < ci; ++c) dst[c] += cell[c];
        }
      }
    }
  }
}

// kernel[ci,kh,kw,co] -> kt[(kh,kw,ci), co]
template <typename T>
std::vector<T> transpose_kernel(const T* kernel, int ci, int co) {
  std::vector<T> kt(static_cast<std::size_t>(9) * ci * co);
  for (int c = 0; c < ci; ++c) {
    for (int tap = 0; tap < 9; ++tap) {
      const T* src = kernel + (static_cast<std::int64_t>(c) * 9 + tap) * co;
      T* dst = kt.data() + (static_cast<std::int64_t>(tap) * ci + c) * co;
      std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(co));
    }
  }
  return kt;
}

template <typename T>
std::vector<T>& col_scratch(std::size_t n) {
  static thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

}  // namespace detail

// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
// input [B,H,W,Cin], kernel [Cin,3,3,Cout], bias [Cout] -> [B,H,W,Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  detail::expect_rank(input, 4, "conv2d");
  detail::expect_rank(kernel, 4, "conv2d");
  const int b = input.dim(0), h = input.dim(1), w = input.dim(2), ci = input.dim(3);
  if (kernel.dim(1) != 3 || kernel.dim(2) != 3) {
    throw ShapeError("conv2d: kernel must be 3x3, got " + shape_str(kernel.shape()));
  }
  if (kernel.dim(0) != ci) {
    throw ShapeError("conv2d: input has " + std::to_string(ci) + " channels but kernel expects " +
                     std::to_string(kernel.dim(0)));
  }
  const int co = kernel.dim(3);
  if (bias.numel() != co) throw ShapeError("conv2d: bias length must equal output channels");

  const int k = 9 * ci;
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const std::vector<T> kt = detail::transpose_kernel(kernel.values().data(), ci, co);
  std::vector<T> out(static_cast<std::size_t>(b) * hw * co);

  const T* x = input.values().data();
  const T* bv = bias.values().data();
  parallel_for(b, [&](std::int64_t img) {
    std::vector<T>& col = detail::col_scratch<T>(static_cast<std::size_t>(hw) * k);
    detail::im2col3x3(x + img * hw * ci, h, w, ci, col.data());
    T* o = out.data() + img * hw * co;
    blas::gemm(false, false, static_cast<int>(hw), co, k, T(1), col.data(), k, kt.data(), co, T(0),
               o, co);
    for (std::int64_t p = 0; p < hw; ++p) {
      T* row = o + p * co;
      for (int c = 0; c < co; ++c) row[c] += bv[c];
    }
  });

  auto backward = [input, kernel, bias, b, h, w, ci, co, k, hw, kt](detail::Node<T>& node) {
    const T* gy = node.grad.data();
    const T* x = input.values().data();

    if (bias.requires_grad()) {
      std::span<T> gb = const_cast<Tensor<T>&>(bias).grad();
      for (std::int64_t r = 0; r < b * hw; ++r) {
        const T* row = gy + r * co;
        for (int c = 0; c < co; ++c) gb[c] += row[c];
      }
    }

    if (kernel.requires_grad()) {
      // Fixed chunking keeps the accumulation order independent of the
      // worker-thread count.
      const int chunks = static_cast<int>(std::min<std::int64_t>(b, 8));
      std::vector<std::vector<T>> partial(chunks);
      parallel_for(chunks, [&](std::int64_t c) {
        partial[c].assign(static_cast<std::size_t>(k) * co, T(0));
        const std::int64_t lo = b * c / chunks, hi = b * (c + 1) / chunks;
        std::vector<T>& col = detail::col_scratch<T>(static_cast<std::size_t>(hw) * k);
        for (std::int64_t img = lo; img < hi; ++img) {
          detail::im2col3x3(x + img * hw * ci, h, w, ci, col.data());
          blas::gemm(true, false, k, co, static_cast<int>(hw), T(1), col.data(), k,
                     gy + img * hw * co, co, T(1), partial[c].data(), co);
        }
      });
      std::span<T> gk = const_cast<Tensor<T>&>(kernel).grad();
      for (int c = 0; c < chunks; ++c) {
        // kt layout back to [ci,3,3,co].
        for (int cin = 0; cin < ci; ++cin) {
          for (int tap = 0; tap < 9; ++tap) {
            const T* src = partial[c].data() + (static_cast<std::int64_t>(tap) * ci + cin) * co;
            T* dst = gk.data() + (static_cast<std::int64_t>(cin) * 9 + tap) * co;
            for (int cc = 0; cc < co; ++cc) dst[cc] += src[cc];
          }
        }
      }
    }

    if (input.requires_grad()) {
      T* gx = const_cast<Tensor<T>&>(input).grad().data();
      parallel_for(b, [&](std::int64_t img) {
        std::vector<T>& dcol = detail::col_scratch<T>(static_cast<std::size_t>(hw) * k);
        blas::gemm(false, true, static_cast<int>(hw), k, co, T(1), gy + img * hw * co, co,
                   kt.data(), co, T(0), dcol.data(), k);
        detail::col2im3x3(dcol.data(), h, w, ci, gx + img * hw * ci);
      });
    }
  };

  return make_op<T>("conv2d", {b, h, w, co}, std::move(out), {input, kernel, bias},
                    std::move(backward));
}

// 2x2 max pooling with stride 2. Gradient flows to the window argmax; on ties
// the first element in row-major scan order wins.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input) {
  detail::expect_rank(input, 4, "maxpool2x2");
  const int b = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2x2 requires even spatial dims, got " + shape_str(input.shape()));
  }
  const int oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<std::size_t>(b) * oh * ow * c);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(out.size());

  const T* x = input.values().data();
  parallel_for(b, [&](std::int64_t img) {
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        for (int ch = 0; ch < c; ++ch) {
          std::int64_t best = ((img * h + 2 * i) * w + 2 * j) * c + ch;
          T best_v = x[best];
          for (int di = 0; di < 2; ++di) {
            for (int dj = 0; dj < 2; ++dj) {
              const std::int64_t idx = ((img * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
              if (x[idx] > best_v) {
                best_v = x[idx];
                best = idx;
              }
            }
          }
          const std::int64_t o = ((img * oh + i) * ow + j) * c + ch;
          out[o] = best_v;
          (*argmax)[o] = best;
        }
      }
    }
  });

  auto backward = [input, argmax](detail::Node<T>& node) {
    if (!input.requires_grad()) return;
    T* gx = const_cast<Tensor<T>&>(input).grad().data();
    const T* gy = node.grad.data();
    for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += gy[i];
  };

  return make_op<T>("maxpool2x2", {b, oh, ow, c}, std::move(out), {input}, std::move(backward));
}

// Batch normalization over (B,H,W) per channel. Train mode normalizes with
// batch statistics, updates the running buffers in place, and backpropagates
// through the statistics. Eval mode applies the running statistics.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& run_mean, Tensor<T>& run_var, Mode mode, T momentum = T(0.9),
                    T eps = T(1e-5)) {
  detail::expect_rank(input, 4, "batchnorm");
  const int b = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  if (gamma.numel() != c || beta.numel() != c || run_mean.numel() != c || run_var.numel() != c) {
    throw ShapeError("batchnorm: parameter length must equal channel count " + std::to_string(c));
  }
  const std::int64_t n = static_cast<std::int64_t>(b) * h * w;
  if (mode == Mode::Train && n < 2) {
    throw ShapeError("batchnorm needs at least 2 samples per channel in train mode");
  }

  auto mean = std::make_shared<std::vector<T>>(c);
  auto invstd = std::make_shared<std::vector<T>>(c);
  const T* x = input.values().data();

  if (mode == Mode::Train) {
    std::vector<double> sum(c, 0.0), sumsq(c, 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = x + i * c;
      for (int ch = 0; ch < c; ++ch) sum[ch] += static_cast<double>(row[ch]);
    }
    for (int ch = 0; ch < c; ++ch) (*mean)[ch] = static_cast<T>(sum[ch] / static_cast<double>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = x + i * c;
      for (int ch = 0; ch < c; ++ch) {
        const double d = static_cast<double>(row[ch]) - static_cast<double>((*mean)[ch]);
        sumsq[ch] += d * d;
      }
    }
    std::span<T> rm = run_mean.values(), rv = run_var.values();
    for (int ch = 0; ch < c; ++ch) {
      const double var = sumsq[ch] / static_cast<double>(n);
      (*invstd)[ch] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      rm[ch] = momentum * rm[ch] + (T(1) - momentum) * (*mean)[ch];
      rv[ch] = momentum * rv[ch] + (T(1) - momentum) * static_cast<T>(var);
    }
  } else {
    std::span<const T> rm = run_mean.values(), rv = run_var.values();
    for (int ch = 0; ch < c; ++ch) {
      (*mean)[ch] = rm[ch];
      (*invstd)[ch] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(rv[ch]) + static_cast<double>(eps)));
    }
  }

  std::vector<T> out(static_cast<std::size_t>(n) * c);
  const T* gv = gamma.values().data();
  const T* bv = beta.values().data();
  parallel_for(n, [&](std::int64_t i) {
    const T* row = x + i * c;
    T* o = out.data() + i * c;
    for (int ch = 0; ch < c; ++ch) {
      o[ch] = gv[ch] * (row[ch] - (*mean)[ch]) * (*invstd)[ch] + bv[ch];
    }
  });

  auto backward = [input, gamma, beta, mean, invstd, mode, n, c](detail::Node<T>& node) {
    const T* gy = node.grad.data();
    const T* x = input.values().data();
    const T* gv = gamma.values().data();
    std::vector<double> s1(c, 0.0), s2(c, 0.0);  // sum(dy), sum(dy * xhat)
    for (std::int64_t i = 0; i < n; ++i) {
      const T* grow = gy + i * c;
      const T* row = x + i * c;
      for (int ch = 0; ch < c; ++ch) {
        const double xhat =
            (static_cast<double>(row[ch]) - (*mean)[ch]) * static_cast<double>((*invstd)[ch]);
        s1[ch] += static_cast<double>(grow[ch]);
        s2[ch] += static_cast<double>(grow[ch]) * xhat;
      }
    }
    if (gamma.requires_grad()) {
      std::span<T> gg = const_cast<Tensor<T>&>(gamma).grad();
      for (int ch = 0; ch < c; ++ch) gg[ch] += static_cast<T>(s2[ch]);
    }
    if (beta.requires_grad()) {
      std::span<T> gb = const_cast<Tensor<T>&>(beta).grad();
      for (int ch = 0; ch < c; ++ch) gb[ch] += static_cast<T>(s1[ch]);
    }
    if (input.requires_grad()) {
      T* gx = const_cast<Tensor<T>&>(input).grad().data();
      if (mode == Mode::Train) {
        const double inv_n = 1.0 / static_cast<double>(n);
        parallel_for(n, [&](std::int64_t i) {
          const T* grow = gy + i * c;
          const T* row = x + i * c;
          T* gxo = gx + i * c;
          for (int ch = 0; ch < c; ++ch) {
            const double xhat =
                (static_cast<double>(row[ch]) - (*mean)[ch]) * static_cast<double>((*invstd)[ch]);
            const double d = static_cast<double>(grow[ch]) - s1[ch] * inv_n - xhat * s2[ch] * inv_n;
            gxo[ch] += static_cast<T>(static_cast<double>(gv[ch]) *
                                      static_cast<double>((*invstd)[ch]) * d);
          }
        });
      } else {
        parallel_for(n, [&](std::int64_t i) {
          const T* grow = gy + i * c;
          T* gxo = gx + i * c;
          for (int ch = 0; ch < c; ++ch) gxo[ch] += grow[ch] * gv[ch] * (*invstd)[ch];
        });
      }
    }
  };

  return make_op<T>("batchnorm", {b, h, w, c}, std::move(out), {input, gamma, beta},
                    std::move(backward));
}

// Elementwise max(0, x); the subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.values().begin(), input.values().end());
  for (T& v : out) v = std::max(v, T(0));

  auto backward = [input](detail::Node<T>& node) {
    if (!input.requires_grad()) return;
    T* gx = const_cast<Tensor<T>&>(input).grad().data();
    const T* gy = node.grad.data();
    const T* y = node.values.data();
    const std::size_t n = node.values.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] > T(0)) gx[i] += gy[i];
    }
  };

  return make_op<T>("relu", input.shape(), std::move(out), {input}, std::move(backward));
}

// Concatenates along the channel axis; a's channels come first.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::expect_rank(a, 4, "concat_channels");
  detail::expect_rank(b, 4, "concat_channels");
  for (int d = 0; d < 3; ++d) {
    if (a.dim(d) != b.dim(d)) {
      throw ShapeError("concat_channels: shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  const int c1 = a.dim(3), c2 = b.dim(3), c = c1 + c2;
  const std::int64_t rows = static_cast<std::int64_t>(a.dim(0)) * a.dim(1) * a.dim(2);
  std::vector<T> out(static_cast<std::size_t>(rows) * c);
  const T* av = a.values().data();
  const T* bv = b.values().data();
  parallel_for(rows, [&](std::int64_t r) {
    std::memcpy(out.data() + r * c, av + r * c1, sizeof(T) * static_cast<std::size_t>(c1));
    std::memcpy(out.data() + r * c + c1, bv + r * c2, sizeof(T) * static_cast<std::size_t>(c2));
  });

  auto backward = [a, b, rows, c1, c2, c](detail::Node<T>& node) {
    const T* gy = node.grad.data();
    if (a.requires_grad()) {
      T* ga = const_cast<Tensor<T>&>(a).grad().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* src = gy + r * c;
        for (int ch = 0; ch < c1; ++ch) ga[r * c1 + ch] += src[ch];
      }
    }
    if (b.requires_grad()) {
      T* gb = const_cast<Tensor<T>&>(b).grad().data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* src = gy + r * c + c1;
        for (int ch = 0; ch < c2; ++ch) gb[r * c2 + ch] += src[ch];
      }
    }
  };

  Shape shape = a.shape();
  shape[3] = c;
  return make_op<T>("concat_channels", std::move(shape), std::move(out), {a, b},
                    std::move(backward));
}

// Stacks tensors along dim 0; trailing dims must match.
template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  Shape tail = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.rank() != tail.size()) throw ShapeError("concat_batch: rank mismatch");
    for (std::size_t d = 1; d < tail.size(); ++d) {
      if (p.shape()[d] != tail[d]) {
        throw ShapeError("concat_batch: trailing shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(tail));
      }
    }
    total += p.dim(0);
  }
  Shape shape = tail;
  shape[0] = total;
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());

  auto parts_copy = parts;
  auto backward = [parts_copy](detail::Node<T>& node) {
    const T* gy = node.grad.data();
    std::int64_t off = 0;
    for (const auto& p : parts_copy) {
      const std::int64_t n = p.numel();
      if (p.requires_grad()) {
        T* g = const_cast<Tensor<T>&>(p).grad().data();
        for (std::int64_t i = 0; i < n; ++i) g[i] += gy[off + i];
      }
      off += n;
    }
  };

  return make_op<T>("concat_batch", std::move(shape), std::move(out), parts,
                    std::move(backward));
}

// Spatial window copy; channels pass through. Gradient scatters back into the
// window and is zero elsewhere.
template <typename T>
Tensor<T> crop(const Tensor<T>& input, int x0, int y0, int ch_, int cw) {
  detail::expect_rank(input, 4, "crop");
  const int b = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  if (x0 < 0 || ch_ < 1 || x0 + ch_ > h) {
    throw ShapeError("crop: row window [" + std::to_string(x0) + ", " + std::to_string(x0 + ch_) +
                     ") outside height " + std::to_string(h));
  }
  if (y0 < 0 || cw < 1 || y0 + cw > w) {
    throw ShapeError("crop: column window [" + std::to_string(y0) + ", " + std::to_string(y0 + cw) +
                     ") outside width " + std::to_string(w));
  }
  std::vector<T> out(static_cast<std::size_t>(b) * ch_ * cw * c);
  const T* x = input.values().data();
  for (int img = 0; img < b; ++img) {
    for (int i = 0; i < ch_; ++i) {
      const T* src = x + ((static_cast<std::int64_t>(img) * h + x0 + i) * w + y0) * c;
      T* dst = out.data() + (static_cast<std::int64_t>(img) * ch_ + i) * cw * c;
      std::memcpy(dst, src, sizeof(T) * static_cast<std::size_t>(cw) * c);
    }
  }

  auto backward = [input, b, h, w, c, x0, y0, ch_, cw](detail::Node<T>& node) {
    if (!input.requires_grad()) return;
    T* gx = const_cast<Tensor<T>&>(input).grad().data();
    const T* gy = node.grad.data();
    for (int img = 0; img < b; ++img) {
      for (int i = 0; i < ch_; ++i) {
        T* dst = gx + ((静_cast<std::int64_t>(img) * h + x0 + i) * w + y0) * c;
        const T* src = gy + (static_cast<std::int64_t>(img) * ch_ + i) * cw * c;
        for (int j = 0; j < cw * c; ++j) dst[j] += src[j];
      }
    }
  };

  return make_op<T>("crop", {b, ch_, cw, c}, std::move(out), {input}, std::move(backward));
}

// [B,H,W,C] -> [B,C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::expect_rank(input, 4, "global_avg_pool");
  const int b = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  if (h < 1 || w < 1) throw ShapeError("global_avg_pool: empty spatial extent");
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(b) * c);
  const T* x = input.values().data();
  parallel_for(b, [&](std::int64_t img) {
    std::vector<double> acc(c, 0.0);
    const T* base = x + img * hw * c;
    for (std::int64_t p = 0; p < hw; ++p) {
      for (int ch = 0; ch < c; ++ch) acc[ch] += static_cast<double>(base[p * c + ch]);
    }
    for (int ch = 0; ch < c; ++ch) {
      out[img * c + ch] = static_cast<T>(acc[ch] / static_cast<double>(hw));
    }
  });

  auto backward = [input, b, hw, c](detail::Node<T>& node) {
    if (!input.requires_grad()) return;
    T* gx = const_cast<Tensor<T>&>(input).grad().data();
    const T* gy = node.grad.data();
    const T scale = T(1) / static_cast<T>(hw);
    for (std::int64_t img = 0; img < b; ++img) {
      for (std::int64_t p = 0; p < hw; ++p) {
        for (int ch = 0; ch < c; ++ch) {
          gx[(img * hw + p) * c + ch] += gy[img * c + ch] * scale;
        }
      }
    }
  };

  return make_op<T>("global_avg_pool", {b, c}, std::move(out), {input}, std::move(backward));
}

// Affine map [B,D] x [D,M] + [M] -> [B,M]. Rows are computed independently so
// results do not depend on how a batch is split.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::expect_rank(input, 2, "linear");
  detail::expect_rank(weight, 2, "linear");
  const int b = input.dim(0), d = input.dim(1);
  if (weight.dim(0) != d) {
    throw ShapeError("linear: input features " + std::to_string(d) + " vs weight rows " +
                     std::to_string(weight.dim(0)));
  }
  const int m = weight.dim(1);
  if (bias.numel() != m) throw ShapeError("linear: bias length mismatch");

  std::vector<T> out(static_cast<std::size_t>(b) * m);
  const T* x = input.values().data();
  const T* wv = weight.values().data();
  const T* bv = bias.values().data();
  parallel_for(b, [&](std::int64_t r) {
    T* o = out.data() + r * m;
    std::memcpy(o, bv, sizeof(T) * static_cast<std::size_t>(m));
    blas::gemv(true, d, m, T(1), wv, m, x + r * d, T(1), o);
  });

  auto backward = [input, weight, bias, b, d, m](detail::Node<T>& node) {
    const T* gy = node.grad.data();
    if (bias.requires_grad()) {
      std::span<T> gb = const_cast<Tensor<T>&>(bias).grad();
      for (int r = 0; r < b; ++r) {
        for (int j = 0; j < m; ++j) gb[j] += gy[static_cast<std::int64_t>(r) * m + j];
      }
    }
    if (weight.requires_grad()) {
      T* gw = const_cast<Tensor<T>&>(weight).grad().data();
      blas::gemm(true, false, d, m, b, T(1), input.values().data(), d, gy, m, T(1), gw, m);
    }
    if (input.requires_grad()) {
      T* gx = const_cast<Tensor<T>&>(input).grad().data();
      blas::gemm(false, true, b, d, m, T(1), gy, m, weight.values().data(), m, T(1), gx, d);
    }
  };

  return make_op<T>("linear", {b, m}, std::move(out), {input, weight, bias}, std::move(backward));
}

// Row softmax over the last axis of a rank-2 tensor, computed with the
// max-shifted form.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  detail::expect_rank(logits, 2, "softmax");
  const int b = logits.dim(0), m = logits.dim(1);
  std::vector<T> out(static_cast<std::size_t>(b) * m);
  const T* x = logits.values().data();
  for (int r = 0; r < b; ++r) {
    const T* row = x + static_cast<std::int64_t>(r) * m;
    T* o = out.data() + static_cast<std::int64_t>(r) * m;
    T mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < m; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      o[j] = static_cast<T>(e);
      z += e;
    }
    for (int j = 0; j < m; ++j) o[j] = static_cast<T>(static_cast<double>(o[j]) / z);
  }

  auto backward = [logits, b, m](detail::Node<T>& node) {
    if (!logits.requires_grad()) return;
    T* gx = const_cast<Tensor<T>&>(logits).grad().data();
    const T* gy = node.grad.data();
    const T* p = node.values.data();
    for (int r = 0; r < b; ++r) {
      const std::int64_t off = static_cast<std::int64_t>(r) * m;
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += static_cast<double>(gy[off + j]) * p[off + j];
      for (int j = 0; j < m; ++j) {
        gx[off + j] += static_cast<T>(p[off + j] * (static_cast<double>(gy[off + j]) - dot));
      }
    }
  };

  return make_op<T>("softmax", {b, m}, std::move(out), {logits}, std::move(backward));
}

template <typename T>
struct XentResult {
  Tensor<T> loss;   // [B], differentiable
  Tensor<T> probs;  // [B,M], detached
};

// Cross entropy against integer class targets, evaluated in log-sum-exp form.
// d loss / d logits = probs - onehot(target).
template <typename T>
XentResult<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  detail::expect_rank(logits, 2, "softmax_cross_entropy");
  const int b = logits.dim(0), m = logits.dim(1);
  if (m < 2) throw ShapeError("softmax_cross_entropy needs at least 2 classes");
  if (static_cast<int>(targets.size()) != b) {
    throw ShapeError("softmax_cross_entropy: expected " + std::to_string(b) + " targets, got " +
                     std::to_string(targets.size()));
  }
  for (int t : targets) {
    if (t < 0 || t >= m) {
      throw ConfigError("class index " + std::to_string(t) + " outside [0, " + std::to_string(m) +
                        ")");
    }
  }

  std::vector<T> loss(b);
  std::vector<T> probs(static_cast<std::size_t>(b) * m);
  const T* x = logits.values().data();
  for (int r = 0; r < b; ++r) {
    const T* row = x + static_cast<std::int64_t>(r) * m;
    T* p = probs.data() + static_cast<std::int64_t>(r) * m;
    T mx = row[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < m; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double lse = std::log(z);
    loss[r] = static_cast<T>(lse - static_cast<double>(row[targets[r]] - mx));
    for (int j = 0; j < m; ++j) {
      p[j] = static_cast<T>(std::exp(static_cast<double>(row[j] - mx) - lse));
    }
  }

  auto probs_copy = std::make_shared<std::vector<T>>(probs);
  auto targets_copy = std::make_shared<std::vector<int>>(targets);
  auto backward = [logits, probs_copy, targets_copy, b, m](detail::Node<T>& node) {
    if (!logits.requires_grad()) return;
    T* gx = const_cast<Tensor<T>&>(logits).grad().data();
    const T* gy = node.grad.data();
    for (int r = 0; r < b; ++r) {
      const std::int64_t off = static_cast<std::int64_t>(r) * m;
      const T g = gy[r];
      const int t = (*targets_copy)[r];
      for (int j = 0; j < m; ++j) {
        gx[off + j] += g * ((*probs_copy)[off + j] - (j == t ? T(1) : T(0)));
      }
    }
  };

  XentResult<T> result;
  result.loss = make_op<T>("softmax_cross_entropy", {b}, std::move(loss), {logits},
                           std::move(backward));
  result.probs = Tensor<T>::from_data({b, m}, std::move(probs));
  return result;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];

  auto backward = [a, b](detail::Node<T>& node) {
    const T* gy = node.grad.data();
    const std::size_t n = node.values.size();
    if (a.requires_grad()) {
      T* ga = const_cast<Tensor<T>&>(a).grad().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += gy[i];
    }
    if (b.requires_grad()) {
      T* gb = const_cast<Tensor<T>&>(b).grad().data();
      for (std::size_t i = 0; i < n; ++i) gb[i] += gy[i];
    }
  };

  return make_op<T>("add", a.shape(), std::move(out), {a, b}, std::move(backward));
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v *= factor;

  auto backward = [a, factor](detail::Node<T>& node) {
    if (!a.requires_grad()) return;
    T* ga = const_cast<Tensor<T>&>(a).grad().data();
    const T* gy = node.grad.data();
    for (std::size_t i = 0; i < node.values.size(); ++i) ga[i] += factor * gy[i];
  };

  return make_op<T>("scale", a.shape(), std::move(out), {a}, std::move(backward));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v);

  auto backward = [a](detail::Node<T>& node) {
    if (!a.requires_grad()) return;
    T* ga = const_cast<Tensor<T>&>(a).grad().data();
    const T g = node.grad[0];
    for (std::int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
  };

  return make_op<T>("sum", {1}, {static_cast<T>(acc)}, {a}, std::move(backward));
}

// Channel window [c0, c1) of a [B,H,W,C] tensor.
template <typename T>
Tensor<T> channel_slice(const Tensor<T>& input, int c0, int c1) {
  detail::expect_rank(input, 4, "channel_slice");
  const int c = input.dim(3);
  if (c0 < 0 || c1 < c0 || c1 > c) {
    throw ShapeError("channel_slice: window [" + std::to_string(c0) + ", " + std::to_string(c1) +
                     ") outside " + std::to_string(c) + " channels");
  }
  const int cs = c1 - c0;
  const std::int64_t rows = static_cast<std::int64_t>(input.dim(0)) * input.dim(1) * input.dim(2);
  std::vector<T> out(static_cast<std::size_t>(rows) * cs);
  const T* x = input.values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * cs, x + r * c + c0, sizeof(T) * static_cast<std::size_t>(cs));
  }

  auto backward = [input, rows, c, c0, cs](detail::Node<T>& node) {
    if (!input.requires_grad()) return;
    T* gx = const_cast<Tensor<T>&>(input).grad().data();
    const T* gy = node.grad.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      for (int j = 0; j < cs; ++j) gx[r * c + c0 + j] += gy[r * cs + j];
    }
  };

  Shape shape = input.shape();
  shape[3] = cs;
  return make_op<T>("channel_slice", std::move(shape), std::move(out), {input},
                    std::move(backward));
}

}  // namespace fragnet
