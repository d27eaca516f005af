#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lreid/autodiff/gemm.hpp"
#include "lreid/autodiff/graph.hpp"
#include "lreid/error.hpp"
#include "lreid/tensor.hpp"

namespace lreid::ad {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline void add_into(Tensor& dst, std::span<const double> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// Rows of a [R x C] view: counts R from a rank-1 (single row) or rank-2 tensor.
inline std::pair<std::size_t, std::size_t> as_matrix(const Shape& s, const char* op) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(s));
}

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return ho * wo; }
};

// Output columns [lo, hi) whose input column ox*stride + kj - pad is inside the image.
inline std::pair<std::size_t, std::size_t> valid_span(const ConvGeom& g, std::size_t kj) {
  std::size_t lo = 0;
  while (lo < g.wo && lo * g.stride + kj < g.pad) ++lo;
  std::size_t hi = lo;
  while (hi < g.wo && hi * g.stride + kj < g.pad + g.w) ++hi;
  return {lo, hi};
}

// cols[(c,ki,kj), (oy,ox)]
inline void im2col(const ConvGeom& g, const double* x, double* cols) {
  const std::size_t p_count = g.cols();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * p_count;
        const auto [lo, hi] = valid_span(g, kj);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          double* dst = row + oy * g.wo;
          const std::size_t iy = oy * g.stride + ki;
          if (iy < g.pad || iy >= g.pad + g.h) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = x + (c * g.h + iy - g.pad) * g.w + kj - g.pad;
          std::fill(dst, dst + lo, 0.0);
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          std::fill(dst + hi, dst + g.wo, 0.0);
        }
      }
}

// Transposed layout: cols_t[(oy,ox), (c,ki,kj)]
inline void im2col_t(const ConvGeom& g, const double* x, double* cols_t) {
  const std::size_t r_count = g.rows();
  for (std::size_t oy = 0; oy < g.ho; ++oy)
    for (std::size_t ox = 0; ox < g.wo; ++ox) {
      double* dst = cols_t + (oy * g.wo + ox) * r_count;
      for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki) {
          const std::size_t iy = oy * g.stride + ki;
          const bool row_in = iy >= g.pad && iy < g.pad + g.h;
          for (std::size_t kj = 0; kj < g.k; ++kj) {
            const std::size_t ix = ox * g.stride + kj;
            *dst++ = row_in && ix >= g.pad && ix < g.pad + g.w ? x[(c * g.h + iy - g.pad) * g.w + ix - g.pad] : 0.0;
          }
        }
    }
}

inline void col2im_add(const ConvGeom& g, const double* cols, double* dx) {
  const std::size_t p_count = g.cols();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.k; ++ki)
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * p_count;
        const auto [lo, hi] = valid_span(g, kj);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const std::size_t iy = oy * g.stride + ki;
          if (iy < g.pad || iy >= g.pad + g.h) continue;
          double* dst = dx + (c * g.h + iy - g.pad) * g.w + kj - g.pad;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
        }
      }
}

inline double clamp_pow(double x, double eps, double p) {
  const double v = std::max(x, eps);
  return p == 3.0 ? v * v * v : std::pow(v, p);
}

}  // namespace detail

/// 2-D convolution (cross-correlation), no bias. Input [C,H,W] or [B,C,H,W],
/// kernel [O,C,k,k] with odd k.
inline Var conv2d(const Var& x, const Var& w, std::size_t stride, std::size_t pad) {
  using detail::require;
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(xs.size() == 3 || xs.size() == 4, "conv2d: input must be [C,H,W] or [B,C,H,W]");
  require(ws.size() == 4 && ws[2] == ws[3], "conv2d: kernel must be [O,C,k,k]");
  const bool batched = xs.size() == 4;
  detail::ConvGeom g{};
  g.batch = batched ? xs[0] : 1;
  g.cin = xs[batched ? 1 : 0];
  g.h = xs[batched ? 2 : 1];
  g.w = xs[batched ? 3 : 2];
  g.cout = ws[0];
  g.k = ws[2];
  g.stride = stride;
  g.pad = pad;
  require(ws[1] == g.cin, "conv2d: kernel expects " + std::to_string(ws[1]) + " input channels, got " +
                              std::to_string(g.cin));
  require(g.k % 2 == 1, "conv2d: kernel size must be odd");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(g.h + 2 * pad >= g.k && g.w + 2 * pad >= g.k, "conv2d: padded input smaller than kernel");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;

  Shape out_shape = batched ? Shape{g.batch, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo};
  Tensor out(out_shape);
  std::vector<double> cols(g.rows() * g.cols());
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * g.cols();
  for (std::size_t b = 0; b < g.batch; ++b) {
    detail::im2col(g, x.value().ptr() + b * in_stride, cols.data());
    kernels::gemm(g.cout, g.cols(), g.rows(), w.value().ptr(), cols.data(), out.ptr() + b * out_stride,
                  false);
  }

  const auto xid = x.id(), wid = w.id();
  return x.graph().record(std::move(out), {x, w}, [g, xid, wid, in_stride, out_stride](Graph& gr, std::size_t self) {
    const Tensor& gout = gr.grad(self);
    const bool need_x = gr.requires_grad(xid), need_w = gr.requires_grad(wid);
    std::vector<double> cols(g.rows() * g.cols());
    std::vector<double> wt;
    if (need_x) {
      wt.resize(g.rows() * g.cout);
      kernels::transpose(g.cout, g.rows(), gr.value(wid).ptr(), wt.data());
    }
    Tensor* gw = need_w ? &gr.grad_buffer(wid) : nullptr;
    Tensor* gx = need_x ? &gr.grad_buffer(xid) : nullptr;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const double* go = gout.ptr() + b * out_stride;
      if (need_w) {
        detail::im2col_t(g, gr.value(xid).ptr() + b * in_stride, cols.data());
        kernels::gemm(g.cout, g.rows(), g.cols(), go, cols.data(), gw->ptr(), true);
      }
      if (need_x) {
        kernels::gemm(g.rows(), g.cols(), g.cout, wt.data(), go, cols.data(), false);
        detail::col2im_add(g, cols.data(), gx->ptr() + b * in_stride);
      }
    }
  });
}

inline Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  const auto xid = x.id();
  return x.graph().record(std::move(out), {x}, [xid](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    const Tensor& xv = g.value(xid);
    Tensor& gx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < go.size(); ++i)
      if (xv[i] > 0.0) gx[i] += go[i];
  });
}

inline Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  const auto xid = x.id();
  return x.graph().record(std::move(out), {x}, [xid](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    const Tensor& y = g.value(self);
    Tensor& gx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * y[i] * (1.0 - y[i]);
  });
}

/// [M,K] x [K,N] -> [M,N]
inline Var matmul(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  detail::require(as.size() == 2 && bs.size() == 2, "matmul: operands must be rank 2");
  detail::require(as[1] == bs[0], "matmul: inner extents differ " + shape_str(as) + " vs " + shape_str(bs));
  const std::size_t m = as[0], k = as[1], n = bs[1];
  Tensor out({m, n});
  kernels::gemm(m, n, k, a.value().ptr(), b.value().ptr(), out.ptr(), false);
  const auto aid = a.id(), bid = b.id();
  return a.graph().record(std::move(out), {a, b}, [aid, bid, m, k, n](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(aid)) {
      std::vector<double> bt(n * k);
      kernels::transpose(k, n, g.value(bid).ptr(), bt.data());
      kernels::gemm(m, k, n, go.ptr(), bt.data(), g.grad_buffer(aid).ptr(), true);
    }
    if (g.requires_grad(bid)) {
      std::vector<double> at(k * m);
      kernels::transpose(m, k, g.value(aid).ptr(), at.data());
      kernels::gemm(k, n, m, at.data(), go.ptr(), g.grad_buffer(bid).ptr(), true);
    }
  });
}

/// [M,K] x [N,K]^T -> [M,N]; row-wise dot products.
inline Var matmul_nt(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  detail::require(as.size() == 2 && bs.size() == 2, "matmul_nt: operands must be rank 2");
  detail::require(as[1] == bs[1], "matmul_nt: inner extents differ " + shape_str(as) + " vs " + shape_str(bs));
  const std::size_t m = as[0], k = as[1], n = bs[0];
  std::vector<double> bt(k * n);
  kernels::transpose(n, k, b.value().ptr(), bt.data());
  Tensor out({m, n});
  kernels::gemm(m, n, k, a.value().ptr(), bt.data(), out.ptr(), false);
  const auto aid = a.id(), bid = b.id();
  return a.graph().record(std::move(out), {a, b}, [aid, bid, m, k, n](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(aid))
      kernels::gemm(m, k, n, go.ptr(), g.value(bid).ptr(), g.grad_buffer(aid).ptr(), true);
    if (g.requires_grad(bid)) {
      std::vector<double> gt(n * m);
      kernels::transpose(m, n, go.ptr(), gt.data());
      kernels::gemm(n, k, m, gt.data(), g.value(aid).ptr(), g.grad_buffer(bid).ptr(), true);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  detail::add_into(out, b.value().data());
  const auto aid = a.id(), bid = b.id();
  return a.graph().record(std::move(out), {a, b}, [aid, bid](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(aid)) detail::add_into(g.grad_buffer(aid), go.data());
    if (g.requires_grad(bid)) detail::add_into(g.grad_buffer(bid), go.data());
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto aid = a.id(), bid = b.id();
  return a.graph().record(std::move(out), {a, b}, [aid, bid](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(aid)) {
      Tensor& ga = g.grad_buffer(aid);
      const Tensor& bv = g.value(bid);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
    }
    if (g.requires_grad(bid)) {
      Tensor& gb = g.grad_buffer(bid);
      const Tensor& av = g.value(aid);
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  const auto aid = a.id();
  return a.graph().record(std::move(out), {a}, [aid, s](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    Tensor& ga = g.grad_buffer(aid);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += s * go[i];
  });
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const auto aid = a.id();
  return a.graph().record(std::move(out), {a}, [aid](Graph& g, std::size_t self) {
    detail::add_into(g.grad_buffer(aid), g.grad(self).data());
  });
}

/// Rows [begin, end) along the leading axis.
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const auto& s = a.shape();
  detail::require(!s.empty() && begin < end && end <= s[0], "slice_rows: bad range");
  const std::size_t row = a.value().size() / s[0];
  Shape os = s;
  os[0] = end - begin;
  std::vector<double> data(a.value().data().begin() + begin * row, a.value().data().begin() + end * row);
  const auto aid = a.id();
  return a.graph().record(Tensor(os, std::move(data)), {a}, [aid, begin, row](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    Tensor& ga = g.grad_buffer(aid);
    for (std::size_t i = 0; i < go.size(); ++i) ga[begin * row + i] += go[i];
  });
}

/// [R,M] ++ [R,N] -> [R,M+N]
inline Var concat_cols(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  detail::require(as.size() == 2 && bs.size() == 2 && as[0] == bs[0], "concat_cols: row counts differ");
  const std::size_t r = as[0], m = as[1], n = bs[1];
  Tensor out({r, m + n});
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(a.value().ptr() + i * m, m, out.ptr() + i * (m + n));
    std::copy_n(b.value().ptr() + i * n, n, out.ptr() + i * (m + n) + m);
  }
  const auto aid = a.id(), bid = b.id();
  return a.graph().record(std::move(out), {a, b}, [aid, bid, r, m, n](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(aid)) {
      Tensor& ga = g.grad_buffer(aid);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += go[i * (m + n) + j];
    }
    if (g.requires_grad(bid)) {
      Tensor& gb = g.grad_buffer(bid);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[i * n + j] += go[i * (m + n) + m + j];
    }
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto aid = a.id();
  return a.graph().record(Tensor::scalar(s), {a}, [aid](Graph& g, std::size_t self) {
    const double go = g.grad(self)[0];
    Tensor& ga = g.grad_buffer(aid);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go;
  });
}

inline Var sum_squares(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  const auto aid = a.id();
  return a.graph().record(Tensor::scalar(s), {a}, [aid](Graph& g, std::size_t self) {
    const double go = g.grad(self)[0];
    const Tensor& av = g.value(aid);
    Tensor& ga = g.grad_buffer(aid);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * av[i] * go;
  });
}

/// Σ w_i · s_i over scalar terms.
inline Var weighted_sum(const std::vector<std::pair<double, Var>>& terms) {
  detail::require(!terms.empty(), "weighted_sum: no terms");
  double s = 0.0;
  for (const auto& [w, v] : terms) {
    detail::require(v.value().size() == 1, "weighted_sum: terms must be scalars");
    s += w * v.value()[0];
  }
  std::vector<std::pair<double, std::size_t>> ids;
  std::vector<Var> inputs;
  for (const auto& [w, v] : terms) {
    ids.emplace_back(w, v.id());
    inputs.push_back(v);
  }
  Graph& graph = terms.front().second.graph();
  return graph.record(Tensor::scalar(s), std::span<const Var>(inputs), [ids](Graph& g, std::size_t self) {
    const double go = g.grad(self)[0];
    for (const auto& [w, id] : ids)
      if (g.requires_grad(id)) g.grad_buffer(id)[0] += w * go;
  });
}

/// map [B,C,H,W] scaled per (sample, channel) by mask [B,C].
inline Var channel_mask(const Var& map, const Var& mask) {
  const auto& ms = map.shape();
  detail::require(ms.size() == 4, "channel_mask: map must be [B,C,H,W]");
  detail::require(mask.shape() == Shape({ms[0], ms[1]}), "channel_mask: mask must be [B,C] matching the map, got " +
                                                             shape_str(mask.shape()));
  const std::size_t bc = ms[0] * ms[1], hw = ms[2] * ms[3];
  Tensor out = map.value();
  for (std::size_t i = 0; i < bc; ++i)
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] *= mask.value()[i];
  const auto mid = map.id(), kid = mask.id();
  return map.graph().record(std::move(out), {map, mask}, [mid, kid, bc, hw](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    if (g.requires_grad(mid)) {
      Tensor& gm = g.grad_buffer(mid);
      const Tensor& kv = g.value(kid);
      for (std::size_t i = 0; i < bc; ++i)
        for (std::size_t j = 0; j < hw; ++j) gm[i * hw + j] += go[i * hw + j] * kv[i];
    }
    if (g.requires_grad(kid)) {
      Tensor& gk = g.grad_buffer(kid);
      const Tensor& mv = g.value(mid);
      for (std::size_t i = 0; i < bc; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < hw; ++j) s += go[i * hw + j] * mv[i * hw + j];
        gk[i] += s;
      }
    }
  });
}

/// Spatial average pooling [B,C,H,W] -> [B,C].
inline Var spatial_mean(const Var& map) {
  const auto& ms = map.shape();
  detail::require(ms.size() == 4, "spatial_mean: map must be [B,C,H,W]");
  const std::size_t bc = ms[0] * ms[1], hw = ms[2] * ms[3];
  Tensor out({ms[0], ms[1]});
  for (std::size_t i = 0; i < bc; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += map.value()[i * hw + j];
    out[i] = s / static_cast<double>(hw);
  }
  const auto mid = map.id();
  return map.graph().record(std::move(out), {map}, [mid, bc, hw](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    Tensor& gm = g.grad_buffer(mid);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < bc; ++i)
      for (std::size_t j = 0; j < hw; ++j) gm[i * hw + j] += go[i] * inv;
  });
}

namespace detail {

// GeM over horizontal slabs: map [B,C,H,W] -> out [B,parts,C].
inline Var gem_slabs(const Var& map, std::size_t parts, double p, double eps, Shape out_shape) {
  const auto& ms = map.shape();
  const std::size_t batch = ms[0], ch = ms[1], h = ms[2], w = ms[3];
  require(h * w > 0, "gem_pool: empty spatial extent");
  require(h % parts == 0, "gem_pool: height " + std::to_string(h) + " not divisible by " + std::to_string(parts));
  if (!(p >= 1.0)) throw DimensionError("gem_pool: exponent must be >= 1");
  if (!(eps > 0.0)) throw DimensionError("gem_pool: eps must be > 0");
  const std::size_t slab = h / parts;
  const double count = static_cast<double>(slab * w);
  Tensor out(std::move(out_shape));
  std::vector<double> means(batch * parts * ch);
  const Tensor& x = map.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t n = 0; n < parts; ++n)
      for (std::size_t c = 0; c < ch; ++c) {
        const double* base = x.ptr() + ((b * ch + c) * h + n * slab) * w;
        double s = 0.0;
        for (std::size_t j = 0; j < slab * w; ++j) s += clamp_pow(base[j], eps, p);
        const std::size_t o = (b * parts + n) * ch + c;
        means[o] = s / count;
        out[o] = std::pow(means[o], 1.0 / p);
      }
  const auto mid = map.id();
  return map.graph().record(
      std::move(out), {map},
      [mid, batch, ch, h, w, parts, slab, count, p, eps, means = std::move(means)](Graph& g, std::size_t self) {
        const Tensor& go = g.grad(self);
        const Tensor& x = g.value(mid);
        Tensor& gx = g.grad_buffer(mid);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t n = 0; n < parts; ++n)
            for (std::size_t c = 0; c < ch; ++c) {
              const std::size_t o = (b * parts + n) * ch + c;
              // d/dx_k (mean)^(1/p) = (1/p) mean^(1/p - 1) * p x_k^(p-1) / count
              const double coef = go[o] * std::pow(means[o], 1.0 / p - 1.0) / count;
              const std::size_t off = ((b * ch + c) * h + n * slab) * w;
              for (std::size_t j = 0; j < slab * w; ++j) {
                const double v = x[off + j];
                if (v > eps) gx[off + j] += coef * (p == 3.0 ? v * v : std::pow(v, p - 1.0));
              }
            }
      });
}

}  // namespace detail

/// Generalized-mean pooling over the spatial extent: [C,H,W] -> [C] or
/// [B,C,H,W] -> [B,C]. Values are clamped to >= eps before exponentiation.
inline Var gem_pool(const Var& map, double p, double eps) {
  const auto& ms = map.shape();
  if (ms.size() == 3) {
    auto batched = reshape(map, {1, ms[0], ms[1], ms[2]});
    return detail::gem_slabs(batched, 1, p, eps, {ms[0]});
  }
  detail::require(ms.size() == 4, "gem_pool: map must be [C,H,W] or [B,C,H,W]");
  return detail::gem_slabs(map, 1, p, eps, {ms[0], ms[1]});
}

/// GeM over `parts` equal horizontal slabs: [B,C,H,W] -> [B,parts,C]; slab 0 is the top.
inline Var gem_pool_parts(const Var& map, std::size_t parts, double p, double eps) {
  const auto& ms = map.shape();
  detail::require(ms.size() == 4, "gem_pool_parts: map must be [B,C,H,W]");
  detail::require(parts >= 1, "gem_pool_parts: need at least one part");
  return detail::gem_slabs(map, parts, p, eps, {ms[0], parts, ms[1]});
}

/// Normalizes the last axis to unit L2 norm. Accepts [C] or [R,C].
inline Var l2_normalize(const Var& v) {
  const auto [rows, dim] = detail::as_matrix(v.shape(), "l2_normalize");
  Tensor out = v.value();
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += out[r * dim + j] * out[r * dim + j];
    const double n = std::sqrt(s);
    if (!(n > 0.0)) throw DegenerateInputError("l2_normalize: zero vector");
    norms[r] = n;
    for (std::size_t j = 0; j < dim; ++j) out[r * dim + j] /= n;
  }
  const auto vid = v.id();
  return v.graph().record(std::move(out), {v}, [vid, rows, dim, norms = std::move(norms)](Graph& g, std::size_t self) {
    const Tensor& go = g.grad(self);
    const Tensor& y = g.value(self);
    Tensor& gv = g.grad_buffer(vid);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < dim; ++j) dot += y[r * dim + j] * go[r * dim + j];
      for (std::size_t j = 0; j < dim; ++j)
        gv[r * dim + j] += (go[r * dim + j] - y[r * dim + j] * dot) / norms[r];
    }
  });
}

/// Row-wise softmax of a plain tensor (no graph); rows are the leading axis.
inline Tensor softmax_rows(const Tensor& logits) {
  const auto [rows, z] = detail::as_matrix(logits.shape(), "softmax");
  Tensor out = logits;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.ptr() + r * z;
    const double mx = *std::max_element(row, row + z);
    double s = 0.0;
    for (std::size_t j = 0; j < z; ++j) {
      row[j] = std::exp(row[j] - mx);
      s += row[j];
    }
    for (std::size_t j = 0; j < z; ++j) row[j] /= s;
  }
  return out;
}

/// Mean over rows of -log softmax(logits)[label]. logits [R,Z], Z >= 2.
inline Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  const auto& s = logits.shape();
  detail::require(s.size() == 2, "softmax_cross_entropy: logits must be [R,Z]");
  const std::size_t rows = s[0], z = s[1];
  detail::require(z >= 2, "softmax_cross_entropy: need at least 2 classes");
  detail::require(labels.size() == rows, "softmax_cross_entropy: label count differs from rows");
  for (auto l : labels)
    if (l >= z) throw LabelError("softmax_cross_entropy: label " + std::to_string(l) + " out of range");
  Tensor prob = softmax_rows(logits.value());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = logits.value().ptr() + r * z;
    const double mx = *std::max_element(row, row + z);
    double se = 0.0;
    for (std::size_t j = 0; j < z; ++j) se += std::exp(row[j] - mx);
    loss += (mx + std::log(se)) - row[labels[r]];
  }
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const auto lid = logits.id();
  return logits.graph().record(
      Tensor::scalar(loss), {logits},
      [lid, rows, z, prob = std::move(prob), lab = std::move(lab)](Graph& g, std::size_t self) {
        const double go = g.grad(self)[0] / static_cast<double>(rows);
        Tensor& gl = g.grad_buffer(lid);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < z; ++j)
            gl[r * z + j] += go * (prob[r * z + j] - (j == lab[r] ? 1.0 : 0.0));
      });
}

/// One-hot target variant; every target row must contain a single 1 and zeros elsewhere.
inline Var softmax_cross_entropy(const Var& logits, const Tensor& onehot) {
  detail::require(onehot.shape() == logits.shape(), "softmax_cross_entropy: target shape differs from logits");
  const std::size_t rows = onehot.dim(0), z = onehot.dim(1);
  std::vector<std::size_t> labels(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < z; ++j) {
      const double v = onehot[r * z + j];
      if (v == 1.0) {
        ++ones;
        labels[r] = j;
      } else if (v != 0.0) {
        ones = 2;
      }
    }
    if (ones != 1) throw LabelError("softmax_cross_entropy: target row " + std::to_string(r) + " is not one-hot");
  }
  return softmax_cross_entropy(logits, labels);
}

/// Mean over rows of -log( Σ_{j∈pos(r)} e^{x_rj} / Σ_j e^{x_rj} ).
/// `positive` is [R,M] with entries 0/1; every row needs at least one positive.
inline Var multi_positive_nll(const Var& logits, const std::vector<std::uint8_t>& positive) {
  const auto& s = logits.shape();
  detail::require(s.size() == 2, "multi_positive_nll: logits must be [R,M]");
  const std::size_t rows = s[0], m = s[1];
  detail::require(positive.size() == rows * m, "multi_positive_nll: mask size differs from logits");
  const Tensor& x = logits.value();
  Tensor p_all({rows, m}), p_pos({rows, m});
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.ptr() + r * m;
    const std::uint8_t* pos = positive.data() + r * m;
    // Separate shifts keep the positive sum from underflowing when positives score far below the max.
    double mx = -std::numeric_limits<double>::infinity(), mx_pos = mx;
    for (std::size_t j = 0; j < m; ++j) {
      mx = std::max(mx, row[j]);
      if (pos[j]) mx_pos = std::max(mx_pos, row[j]);
    }
    if (mx_pos == -std::numeric_limits<double>::infinity())
      throw IntegrityError("multi_positive_nll: row " + std::to_string(r) + " has no positive");
    double s_all = 0.0, s_pos = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      p_all[r * m + j] = std::exp(row[j] - mx);
      s_all += p_all[r * m + j];
      if (pos[j]) {
        p_pos[r * m + j] = std::exp(row[j] - mx_pos);
        s_pos += p_pos[r * m + j];
      }
    }
    for (std::size_t j = 0; j < m; ++j) {
      p_all[r * m + j] /= s_all;
      p_pos[r * m + j] /= s_pos;
    }
    loss += (mx + std::log(s_all)) - (mx_pos + std::log(s_pos));
  }
  loss /= static_cast<double>(rows);
  const auto lid = logits.id();
  return logits.graph().record(
      Tensor::scalar(loss), {logits},
      [lid, rows, p_all = std::move(p_all), p_pos = std::move(p_pos)](Graph& g, std::size_t self) {
        const double go = g.grad(self)[0] / static_cast<double>(rows);
        Tensor& gl = g.grad_buffer(lid);
        for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += go * (p_all[i] - p_pos[i]);
      });
}

}  // namespace lreid::ad
