#include "unetvl/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

#include "blas.hpp"

namespace uvl {

namespace {

using detail::gemm;

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(std::string_view op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
  }
}

template <class Fwd, class Dx>
Tensor unary(std::string_view op, const Tensor& a, Fwd f, Dx dfdx) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  add_flops(x.size());
  return make_result(op, a.shape(), std::move(y), a.dtype(), {a},
                     [a, dfdx](std::span<const double> g, std::span<const double> out, GradSink& sink) {
                       auto dx = sink.at(0);
                       const auto xv = a.data();
                       for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx(xv[i], out[i]);
                     });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Geometry of a stride/padding cross-correlation on [C, H, W, D] inputs.
struct ConvGeom {
  std::size_t channels, h, w, d, k, stride, pad, ho, wo, dout;
  std::size_t ck() const { return channels * k * k * k; }
  std::size_t out_plane() const { return wo * dout; }
  std::size_t out_volume() const { return ho * wo * dout; }
};

// Output depth positions [lo, hi) whose input index od*stride + e - pad is in range.
std::pair<std::size_t, std::size_t> depth_range(const ConvGeom& g, std::size_t e) {
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride), off = static_cast<std::ptrdiff_t>(e) -
                                                                         static_cast<std::ptrdiff_t>(g.pad);
  std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(g.d) - 1 - off;  // od*s <= last
  std::ptrdiff_t hi = last < 0 ? 0 : last / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(g.dout));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// col[(c, a, b, e), (oh, ow, od)] for output rows oh in [h0, h1).
void im2col(const double* x, const ConvGeom& g, std::size_t h0, std::size_t h1, double* col) {
  const std::size_t s_cols = (h1 - h0) * g.out_plane();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* xc = x + c * g.h * g.w * g.d;
    for (std::size_t a = 0; a < g.k; ++a) {
      for (std::size_t b = 0; b < g.k; ++b) {
        for (std::size_t e = 0; e < g.k; ++e, ++row) {
          const auto [lo, hi] = depth_range(g, e);
          const std::ptrdiff_t id0 = static_cast<std::ptrdiff_t>(e) - pad;
          double* dst = col + row * s_cols;
          for (std::size_t oh = h0; oh < h1; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + a) - pad;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + b) - pad;
              double* out = dst + ((oh - h0) * g.wo + ow) * g.dout;
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h) || iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) {
                std::fill(out, out + g.dout, 0.0);
                continue;
              }
              const double* src = xc + (static_cast<std::size_t>(ih) * g.w + static_cast<std::size_t>(iw)) * g.d;
              std::fill(out, out + lo, 0.0);
              if (g.stride == 1) {
                std::copy(src + (static_cast<std::ptrdiff_t>(lo) + id0), src + (static_cast<std::ptrdiff_t>(hi) + id0),
                          out + lo);
              } else {
                for (std::size_t od = lo; od < hi; ++od)
                  out[od] = src[static_cast<std::ptrdiff_t>(od * g.stride) + id0];
              }
              std::fill(out + hi, out + g.dout, 0.0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds col back into x.
void col2im_add(const double* col, const ConvGeom& g, std::size_t h0, std::size_t h1, double* x) {
  const std::size_t s_cols = (h1 - h0) * g.out_plane();
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* xc = x + c * g.h * g.w * g.d;
    for (std::size_t a = 0; a < g.k; ++a) {
      for (std::size_t b = 0; b < g.k; ++b) {
        for (std::size_t e = 0; e < g.k; ++e, ++row) {
          const auto [lo, hi] = depth_range(g, e);
          const std::ptrdiff_t id0 = static_cast<std::ptrdiff_t>(e) - pad;
          const double* src = col + row * s_cols;
          for (std::size_t oh = h0; oh < h1; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + a) - pad;
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t ow = 0; ow < g.wo; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + b) - pad;
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) continue;
              const double* in = src + ((oh - h0) * g.wo + ow) * g.dout;
              double* dst = xc + (static_cast<std::size_t>(ih) * g.w + static_cast<std::size_t>(iw)) * g.d;
              for (std::size_t od = lo; od < hi; ++od) dst[static_cast<std::ptrdiff_t>(od * g.stride) + id0] += in[od];
            }
          }
        }
      }
    }
  }
}

// Output rows per im2col slab, keeping the column buffer near 8 MB.
std::size_t slab_rows(const ConvGeom& g) {
  const std::size_t per_row = g.ck() * g.out_plane();
  return std::clamp<std::size_t>((std::size_t{1} << 20) / std::max<std::size_t>(per_row, 1), 1, g.ho);
}

// out[Co, out_volume] (+)= W[Co, ck] * im2col(x)
void conv_apply(const double* x, const double* w, std::size_t cout, const ConvGeom& g, double* out, double beta) {
  const std::size_t rows = slab_rows(g);
  std::vector<double> col(g.ck() * rows * g.out_plane());
  for (std::size_t h0 = 0; h0 < g.ho; h0 += rows) {
    const std::size_t h1 = std::min(g.ho, h0 + rows);
    const std::size_t s = (h1 - h0) * g.out_plane();
    im2col(x, g, h0, h1, col.data());
    gemm(false, false, cout, s, g.ck(), 1.0, w, g.ck(), col.data(), s, beta, out + h0 * g.out_plane(),
         g.out_volume());
  }
}

// x += col2im(W^T * y), y: [Co, out_volume]
void conv_apply_adjoint(const double* y, const double* w, std::size_t cout, const ConvGeom& g, double* x) {
  const std::size_t rows = slab_rows(g);
  std::vector<double> col(g.ck() * rows * g.out_plane());
  for (std::size_t h0 = 0; h0 < g.ho; h0 += rows) {
    const std::size_t h1 = std::min(g.ho, h0 + rows);
    const std::size_t s = (h1 - h0) * g.out_plane();
    gemm(true, false, g.ck(), s, cout, 1.0, w, g.ck(), y + h0 * g.out_plane(), g.out_volume(), 0.0, col.data(), s);
    col2im_add(col.data(), g, h0, h1, x);
  }
}

// dW[Co, ck] += y[Co, out_volume] * im2col(x)^T
void conv_weight_grad(const double* x, const double* y, std::size_t cout, const ConvGeom& g, double* dw) {
  const std::size_t rows = slab_rows(g);
  std::vector<double> col(g.ck() * rows * g.out_plane());
  for (std::size_t h0 = 0; h0 < g.ho; h0 += rows) {
    const std::size_t h1 = std::min(g.ho, h0 + rows);
    const std::size_t s = (h1 - h0) * g.out_plane();
    im2col(x, g, h0, h1, col.data());
    gemm(false, true, cout, g.ck(), s, 1.0, y + h0 * g.out_plane(), g.out_volume(), col.data(), s, 1.0, dw, g.ck());
  }
}

void check_conv_weight(std::string_view op, const Tensor& w) {
  require_rank(op, w, 5);
  if (w.dim(2) != w.dim(3) || w.dim(3) != w.dim(4)) {
    throw DimensionError(std::string(op) + ": kernel must be cubic, got " + shape_str(w.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const DType dt = common_dtype("matmul", {a, b});
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n);
  gemm(false, false, m, n, k, 1.0, a.data().data(), k, b.data().data(), n, 0.0, c.data(), n);
  return make_result("matmul", {m, n}, std::move(c), dt, {a, b},
                     [a, b, m, k, n](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       if (sink.wants(0)) {
                         gemm(false, true, m, k, n, 1.0, g.data(), n, b.data().data(), n, 1.0, sink.at(0).data(), k);
                       }
                       if (sink.wants(1)) {
                         gemm(true, false, k, n, m, 1.0, a.data().data(), k, g.data(), n, 1.0, sink.at(1).data(), n);
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  return permute(a, {1, 0});
}

Tensor block_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("block_linear", x, 2);
  require_rank("block_linear", w, 3);
  const std::size_t heads = w.dim(0), din = w.dim(1), dout = w.dim(2), n = x.dim(0);
  if (x.dim(1) != heads * din) {
    throw DimensionError("block_linear: input " + shape_str(x.shape()) + " does not split into weight blocks " +
                         shape_str(w.shape()));
  }
  if (b.defined() && b.shape() != Shape{heads, dout}) {
    throw DimensionError("block_linear: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const DType dt = common_dtype("block_linear", {x, w, b});
  const std::size_t ldx = heads * din, ldy = heads * dout;
  std::vector<double> y(n * ldy, 0.0);
  if (b.defined()) {
    const auto bv = b.data();
    for (std::size_t r = 0; r < n; ++r) std::copy(bv.begin(), bv.end(), y.begin() + r * ldy);
  }
  for (std::size_t h = 0; h < heads; ++h) {
    gemm(false, false, n, dout, din, 1.0, x.data().data() + h * din, ldx, w.data().data() + h * din * dout, dout, 1.0,
         y.data() + h * dout, ldy);
  }
  return make_result("block_linear", {n, ldy}, std::move(y), dt, {x, w, b},
                     [=](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       for (std::size_t h = 0; h < heads; ++h) {
                         if (sink.wants(0)) {
                           gemm(false, true, n, din, dout, 1.0, g.data() + h * dout, ldy,
                                w.data().data() + h * din * dout, dout, 1.0, sink.at(0).data() + h * din, ldx);
                         }
                         if (sink.wants(1)) {
                           gemm(true, false, din, dout, n, 1.0, x.data().data() + h * din, ldx, g.data() + h * dout,
                                ldy, 1.0, sink.at(1).data() + h * din * dout, dout);
                         }
                       }
                       if (sink.wants(2)) {
                         auto db = sink.at(2);
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t j = 0; j < ldy; ++j) db[j] += g[r * ldy + j];
                       }
                     });
}

// ---------------------------------------------------------------------------
// layout

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> v(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(v), a.dtype(), {a},
                     [](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       auto dx = sink.at(0);
                       for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                     });
}

Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw DimensionError("gather: index count " + std::to_string(index.size()) + " does not match shape " +
                         shape_str(out_shape));
  }
  const auto src = a.data();
  std::vector<double> v(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= src.size()) throw DimensionError("gather: index out of range for " + shape_str(a.shape()));
    v[i] = src[index[i]];
  }
  auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(index));
  return make_result("gather", std::move(out_shape), std::move(v), a.dtype(), {a},
                     [idx](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       auto dx = sink.at(0);
                       for (std::size_t i = 0; i < g.size(); ++i) dx[(*idx)[i]] += g[i];
                     });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  if (axes.size() != in.size()) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for shape " + shape_str(in));
  }
  std::vector<bool> used(in.size(), false);
  Shape out(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || used[axes[i]]) throw DimensionError("permute: invalid axis order");
    used[axes[i]] = true;
    out[i] = in[axes[i]];
  }
  std::vector<std::size_t> in_stride(in.size(), 1);
  for (std::size_t i = in.size(); i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  const std::size_t n = a.numel();
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> pos(out.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < out.size(); ++i) src += pos[i] * in_stride[axes[i]];
    index[flat] = src;
    for (std::size_t i = out.size(); i-- > 0;) {
      if (++pos[i] < out[i]) break;
      pos[i] = 0;
    }
  }
  return gather(a, std::move(index), std::move(out));
}

Tensor flip(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) throw DimensionError("flip: axis out of range for " + shape_str(s));
  const std::size_t outer = std::accumulate(s.begin(), s.begin() + axis, std::size_t{1}, std::multiplies<>());
  const std::size_t inner = std::accumulate(s.begin() + axis + 1, s.end(), std::size_t{1}, std::multiplies<>());
  const std::size_t len = s[axis];
  std::vector<std::size_t> index(a.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < inner; ++j)
        index[(o * len + i) * inner + j] = (o * len + (len - 1 - i)) * inner + j;
  return gather(a, std::move(index), s);
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape out = parts.front().shape();
  if (out.empty()) throw DimensionError("concat: scalar inputs");
  const Shape tail(out.begin() + 1, out.end());
  DType dt = parts.front().dtype();
  out[0] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != tail.size() + 1 || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat: part " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(parts.front().shape()));
    }
    if (p.dtype() != dt) throw DimensionError("concat: dtype mismatch");
    out[0] += p.dim(0);
  }
  std::vector<double> v;
  v.reserve(shape_numel(out));
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(v.size());
    v.insert(v.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::size_t> sizes;
  for (const Tensor& p : parts) sizes.push_back(p.numel());
  return make_result("concat", std::move(out), std::move(v), dt, parts,
                     [offsets, sizes](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       for (std::size_t p = 0; p < offsets.size(); ++p) {
                         if (!sink.wants(p)) continue;
                         auto dx = sink.at(p);
                         for (std::size_t i = 0; i < sizes[p]; ++i) dx[i] += g[offsets[p] + i];
                       }
                     });
}

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const DType dt = common_dtype("add", {a, b});
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  add_flops(y.size());
  return make_result("add", a.shape(), std::move(y), dt, {a, b},
                     [](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       for (std::size_t k = 0; k < 2; ++k) {
                         if (!sink.wants(k)) continue;
                         auto d = sink.at(k);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const DType dt = common_dtype("sub", {a, b});
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  add_flops(y.size());
  return make_result("sub", a.shape(), std::move(y), dt, {a, b},
                     [](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       if (sink.wants(0)) {
                         auto d = sink.at(0);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                       }
                       if (sink.wants(1)) {
                         auto d = sink.at(1);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const DType dt = common_dtype("mul", {a, b});
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  add_flops(y.size());
  return make_result("mul", a.shape(), std::move(y), dt, {a, b},
                     [a, b](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       if (sink.wants(0)) {
                         auto d = sink.at(0);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * b[i];
                       }
                       if (sink.wants(1)) {
                         auto d = sink.at(1);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * a[i];
                       }
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  const DType dt = common_dtype("div", {a, b});
  std::vector<double> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] / b[i];
  add_flops(y.size());
  return make_result("div", a.shape(), std::move(y), dt, {a, b},
                     [b](std::span<const double> g, std::span<const double> out, GradSink& sink) {
                       if (sink.wants(0)) {
                         auto d = sink.at(0);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] / b[i];
                       }
                       if (sink.wants(1)) {
                         auto d = sink.at(1);
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i] * out[i] / b[i];
                       }
                     });
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  return unary(
      "leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
      [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

namespace {

enum class BcastAxis { First, Last };

Tensor broadcast_op(std::string_view op, const Tensor& x, const Tensor& v, BcastAxis axis, bool multiply) {
  if (x.rank() == 0 || v.rank() != 1) {
    throw DimensionError(std::string(op) + ": expects tensor and vector, got " + shape_str(x.shape()) + " and " +
                         shape_str(v.shape()));
  }
  const std::size_t len = axis == BcastAxis::Last ? x.dim(x.rank() - 1) : x.dim(0);
  if (v.dim(0) != len) {
    throw DimensionError(std::string(op) + ": vector " + shape_str(v.shape()) + " does not span axis of " +
                         shape_str(x.shape()));
  }
  const DType dt = common_dtype(op, {x, v});
  const std::size_t n = x.numel();
  const std::size_t inner = axis == BcastAxis::Last ? 1 : n / len;
  // element i pairs with v[(i / inner) % len]
  auto vi = [len, inner](std::size_t i) { return (i / inner) % len; };
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = multiply ? x[i] * v[vi(i)] : x[i] + v[vi(i)];
  add_flops(n);
  return make_result(op, x.shape(), std::move(y), dt, {x, v},
                     [x, v, vi, multiply](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       if (sink.wants(0)) {
                         auto dx = sink.at(0);
                         for (std::size_t i = 0; i < g.size(); ++i) dx[i] += multiply ? g[i] * v[vi(i)] : g[i];
                       }
                       if (sink.wants(1)) {
                         auto dv = sink.at(1);
                         for (std::size_t i = 0; i < g.size(); ++i) dv[vi(i)] += multiply ? g[i] * x[i] : g[i];
                       }
                     });
}

}  // namespace

Tensor add_last(const Tensor& x, const Tensor& v) { return broadcast_op("add_last", x, v, BcastAxis::Last, false); }
Tensor mul_last(const Tensor& x, const Tensor& v) { return broadcast_op("mul_last", x, v, BcastAxis::Last, true); }
Tensor add_first(const Tensor& x, const Tensor& v) { return broadcast_op("add_first", x, v, BcastAxis::First, false); }
Tensor mul_first(const Tensor& x, const Tensor& v) { return broadcast_op("mul_first", x, v, BcastAxis::First, true); }

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  add_flops(a.numel());
  return make_result("sum", {}, {s}, a.dtype(), {a},
                     [](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       for (double& d : sink.at(0)) d += g[0];
                     });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_last(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("sum_last: scalar input");
  const std::size_t len = a.dim(a.rank() - 1), rows = a.numel() / len;
  Shape out(a.shape().begin(), a.shape().end() - 1);
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j) y[r] += a[r * len + j];
  add_flops(a.numel());
  return make_result("sum_last", std::move(out), std::move(y), a.dtype(), {a},
                     [len](std::span<const double> g, std::span<const double>, GradSink& sink) {
                       auto dx = sink.at(0);
                       for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i / len];
                     });
}

// ---------------------------------------------------------------------------
// normalization

Tensor softmax_last(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("softmax_last: scalar input");
  const std::size_t len = a.dim(a.rank() - 1), rows = a.numel() / len;
  std::vector<double> y(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * len;
    double* o = y.data() + r * len;
    const double mx = *std::max_element(x, x + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += (o[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < len; ++j) o[j] /= z;
  }
  add_flops(3 * a.numel());
  return make_result("softmax_last", a.shape(), std::move(y), a.dtype(), {a},
                     [len, rows](std::span<const double> g, std::span<const double> out, GradSink& sink) {
                       auto dx = sink.at(0);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < len; ++j) dot += g[r * len + j] * out[r * len + j];
                         for (std::size_t j = 0; j < len; ++j)
                           dx[r * len + j] += out[r * len + j] * (g[r * len + j] - dot);
                       }
                     });
}

Tensor log_softmax_last(const Tensor& a) {
  if (a.rank() == 0) throw DimensionError("log_softmax_last: scalar input");
  const std::size_t len = a.dim(a.rank() - 1), rows = a.numel() / len;
  std::vector<double> y(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.data().data() + r * len;
    const double mx = *std::max_element(x, x + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < len; ++j) y[r * len + j] = x[j] - lse;
  }
  add_flops(3 * a.numel());
  return make_result("log_softmax_last", a.shape(), std::move(y), a.dtype(), {a},
                     [len, rows](std::span<const double> g, std::span<const double> out, GradSink& sink) {
                       auto dx = sink.at(0);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double gs = 0.0;
                         for (std::size_t j = 0; j < len; ++j) gs += g[r * len + j];
                         for (std::size_t j = 0; j < len; ++j)
                           dx[r * len + j] += g[r * len + j] - std::exp(out[r * len + j]) * gs;
                       }
                     });
}

Tensor normalize_last(const Tensor& x, double eps) {
  if (x.rank() == 0) throw DimensionError("normalize_last: scalar input");
  const std::size_t len = x.dim(x.rank() - 1), rows = x.numel() / len;
  std::vector<double> y(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * len;
    double mu = 0.0;
    for (std::size_t j = 0; j < len; ++j) mu += xr[j];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t j = 0; j < len; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(len);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < len; ++j) y[r * len + j] = (xr[j] - mu) * inv;
  }
  add_flops(5 * x.numel());
  return make_result("normalize_last", x.shape(), std::move(y), x.dtype(), {x},
                     [len, rows, inv_std](std::span<const double> g, std::span<const double> out, GradSink& sink) {
                       auto dx = sink.at(0);
                       const double n = static_cast<double>(len);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gr = g.data() + r * len;
                         const double* yr = out.data() + r * len;
                         double gm = 0.0, gy = 0.0;
                         for (std::size_t j = 0; j < len; ++j) {
                           gm += gr[j];
                           gy += gr[j] * yr[j];
                         }
                         gm /= n;
                         gy /= n;
                         for (std::size_t j = 0; j < len; ++j)
                           dx[r * len + j] += (*inv_std)[r] * (gr[j] - gm - yr[j] * gy);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0 || gamma.shape() != Shape{x.dim(x.rank() - 1)} || beta.shape() != gamma.shape()) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                         " and beta " + shape_str(beta.shape()));
  }
  return add_last(mul_last(normalize_last(x, eps), gamma), beta);
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 2 || gamma.shape() != Shape{x.dim(0)} || beta.shape() != gamma.shape()) {
    throw DimensionError("instance_norm: input " + shape_str(x.shape()) + " with gamma " +
                         shape_str(gamma.shape()) + " and beta " + shape_str(beta.shape()));
  }
  const Tensor rows = reshape(x, {x.dim(0), x.numel() / x.dim(0)});
  return reshape(add_first(mul_first(normalize_last(rows, eps), gamma), beta), x.shape());
}

// ---------------------------------------------------------------------------
// convolution

std::size_t conv_out_extent(std::size_t extent, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw DimensionError("conv: stride must be positive");
  if (kernel == 0 || extent + 2 * padding < kernel) {
    throw DimensionError("conv: kernel " + std::to_string(kernel) + " larger than padded extent " +
                         std::to_string(extent + 2 * padding));
  }
  return (extent + 2 * padding - kernel) / stride + 1;
}

Tensor conv3d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
  require_rank("conv3d", x, 4);
  check_conv_weight("conv3d", w);
  if (w.dim(1) != x.dim(0)) {
    throw DimensionError("conv3d: weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                         " input channels, input is " + shape_str(x.shape()));
  }
  const DType dt = common_dtype("conv3d", {x, w});
  const std::size_t k = w.dim(2), cout = w.dim(0);
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k, stride, padding, 0, 0, 0};
  g.ho = conv_out_extent(g.h, k, stride, padding);
  g.wo = conv_out_extent(g.w, k, stride, padding);
  g.dout = conv_out_extent(g.d, k, stride, padding);
  std::vector<double> y(cout * g.out_volume());
  conv_apply(x.data().data(), w.data().data(), cout, g, y.data(), 0.0);
  return make_result("conv3d", {cout, g.ho, g.wo, g.dout}, std::move(y), dt, {x, w},
                     [x, w, g, cout](std::span<const double> gy, std::span<const double>, GradSink& sink) {
                       if (sink.wants(0)) conv_apply_adjoint(gy.data(), w.data().data(), cout, g, sink.at(0).data());
                       if (sink.wants(1)) conv_weight_grad(x.data().data(), gy.data(), cout, g, sink.at(1).data());
                     });
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& w, std::size_t stride) {
  require_rank("conv_transpose3d", x, 4);
  check_conv_weight("conv_transpose3d", w);
  if (w.dim(0) != x.dim(0)) {
    throw DimensionError("conv_transpose3d: weight " + shape_str(w.shape()) + " expects " +
                         std::to_string(w.dim(0)) + " input channels, input is " + shape_str(x.shape()));
  }
  if (stride == 0) throw DimensionError("conv_transpose3d: stride must be positive");
  const DType dt = common_dtype("conv_transpose3d", {x, w});
  const std::size_t k = w.dim(2), ca = w.dim(0), cb = w.dim(1);
  // geometry of the conv3d whose adjoint this is: [cb, H, W, D] -> [ca, h, w, d]
  ConvGeom g{cb, (x.dim(1) - 1) * stride + k, (x.dim(2) - 1) * stride + k, (x.dim(3) - 1) * stride + k,
             k, stride, 0, x.dim(1), x.dim(2), x.dim(3)};
  std::vector<double> y(cb * g.h * g.w * g.d, 0.0);
  conv_apply_adjoint(x.data().data(), w.data().data(), ca, g, y.data());
  return make_result("conv_transpose3d", {cb, g.h, g.w, g.d}, std::move(y), dt, {x, w},
                     [x, w, g, ca](std::span<const double> gy, std::span<const double>, GradSink& sink) {
                       if (sink.wants(0)) conv_apply(gy.data(), w.data().data(), ca, g, sink.at(0).data(), 1.0);
                       if (sink.wants(1)) conv_weight_grad(gy.data(), x.data().data(), ca, g, sink.at(1).data());
                     });
}

}  // namespace uvl
