// Differentiable tensor operations.
//
// Every function returns a new Tensor and, when grad mode is on and an input
// requires gradients, registers the local gradient rule on the tape.
// Elementwise binary ops follow numpy broadcasting.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "airformer/tensor.hpp"

namespace airformer {

/// Additive mask value for excluded attention positions. Kept finite so that
/// masked logits never produce inf - inf.
inline constexpr double kMaskSentinel = -1e9;

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b,
                             const char* op_name) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op_name) + ": cannot broadcast " +
                           to_string(a) + " with " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) {
    strides[d - 1] = strides[d] * shape[d];
  }
  return strides;
}

/// Strides of `in` laid against `out`, zero along broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape& in,
                                                  const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto own = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t d = 0; d < in.size(); ++d) {
    strides[offset + d] = in[d] == 1 ? 0 : own[d];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) over every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out.back();
  const std::size_t step_a = sa.back();
  const std::size_t step_b = sb.back();
  const std::size_t outer = numel(out) / inner;
  std::vector<std::size_t> idx(rank - 1, 0);
  std::size_t base_a = 0, base_b = 0, o = 0;
  for (std::size_t k = 0; k < outer; ++k) {
    std::size_t ia = base_a, ib = base_b;
    for (std::size_t j = 0; j < inner; ++j, ia += step_a, ib += step_b) {
      f(o++, ia, ib);
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      base_a += sa[d];
      base_b += sb[d];
      if (idx[d] < out[d]) break;
      base_a -= sa[d] * out[d];
      base_b -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 DA dfa, DB dfb) {
  const auto av = a.values();
  const auto bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    return Tensor::from_op(a.shape(), std::move(out), {a, b},
                           [dfa, dfb](Node& self) {
                             Node& pa = *self.parents[0];
                             Node& pb = *self.parents[1];
                             const std::size_t n = self.grad.size();
                             if (pa.requires_grad) {
                               pa.ensure_grad();
                               for (std::size_t i = 0; i < n; ++i)
                                 pa.grad[i] += dfa(pa.value[i], pb.value[i],
                                                   self.grad[i]);
                             }
                             if (pb.requires_grad) {
                               pb.ensure_grad();
                               for (std::size_t i = 0; i < n; ++i)
                                 pb.grad[i] += dfb(pa.value[i], pb.value[i],
                                                   self.grad[i]);
                             }
                           });
  }
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<double> out(numel(out_shape));
  for_each_broadcast(out_shape, sa, sb,
                     [&](std::size_t o, std::size_t ia, std::size_t ib) {
                       out[o] = fwd(av[ia], bv[ib]);
                     });
  Shape shape_copy = out_shape;
  return Tensor::from_op(
      std::move(out_shape), std::move(out), {a, b},
      [dfa, dfb, shape_copy, sa, sb](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for_each_broadcast(shape_copy, sa, sb,
                           [&](std::size_t o, std::size_t ia, std::size_t ib) {
                             const double g = self.grad[o];
                             if (pa.requires_grad)
                               pa.grad[ia] += dfa(pa.value[ia], pb.value[ib], g);
                             if (pb.requires_grad)
                               pb.grad[ib] += dfb(pa.value[ia], pb.value[ib], g);
                           });
      });
}

/// Elementwise map; deriv(x, y) returns dy/dx.
template <class Fwd, class Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto xv = x.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return Tensor::from_op(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * deriv(p.value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

/// |x| with subgradient 0 at the origin.
inline Tensor abs(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary_op(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  return detail::unary_op(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ----------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return Tensor::from_op(Shape{}, {total}, {x}, [](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    p.ensure_grad();
    const double g = self.grad[0];
    for (double& v : p.grad) v += g;
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sums everything except the leading axis: (d0, ...) -> (d0).
inline Tensor sum_by_first_axis(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("sum_by_first_axis on a scalar");
  const std::size_t rows = x.dim(0);
  const std::size_t inner = x.size() / rows;
  const auto xv = x.values();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < inner; ++j) acc += xv[r * inner + j];
    out[r] = acc;
  }
  return Tensor::from_op(Shape{rows}, std::move(out), {x},
                         [inner](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           p.ensure_grad();
                           for (std::size_t r = 0; r < self.grad.size(); ++r)
                             for (std::size_t j = 0; j < inner; ++j)
                               p.grad[r * inner + j] += self.grad[r];
                         });
}

// --------------------------------------------------------------- shape moves

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape " + to_string(x.shape()) + " -> " +
                         to_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::from_op(std::move(shape), std::move(out), {x},
                         [](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           p.ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             p.grad[i] += self.grad[i];
                         });
}

/// out.shape[d] = x.shape[axes[d]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  if (axes.size() != x.rank()) {
    throw DimensionError("permute: " + std::to_string(axes.size()) +
                         " axes for shape " + to_string(x.shape()));
  }
  const auto in_strides = detail::contiguous_strides(x.shape());
  Shape out_shape(axes.size());
  std::vector<std::size_t> gather(axes.size());
  std::vector<bool> used(axes.size(), false);
  for (std::size_t d = 0; d < axes.size(); ++d) {
    if (axes[d] >= axes.size() || used[axes[d]]) {
      throw DimensionError("permute: invalid axis list");
    }
    used[axes[d]] = true;
    out_shape[d] = x.dim(axes[d]);
    gather[d] = in_strides[axes[d]];
  }
  const std::vector<std::size_t> none(axes.size(), 0);
  const auto xv = x.values();
  std::vector<double> out(x.size());
  detail::for_each_broadcast(out_shape, gather, none,
                             [&](std::size_t o, std::size_t i, std::size_t) {
                               out[o] = xv[i];
                             });
  Shape shape_copy = out_shape;
  return Tensor::from_op(
      std::move(out_shape), std::move(out), {x},
      [shape_copy, gather, none](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        detail::for_each_broadcast(
            shape_copy, gather, none,
            [&](std::size_t o, std::size_t i, std::size_t) {
              p.grad[i] += self.grad[o];
            });
      });
}

/// Swaps the two trailing axes.
inline Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

/// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin,
                    std::size_t end) {
  if (axis >= x.rank() || begin >= end || end > x.dim(axis)) {
    throw DimensionError("slice [" + std::to_string(begin) + "," +
                         std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t full = x.dim(axis) * inner;
  const std::size_t part = (end - begin) * inner;
  const auto xv = x.values();
  std::vector<double> out(outer * part);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.begin() + o * full + begin * inner, part,
                out.begin() + o * part);
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), {x},
                         [outer, full, part, begin, inner](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           p.ensure_grad();
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < part; ++j)
                               p.grad[o * full + begin * inner + j] +=
                                   self.grad[o * part + j];
                         });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw DimensionError("concat axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == ref.size();
    for (std::size_t d = 0; ok && d < ref.size(); ++d) {
      ok = d == axis || p.dim(d) == ref[d];
    }
    if (!ok) {
      throw DimensionError("concat: " + to_string(p.shape()) +
                           " incompatible with " + to_string(ref));
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
  for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
  const std::size_t row = out_shape[axis] * inner;
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> widths, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * w, w, out.begin() + o * row + off);
    }
    widths.push_back(w);
    offsets.push_back(off);
    off += w;
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), parts,
                         [outer, row, widths, offsets](detail::Node& self) {
                           for (std::size_t k = 0; k < self.parents.size(); ++k) {
                             detail::Node& p = *self.parents[k];
                             if (!p.requires_grad) continue;
                             p.ensure_grad();
                             const std::size_t w = widths[k];
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < w; ++j)
                                 p.grad[o * w + j] +=
                                     self.grad[o * row + offsets[k] + j];
                           }
                         });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  const Shape checked = detail::broadcast_shape(x.shape(), shape, "broadcast_to");
  if (checked != shape) {
    throw DimensionError("broadcast_to: " + to_string(x.shape()) +
                         " does not expand to " + to_string(shape));
  }
  return add(x, Tensor::zeros(shape));
}

// ------------------------------------------------------------ linear algebra

/// Matrix product over the two trailing axes; leading axes broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 ||
      a.dim(a.rank() - 1) != b.dim(b.rank() - 2)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const std::size_t n = b.dim(b.rank() - 1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = detail::broadcast_shape(a_batch, b_batch, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  auto sa = detail::broadcast_strides(a_batch, batch);
  auto sb = detail::broadcast_strides(b_batch, batch);
  for (auto& s : sa) s *= m * k;
  for (auto& s : sb) s *= k * n;
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(numel(out_shape), 0.0);
  detail::for_each_broadcast(
      batch, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        double* c = out.data() + o * m * n;
        const double* am = av.data() + ia;
        const double* bm = bv.data() + ib;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = am[i * k + p];
            const double* brow = bm + p * n;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
          }
        }
      });
  return Tensor::from_op(
      std::move(out_shape), std::move(out), {a, b},
      [batch, sa, sb, m, k, n](detail::Node& self) {
        detail::Node& pa = *self.parents[0];
        detail::Node& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        detail::for_each_broadcast(
            batch, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
              const double* g = self.grad.data() + o * m * n;
              const double* am = pa.value.data() + ia;
              const double* bm = pb.value.data() + ib;
              for (std::size_t i = 0; i < m; ++i) {
                const double* grow = g + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                  const double* brow = bm + p * n;
                  if (pa.requires_grad) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    pa.grad[ia + i * k + p] += acc;
                  }
                  if (pb.requires_grad) {
                    const double aip = am[i * k + p];
                    double* dbrow = pb.grad.data() + ib + p * n;
                    for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
                  }
                }
              }
            });
      });
}

/// x[..., in] * weight[in, out] + bias[out]; bias may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() == 0 ||
      x.dim(x.rank() - 1) != weight.dim(0) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(1)))) {
    throw DimensionError("linear: input " + to_string(x.shape()) +
                         " weight " + to_string(weight.shape()) + " bias " +
                         (bias.defined() ? to_string(bias.shape()) : "none"));
  }
  const std::size_t in = weight.dim(0);
  const std::size_t outw = weight.dim(1);
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outw;
  const auto xv = x.values();
  const auto wv = weight.values();
  std::vector<double> out(rows * outw, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double* yr = out.data() + r * outw;
    if (bias.defined()) std::copy_n(bias.values().begin(), outw, yr);
    const double* xr = xv.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xr[i];
      const double* wr = wv.data() + i * outw;
      for (std::size_t o = 0; o < outw; ++o) yr[o] += xi * wr[o];
    }
  }
  std::vector<Tensor> parents{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) parents.push_back(bias);
  return Tensor::from_op(
      std::move(out_shape), std::move(out), std::move(parents),
      [in, outw, rows, has_bias](detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pw = *self.parents[1];
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * outw;
          const double* xr = px.value.data() + r * in;
          for (std::size_t i = 0; i < in; ++i) {
            const double* wr = pw.value.data() + i * outw;
            if (px.requires_grad) {
              double acc = 0.0;
              for (std::size_t o = 0; o < outw; ++o) acc += g[o] * wr[o];
              px.grad[r * in + i] += acc;
            }
            if (pw.requires_grad) {
              const double xi = xr[i];
              double* dw = pw.grad.data() + i * outw;
              for (std::size_t o = 0; o < outw; ++o) dw[o] += xi * g[o];
            }
          }
        }
        if (has_bias) {
          detail::Node& pb = *self.parents[2];
          if (pb.requires_grad) {
            pb.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t o = 0; o < outw; ++o)
                pb.grad[o] += self.grad[r * outw + o];
          }
        }
      });
}

// ------------------------------------------------------------ normalisation

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Normalises each last-axis slice to zero mean and unit variance, then
/// applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = kLayerNormEpsilon) {
  if (x.rank() == 0) throw DimensionError("layer_norm on a scalar");
  const std::size_t c = x.dim(x.rank() - 1);
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("layer_norm: gain " + to_string(gain.shape()) +
                         " / bias " + to_string(bias.shape()) +
                         " vs features " + to_string(x.shape()));
  }
  const std::size_t rows = x.size() / c;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xr[j] - mu) * is;
      xhat[r * c + j] = h;
      out[r * c + j] = gv[j] * h + bv[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), {x, gain, bias},
      [c, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          detail::Node& self) {
        detail::Node& px = *self.parents[0];
        detail::Node& pg = *self.parents[1];
        detail::Node& pb = *self.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * c;
          const double* h = xhat.data() + r * c;
          if (pg.requires_grad)
            for (std::size_t j = 0; j < c; ++j) pg.grad[j] += g[j] * h[j];
          if (pb.requires_grad)
            for (std::size_t j = 0; j < c; ++j) pb.grad[j] += g[j];
          if (!px.requires_grad) continue;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dh = g[j] * pg.value[j];
            mean_dh += dh;
            mean_dh_h += dh * h[j];
          }
          mean_dh *= inv_c;
          mean_dh_h *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            const double dh = g[j] * pg.value[j];
            px.grad[r * c + j] += inv_std[r] * (dh - mean_dh - h[j] * mean_dh_h);
          }
        }
      });
}

/// Softmax over the last axis after adding `additive_mask` (broadcast to x).
/// Mask entries at or below half the sentinel are excluded and receive
/// exactly zero weight; a slice with every entry excluded yields zeros.
inline Tensor softmax_lastaxis(const Tensor& x, const Tensor& additive_mask = {}) {
  if (x.rank() == 0) throw DimensionError("softmax on a scalar");
  const std::size_t c = x.dim(x.rank() - 1);
  const std::size_t rows = x.size() / c;
  std::vector<double> z(x.values().begin(), x.values().end());
  std::vector<unsigned char> excluded(x.size(), 0);
  if (additive_mask.defined()) {
    const Shape out_shape =
        detail::broadcast_shape(x.shape(), additive_mask.shape(), "softmax mask");
    if (out_shape != x.shape()) {
      throw DimensionError("softmax: mask " + to_string(additive_mask.shape()) +
                           " does not broadcast to " + to_string(x.shape()));
    }
    const auto mv = additive_mask.values();
    detail::for_each_broadcast(
        x.shape(), std::vector<std::size_t>(x.rank(), 0),
        detail::broadcast_strides(additive_mask.shape(), x.shape()),
        [&](std::size_t o, std::size_t, std::size_t im) {
          const double m = mv[im];
          if (m <= 0.5 * kMaskSentinel) {
            excluded[o] = 1;
          } else {
            z[o] += m;
          }
        });
  }
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (!excluded[base + j]) mx = std::max(mx, z[base + j]);
    if (mx == -std::numeric_limits<double>::infinity()) continue;
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (excluded[base + j]) continue;
      const double e = std::exp(z[base + j] - mx);
      out[base + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[base + j] /= total;
  }
  return Tensor::from_op(x.shape(), std::move(out), {x},
                         [c, rows](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           p.ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* y = self.value.data() + r * c;
                             const double* g = self.grad.data() + r * c;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += y[j] * g[j];
                             for (std::size_t j = 0; j < c; ++j)
                               p.grad[r * c + j] += y[j] * (g[j] - dot);
                           }
                         });
}

}  // namespace airformer
