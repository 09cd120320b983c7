// Dartboard spatial attention (DS-MSA), causal windowed temporal attention
// (CT-MSA) and a literal quadratic multi-head attention used as an oracle.
//
// Both layers are pre-norm: out = x + MLP(MSA(LayerNorm(x))). Heads are
// column blocks of the C x C projection matrices.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "airformer/dartboard.hpp"
#include "airformer/nn.hpp"

namespace airformer {

/// 1 / sqrt(C / heads).
inline double attention_scale(std::size_t channels, std::size_t heads) {
  return 1.0 / std::sqrt(static_cast<double>(channels / heads));
}

namespace detail {
inline void check_heads(std::size_t channels, std::size_t heads) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("channels (" + std::to_string(channels) +
                      ") must be divisible by heads (" + std::to_string(heads) +
                      ")");
  }
}

inline Shape with_lead(const Shape& lead, std::initializer_list<std::size_t> tail) {
  Shape s = lead;
  s.insert(s.end(), tail);
  return s;
}

inline std::vector<std::size_t> lead_axes(std::size_t lead,
                                          std::initializer_list<std::size_t> tail) {
  std::vector<std::size_t> axes(lead);
  for (std::size_t i = 0; i < lead; ++i) axes[i] = i;
  for (std::size_t t : tail) axes.push_back(lead + t);
  return axes;
}
}  // namespace detail

struct DsMsaLayer {
  std::size_t channels = 0;
  std::size_t heads = 0;
  std::size_t regions = 0;
  LayerNorm norm;
  Tensor w_q, w_k, w_v;  // C x C
  Tensor region_bias;    // heads x regions, shared by every query station
  Mlp out;

  static DsMsaLayer create(ParameterStore& store, const std::string& name,
                           std::size_t channels, std::size_t heads,
                           std::size_t regions) {
    detail::check_heads(channels, heads);
    DsMsaLayer l;
    l.channels = channels;
    l.heads = heads;
    l.regions = regions;
    l.norm = LayerNorm::create(store, name + ".norm", channels);
    l.w_q = store.xavier(name + ".w_q", channels, channels);
    l.w_k = store.xavier(name + ".w_k", channels, channels);
    l.w_v = store.xavier(name + ".w_v", channels, channels);
    l.region_bias = store.constant(name + ".region_bias", Shape{heads, regions}, 0.0);
    l.out = Mlp::create(store, name + ".mlp", {channels, channels, channels});
    return l;
  }
};

/// H[..., N, C] -> [..., N, C]. Each station queries the pooled features of
/// its dartboard regions; empty regions are masked out. Keys and values are
/// pooled after projection, which equals projecting the pooled features
/// because pooling and projection are both linear.
/// When `weights_out` is given it receives the attention map
/// [..., N, heads, 1, M].
inline Tensor ds_msa(const DsMsaLayer& layer, const Tensor& h,
                     const DartboardProjection& projection,
                     Tensor* weights_out = nullptr) {
  if (h.rank() < 2 || h.dim(h.rank() - 1) != layer.channels ||
      h.dim(h.rank() - 2) != projection.station_count() ||
      projection.region_count() != layer.regions) {
    throw DimensionError("ds_msa: input " + to_string(h.shape()) + " with " +
                         std::to_string(layer.channels) + " channels, " +
                         std::to_string(projection.station_count()) +
                         " stations, " + std::to_string(layer.regions) +
                         " regions (projection has " +
                         std::to_string(projection.region_count()) + ")");
  }
  const std::size_t lead = h.rank() - 2;
  const Shape lead_shape(h.shape().begin(), h.shape().begin() + lead);
  const std::size_t n = projection.station_count();
  const std::size_t m = projection.region_count();
  const std::size_t nh = layer.heads;
  const std::size_t dh = layer.channels / nh;
  using detail::lead_axes;
  using detail::with_lead;

  const Tensor x = layer.norm(h);
  const Tensor q = linear(x, layer.w_q, {});
  const Tensor k = project_features(projection, linear(x, layer.w_k, {}));
  const Tensor v = project_features(projection, linear(x, layer.w_v, {}));

  const Tensor q_heads = reshape(q, with_lead(lead_shape, {n, nh, 1, dh}));
  const Tensor k_t = permute(reshape(k, with_lead(lead_shape, {n, m, nh, dh})),
                             lead_axes(lead, {0, 2, 3, 1}));
  const Tensor v_heads = permute(reshape(v, with_lead(lead_shape, {n, m, nh, dh})),
                                 lead_axes(lead, {0, 2, 1, 3}));

  Tensor logits = scale(matmul(q_heads, k_t),
                        attention_scale(layer.channels, nh));
  logits = logits + reshape(layer.region_bias, Shape{nh, 1, m});
  const Tensor mask = reshape(projection.additive_mask(), Shape{n, 1, 1, m});
  const Tensor weights = softmax_lastaxis(logits, mask);
  if (weights_out) *weights_out = weights;
  const Tensor heads_out = matmul(weights, v_heads);
  const Tensor merged = reshape(heads_out, with_lead(lead_shape, {n, layer.channels}));
  return h + layer.out(merged);
}

struct CtMsaLayer {
  std::size_t channels = 0;
  std::size_t heads = 0;
  std::size_t window = 1;
  std::size_t max_steps = 0;
  bool causal = true;  // switched off only for oracle comparisons
  Tensor position;     // max_steps x C absolute position encoding
  LayerNorm norm;
  Tensor w_q, w_k, w_v;
  Mlp out;

  static CtMsaLayer create(ParameterStore& store, const std::string& name,
                           std::size_t channels, std::size_t heads,
                           std::size_t window, std::size_t max_steps) {
    detail::check_heads(channels, heads);
    if (window == 0) throw ConfigError("window size must be positive");
    CtMsaLayer l;
    l.channels = channels;
    l.heads = heads;
    l.window = window;
    l.max_steps = max_steps;
    l.position = store.xavier(name + ".position", max_steps, channels);
    l.norm = LayerNorm::create(store, name + ".norm", channels);
    l.w_q = store.xavier(name + ".w_q", channels, channels);
    l.w_k = store.xavier(name + ".w_k", channels, channels);
    l.w_v = store.xavier(name + ".w_v", channels, channels);
    l.out = Mlp::create(store, name + ".mlp", {channels, channels, channels});
    return l;
  }
};

/// W x W additive mask allowing position t to see positions <= t.
inline Tensor causal_mask(std::size_t window) {
  std::vector<double> v(window * window, 0.0);
  for (std::size_t i = 0; i < window; ++i)
    for (std::size_t j = i + 1; j < window; ++j) v[i * window + j] = kMaskSentinel;
  return Tensor(Shape{window, window}, std::move(v));
}

/// H[..., T, C] -> [..., T, C]; attention inside non-overlapping windows of
/// `layer.window` steps.
inline Tensor ct_msa(const CtMsaLayer& layer, const Tensor& h) {
  if (h.rank() < 2 || h.dim(h.rank() - 1) != layer.channels) {
    throw DimensionError("ct_msa: input " + to_string(h.shape()) + " vs " +
                         std::to_string(layer.channels) + " channels");
  }
  const std::size_t steps = h.dim(h.rank() - 2);
  if (steps % layer.window != 0) {
    throw ConfigError("window size " + std::to_string(layer.window) +
                      " does not divide sequence length " + std::to_string(steps));
  }
  if (steps > layer.max_steps) {
    throw ConfigError("sequence length " + std::to_string(steps) +
                      " exceeds position table of " +
                      std::to_string(layer.max_steps));
  }
  const std::size_t lead = h.rank() - 2;
  const Shape lead_shape(h.shape().begin(), h.shape().begin() + lead);
  const std::size_t w = layer.window;
  const std::size_t nw = steps / w;
  const std::size_t nh = layer.heads;
  const std::size_t dh = layer.channels / nh;
  using detail::lead_axes;
  using detail::with_lead;

  const Tensor x = h + slice(layer.position, 0, 0, steps);
  const Tensor xn = layer.norm(x);
  const Shape split = with_lead(lead_shape, {nw, w, nh, dh});
  const Tensor q = permute(reshape(linear(xn, layer.w_q, {}), split),
                           lead_axes(lead, {0, 2, 1, 3}));
  const Tensor k_t = permute(reshape(linear(xn, layer.w_k, {}), split),
                             lead_axes(lead, {0, 2, 3, 1}));
  const Tensor v = permute(reshape(linear(xn, layer.w_v, {}), split),
                           lead_axes(lead, {0, 2, 1, 3}));
  const Tensor logits = scale(matmul(q, k_t), attention_scale(layer.channels, nh));
  const Tensor weights =
      layer.causal ? softmax_lastaxis(logits, causal_mask(w)) : softmax_lastaxis(logits);
  const Tensor o = permute(matmul(weights, v), lead_axes(lead, {0, 2, 1, 3}));
  const Tensor merged = reshape(o, with_lead(lead_shape, {steps, layer.channels}));
  return x + layer.out(merged);
}

// ------------------------------------------------------------------ oracle

/// Plain row-major matrix for reference computations outside the tape.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }
};

inline Matrix to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("to_matrix needs a rank-2 tensor");
  Matrix m(t.dim(0), t.dim(1));
  std::copy(t.values().begin(), t.values().end(), m.data.begin());
  return m;
}

struct NaiveMsaWeights {
  Matrix w_q, w_k, w_v;  // C x C, head h owns columns [h*dh, (h+1)*dh)
  std::size_t heads = 1;
  double alpha = 1.0;
};

/// Softmax(alpha Q_h K_h^T + mask) V_h per head, heads concatenated.
/// Quadratic in S; test oracle only.
inline Matrix naive_msa(const Matrix& x, const NaiveMsaWeights& w,
                        const Matrix* additive_mask = nullptr) {
  const std::size_t s = x.rows;
  const std::size_t c = x.cols;
  if (w.w_q.rows != c || w.w_k.rows != c || w.w_v.rows != c ||
      w.w_q.cols != w.w_k.cols || w.w_q.cols != w.w_v.cols || w.heads == 0 ||
      w.w_q.cols % w.heads != 0 ||
      (additive_mask && (additive_mask->rows != s || additive_mask->cols != s))) {
    throw DimensionError("naive_msa: inconsistent shapes");
  }
  const std::size_t width = w.w_q.cols;
  const std::size_t dh = width / w.heads;
  auto project = [&](const Matrix& wm) {
    Matrix out(s, width);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < width; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < c; ++p) acc += x(i, p) * wm(p, j);
        out(i, j) = acc;
      }
    return out;
  };
  const Matrix q = project(w.w_q), k = project(w.w_k), v = project(w.w_v);
  Matrix out(s, width);
  for (std::size_t hd = 0; hd < w.heads; ++hd) {
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<double> score(s);
      std::vector<bool> keep(s, true);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s; ++j) {
        double dot = 0.0;
        for (std::size_t d = 0; d < dh; ++d) dot += q(i, hd * dh + d) * k(j, hd * dh + d);
        score[j] = w.alpha * dot;
        if (additive_mask) {
          const double mval = (*additive_mask)(i, j);
          if (mval <= 0.5 * kMaskSentinel) keep[j] = false;
          else score[j] += mval;
        }
        if (keep[j]) mx = std::max(mx, score[j]);
      }
      if (mx == -INFINITY) continue;
      double total = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        score[j] = keep[j] ? std::exp(score[j] - mx) : 0.0;
        total += score[j];
      }
      for (std::size_t d = 0; d < dh; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < s; ++j) acc += score[j] / total * v(j, hd * dh + d);
        out(i, hd * dh + d) = acc;
      }
    }
  }
  return out;
}

}  // namespace airformer
