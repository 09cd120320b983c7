// Forecast error metrics in original units: MAE/RMSE per horizon bucket and
// on the sudden-change subset.

#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "airformer/tensor.hpp"

namespace airformer {

class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct ErrorStats {
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t count = 0;
};

/// Running sums of absolute and squared errors.
class ErrorAccumulator {
 public:
  void add(double prediction, double truth) {
    const double e = prediction - truth;
    abs_ += std::abs(e);
    sq_ += e * e;
    ++count_;
  }
  void merge(const ErrorAccumulator& o) {
    abs_ += o.abs_;
    sq_ += o.sq_;
    count_ += o.count_;
  }
  [[nodiscard]] std::size_t count() const { return count_; }
  [[nodiscard]] ErrorStats stats() const {
    if (count_ == 0) throw UndefinedMetricError("no observed entries to score");
    const auto n = static_cast<double>(count_);
    return {abs_ / n, std::sqrt(sq_ / n), count_};
  }

 private:
  double abs_ = 0.0;
  double sq_ = 0.0;
  std::size_t count_ = 0;
};

/// MAE and RMSE over entries with mask != 0.
inline ErrorStats mae_rmse(std::span<const double> prediction, std::span<const double> truth,
                           std::span<const double> mask) {
  if (prediction.size() != truth.size() || truth.size() != mask.size()) {
    throw DimensionError("mae_rmse: " + std::to_string(prediction.size()) + " predictions, " +
                         std::to_string(truth.size()) + " truths, " +
                         std::to_string(mask.size()) + " mask entries");
  }
  ErrorAccumulator acc;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (mask[k] != 0.0) acc.add(prediction[k], truth[k]);
  }
  return acc.stats();
}

struct SuddenChangeRule {
  double level = 75.0;  // ug/m3
  double delta = 20.0;  // change over the next step (3 hours)
};

/// Marks step t when truth[t] > level and |truth[t+1] - truth[t]| > delta.
/// The final step has no successor and is never marked; steps whose value
/// or successor is unobserved are not marked either.
inline std::vector<bool> sudden_change_mask(std::span<const double> truth,
                                            std::span<const double> observed = {},
                                            SuddenChangeRule rule = {}) {
  if (!observed.empty() && observed.size() != truth.size()) {
    throw DimensionError("sudden_change_mask: mask length differs from series");
  }
  std::vector<bool> out(truth.size(), false);
  for (std::size_t t = 0; t + 1 < truth.size(); ++t) {
    if (!observed.empty() && (observed[t] == 0.0 || observed[t + 1] == 0.0)) continue;
    out[t] = truth[t] > rule.level && std::abs(truth[t + 1] - truth[t]) > rule.delta;
  }
  return out;
}

struct HorizonBucket {
  std::string name;
  std::size_t first = 0;  // 0-based forecast step, inclusive
  std::size_t last = 0;   // inclusive
};

/// Three equal groups of steps; for tau = 24 these are 1-8, 9-16, 17-24.
inline std::vector<HorizonBucket> default_buckets(std::size_t horizon) {
  if (horizon < 3) return {{"1-" + std::to_string(horizon), 0, horizon - 1}};
  std::vector<HorizonBucket> out;
  std::size_t begin = 0;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t end = horizon * (b + 1) / 3;
    out.push_back({std::to_string(begin + 1) + "-" + std::to_string(end), begin, end - 1});
    begin = end;
  }
  return out;
}

/// Per-bucket, overall and sudden-change errors.
struct MetricReport {
  std::vector<HorizonBucket> buckets;
  std::vector<ErrorAccumulator> per_bucket;
  ErrorAccumulator overall;
  ErrorAccumulator sudden;
  SuddenChangeRule rule;

  explicit MetricReport(std::vector<HorizonBucket> b, SuddenChangeRule r = {})
      : buckets(std::move(b)), per_bucket(buckets.size()), rule(r) {}

  /// Adds one forecast window. All tensors are (tau, N, D_out) in original
  /// units; only the first output channel is scored for sudden changes.
  void add_window(const Tensor& prediction, const Tensor& truth, const Tensor& mask) {
    if (prediction.shape() != truth.shape() || truth.shape() != mask.shape() ||
        truth.rank() != 3) {
      throw DimensionError("metric window shapes " + to_string(prediction.shape()) + ", " +
                           to_string(truth.shape()) + ", " + to_string(mask.shape()));
    }
    const std::size_t tau = truth.dim(0), n = truth.dim(1), d = truth.dim(2);
    const auto p = prediction.values(), y = truth.values(), m = mask.values();
    for (std::size_t t = 0; t < tau; ++t) {
      for (std::size_t k = 0; k < n * d; ++k) {
        const std::size_t i = t * n * d + k;
        if (m[i] == 0.0) continue;
        overall.add(p[i], y[i]);
        for (std::size_t b = 0; b < buckets.size(); ++b) {
          if (t >= buckets[b].first && t <= buckets[b].last) per_bucket[b].add(p[i], y[i]);
        }
      }
    }
    std::vector<double> series(tau), obs(tau);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t t = 0; t < tau; ++t) {
        series[t] = y[(t * n + s) * d];
        obs[t] = m[(t * n + s) * d];
      }
      const auto marks = sudden_change_mask(series, obs, rule);
      for (std::size_t t = 0; t < tau; ++t) {
        if (marks[t]) sudden.add(p[(t * n + s) * d], series[t]);
      }
    }
  }
};

}  // namespace airformer
