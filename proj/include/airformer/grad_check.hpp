// Central finite-difference verification of backward() gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "airformer/nn.hpp"

namespace airformer {

struct GradCheckOptions {
  double epsilon = 1e-6;
  double tolerance = 1e-4;
  // Relative error is |a - n| / max(|a|, |n|, denominator_floor); the floor
  // turns the test absolute for gradients that are numerically zero.
  double denominator_floor = 1e-3;
  // 0 checks every entry; otherwise an evenly spaced subset per parameter.
  std::size_t max_entries_per_parameter = 0;
};

struct ParameterGradError {
  std::string name;
  std::size_t entries_checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<ParameterGradError> parameters;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool aborted = false;
  std::string message;

  [[nodiscard]] bool passed() const {
    return !aborted && max_rel_error < tolerance;
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// `f` must rebuild the graph on each call and be deterministic (noise
/// frozen). Parameter values are restored before returning.
inline GradCheckReport grad_check(const std::function<Tensor()>& f,
                                  std::vector<Parameter>& params,
                                  const GradCheckOptions& options = {}) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  for (auto& p : params) p.tensor.zero_grad();

  Tensor loss = f();
  double repeat = 0.0;
  {
    NoGradGuard guard;
    repeat = f().item();
  }
  if (repeat != loss.item()) {
    report.aborted = true;
    report.message = "function is not deterministic: two evaluations gave " +
                     std::to_string(loss.item()) + " and " +
                     std::to_string(repeat) +
                     " (freeze the reparameterisation noise)";
    return report;
  }
  backward(loss);

  NoGradGuard guard;
  for (auto& p : params) {
    ParameterGradError entry;
    entry.name = p.name;
    const std::vector<double> analytic = p.tensor.grad();
    auto values = p.tensor.mutable_values();
    const std::size_t n = values.size();
    const std::size_t count = options.max_entries_per_parameter == 0
                                  ? n
                                  : std::min(n, options.max_entries_per_parameter);
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t i = count == n ? c : (c * n) / count;
      const double original = values[i];
      values[i] = original + options.epsilon;
      const double plus = f().item();
      values[i] = original - options.epsilon;
      const double minus = f().item();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.epsilon);
      const double rel =
          relative_error(analytic[i], numeric, options.denominator_floor);
      const double abs_err = std::abs(analytic[i] - numeric);
      if (c == 0 || rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = i;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      ++entry.entries_checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.parameters.push_back(std::move(entry));
  }
  for (auto& p : params) p.tensor.zero_grad();
  return report;
}

}  // namespace airformer
