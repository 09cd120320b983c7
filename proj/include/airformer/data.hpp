// Readings datasets: CSV ingestion, station filtering, chronological splits,
// z-score statistics, sliding windows, and a synthetic advection-diffusion
// generator standing in for a real monitoring network.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "airformer/dartboard.hpp"
#include "airformer/model.hpp"
#include "json.hpp"

namespace airformer {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// time x station x measurement readings with an observedness mask.
struct ReadingsDataset {
  StationSet stations;
  std::vector<std::int64_t> timestamps;  // unix seconds, uniform spacing
  std::vector<std::string> measurement_names;
  std::vector<double> values;            // (time, N, D); 0 where missing
  std::vector<std::uint8_t> observed;    // 1 observed, 0 missing
  std::size_t target_index = 0;

  [[nodiscard]] std::size_t steps() const { return timestamps.size(); }
  [[nodiscard]] std::size_t station_count() const { return stations.size(); }
  [[nodiscard]] std::size_t measurements() const { return measurement_names.size(); }
  [[nodiscard]] std::size_t index(std::size_t t, std::size_t n, std::size_t d) const {
    return (t * station_count() + n) * measurements() + d;
  }
  [[nodiscard]] double value(std::size_t t, std::size_t n, std::size_t d) const {
    return values[index(t, n, d)];
  }
  [[nodiscard]] bool is_observed(std::size_t t, std::size_t n, std::size_t d) const {
    return observed[index(t, n, d)] != 0;
  }
  [[nodiscard]] std::int64_t step_seconds() const {
    return timestamps.size() > 1 ? timestamps[1] - timestamps[0] : 0;
  }

  void validate() const {
    const std::size_t expect = steps() * station_count() * measurements();
    if (values.size() != expect || observed.size() != expect) {
      throw DataError("dataset arrays hold " + std::to_string(values.size()) +
                      " entries, expected " + std::to_string(expect));
    }
    if (measurements() == 0 || target_index >= measurements()) {
      throw DataError("invalid prediction target index");
    }
    for (std::size_t t = 1; t < timestamps.size(); ++t) {
      if (timestamps[t] - timestamps[t - 1] != step_seconds() || step_seconds() <= 0) {
        throw DataError("timestamps are not uniformly spaced at step " + std::to_string(t));
      }
    }
    for (std::size_t k = 0; k < values.size(); ++k) {
      if (observed[k] && !std::isfinite(values[k])) {
        throw DataError("non-finite observed value");
      }
    }
  }
};

// ----------------------------------------------------------------- CSV I/O

namespace detail {

inline std::optional<std::int64_t> parse_timestamp(const std::string& text) {
  for (const char* fmt : {"%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M",
                          "%Y-%m-%d %H:%M"}) {
    std::tm tm{};
    std::istringstream is(text);
    is >> std::get_time(&tm, fmt);
    if (is.fail()) continue;
    std::string rest;
    is >> rest;
    if (!rest.empty() && rest != "Z") continue;
    return static_cast<std::int64_t>(timegm(&tm));
  }
  return std::nullopt;
}

inline std::string format_timestamp(std::int64_t seconds) {
  const auto t = static_cast<std::time_t>(seconds);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S");
  return os.str();
}

inline double parse_double(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::logic_error&) {
    throw DataError(where + ": malformed number '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v)) {
    throw DataError(where + ": malformed number '" + s + "'");
  }
  return v;
}

}  // namespace detail

/// Readings CSV `timestamp,station_id,<measurement...>`; empty cells are
/// missing. Rows may come in any order; time-grid gaps become missing rows.
inline ReadingsDataset load_readings_csv(StationSet stations,
                                         const std::string& readings_path) {
  ReadingsDataset ds;
  ds.stations = std::move(stations);
  std::ifstream in(readings_path);
  if (!in) throw DataError("cannot open readings file " + readings_path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(readings_path + ": empty file");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "timestamp" || header[1] != "station_id") {
    throw DataError(readings_path +
                    ":1: expected header timestamp,station_id,<measurements>");
  }
  ds.measurement_names.assign(header.begin() + 2, header.end());
  const std::size_t d = ds.measurement_names.size();

  struct Row {
    std::int64_t time;
    std::size_t station;
    std::vector<std::optional<double>> cells;
  };
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::string where = readings_path + ":" + std::to_string(line_no);
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != d + 2) {
      throw DataError(where + ": expected " + std::to_string(d + 2) + " fields, got " +
                      std::to_string(cells.size()));
    }
    const auto time = detail::parse_timestamp(cells[0]);
    if (!time) throw DataError(where + ": malformed timestamp '" + cells[0] + "'");
    const auto station = ds.stations.index_of(cells[1]);
    if (!station) throw DataError(where + ": unknown station id '" + cells[1] + "'");
    Row row{*time, *station, {}};
    for (std::size_t k = 0; k < d; ++k) {
      if (cells[k + 2].empty()) {
        row.cells.emplace_back();
      } else {
        row.cells.emplace_back(detail::parse_double(cells[k + 2], where));
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(readings_path + ": no readings");

  std::vector<std::int64_t> times;
  for (const auto& r : rows) times.push_back(r.time);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());
  std::int64_t step = 0;
  for (std::size_t t = 1; t < times.size(); ++t) {
    const std::int64_t gap = times[t] - times[t - 1];
    step = step == 0 ? gap : std::min(step, gap);
  }
  for (std::size_t t = 1; t < times.size(); ++t) {
    if ((times[t] - times[0]) % step != 0) {
      throw DataError(readings_path + ": timestamp " +
                      detail::format_timestamp(times[t]) +
                      " is off the inferred grid of " + std::to_string(step) + " s");
    }
  }
  const std::size_t steps =
      times.size() == 1 ? 1 : static_cast<std::size_t>((times.back() - times[0]) / step) + 1;
  const std::size_t n = ds.stations.size();
  for (std::size_t t = 0; t < steps; ++t) {
    ds.timestamps.push_back(times[0] + static_cast<std::int64_t>(t) * step);
  }
  ds.values.assign(steps * n * d, 0.0);
  ds.observed.assign(steps * n * d, 0);
  std::vector<std::uint8_t> seen(steps * n, 0);
  for (const auto& r : rows) {
    const auto t = static_cast<std::size_t>((r.time - times[0]) / (step == 0 ? 1 : step));
    if (seen[t * n + r.station]++) {
      throw DataError(readings_path + ": duplicate row for station '" +
                      ds.stations[r.station].id + "' at " +
                      detail::format_timestamp(r.time));
    }
    for (std::size_t k = 0; k < d; ++k) {
      if (r.cells[k]) {
        ds.values[ds.index(t, r.station, k)] = *r.cells[k];
        ds.observed[ds.index(t, r.station, k)] = 1;
      }
    }
  }
  ds.validate();
  return ds;
}

inline ReadingsDataset load_csv(const std::string& stations_path,
                                const std::string& readings_path) {
  return load_readings_csv(read_stations_csv(stations_path), readings_path);
}

/// Writes one row per (time, station); missing entries become empty cells.
inline void write_csv(const ReadingsDataset& ds, const std::string& stations_path,
                      const std::string& readings_path) {
  write_stations_csv(ds.stations, stations_path);
  std::ofstream out(readings_path);
  if (!out) throw DataError("cannot write readings file " + readings_path);
  out << std::setprecision(17) << "timestamp,station_id";
  for (const auto& m : ds.measurement_names) out << ',' << m;
  out << '\n';
  for (std::size_t t = 0; t < ds.steps(); ++t) {
    const std::string stamp = detail::format_timestamp(ds.timestamps[t]);
    for (std::size_t n = 0; n < ds.station_count(); ++n) {
      out << stamp << ',' << ds.stations[n].id;
      for (std::size_t k = 0; k < ds.measurements(); ++k) {
        out << ',';
        if (ds.is_observed(t, n, k)) out << ds.value(t, n, k);
      }
      out << '\n';
    }
  }
  if (!out) throw DataError("failed writing " + readings_path);
}

// --------------------------------------------------- filtering and splits

/// Fraction of missing target readings per station.
inline std::vector<double> target_missing_rates(const ReadingsDataset& ds) {
  std::vector<double> out(ds.station_count(), 0.0);
  if (ds.steps() == 0) return out;
  for (std::size_t n = 0; n < ds.station_count(); ++n) {
    std::size_t missing = 0;
    for (std::size_t t = 0; t < ds.steps(); ++t) missing += !ds.is_observed(t, n, ds.target_index);
    out[n] = static_cast<double>(missing) / static_cast<double>(ds.steps());
  }
  return out;
}

/// Drops stations whose target missing rate is >= threshold.
inline ReadingsDataset filter_by_missing_rate(const ReadingsDataset& ds, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw ConfigError("missing-rate threshold must lie in (0, 1]");
  }
  const auto rates = target_missing_rates(ds);
  std::vector<std::size_t> keep;
  for (std::size_t n = 0; n < rates.size(); ++n) {
    if (rates[n] < threshold) keep.push_back(n);
  }
  if (keep.empty()) throw DataError("every station exceeds the missing-rate threshold");
  ReadingsDataset out;
  std::vector<Station> st;
  for (std::size_t n : keep) st.push_back(ds.stations[n]);
  out.stations = StationSet(std::move(st));
  out.timestamps = ds.timestamps;
  out.measurement_names = ds.measurement_names;
  out.target_index = ds.target_index;
  const std::size_t d = ds.measurements();
  for (std::size_t t = 0; t < ds.steps(); ++t) {
    for (std::size_t n : keep) {
      for (std::size_t k = 0; k < d; ++k) {
        out.values.push_back(ds.value(t, n, k));
        out.observed.push_back(ds.observed[ds.index(t, n, k)]);
      }
    }
  }
  return out;
}

/// Steps [begin, end) of a dataset.
inline ReadingsDataset slice_steps(const ReadingsDataset& ds, std::size_t begin,
                                   std::size_t end) {
  if (begin > end || end > ds.steps()) throw DataError("step range out of bounds");
  ReadingsDataset out;
  out.stations = ds.stations;
  out.measurement_names = ds.measurement_names;
  out.target_index = ds.target_index;
  out.timestamps.assign(ds.timestamps.begin() + begin, ds.timestamps.begin() + end);
  const std::size_t row = ds.station_count() * ds.measurements();
  out.values.assign(ds.values.begin() + begin * row, ds.values.begin() + end * row);
  out.observed.assign(ds.observed.begin() + begin * row, ds.observed.begin() + end * row);
  return out;
}

struct SplitBounds {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t total = 0;
};

/// Contiguous train/val/test ranges. Train and val take floor(f * len)
/// steps, test takes the rest. Each split must hold `min_length` steps.
inline SplitBounds split_bounds(std::size_t length, const std::vector<double>& fractions,
                                std::size_t min_length) {
  if (fractions.size() != 3) throw ConfigError("need three split fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  const auto train = static_cast<std::size_t>(std::floor(fractions[0] * length + 1e-9));
  const auto val = static_cast<std::size_t>(std::floor(fractions[1] * length + 1e-9));
  SplitBounds b{train, train + val, length};
  const std::size_t sizes[] = {train, val, length - train - val};
  const char* names[] = {"train", "validation", "test"};
  for (int i = 0; i < 3; ++i) {
    if (sizes[i] < min_length) {
      throw DataError(std::string(names[i]) + " split has " + std::to_string(sizes[i]) +
                      " steps, fewer than one window of " + std::to_string(min_length));
    }
  }
  return b;
}

struct DatasetSplits {
  ReadingsDataset train, val, test;
};

inline DatasetSplits chronological_split(const ReadingsDataset& ds,
                                         const std::vector<double>& fractions = {0.5, 0.25,
                                                                                 0.25},
                                         std::size_t min_length = 1) {
  const auto b = split_bounds(ds.steps(), fractions, min_length);
  return {slice_steps(ds, 0, b.train_end), slice_steps(ds, b.train_end, b.val_end),
          slice_steps(ds, b.val_end, b.total)};
}

// ----------------------------------------------------------- normalisation

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  /// Per-measurement statistics over observed entries (two-pass).
  static NormStats fit(const ReadingsDataset& train) {
    const std::size_t d = train.measurements();
    NormStats s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    std::vector<std::size_t> count(d, 0);
    for (std::size_t k = 0; k < train.values.size(); ++k) {
      if (!train.observed[k]) continue;
      s.mean[k % d] += train.values[k];
      ++count[k % d];
    }
    for (std::size_t j = 0; j < d; ++j) {
      if (count[j] == 0) {
        throw DataError("measurement '" + train.measurement_names[j] +
                        "' has no observed training values");
      }
      s.mean[j] /= static_cast<double>(count[j]);
    }
    for (std::size_t k = 0; k < train.values.size(); ++k) {
      if (!train.observed[k]) continue;
      const double e = train.values[k] - s.mean[k % d];
      s.std[k % d] += e * e;
    }
    for (std::size_t j = 0; j < d; ++j) {
      s.std[j] = std::sqrt(s.std[j] / static_cast<double>(count[j]));
      if (!(s.std[j] > 0.0)) {
        throw DataError("measurement '" + train.measurement_names[j] +
                        "' is constant on the training split");
      }
    }
    return s;
  }

  [[nodiscard]] double normalize(double x, std::size_t d) const {
    return (x - mean[d]) / std[d];
  }
  [[nodiscard]] double denormalize(double x, std::size_t d) const {
    return x * std[d] + mean[d];
  }
};

inline void to_json(nlohmann::json& j, const NormStats& s) {
  j = nlohmann::json{{"mean", s.mean}, {"std", s.std}};
}
inline void from_json(const nlohmann::json& j, NormStats& s) {
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
}

// ---------------------------------------------------------------- windows

/// Window starts s with inputs [s, s+T) and targets [s+T, s+T+tau).
inline std::vector<std::size_t> window_starts(std::size_t length, std::size_t input_steps,
                                              std::size_t horizon, std::size_t stride) {
  if (stride == 0) throw ConfigError("window stride must be positive");
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s + input_steps + horizon <= length; s += stride) out.push_back(s);
  return out;
}

/// Normalised (T, N, 2D) model input for steps [start, start+T): values
/// with missing entries set to 0 (the training mean), then indicators.
inline Tensor make_inputs(const ReadingsDataset& ds, const NormStats& stats, std::size_t start,
                          std::size_t input_steps) {
  const std::size_t n = ds.station_count();
  const std::size_t d = ds.measurements();
  if (start + input_steps > ds.steps()) throw DataError("input window out of range");
  if (stats.mean.size() != d) throw DataError("normalisation stats do not match the data");
  std::vector<double> inputs(input_steps * n * 2 * d, 0.0);
  for (std::size_t t = 0; t < input_steps; ++t) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t k = 0; k < d; ++k) {
        if (!ds.is_observed(start + t, s, k)) continue;
        inputs[(t * n + s) * 2 * d + k] = stats.normalize(ds.value(start + t, s, k), k);
        inputs[(t * n + s) * 2 * d + d + k] = 1.0;
      }
    }
  }
  return Tensor(Shape{input_steps, n, 2 * d}, std::move(inputs));
}

/// Builds one normalised sample. Missing inputs are imputed with 0 (the
/// training mean after z-scoring) and flagged by the indicator channels.
inline Sample make_sample(const ReadingsDataset& ds, const NormStats& stats,
                          std::size_t start, std::size_t input_steps, std::size_t horizon,
                          std::size_t targets) {
  const std::size_t n = ds.station_count();
  const std::size_t d = ds.measurements();
  if (start + input_steps + horizon > ds.steps()) throw DataError("window out of range");
  if (targets == 0 || ds.target_index + targets > d) throw ConfigError("bad target count");
  std::vector<double> inputs(input_steps * n * 2 * d, 0.0);
  std::vector<double> readings(input_steps * n * d, 0.0);
  std::vector<double> observed(input_steps * n * d, 0.0);
  for (std::size_t t = 0; t < input_steps; ++t) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t k = 0; k < d; ++k) {
        if (!ds.is_observed(start + t, s, k)) continue;
        const double z = stats.normalize(ds.value(start + t, s, k), k);
        inputs[(t * n + s) * 2 * d + k] = z;
        inputs[(t * n + s) * 2 * d + d + k] = 1.0;
        readings[(t * n + s) * d + k] = z;
        observed[(t * n + s) * d + k] = 1.0;
      }
    }
  }
  std::vector<double> y(horizon * n * targets, 0.0), ymask(horizon * n * targets, 0.0);
  for (std::size_t t = 0; t < horizon; ++t) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t k = 0; k < targets; ++k) {
        const std::size_t m = ds.target_index + k;
        if (!ds.is_observed(start + input_steps + t, s, m)) continue;
        y[(t * n + s) * targets + k] = stats.normalize(ds.value(start + input_steps + t, s, m), m);
        ymask[(t * n + s) * targets + k] = 1.0;
      }
    }
  }
  return Sample{Tensor(Shape{input_steps, n, 2 * d}, std::move(inputs)),
                Tensor(Shape{input_steps, n, d}, std::move(readings)),
                Tensor(Shape{input_steps, n, d}, std::move(observed)),
                Tensor(Shape{horizon, n, targets}, std::move(y)),
                Tensor(Shape{horizon, n, targets}, std::move(ymask))};
}

inline std::vector<Sample> make_windows(const ReadingsDataset& ds, const NormStats& stats,
                                        std::size_t input_steps, std::size_t horizon,
                                        std::size_t stride, std::size_t targets = 1) {
  std::vector<Sample> out;
  for (std::size_t s : window_starts(ds.steps(), input_steps, horizon, stride)) {
    out.push_back(make_sample(ds, stats, s, input_steps, horizon, targets));
  }
  return out;
}

// -------------------------------------------------------------- synthetic

struct PointSource {
  double x_km = 0.0;
  double y_km = 0.0;
  double rate = 0.0;  // concentration added to the source cell per hour
};

struct SynthConfig {
  std::size_t grid_cells = 48;       // periodic square grid, cells per side
  double cell_km = 20.0;
  std::size_t steps = 2000;
  double step_hours = 3.0;
  std::size_t substeps = 24;
  double wind_u_kmh = 15.0;          // mean eastward wind
  double wind_v_kmh = 5.0;           // mean northward wind
  double wind_amplitude_kmh = 12.0;  // slow rotation of the wind vector
  double wind_period_steps = 56.0;
  double wind_noise_kmh = 3.0;       // AR(1) innovation per step
  double diffusion_km2_h = 60.0;
  double decay_per_h = 0.03;
  double background = 20.0;          // initial level and equilibrium floor
  std::vector<PointSource> sources{{-150, -100, 400}, {120, 60, 350},
                                   {-40, 180, 300},   {200, -180, 300},
                                   {0, 0, 250}};
  double burst_probability = 0.04;   // per source per step
  double burst_multiplier = 4.0;
  std::size_t burst_steps = 3;
  std::vector<PointSource> initial_pulses;  // amount stored in `rate`
  double noise_std = 2.0;
  double missing_rate = 0.03;
  std::size_t stations_per_side = 6;
  double station_spacing_km = 120.0;
  double station_jitter_km = 20.0;
  bool drop_corner_stations = true;
  std::vector<PointSource> station_offsets_km;  // overrides the layout when set
  double origin_latitude = 35.0;
  double origin_longitude = 115.0;
  std::int64_t start_time = 1420070400;  // 2015-01-01T00:00:00Z
  bool emit_wind = true;
  std::uint64_t seed = 7;

  [[nodiscard]] double domain_km() const { return cell_km * static_cast<double>(grid_cells); }

  /// Courant-type bound of the explicit upwind/diffusion update.
  [[nodiscard]] double stability_number(double max_speed_kmh) const {
    const double dt = step_hours / static_cast<double>(substeps);
    return 2.0 * max_speed_kmh * dt / cell_km +
           4.0 * diffusion_km2_h * dt / (cell_km * cell_km);
  }

  [[nodiscard]] double max_wind_speed_kmh() const {
    // Mean + rotation amplitude + 5 sigma of the stationary AR(1) noise.
    return std::hypot(wind_u_kmh, wind_v_kmh) + wind_amplitude_kmh +
           5.0 * wind_noise_kmh / std::sqrt(1.0 - 0.9 * 0.9);
  }

  void validate() const {
    if (grid_cells < 3 || !(cell_km > 0) || steps == 0 || !(step_hours > 0) ||
        substeps == 0) {
      throw ConfigError("synthetic grid, step and substep sizes must be positive");
    }
    if (diffusion_km2_h < 0 || decay_per_h < 0 || noise_std < 0 || missing_rate < 0 ||
        missing_rate >= 1) {
      throw ConfigError("synthetic rates out of range");
    }
    if (stability_number(max_wind_speed_kmh()) > 1.0) {
      throw ConfigError("unstable synthetic step: CFL number " +
                        std::to_string(stability_number(max_wind_speed_kmh())) +
                        " exceeds 1; raise substeps or coarsen the grid");
    }
    if (decay_per_h * step_hours / static_cast<double>(substeps) >= 1.0) {
      throw ConfigError("decay too fast for the substep");
    }
  }
};

inline void to_json(nlohmann::json& j, const PointSource& p) {
  j = nlohmann::json{{"x_km", p.x_km}, {"y_km", p.y_km}, {"rate", p.rate}};
}
inline void from_json(const nlohmann::json& j, PointSource& p) {
  p.x_km = j.at("x_km").get<double>();
  p.y_km = j.at("y_km").get<double>();
  p.rate = j.value("rate", 0.0);
}

#define AIRFORMER_SYNTH_FIELDS(X)                                                    \
  X(grid_cells) X(cell_km) X(steps) X(step_hours) X(substeps) X(wind_u_kmh)          \
  X(wind_v_kmh) X(wind_amplitude_kmh) X(wind_period_steps) X(wind_noise_kmh)         \
  X(diffusion_km2_h) X(decay_per_h) X(background) X(sources) X(burst_probability)    \
  X(burst_multiplier) X(burst_steps) X(initial_pulses) X(noise_std) X(missing_rate)  \
  X(stations_per_side) X(station_spacing_km) X(station_jitter_km)                    \
  X(drop_corner_stations) X(station_offsets_km) X(origin_latitude)                   \
  X(origin_longitude) X(start_time) X(emit_wind) X(seed)

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json::object();
#define X(f) j[#f] = c.f;
  AIRFORMER_SYNTH_FIELDS(X)
#undef X
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  static const std::vector<std::string> known{
#define X(f) #f,
      AIRFORMER_SYNTH_FIELDS(X)
#undef X
  };
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown synthetic config key '" + key + "'");
    }
  }
#define X(f) c.f = j.value(#f, c.f);
  AIRFORMER_SYNTH_FIELDS(X)
#undef X
}
#undef AIRFORMER_SYNTH_FIELDS

/// Concentration on a periodic grid; cell (i, j) covers x in
/// [i, i+1) * cell_km - domain/2, likewise y.
class PollutantField {
 public:
  PollutantField(std::size_t cells, double cell_km, double fill)
      : n_(cells), dx_(cell_km), c_(cells * cells, fill), next_(cells * cells) {}

  [[nodiscard]] std::size_t cells() const { return n_; }
  [[nodiscard]] double cell_km() const { return dx_; }
  [[nodiscard]] double& at(std::size_t i, std::size_t j) { return c_[j * n_ + i]; }
  [[nodiscard]] double at(std::size_t i, std::size_t j) const { return c_[j * n_ + i]; }
  [[nodiscard]] const std::vector<double>& data() const { return c_; }

  /// Sum of concentration times cell area.
  [[nodiscard]] double total_mass() const {
    double s = 0.0;
    for (double v : c_) s += v;
    return s * dx_ * dx_;
  }

  [[nodiscard]] std::pair<std::size_t, std::size_t> cell_of(double x_km, double y_km) const {
    const double half = 0.5 * dx_ * static_cast<double>(n_);
    auto wrap = [&](double v) {
      auto k = static_cast<long long>(std::floor((v + half) / dx_));
      const auto n = static_cast<long long>(n_);
      return static_cast<std::size_t>(((k % n) + n) % n);
    };
    return {wrap(x_km), wrap(y_km)};
  }

  /// Bilinear interpolation between cell centres (periodic).
  [[nodiscard]] double sample(double x_km, double y_km) const {
    const double half = 0.5 * dx_ * static_cast<double>(n_);
    const double gx = (x_km + half) / dx_ - 0.5;
    const double gy = (y_km + half) / dx_ - 0.5;
    const double fx = std::floor(gx), fy = std::floor(gy);
    const double ax = gx - fx, ay = gy - fy;
    const auto n = static_cast<long long>(n_);
    auto idx = [&](double v) {
      return static_cast<std::size_t>(((static_cast<long long>(v) % n) + n) % n);
    };
    const std::size_t i0 = idx(fx), i1 = idx(fx + 1), j0 = idx(fy), j1 = idx(fy + 1);
    return (1 - ax) * (1 - ay) * at(i0, j0) + ax * (1 - ay) * at(i1, j0) +
           (1 - ax) * ay * at(i0, j1) + ax * ay * at(i1, j1);
  }

  /// One explicit step of upwind advection plus 5-point diffusion in flux
  /// form; conserves total mass exactly up to rounding.
  void advect_diffuse(double u_kmh, double v_kmh, double diffusion, double dt_h) {
    const double cx = u_kmh * dt_h / dx_;
    const double cy = v_kmh * dt_h / dx_;
    const double k = diffusion * dt_h / (dx_ * dx_);
    const std::size_t n = n_;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t jm = (j + n - 1) % n, jp = (j + 1) % n;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t im = (i + n - 1) % n, ip = (i + 1) % n;
        const double c = at(i, j);
        // Upwind flux through the west/east and south/north faces.
        const double fw = cx >= 0 ? cx * at(im, j) : cx * c;
        const double fe = cx >= 0 ? cx * c : cx * at(ip, j);
        const double fs = cy >= 0 ? cy * at(i, jm) : cy * c;
        const double fn = cy >= 0 ? cy * c : cy * at(i, jp);
        const double lap = at(im, j) + at(ip, j) + at(i, jm) + at(i, jp) - 4.0 * c;
        next_[j * n + i] = c + (fw - fe) + (fs - fn) + k * lap;
      }
    }
    c_.swap(next_);
  }

  void decay_towards(double floor, double rate, double dt_h) {
    const double f = rate * dt_h;
    for (double& v : c_) v -= f * (v - floor);
  }

 private:
  std::size_t n_;
  double dx_;
  std::vector<double> c_, next_;
};

/// Station positions in km relative to the domain centre.
inline std::vector<PointSource> synth_station_offsets(const SynthConfig& cfg,
                                                      std::mt19937_64& rng) {
  if (!cfg.station_offsets_km.empty()) return cfg.station_offsets_km;
  std::uniform_real_distribution<double> jitter(-cfg.station_jitter_km, cfg.station_jitter_km);
  std::vector<PointSource> out;
  const std::size_t k = cfg.stations_per_side;
  const double span = cfg.station_spacing_km * static_cast<double>(k - 1);
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      const bool corner = (r == 0 || r + 1 == k) && (c == 0 || c + 1 == k);
      if (cfg.drop_corner_stations && corner && k > 2) continue;
      out.push_back({-0.5 * span + static_cast<double>(c) * cfg.station_spacing_km + jitter(rng),
                     -0.5 * span + static_cast<double>(r) * cfg.station_spacing_km + jitter(rng),
                     0.0});
    }
  }
  return out;
}

inline GeoPoint offset_to_geo(const SynthConfig& cfg, double x_km, double y_km) {
  const double km_per_deg = kEarthRadiusKm * std::numbers::pi / 180.0;
  return {cfg.origin_latitude + y_km / km_per_deg,
          cfg.origin_longitude +
              x_km / (km_per_deg * std::cos(cfg.origin_latitude * std::numbers::pi / 180.0))};
}

/// Evolves the field and samples it at the stations. Measurements are
/// pm25 followed (optionally) by wind_u and wind_v in km/h.
inline ReadingsDataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const auto offsets = synth_station_offsets(cfg, rng);
  if (offsets.empty()) throw ConfigError("synthetic layout has no stations");
  std::vector<Station> stations;
  for (std::size_t s = 0; s < offsets.size(); ++s) {
    char id[32];
    std::snprintf(id, sizeof id, "S%03zu", s + 1);
    stations.push_back({id, offset_to_geo(cfg, offsets[s].x_km, offsets[s].y_km)});
  }

  ReadingsDataset ds;
  ds.stations = StationSet(std::move(stations));
  ds.measurement_names = {"pm25"};
  if (cfg.emit_wind) {
    ds.measurement_names.push_back("wind_u");
    ds.measurement_names.push_back("wind_v");
  }
  const std::size_t n = offsets.size();
  const std::size_t d = ds.measurement_names.size();
  const auto step_seconds = static_cast<std::int64_t>(std::llround(cfg.step_hours * 3600.0));
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    ds.timestamps.push_back(cfg.start_time + static_cast<std::int64_t>(t) * step_seconds);
  }
  ds.values.assign(cfg.steps * n * d, 0.0);
  ds.observed.assign(cfg.steps * n * d, 1);

  PollutantField field(cfg.grid_cells, cfg.cell_km, cfg.background);
  for (const auto& p : cfg.initial_pulses) {
    const auto [i, j] = field.cell_of(p.x_km, p.y_km);
    field.at(i, j) += p.rate;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::size_t> burst_left(cfg.sources.size(), 0);
  double noise_u = 0.0, noise_v = 0.0;
  const double dt = cfg.step_hours / static_cast<double>(cfg.substeps);
  const double max_speed = cfg.max_wind_speed_kmh();

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    const double phase =
        2.0 * std::numbers::pi * static_cast<double>(t) / cfg.wind_period_steps;
    double u = cfg.wind_u_kmh + cfg.wind_amplitude_kmh * std::cos(phase) + noise_u;
    double v = cfg.wind_v_kmh + cfg.wind_amplitude_kmh * std::sin(phase) + noise_v;
    const double speed = std::hypot(u, v);
    if (speed > max_speed) {  // keep the realised wind inside the validated bound
      u *= max_speed / speed;
      v *= max_speed / speed;
    }

    // Record the state at the start of the step, then evolve to the next.
    for (std::size_t s = 0; s < n; ++s) {
      double pm = field.sample(offsets[s].x_km, offsets[s].y_km);
      if (cfg.noise_std > 0) pm += cfg.noise_std * normal(rng);
      ds.values[ds.index(t, s, 0)] = pm;
      if (cfg.emit_wind) {
        ds.values[ds.index(t, s, 1)] = u + (cfg.noise_std > 0 ? 0.2 * normal(rng) : 0.0);
        ds.values[ds.index(t, s, 2)] = v + (cfg.noise_std > 0 ? 0.2 * normal(rng) : 0.0);
      }
    }

    for (std::size_t k = 0; k < cfg.sources.size(); ++k) {
      if (burst_left[k] > 0) {
        --burst_left[k];
      } else if (cfg.burst_probability > 0 && unit(rng) < cfg.burst_probability) {
        burst_left[k] = cfg.burst_steps;
      }
    }
    for (std::size_t sub = 0; sub < cfg.substeps; ++sub) {
      field.advect_diffuse(u, v, cfg.diffusion_km2_h, dt);
      if (cfg.decay_per_h > 0) field.decay_towards(cfg.background, cfg.decay_per_h, dt);
      for (std::size_t k = 0; k < cfg.sources.size(); ++k) {
        const auto& src = cfg.sources[k];
        const auto [i, j] = field.cell_of(src.x_km, src.y_km);
        const double mult = burst_left[k] > 0 ? cfg.burst_multiplier : 1.0;
        field.at(i, j) += src.rate * mult * dt;
      }
    }
    noise_u = 0.9 * noise_u + cfg.wind_noise_kmh * normal(rng);
    noise_v = 0.9 * noise_v + cfg.wind_noise_kmh * normal(rng);
  }

  if (cfg.missing_rate > 0) {
    for (std::size_t t = 0; t < cfg.steps; ++t) {
      for (std::size_t s = 0; s < n; ++s) {
        if (unit(rng) < cfg.missing_rate) {
          for (std::size_t k = 0; k < d; ++k) {
            ds.observed[ds.index(t, s, k)] = 0;
            ds.values[ds.index(t, s, k)] = 0.0;
          }
        }
      }
    }
  }
  ds.validate();
  return ds;
}

}  // namespace airformer
