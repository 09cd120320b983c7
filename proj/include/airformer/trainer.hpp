// Experiment driver: configuration file, data preparation, the training
// loop with per-epoch validation, evaluation reports and the metrics CSV
// (`epoch,split,bucket,metric,value,count`).

#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "airformer/data.hpp"
#include "airformer/grad_check.hpp"
#include "airformer/metrics.hpp"
#include "airformer/model.hpp"
#include "json.hpp"

namespace airformer {

struct DataConfig {
  bool synthetic = true;
  SynthConfig synth{};
  std::string stations_csv;
  std::string readings_csv;
  double missing_threshold = 0.2;
  std::vector<double> split{0.5, 0.25, 0.25};
};

struct TrainingConfig {
  std::size_t epochs = 5;
  std::size_t train_stride = 1;
  std::size_t eval_stride = 1;
  std::size_t max_train_windows = 0;  // per epoch, 0 = all
};

struct ExperimentConfig {
  ModelConfig model{};
  DataConfig data{};
  TrainingConfig training{};

  void validate() const {
    model.validate();
    if (training.epochs == 0) throw ConfigError("training.epochs must be positive");
    if (training.train_stride == 0 || training.eval_stride == 0) {
      throw ConfigError("window strides must be positive");
    }
    if (!data.synthetic && (data.stations_csv.empty() || data.readings_csv.empty())) {
      throw ConfigError("data needs either a synthetic block or both CSV paths");
    }
  }
};

namespace detail {
inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known,
                           const std::string& section) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown key '" + key + "' in config section '" + section + "'");
    }
  }
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json data{{"missing_threshold", c.data.missing_threshold},
                      {"split", c.data.split}};
  if (c.data.synthetic) {
    data["synthetic"] = c.data.synth;
  } else {
    data["stations_csv"] = c.data.stations_csv;
    data["readings_csv"] = c.data.readings_csv;
  }
  j = nlohmann::json{{"model", c.model},
                     {"data", data},
                     {"training",
                      {{"epochs", c.training.epochs},
                       {"train_stride", c.training.train_stride},
                       {"eval_stride", c.training.eval_stride},
                       {"max_train_windows", c.training.max_train_windows}}}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  detail::reject_unknown(j, {"model", "data", "training"}, "top level");
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"synthetic", "stations_csv", "readings_csv",
                               "missing_threshold", "split"}, "data");
    c.data.synthetic = d.contains("synthetic");
    if (c.data.synthetic) c.data.synth = d.at("synthetic").get<SynthConfig>();
    c.data.stations_csv = d.value("stations_csv", std::string{});
    c.data.readings_csv = d.value("readings_csv", std::string{});
    c.data.missing_threshold = d.value("missing_threshold", c.data.missing_threshold);
    c.data.split = d.value("split", c.data.split);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    detail::reject_unknown(t, {"epochs", "train_stride", "eval_stride", "max_train_windows"},
                           "training");
    c.training.epochs = t.value("epochs", c.training.epochs);
    c.training.train_stride = t.value("train_stride", c.training.train_stride);
    c.training.eval_stride = t.value("eval_stride", c.training.eval_stride);
    c.training.max_train_windows = t.value("max_train_windows", c.training.max_train_windows);
  }
}

/// Reads a JSON experiment config; relative CSV paths resolve against the
/// config file's directory.
inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  const auto base = std::filesystem::path(path).parent_path();
  for (std::string* p : {&c.data.stations_csv, &c.data.readings_csv}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) {
      *p = (base / *p).string();
    }
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------ preparation

struct PreparedData {
  ReadingsDataset dataset;  // after station filtering
  DatasetSplits splits;
  NormStats stats;
  DartboardProjection projection;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
  ReadingsDataset raw = cfg.data.synthetic
                            ? synth_generate(cfg.data.synth)
                            : load_csv(cfg.data.stations_csv, cfg.data.readings_csv);
  PreparedData p;
  p.dataset = filter_by_missing_rate(raw, cfg.data.missing_threshold);
  if (p.dataset.measurements() != cfg.model.measurements) {
    throw ConfigError("model.measurements is " + std::to_string(cfg.model.measurements) +
                      " but the data has " + std::to_string(p.dataset.measurements()) +
                      " measurements");
  }
  p.splits = chronological_split(p.dataset, cfg.data.split,
                                 cfg.model.input_steps + cfg.model.horizon);
  p.stats = NormStats::fit(p.splits.train);
  p.projection = DartboardProjection(cfg.model.dartboard, p.dataset.stations);
  return p;
}

// ------------------------------------------------------------- evaluation

/// Scores `model` on windows of `split`, comparing de-normalised forecasts
/// with the original readings.
inline MetricReport evaluate_split(const AirFormerModel& model, const ReadingsDataset& split,
                                   const NormStats& stats, std::size_t stride) {
  const auto& mc = model.config();
  MetricReport report(default_buckets(mc.horizon));
  const std::size_t n = split.station_count();
  for (std::size_t s : window_starts(split.steps(), mc.input_steps, mc.horizon, stride)) {
    const Sample sample = make_sample(split, stats, s, mc.input_steps, mc.horizon, mc.targets);
    const Tensor pred = model.forecast(sample.inputs);
    std::vector<double> p(pred.values().begin(), pred.values().end());
    std::vector<double> y(p.size(), 0.0);
    for (std::size_t t = 0; t < mc.horizon; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < mc.targets; ++k) {
          const std::size_t m = split.target_index + k;
          const std::size_t idx = (t * n + i) * mc.targets + k;
          p[idx] = stats.denormalize(p[idx], m);
          y[idx] = split.value(s + mc.input_steps + t, i, m);
        }
      }
    }
    report.add_window(Tensor(pred.shape(), std::move(p)), Tensor(pred.shape(), std::move(y)),
                      sample.target_mask);
  }
  return report;
}

// ------------------------------------------------------------ metrics CSV

struct MetricRow {
  long long epoch = 0;
  std::string split;
  std::string bucket;
  std::string metric;
  double value = 0.0;
  std::size_t count = 0;
};

inline void append_report_rows(std::vector<MetricRow>& rows, long long epoch,
                               const std::string& split, const MetricReport& report) {
  auto emit = [&](const std::string& bucket, const ErrorAccumulator& acc) {
    if (acc.count() == 0) {
      rows.push_back({epoch, split, bucket, "count", 0.0, 0});
      return;
    }
    const auto s = acc.stats();
    rows.push_back({epoch, split, bucket, "mae", s.mae, s.count});
    rows.push_back({epoch, split, bucket, "rmse", s.rmse, s.count});
  };
  for (std::size_t b = 0; b < report.buckets.size(); ++b) {
    emit(report.buckets[b].name, report.per_bucket[b]);
  }
  emit("all", report.overall);
  emit("sudden_change", report.sudden);
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write metrics file " + path);
  out << "epoch,split,bucket,metric,value,count\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out << r.epoch << ',' << r.split << ',' << r.bucket << ',' << r.metric << ',' << buf
        << ',' << r.count << '\n';
  }
  if (!out) throw DataError("failed writing " + path);
}

inline void print_report(std::ostream& os, const std::string& title, const MetricReport& report) {
  char line[128];
  os << title << '\n';
  std::snprintf(line, sizeof line, "  %-14s %10s %10s %8s\n", "bucket", "MAE", "RMSE", "count");
  os << line;
  auto row = [&](const std::string& name, const ErrorAccumulator& acc) {
    if (acc.count() == 0) {
      std::snprintf(line, sizeof line, "  %-14s %10s %10s %8d\n", name.c_str(), "-", "-", 0);
    } else {
      const auto s = acc.stats();
      std::snprintf(line, sizeof line, "  %-14s %10.4f %10.4f %8zu\n", name.c_str(), s.mae,
                    s.rmse, s.count);
    }
    os << line;
  };
  for (std::size_t b = 0; b < report.buckets.size(); ++b) {
    row(report.buckets[b].name, report.per_bucket[b]);
  }
  row("all", report.overall);
  row("sudden_change", report.sudden);
}

// ----------------------------------------------------------- checkpoints

inline nlohmann::json checkpoint_extra(const PreparedData& data, std::size_t epoch,
                                       double val_mae) {
  nlohmann::json stations = nlohmann::json::array();
  for (const auto& s : data.dataset.stations.stations()) {
    stations.push_back({{"id", s.id},
                        {"latitude", s.location.latitude},
                        {"longitude", s.location.longitude}});
  }
  return {{"norm", data.stats},
          {"stations", stations},
          {"measurement_names", data.dataset.measurement_names},
          {"target_index", data.dataset.target_index},
          {"epoch", epoch},
          {"val_mae", val_mae}};
}

inline StationSet stations_from_json(const nlohmann::json& j) {
  std::vector<Station> out;
  for (const auto& s : j) {
    out.push_back({s.at("id").get<std::string>(),
                   {s.at("latitude").get<double>(), s.at("longitude").get<double>()}});
  }
  return StationSet(std::move(out));
}

/// Model rebuilt from a checkpoint with the station set stored inside it.
inline AirFormerModel model_from_checkpoint(const Checkpoint& ckpt) {
  const StationSet stations = stations_from_json(ckpt.extra.at("stations"));
  AirFormerModel model(ckpt.config, DartboardProjection(ckpt.config.dartboard, stations));
  load_parameters(model, ckpt);
  return model;
}

/// Forecast of the steps after the end of a readings table, in original units.
struct ForecastTable {
  std::vector<std::int64_t> timestamps;  // tau forecast times
  std::vector<std::string> station_ids;
  std::vector<std::string> target_names;
  Tensor values;                         // (tau, N, D_out)
};

/// Runs `model` on the last T steps of `ds`, which must use the checkpoint's
/// stations and measurements (checked against `extra`).
inline ForecastTable forecast_latest(const AirFormerModel& model, const nlohmann::json& extra,
                                     const ReadingsDataset& ds) {
  const auto& mc = model.config();
  const auto names = extra.at("measurement_names").get<std::vector<std::string>>();
  if (ds.measurement_names != names) {
    throw DataError("readings columns do not match the measurements the model was trained on");
  }
  if (ds.steps() < mc.input_steps) {
    throw DataError("forecast needs at least " + std::to_string(mc.input_steps) +
                    " time steps, got " + std::to_string(ds.steps()));
  }
  if (ds.steps() > 1 && ds.step_seconds() <= 0) throw DataError("bad time step");
  const NormStats stats = extra.at("norm").get<NormStats>();
  const auto target = extra.at("target_index").get<std::size_t>();
  const Tensor pred = model.forecast(make_inputs(ds, stats, ds.steps() - mc.input_steps,
                                                 mc.input_steps));
  ForecastTable out;
  const std::int64_t step = ds.steps() > 1 ? ds.step_seconds() : 3 * 3600;
  for (std::size_t t = 0; t < mc.horizon; ++t) {
    out.timestamps.push_back(ds.timestamps.back() + static_cast<std::int64_t>(t + 1) * step);
  }
  for (const auto& st : ds.stations.stations()) out.station_ids.push_back(st.id);
  for (std::size_t k = 0; k < mc.targets; ++k) out.target_names.push_back(names[target + k]);
  std::vector<double> v(pred.values().begin(), pred.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = stats.denormalize(v[i], target + i % mc.targets);
  }
  out.values = Tensor(pred.shape(), std::move(v));
  return out;
}

inline void write_forecast_csv(const std::string& path, const ForecastTable& f) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write forecast file " + path);
  out << "timestamp,station_id";
  for (const auto& n : f.target_names) out << ',' << n;
  out << '\n';
  const std::size_t n = f.station_ids.size(), d = f.target_names.size();
  char buf[64];
  for (std::size_t t = 0; t < f.timestamps.size(); ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      out << detail::format_timestamp(f.timestamps[t]) << ',' << f.station_ids[i];
      for (std::size_t k = 0; k < d; ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", f.values.values()[(t * n + i) * d + k]);
        out << ',' << buf;
      }
      out << '\n';
    }
  }
  if (!out) throw DataError("failed writing " + path);
}

// --------------------------------------------------------------- training

struct EpochSummary {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double train_prediction = 0.0;
  double val_mae = 0.0;
};

struct TrainResult {
  std::vector<EpochSummary> epochs;
  std::vector<MetricRow> rows;
  double best_val_mae = 0.0;
  std::size_t best_epoch = 0;
  std::size_t parameter_count = 0;
};

/// Fits the model and, when `out_dir` is non-empty, writes metrics.csv and
/// checkpoint.bin (parameters of the best validation epoch) there.
inline TrainResult train_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                    std::ostream* log = nullptr) {
  cfg.validate();
  const PreparedData data = prepare_data(cfg);
  AirFormerModel model(cfg.model, data.projection);
  Adam optimizer(model.parameters());
  std::mt19937_64 rng(cfg.model.seed ^ 0x5deece66dULL);
  const auto& mc = cfg.model;

  std::vector<Sample> windows = make_windows(data.splits.train, data.stats, mc.input_steps,
                                             mc.horizon, cfg.training.train_stride, mc.targets);
  if (windows.empty()) throw DataError("training split yields no windows");
  TrainResult result;
  result.parameter_count = model.parameters().scalar_count();
  if (log) {
    *log << "stations " << data.dataset.station_count() << ", train windows "
         << windows.size() << ", parameters " << result.parameter_count << '\n';
  }
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  std::vector<std::size_t> order(windows.size());
  for (std::size_t epoch = 0; epoch < cfg.training.epochs; ++epoch) {
    const double lr = learning_rate_for_epoch(mc, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    if (cfg.training.max_train_windows > 0 && order.size() > cfg.training.max_train_windows) {
      order.resize(cfg.training.max_train_windows);
    }
    StepRecord sums;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += mc.batch_size) {
      std::vector<const Sample*> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + mc.batch_size); ++k) {
        batch.push_back(&windows[order[k]]);
      }
      const StepRecord rec = train_step(model, optimizer, batch, rng, lr);
      const auto w = static_cast<double>(batch.size());
      sums.loss += w * rec.loss;
      sums.prediction += w * rec.prediction;
      sums.reconstruction += w * rec.reconstruction;
      sums.kl += w * rec.kl;
      seen += batch.size();
    }
    const double inv = 1.0 / static_cast<double>(seen);
    const auto e = static_cast<long long>(epoch + 1);
    result.rows.push_back({e, "train", "all", "learning_rate", lr, 0});
    result.rows.push_back({e, "train", "all", "loss", sums.loss * inv, seen});
    result.rows.push_back({e, "train", "all", "prediction_l1", sums.prediction * inv, seen});
    if (mc.stochastic) {
      result.rows.push_back({e, "train", "all", "reconstruction", sums.reconstruction * inv, seen});
      result.rows.push_back({e, "train", "all", "kl", sums.kl * inv, seen});
    }
    const MetricReport val =
        evaluate_split(model, data.splits.val, data.stats, cfg.training.eval_stride);
    append_report_rows(result.rows, e, "val", val);
    const double val_mae = val.overall.stats().mae;
    result.epochs.push_back({epoch + 1, lr, sums.loss * inv, sums.prediction * inv, val_mae});
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line,
                    "epoch %zu lr %.3g loss %.4f pred_l1 %.4f val_mae %.4f\n", epoch + 1, lr,
                    sums.loss * inv, sums.prediction * inv, val_mae);
      *log << line << std::flush;
    }
    if (epoch == 0 || val_mae < result.best_val_mae) {
      result.best_val_mae = val_mae;
      result.best_epoch = epoch + 1;
      if (!out_dir.empty()) {
        save_checkpoint(out_dir + "/checkpoint.bin", model,
                        checkpoint_extra(data, epoch + 1, val_mae));
      }
    }
  }
  if (!out_dir.empty()) {
    write_metrics_csv(out_dir + "/metrics.csv", result.rows);
    std::ofstream(out_dir + "/config.json") << nlohmann::json(cfg).dump(2) << '\n';
  }
  return result;
}

// ------------------------------------------------------------ diagnostics

/// Tiny configuration for whole-model gradient checks: N=4, T=6, L=2, C=8.
inline ModelConfig tiny_model_config(std::uint64_t seed = 0) {
  ModelConfig c;
  c.blocks = 2;
  c.channels = 8;
  c.heads = 2;
  c.window_sizes = {3, 6};
  c.input_steps = 6;
  c.horizon = 3;
  c.measurements = 2;
  c.targets = 1;
  c.seed = seed;
  return c;
}

/// Four stations within the default dartboard so that several regions are
/// occupied, one of them shared by two stations.
inline StationSet tiny_station_set() {
  return StationSet({{"A", {35.00, 115.00}},
                     {"B", {35.30, 115.10}},
                     {"C", {34.40, 115.90}},
                     {"D", {34.35, 116.00}}});
}

/// A random normalised sample with a few missing inputs and targets.
inline Sample random_sample(const ModelConfig& c, std::size_t stations, std::mt19937_64& rng,
                            double missing = 0.1) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t t = c.input_steps, d = c.measurements, n = stations;
  std::vector<double> inputs(t * n * 2 * d, 0.0), readings(t * n * d, 0.0),
      observed(t * n * d, 0.0);
  for (std::size_t k = 0; k < t * n; ++k) {
    for (std::size_t j = 0; j < d; ++j) {
      if (unit(rng) < missing) continue;
      const double v = normal(rng);
      inputs[k * 2 * d + j] = v;
      inputs[k * 2 * d + d + j] = 1.0;
      readings[k * d + j] = v;
      observed[k * d + j] = 1.0;
    }
  }
  std::vector<double> y(c.horizon * n * c.targets), ymask(y.size(), 0.0);
  for (std::size_t k = 0; k < y.size(); ++k) {
    y[k] = normal(rng);
    ymask[k] = unit(rng) < missing ? 0.0 : 1.0;
  }
  return Sample{Tensor(Shape{t, n, 2 * d}, std::move(inputs)),
                Tensor(Shape{t, n, d}, std::move(readings)),
                Tensor(Shape{t, n, d}, std::move(observed)),
                Tensor(Shape{c.horizon, n, c.targets}, std::move(y)),
                Tensor(Shape{c.horizon, n, c.targets}, std::move(ymask))};
}

/// Moves every parameter away from its (often zero) initial value so that
/// checks do not run at a degenerate point.
inline void perturb_parameters(ParameterStore& store, std::mt19937_64& rng, double scale) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& p : store.all()) {
    for (double& v : p.tensor.mutable_values()) v += d(rng);
  }
}

/// Finite-difference check of the joint loss of the tiny model, with the
/// latent noise frozen.
inline GradCheckReport tiny_model_grad_check(std::uint64_t seed,
                                             const GradCheckOptions& options = {}) {
  const ModelConfig cfg = tiny_model_config(seed);
  const StationSet stations = tiny_station_set();
  AirFormerModel model(cfg, DartboardProjection(cfg.dartboard, stations));
  std::mt19937_64 rng(seed + 1);
  perturb_parameters(model.parameters(), rng, 0.2);
  const Sample sample = random_sample(cfg, stations.size(), rng);
  const auto noise = sample_noise(rng, model.latent_shape(), cfg.blocks);
  return grad_check([&] { return model.loss(sample, &noise).total; },
                    model.parameters().all(), options);
}

}  // namespace airformer
