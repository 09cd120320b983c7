// airformer: command-line front end.
//
//   airformer gen-data   --config synth.json --seed 3 --out data/
//   airformer train      --config exp.json --seed 1 --out runs/a
//   airformer evaluate   --config exp.json --checkpoint runs/a/checkpoint.bin --out runs/a
//   airformer forecast   --checkpoint runs/a/checkpoint.bin --input readings.csv --out runs/a
//   airformer grad-check --seed 0
//
// Exit status: 0 on success, 1 on a failed check or runtime error, 2 on a
// bad configuration or command line.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "airformer/airformer.hpp"

namespace fs = std::filesystem;
using namespace airformer;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string out;
  std::string input;
};

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string out_dir(const Options& o) {
  const std::string dir = o.out.empty() ? "." : o.out;
  fs::create_directories(dir);
  return dir;
}

int cmd_train(const Options& o) {
  ExperimentConfig cfg = load_experiment_config(o.config);
  if (o.seed) cfg.model.seed = *o.seed;
  const std::string dir = out_dir(o);
  const TrainResult r = train_experiment(cfg, dir, &std::cout);
  std::cout << "best epoch " << r.best_epoch << ", validation MAE " << r.best_val_mae << "\n"
            << "wrote " << dir << "/metrics.csv, checkpoint.bin, config.json\n";
  return 0;
}

int cmd_evaluate(const Options& o) {
  ExperimentConfig cfg = load_experiment_config(o.config);
  const Checkpoint ckpt = read_checkpoint(o.checkpoint);
  cfg.model = ckpt.config;
  const PreparedData data = prepare_data(cfg);
  const StationSet stations = stations_from_json(ckpt.extra.at("stations"));
  if (stations.size() != data.dataset.station_count()) {
    throw ConfigError("checkpoint has " + std::to_string(stations.size()) +
                      " stations but the data has " +
                      std::to_string(data.dataset.station_count()));
  }
  for (std::size_t i = 0; i < stations.size(); ++i) {
    if (stations[i].id != data.dataset.stations[i].id) {
      throw ConfigError("checkpoint station '" + stations[i].id + "' does not match data");
    }
  }
  const AirFormerModel model = model_from_checkpoint(ckpt);
  const NormStats stats = ckpt.extra.at("norm").get<NormStats>();
  std::vector<MetricRow> rows;
  const auto epoch = ckpt.extra.value("epoch", 0LL);
  for (const auto& [name, split] :
       {std::pair{"val", &data.splits.val}, std::pair{"test", &data.splits.test}}) {
    const MetricReport report = evaluate_split(model, *split, stats, cfg.training.eval_stride);
    print_report(std::cout, std::string(name) + " split", report);
    append_report_rows(rows, epoch, name, report);
  }
  const std::string path = out_dir(o) + "/eval_metrics.csv";
  write_metrics_csv(path, rows);
  std::cout << "wrote " << path << "\n";
  return 0;
}

int cmd_forecast(const Options& o) {
  const Checkpoint ckpt = read_checkpoint(o.checkpoint);
  const AirFormerModel model = model_from_checkpoint(ckpt);
  const ReadingsDataset ds =
      load_readings_csv(stations_from_json(ckpt.extra.at("stations")), o.input);
  const ForecastTable f = forecast_latest(model, ckpt.extra, ds);
  const std::string path = out_dir(o) + "/forecast.csv";
  write_forecast_csv(path, f);
  std::cout << "wrote " << f.timestamps.size() << " steps x " << f.station_ids.size()
            << " stations to " << path << "\n";
  return 0;
}

int cmd_gen_data(const Options& o) {
  SynthConfig synth;
  if (!o.config.empty()) {
    const nlohmann::json j = read_json(o.config);
    try {
      // Either a bare generator config or an experiment config.
      if (j.contains("data") || j.contains("model") || j.contains("training")) {
        const auto exp = j.get<ExperimentConfig>();
        if (!exp.data.synthetic) throw ConfigError("experiment config has no synthetic block");
        synth = exp.data.synth;
      } else {
        synth = j.get<SynthConfig>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(o.config + ": " + e.what());
    }
  }
  if (o.seed) synth.seed = *o.seed;
  synth.validate();
  const ReadingsDataset ds = synth_generate(synth);
  const std::string dir = out_dir(o);
  write_csv(ds, dir + "/stations.csv", dir + "/readings.csv");
  std::cout << "wrote " << ds.station_count() << " stations x " << ds.steps()
            << " steps to " << dir << "\n";
  return 0;
}

int cmd_grad_check(const Options& o) {
  const std::uint64_t seed = o.seed.value_or(0);
  const GradCheckReport r = tiny_model_grad_check(seed);
  for (const auto& p : r.parameters) {
    std::printf("  %-40s %4zu entries  max rel %.3e\n", p.name.c_str(), p.entries_checked,
                p.max_rel_error);
  }
  std::printf("%s: max relative error %.3e (tolerance %.1e) over %zu parameters\n",
              r.passed() ? "PASS" : "FAIL", r.max_rel_error, r.tolerance, r.parameters.size());
  if (!r.message.empty()) std::printf("%s\n", r.message.c_str());
  return r.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AirFormer air-quality forecasting"};
  app.require_subcommand(1);
  Options o;

  auto add_seed = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { o.seed = s; }, "random seed");
  };

  auto* train = app.add_subcommand("train", "fit a model and write metrics and a checkpoint");
  train->add_option("--config", o.config, "experiment config (JSON)")->required();
  add_seed(train);
  train->add_option("--out", o.out, "output directory");

  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on validation and test");
  eval->add_option("--config", o.config, "experiment config (JSON)")->required();
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  eval->add_option("--out", o.out, "output directory");

  auto* fc = app.add_subcommand("forecast", "forecast the steps after a readings table");
  fc->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  fc->add_option("--input", o.input, "readings CSV; the last T steps are used")->required();
  fc->add_option("--out", o.out, "output directory");

  auto* gen = app.add_subcommand("gen-data", "write a synthetic stations/readings data set");
  gen->add_option("--config", o.config, "generator or experiment config (JSON)");
  add_seed(gen);
  gen->add_option("--out", o.out, "output directory");

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of a tiny model");
  add_seed(gc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  try {
    if (*train) return cmd_train(o);
    if (*eval) return cmd_evaluate(o);
    if (*fc) return cmd_forecast(o);
    if (*gen) return cmd_gen_data(o);
    if (*gc) return cmd_grad_check(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
