// The full forecaster: embedding MLP, L blocks of (DS-MSA over stations at
// each step, CT-MSA over steps at each station), the latent hierarchy, and
// the prediction head reading the final step of every block.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "airformer/attention.hpp"
#include "airformer/stochastic.hpp"
#include "json.hpp"

namespace airformer {

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t blocks = 4;
  std::size_t channels = 32;
  std::size_t heads = 2;
  std::vector<std::size_t> window_sizes{3, 6, 12, 24};
  DartboardSpec dartboard{};
  std::size_t input_steps = 24;   // T
  std::size_t horizon = 24;       // tau
  std::size_t measurements = 1;   // D, raw measurements per station
  std::size_t targets = 1;        // D_out, leading measurements predicted
  double learning_rate = 5e-4;
  std::size_t lr_halving_epochs = 3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double elbo_weight = 1.0;
  double grad_clip_norm = 5.0;
  bool spatial_attention = true;  // false: blocks skip DS-MSA
  bool stochastic = true;         // false: no latents, prediction loss only

  /// Model inputs carry an observedness flag per measurement.
  [[nodiscard]] std::size_t input_features() const { return 2 * measurements; }

  void validate() const {
    if (blocks == 0) throw ConfigError("blocks must be positive");
    if (heads == 0 || channels % heads != 0) {
      throw ConfigError("channels (" + std::to_string(channels) +
                        ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
    if (window_sizes.size() != blocks) {
      throw ConfigError("window_sizes has " + std::to_string(window_sizes.size()) +
                        " entries for " + std::to_string(blocks) + " blocks");
    }
    for (std::size_t w : window_sizes) {
      if (w == 0 || input_steps % w != 0) {
        throw ConfigError("window size " + std::to_string(w) +
                          " does not divide input_steps " + std::to_string(input_steps));
      }
    }
    if (input_steps == 0 || horizon == 0) throw ConfigError("steps must be positive");
    if (measurements == 0 || targets == 0 || targets > measurements) {
      throw ConfigError("need 0 < targets <= measurements");
    }
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (lr_halving_epochs == 0) throw ConfigError("lr_halving_epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(elbo_weight >= 0.0)) throw ConfigError("elbo_weight must be non-negative");
    dartboard.validate();
  }
};

inline void to_json(nlohmann::json& j, const DartboardSpec& s) {
  j = nlohmann::json{{"radii_km", s.radii_km},
                     {"n_sectors", s.n_sectors},
                     {"sector_offset_deg", s.sector_offset_deg}};
}

inline void from_json(const nlohmann::json& j, DartboardSpec& s) {
  for (const auto& [key, _] : j.items()) {
    if (key != "radii_km" && key != "n_sectors" && key != "sector_offset_deg") {
      throw ConfigError("unknown dartboard config key '" + key + "'");
    }
  }
  s.radii_km = j.value("radii_km", s.radii_km);
  s.n_sectors = j.value("n_sectors", s.n_sectors);
  s.sector_offset_deg = j.value("sector_offset_deg", s.sector_offset_deg);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"blocks", c.blocks},
                     {"channels", c.channels},
                     {"heads", c.heads},
                     {"window_sizes", c.window_sizes},
                     {"dartboard", c.dartboard},
                     {"input_steps", c.input_steps},
                     {"horizon", c.horizon},
                     {"measurements", c.measurements},
                     {"targets", c.targets},
                     {"learning_rate", c.learning_rate},
                     {"lr_halving_epochs", c.lr_halving_epochs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"elbo_weight", c.elbo_weight},
                     {"grad_clip_norm", c.grad_clip_norm},
                     {"spatial_attention", c.spatial_attention},
                     {"stochastic", c.stochastic}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const std::vector<std::string> known{
      "blocks", "channels", "heads", "window_sizes", "dartboard", "input_steps",
      "horizon", "measurements", "targets", "learning_rate", "lr_halving_epochs",
      "batch_size", "seed", "elbo_weight", "grad_clip_norm", "spatial_attention",
      "stochastic"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  c.blocks = j.value("blocks", c.blocks);
  c.channels = j.value("channels", c.channels);
  c.heads = j.value("heads", c.heads);
  c.window_sizes = j.value("window_sizes", c.window_sizes);
  if (j.contains("dartboard")) c.dartboard = j.at("dartboard").get<DartboardSpec>();
  c.input_steps = j.value("input_steps", c.input_steps);
  c.horizon = j.value("horizon", c.horizon);
  c.measurements = j.value("measurements", c.measurements);
  c.targets = j.value("targets", c.targets);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_halving_epochs = j.value("lr_halving_epochs", c.lr_halving_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.elbo_weight = j.value("elbo_weight", c.elbo_weight);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  c.spatial_attention = j.value("spatial_attention", c.spatial_attention);
  c.stochastic = j.value("stochastic", c.stochastic);
}

/// One training/evaluation window, already normalised.
struct Sample {
  Tensor inputs;       // (T, N, 2D): values with missing set to 0, then flags
  Tensor readings;     // (T, N, D): reconstruction target, 0 where missing
  Tensor observed;     // (T, N, D): 1 observed, 0 missing
  Tensor targets;      // (tau, N, D_out)
  Tensor target_mask;  // (tau, N, D_out)
};

struct LossBreakdown {
  Tensor total;
  Tensor forecast;                   // (tau, N, D_out)
  double prediction = 0.0;           // masked mean absolute error
  double reconstruction = 0.0;
  double kl = 0.0;
  std::vector<double> per_step_elbo; // one entry per input step
  std::vector<Tensor> states;        // H^1..H^L, each (T, N, C)
};

/// Masked mean absolute error; zero when nothing is observed.
inline Tensor masked_l1(const Tensor& prediction, const Tensor& target,
                        const Tensor& mask) {
  double count = 0.0;
  for (double m : mask.values()) count += m;
  if (count == 0.0) return scale(sum(prediction), 0.0);
  return scale(sum(abs(prediction - target) * mask), 1.0 / count);
}

struct AirFormerBlock {
  DsMsaLayer spatial;
  CtMsaLayer temporal;
};

class AirFormerModel {
 public:
  AirFormerModel(ModelConfig config, DartboardProjection projection)
      : config_(std::move(config)),
        projection_(std::move(projection)),
        store_(config_.seed) {
    config_.validate();
    if (projection_.region_count() != config_.dartboard.region_count()) {
      throw ConfigError("projection region count does not match dartboard config");
    }
    const std::size_t c = config_.channels;
    embedding_ = Mlp::create(store_, "embedding", {config_.input_features(), c, c});
    for (std::size_t l = 0; l < config_.blocks; ++l) {
      const std::string name = "block" + std::to_string(l + 1);
      AirFormerBlock block;
      if (config_.spatial_attention) {
        block.spatial = DsMsaLayer::create(store_, name + ".dsmsa", c, config_.heads,
                                           config_.dartboard.region_count());
      }
      block.temporal = CtMsaLayer::create(store_, name + ".ctmsa", c, config_.heads,
                                          config_.window_sizes[l], config_.input_steps);
      blocks_.push_back(std::move(block));
    }
    if (config_.stochastic) {
      prior_ = make_prior_net(store_, "prior", config_.blocks, c);
      posterior_ = make_posterior_net(store_, "posterior", config_.blocks, c);
      decoder_ = Decoder::create(store_, "decoder", config_.blocks, c,
                                 config_.measurements);
    }
    const std::size_t head_in = (config_.stochastic ? 2 : 1) * config_.blocks * c;
    head_ = Mlp::create(store_, "head",
                        {head_in, 2 * c, config_.horizon * config_.targets});
  }

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  [[nodiscard]] const DartboardProjection& projection() const { return projection_; }
  [[nodiscard]] ParameterStore& parameters() { return store_; }
  [[nodiscard]] const ParameterStore& parameters() const { return store_; }
  [[nodiscard]] const std::vector<AirFormerBlock>& blocks() const { return blocks_; }
  [[nodiscard]] const PriorNet& prior() const { return prior_; }
  [[nodiscard]] const PosteriorNet& posterior() const { return posterior_; }
  [[nodiscard]] const Decoder& decoder() const { return decoder_; }

  /// Latent noise shape for one sample: (T, N, C).
  [[nodiscard]] Shape latent_shape() const {
    return {config_.input_steps, projection_.station_count(), config_.channels};
  }

  /// (T, N, 2D) -> H^1..H^L, each (T, N, C).
  [[nodiscard]] std::vector<Tensor> forward_deterministic(const Tensor& inputs) const {
    const Shape expect{config_.input_steps, projection_.station_count(),
                       config_.input_features()};
    if (inputs.shape() != expect) {
      throw ConfigError("model input " + to_string(inputs.shape()) + ", expected " +
                        to_string(expect));
    }
    std::vector<Tensor> states;
    Tensor h = embedding_(inputs);
    for (const auto& block : blocks_) {
      if (config_.spatial_attention) h = ds_msa(block.spatial, h, projection_);
      h = permute(ct_msa(block.temporal, permute(h, {1, 0, 2})), {1, 0, 2});
      states.push_back(h);
    }
    return states;
  }

  /// Posterior and prior stacks; without noise the posterior means are used.
  [[nodiscard]] LatentStack infer_latents(const std::vector<Tensor>& states,
                                          const std::vector<Tensor>* noise) const {
    if (!config_.stochastic) throw ContractError("model has no stochastic stage");
    return airformer::infer_latents(prior_, posterior_, states, noise);
  }

  /// Forecast (tau, N, D_out) from the final-step states and latents.
  [[nodiscard]] Tensor predict(const std::vector<Tensor>& states,
                               const LatentStack* latents) const {
    if (config_.stochastic && (!latents || latents->levels.size() != config_.blocks)) {
      throw ContractError("predict needs the latent stack of every block");
    }
    const std::size_t last = config_.input_steps - 1;
    const std::size_t n = projection_.station_count();
    std::vector<Tensor> features;
    for (const auto& h : states) {
      features.push_back(reshape(slice(h, 0, last, last + 1), {n, config_.channels}));
    }
    if (config_.stochastic) {
      for (const auto& level : latents->levels) {
        features.push_back(
            reshape(slice(level.sample, 0, last, last + 1), {n, config_.channels}));
      }
    }
    const Tensor out = head_(concat(features, 1));
    return permute(reshape(out, {n, config_.horizon, config_.targets}), {1, 0, 2});
  }

  /// Joint loss. `noise` null means evaluation mode (posterior means).
  [[nodiscard]] LossBreakdown loss(const Sample& sample,
                                   const std::vector<Tensor>* noise) const {
    LossBreakdown out;
    out.states = forward_deterministic(sample.inputs);
    LatentStack stack;
    if (config_.stochastic) stack = infer_latents(out.states, noise);
    out.forecast = predict(out.states, config_.stochastic ? &stack : nullptr);
    if (out.forecast.shape() != sample.targets.shape()) {
      throw DimensionError("targets " + to_string(sample.targets.shape()) +
                           " vs forecast " + to_string(out.forecast.shape()));
    }
    const Tensor pred = masked_l1(out.forecast, sample.targets, sample.target_mask);
    out.prediction = pred.item();
    out.total = pred;
    if (config_.stochastic) {
      const Tensor recon = reconstruct(decoder_, stack.samples());
      const ElboTerms elbo = elbo_loss(stack, recon, sample.readings, sample.observed);
      out.reconstruction = elbo.reconstruction.item();
      out.kl = elbo.kl.item();
      out.per_step_elbo.assign(elbo.per_step.values().begin(),
                               elbo.per_step.values().end());
      out.total = pred + scale(elbo.total, config_.elbo_weight);
    }
    return out;
  }

  /// Evaluation-mode forecast without recording a graph.
  [[nodiscard]] Tensor forecast(const Tensor& inputs) const {
    NoGradGuard guard;
    const auto states = forward_deterministic(inputs);
    if (!config_.stochastic) return predict(states, nullptr);
    const LatentStack stack = infer_latents(states, nullptr);
    return predict(states, &stack);
  }

 private:
  ModelConfig config_;
  DartboardProjection projection_;
  ParameterStore store_;
  Mlp embedding_;
  std::vector<AirFormerBlock> blocks_;
  PriorNet prior_;
  PosteriorNet posterior_;
  Decoder decoder_;
  Mlp head_;
};

// ---------------------------------------------------------------- training

/// lr0 halved every `lr_halving_epochs` completed epochs.
inline double learning_rate_for_epoch(const ModelConfig& config, std::size_t epoch) {
  return config.learning_rate *
         std::pow(0.5, static_cast<double>(epoch / config.lr_halving_epochs));
}

/// Rescales all gradients to `max_norm` when their global norm exceeds it.
/// Returns the norm before clipping.
inline double clip_gradients(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (auto& p : store.all()) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.mutable_grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : store.all()) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= f;
    }
  }
  return norm;
}

class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  explicit Adam(const ParameterStore& store) {
    for (const auto& p : store.all()) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  void step(ParameterStore& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    auto& params = store.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& t = params[i].tensor;
      if (!t.has_grad()) continue;
      auto g = t.mutable_grad();
      auto w = t.mutable_values();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m_[i][k] = kBeta1 * m_[i][k] + (1.0 - kBeta1) * g[k];
        v_[i][k] = kBeta2 * v_[i][k] + (1.0 - kBeta2) * g[k] * g[k];
        w[k] -= lr * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + kEpsilon);
      }
    }
  }

  [[nodiscard]] std::size_t steps() const { return t_; }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct StepRecord {
  double loss = 0.0;
  double prediction = 0.0;
  double reconstruction = 0.0;
  double kl = 0.0;
  double grad_norm = 0.0;
};

/// Forward, loss, backward and one Adam update over a batch. The batch loss
/// is the mean of per-sample losses. Latent noise is drawn from `rng`.
inline StepRecord train_step(AirFormerModel& model, Adam& optimizer,
                             const std::vector<const Sample*>& batch,
                             std::mt19937_64& rng, double lr) {
  if (batch.empty()) throw ContractError("train_step on an empty batch");
  ParameterStore& store = model.parameters();
  store.zero_grad();
  StepRecord rec;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const Sample* sample : batch) {
    std::vector<Tensor> noise;
    if (model.config().stochastic) {
      noise = sample_noise(rng, model.latent_shape(), model.config().blocks);
    }
    LossBreakdown b = model.loss(*sample, model.config().stochastic ? &noise : nullptr);
    const std::pair<const char*, double> parts[] = {
        {"prediction", b.prediction}, {"reconstruction", b.reconstruction},
        {"kl", b.kl}, {"total", b.total.item()}};
    for (const auto& [name, value] : parts) {
      if (!std::isfinite(value)) {
        throw NumericalError(std::string("non-finite loss component '") + name + "'");
      }
    }
    backward(scale(b.total, inv));
    rec.loss += inv * b.total.item();
    rec.prediction += inv * b.prediction;
    rec.reconstruction += inv * b.reconstruction;
    rec.kl += inv * b.kl;
  }
  rec.grad_norm = clip_gradients(store, model.config().grad_clip_norm);
  if (!std::isfinite(rec.grad_norm)) throw NumericalError("non-finite gradient norm");
  optimizer.step(store, lr);
  return rec;
}

// -------------------------------------------------------------- checkpoint

// Layout (all integers little-endian u64):
//   "AFCKPT01" | meta_len | meta JSON | count |
//   count x { name_len | name | rank | dims... | values as raw f64 }
// The metadata JSON holds {"model": ModelConfig, "extra": caller data}.

namespace detail {
static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw CheckpointError("truncated checkpoint");
  }
  return v;
}
inline constexpr char kCheckpointMagic[8] = {'A', 'F', 'C', 'K', 'P', 'T', '0', '1'};
}  // namespace detail

struct CheckpointTensor {
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  ModelConfig config;
  nlohmann::json extra;
  std::map<std::string, CheckpointTensor> tensors;
  std::vector<std::string> order;
};

inline void save_checkpoint(const std::string& path, const AirFormerModel& model,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  const std::string meta =
      nlohmann::json{{"model", model.config()}, {"extra", extra}}.dump();
  os.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  detail::write_u64(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  const auto& params = model.parameters().all();
  detail::write_u64(os, params.size());
  for (const auto& p : params) {
    detail::write_u64(os, p.name.size());
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_u64(os, p.tensor.rank());
    for (std::size_t d : p.tensor.shape()) detail::write_u64(os, d);
    os.write(reinterpret_cast<const char*>(p.tensor.values().data()),
             static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!os) throw CheckpointError("failed writing checkpoint " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) ||
      std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw CheckpointError(path + " is not an airformer checkpoint");
  }
  const std::uint64_t meta_len = detail::read_u64(is);
  std::string meta(meta_len, '\0');
  if (!is.read(meta.data(), static_cast<std::streamsize>(meta_len))) {
    throw CheckpointError("truncated checkpoint metadata");
  }
  Checkpoint ckpt;
  try {
    const auto j = nlohmann::json::parse(meta);
    ckpt.config = j.at("model").get<ModelConfig>();
    ckpt.extra = j.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": bad metadata: " + e.what());
  }
  const std::uint64_t count = detail::read_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(detail::read_u64(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) {
      throw CheckpointError("truncated parameter name");
    }
    CheckpointTensor t;
    const std::uint64_t rank = detail::read_u64(is);
    for (std::uint64_t d = 0; d < rank; ++d) t.shape.push_back(detail::read_u64(is));
    t.values.resize(numel(t.shape));
    if (!is.read(reinterpret_cast<char*>(t.values.data()),
                 static_cast<std::streamsize>(t.values.size() * sizeof(double)))) {
      throw CheckpointError("truncated values of " + name);
    }
    ckpt.order.push_back(name);
    ckpt.tensors.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

/// Copies checkpoint values into a model of matching architecture.
inline void load_parameters(AirFormerModel& model, const Checkpoint& ckpt) {
  auto& params = model.parameters().all();
  if (params.size() != ckpt.tensors.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                          " tensors, model has " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) throw CheckpointError("missing tensor " + p.name);
    if (it->second.shape != p.tensor.shape()) {
      throw CheckpointError("shape mismatch for " + p.name);
    }
    auto dst = p.tensor.mutable_values();
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
  }
}

}  // namespace airformer
