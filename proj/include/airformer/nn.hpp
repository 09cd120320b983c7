// Named parameters and the small layer building blocks shared by every
// part of the network.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "airformer/ops.hpp"

namespace airformer {

struct Parameter {
  std::string name;
  Tensor tensor;
};

/// Owns every learnable tensor of a model in creation order.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

  /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
  Tensor xavier(const std::string& name, std::size_t fan_in,
                std::size_t fan_out) {
    const double bound =
        std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(fan_in * fan_out);
    for (double& x : v) x = dist(rng_);
    return add(name, Tensor(Shape{fan_in, fan_out}, std::move(v), true));
  }

  Tensor constant(const std::string& name, Shape shape, double fill) {
    const std::size_t n = numel(shape);
    return add(name,
               Tensor(std::move(shape), std::vector<double>(n, fill), true));
  }

  Tensor add(const std::string& name, Tensor tensor) {
    if (index_.count(name)) {
      throw ConfigError("duplicate parameter name '" + name + "'");
    }
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{name, tensor});
    return tensor;
  }

  [[nodiscard]] std::vector<Parameter>& all() { return params_; }
  [[nodiscard]] const std::vector<Parameter>& all() const { return params_; }

  [[nodiscard]] const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  [[nodiscard]] std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::mt19937_64 rng_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

enum class Activation { gelu, relu, tanh, identity };

inline Tensor activate(const Tensor& x, Activation act) {
  switch (act) {
    case Activation::gelu: return gelu(x);
    case Activation::relu: return relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::identity: return x;
  }
  return x;
}

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  static Linear create(ParameterStore& store, const std::string& name,
                       std::size_t in, std::size_t out) {
    return Linear{store.xavier(name + ".weight", in, out),
                  store.constant(name + ".bias", Shape{out}, 0.0)};
  }
  [[nodiscard]] std::size_t in_features() const { return weight.dim(0); }
  [[nodiscard]] std::size_t out_features() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

/// Affine layers over the last axis with `act` between consecutive layers
/// (never after the last one).
inline Tensor mlp(const Tensor& x, const std::vector<Linear>& layers,
                  Activation act) {
  if (layers.empty()) throw ConfigError("mlp needs at least one layer");
  for (std::size_t i = 1; i < layers.size(); ++i) {
    if (layers[i - 1].out_features() != layers[i].in_features()) {
      throw ConfigError("mlp layer " + std::to_string(i) +
                        " expects " + std::to_string(layers[i].in_features()) +
                        " inputs but previous layer emits " +
                        std::to_string(layers[i - 1].out_features()));
    }
  }
  Tensor h = layers.front()(x);
  for (std::size_t i = 1; i < layers.size(); ++i) {
    h = layers[i](activate(h, act));
  }
  return h;
}

struct Mlp {
  std::vector<Linear> layers;
  Activation act = Activation::gelu;

  /// widths = {in, hidden..., out}.
  static Mlp create(ParameterStore& store, const std::string& name,
                    const std::vector<std::size_t>& widths,
                    Activation act = Activation::gelu) {
    if (widths.size() < 2) throw ConfigError("mlp '" + name + "' needs widths");
    Mlp m;
    m.act = act;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      m.layers.push_back(Linear::create(store, name + ".layer" + std::to_string(i),
                                        widths[i], widths[i + 1]));
    }
    return m;
  }
  Tensor operator()(const Tensor& x) const { return mlp(x, layers, act); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm create(ParameterStore& store, const std::string& name,
                          std::size_t features) {
    return LayerNorm{store.constant(name + ".gain", Shape{features}, 1.0),
                     store.constant(name + ".bias", Shape{features}, 0.0)};
  }
  Tensor operator()(const Tensor& x) const {
    return layer_norm(x, gain, bias);
  }
};

}  // namespace airformer
