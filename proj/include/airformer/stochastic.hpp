// Top-down hierarchy of diagonal-Gaussian latents.
//
// Levels are indexed 0..L-1 for blocks 1..L. Each level has a prior network
// f (conditioned on the previous step's deterministic state) and a posterior
// network g (conditioned on the current step's state). Both run top-down:
// the top level sees only its state, lower levels also see the sample drawn
// one level up. Networks act on the last axis, so every station and every
// time step is processed by the same weights.

#pragma once

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "airformer/nn.hpp"

namespace airformer {

inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 8.0;

struct GaussianParams {
  Tensor mean;
  Tensor log_var;  // clamped to [kLogVarMin, kLogVarMax]
};

/// z = mean + exp(log_var / 2) * noise.
inline Tensor reparameterize(const GaussianParams& params, const Tensor& noise) {
  if (params.mean.shape() != noise.shape()) {
    throw DimensionError("reparameterize: noise " + to_string(noise.shape()) +
                         " vs mean " + to_string(params.mean.shape()));
  }
  return params.mean + exp(scale(params.log_var, 0.5)) * noise;
}

/// Elementwise KL(q || p) between diagonal Gaussians.
inline Tensor kl_diag_gaussian_terms(const GaussianParams& q,
                                     const GaussianParams& p) {
  if (q.mean.shape() != p.mean.shape() || q.log_var.shape() != p.log_var.shape()) {
    throw DimensionError("kl: shapes " + to_string(q.mean.shape()) + " and " +
                         to_string(p.mean.shape()));
  }
  const Tensor var_ratio = exp(q.log_var - p.log_var);
  const Tensor mean_term = square(p.mean - q.mean) * exp(scale(p.log_var, -1.0));
  // The log-variance difference is formed first so that q == p gives
  // exactly 0: (1 + 0 + 0) - 1.
  return scale(add_scalar(var_ratio + mean_term + (p.log_var - q.log_var), -1.0),
               0.5);
}

/// KL(q || p) summed over features and stations (and any leading axes).
inline Tensor kl_diag_gaussian(const GaussianParams& q, const GaussianParams& p) {
  return sum(kl_diag_gaussian_terms(q, p));
}

/// Sum of elementwise log N(z; mean, exp(log_var)).
inline Tensor gaussian_log_density(const GaussianParams& params, const Tensor& z) {
  const double log_2pi = std::log(2.0 * std::numbers::pi);
  const Tensor quad = square(z - params.mean) * exp(scale(params.log_var, -1.0));
  return scale(sum(add_scalar(quad + params.log_var, log_2pi)), -0.5);
}

/// 3-layer MLP emitting (mean, log_var) over the last axis.
struct GaussianHead {
  Mlp net;
  std::size_t latent = 0;

  static GaussianHead create(ParameterStore& store, const std::string& name,
                             std::size_t in, std::size_t hidden,
                             std::size_t latent) {
    return GaussianHead{Mlp::create(store, name, {in, hidden, hidden, 2 * latent}),
                        latent};
  }

  GaussianParams operator()(const Tensor& x) const {
    const Tensor out = net(x);
    const std::size_t axis = out.rank() - 1;
    return GaussianParams{slice(out, axis, 0, latent),
                          clamp(slice(out, axis, latent, 2 * latent), kLogVarMin,
                                kLogVarMax)};
  }
};

struct PriorNet {
  std::vector<GaussianHead> levels;  // f^1..f^L
  std::vector<Tensor> initial_state;  // learned h_0 per level, shape (C)
};

struct PosteriorNet {
  std::vector<GaussianHead> levels;  // g^1..g^L
};

inline PriorNet make_prior_net(ParameterStore& store, const std::string& name,
                               std::size_t levels, std::size_t channels) {
  PriorNet net;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::string base = name + ".level" + std::to_string(l + 1);
    const std::size_t in = l + 1 == levels ? channels : 2 * channels;
    net.levels.push_back(GaussianHead::create(store, base, in, channels, channels));
    net.initial_state.push_back(
        store.constant(base + ".initial_state", Shape{channels}, 0.0));
  }
  return net;
}

inline PosteriorNet make_posterior_net(ParameterStore& store,
                                       const std::string& name,
                                       std::size_t levels, std::size_t channels) {
  PosteriorNet net;
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t in = l + 1 == levels ? channels : 2 * channels;
    net.levels.push_back(GaussianHead::create(
        store, name + ".level" + std::to_string(l + 1), in, channels, channels));
  }
  return net;
}

/// Distribution parameters and samples of one top-down pass.
struct LatentPath {
  std::vector<GaussianParams> params;
  std::vector<Tensor> samples;
};

/// Standard-normal noise for every level; `shape` is the per-level latent
/// shape, e.g. (T, N, C).
inline std::vector<Tensor> sample_noise(std::mt19937_64& rng, const Shape& shape,
                                        std::size_t levels) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < levels; ++l) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = normal(rng);
    out.emplace_back(shape, std::move(v));
  }
  return out;
}

namespace detail {

/// Shared top-down recursion. `conditioning`, when given, supplies the
/// upper-level latents instead of this path's own samples. Without noise
/// the sample is the mean.
inline LatentPath top_down(const std::vector<GaussianHead>& heads,
                           const std::vector<Tensor>& states,
                           const std::vector<Tensor>* conditioning,
                           const std::vector<Tensor>* noise) {
  const std::size_t levels = heads.size();
  if (states.size() != levels || (conditioning && conditioning->size() != levels) ||
      (noise && noise->size() != levels)) {
    throw DimensionError("latent pass: expected " + std::to_string(levels) +
                         " levels of states/noise");
  }
  LatentPath path;
  path.params.resize(levels);
  path.samples.resize(levels);
  for (std::size_t l = levels; l-- > 0;) {
    Tensor input = states[l];
    if (l + 1 < levels) {
      const Tensor& upper = conditioning ? (*conditioning)[l + 1] : path.samples[l + 1];
      input = concat({upper, states[l]}, states[l].rank() - 1);
    }
    path.params[l] = heads[l](input);
    path.samples[l] = noise ? reparameterize(path.params[l], (*noise)[l])
                            : path.params[l].mean;
  }
  return path;
}

}  // namespace detail

/// States of the previous step: (T, N, C) -> (T, N, C) with the learned
/// initial state in row 0 and states[0..T-2] after it.
inline std::vector<Tensor> previous_states(const PriorNet& net,
                                           const std::vector<Tensor>& states) {
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < states.size(); ++l) {
    const Tensor& h = states[l];
    if (h.rank() != 3) throw DimensionError("previous_states expects (T, N, C)");
    const std::size_t steps = h.dim(0);
    const Tensor first =
        broadcast_to(net.initial_state.at(l), Shape{1, h.dim(1), h.dim(2)});
    out.push_back(steps == 1 ? first : concat({first, slice(h, 0, 0, steps - 1)}, 0));
  }
  return out;
}

/// Prior side p(Z_t | X_{1:t-1}) given the previous-step states. With
/// `posterior_samples` the lower levels condition on those (as required by
/// the expected KL); otherwise they condition on the prior's own samples.
inline LatentPath prior_pass(const PriorNet& net,
                             const std::vector<Tensor>& previous,
                             const std::vector<Tensor>* posterior_samples,
                             const std::vector<Tensor>* noise) {
  return detail::top_down(net.levels, previous, posterior_samples, noise);
}

/// Posterior side q(Z_t | X_{1:t}) given the current-step states.
inline LatentPath posterior_pass(const PosteriorNet& net,
                                 const std::vector<Tensor>& current,
                                 const std::vector<Tensor>* noise) {
  return detail::top_down(net.levels, current, nullptr, noise);
}

/// Sum over levels of log-densities of the path's own samples.
inline Tensor path_log_density(const LatentPath& path) {
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < path.params.size(); ++l) {
    total = total + gaussian_log_density(path.params[l], path.samples[l]);
  }
  return total;
}

struct LatentLevel {
  GaussianParams prior;
  GaussianParams posterior;
  Tensor sample;  // posterior sample used downstream
};

struct LatentStack {
  std::vector<LatentLevel> levels;

  [[nodiscard]] std::vector<Tensor> samples() const {
    std::vector<Tensor> out;
    for (const auto& l : levels) out.push_back(l.sample);
    return out;
  }
};

/// Posterior pass on current states, then the prior pass on previous states
/// conditioned on the posterior samples.
inline LatentStack infer_latents(const PriorNet& prior, const PosteriorNet& posterior,
                                 const std::vector<Tensor>& states,
                                 const std::vector<Tensor>* noise) {
  LatentPath post = posterior_pass(posterior, states, noise);
  LatentPath pri = prior_pass(prior, previous_states(prior, states), &post.samples,
                              nullptr);
  LatentStack stack;
  for (std::size_t l = 0; l < states.size(); ++l) {
    stack.levels.push_back(LatentLevel{pri.params[l], post.params[l], post.samples[l]});
  }
  return stack;
}

/// Maps concatenated per-level latents to the reconstructed readings.
struct Decoder {
  Mlp net;

  static Decoder create(ParameterStore& store, const std::string& name,
                        std::size_t levels, std::size_t channels,
                        std::size_t outputs) {
    return Decoder{Mlp::create(store, name,
                               {levels * channels, channels, channels, outputs})};
  }
};

inline Tensor reconstruct(const Decoder& decoder, const std::vector<Tensor>& latents) {
  if (latents.empty()) throw ContractError("reconstruct needs latents");
  const Tensor joined =
      latents.size() == 1 ? latents[0] : concat(latents, latents[0].rank() - 1);
  return decoder.net(joined);
}

struct ElboTerms {
  Tensor total;          // scalar: sum over steps of rec + kl
  Tensor reconstruction; // scalar
  Tensor kl;             // scalar
  Tensor per_step;       // (T) rec + kl of each step
};

/// Negative ELBO summed over steps. Reconstruction is a unit-variance
/// Gaussian likelihood without its constant, restricted to observed entries;
/// KL is summed over levels, stations and features.
inline ElboTerms elbo_loss(const LatentStack& stack, const Tensor& reconstruction,
                           const Tensor& target, const Tensor& observed) {
  if (stack.levels.empty()) throw ContractError("elbo_loss needs latent levels");
  if (reconstruction.shape() != target.shape() || target.shape() != observed.shape()) {
    throw DimensionError("elbo: reconstruction " + to_string(reconstruction.shape()) +
                         " target " + to_string(target.shape()) + " mask " +
                         to_string(observed.shape()));
  }
  const Tensor rec_steps =
      sum_by_first_axis(scale(square(reconstruction - target) * observed, 0.5));
  Tensor kl_steps;
  for (const auto& level : stack.levels) {
    const Tensor k = sum_by_first_axis(kl_diag_gaussian_terms(level.posterior, level.prior));
    kl_steps = kl_steps.defined() ? kl_steps + k : k;
  }
  ElboTerms terms;
  terms.reconstruction = sum(rec_steps);
  terms.kl = sum(kl_steps);
  terms.per_step = rec_steps + kl_steps;
  terms.total = sum(terms.per_step);
  return terms;
}

}  // namespace airformer
