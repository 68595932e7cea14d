#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "abnn/distributions.hpp"
#include "abnn/networks.hpp"
#include "abnn/rng.hpp"
#include "abnn/task.hpp"
#include "abnn/tensor.hpp"

namespace abnn {

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

enum class LikelihoodKind { gaussian, bernoulli };

/// Observation model. The gaussian variant carries its noise variance as a
/// log-parameterised tensor so it can be trained jointly with the posterior.
struct Likelihood {
  LikelihoodKind kind = LikelihoodKind::gaussian;
  Tensor log_noise_var;  // scalar leaf; defined for gaussian only
  bool noise_trainable = false;

  static Likelihood gaussian(double noise_var, bool trainable = false);
  static Likelihood bernoulli();

  double noise_var() const;  // gaussian only; throws ContractError otherwise
  std::vector<Tensor> parameters() const;
};

/// Fully-connected Bayesian network: widths [D0, D1, ..., DL], activation
/// between layers, isotropic N(0, prior_var) prior on every weight including
/// the bias rows folded into each layer matrix.
struct BNNConfig {
  std::vector<std::size_t> widths;
  Act act = Act::relu;
  double prior_var = 1.0;
  Likelihood likelihood;

  std::size_t layer_count() const { return widths.size() - 1; }
  std::size_t in_dim() const { return widths.front(); }
  std::size_t out_dim() const { return widths.back(); }
  /// Rows of layer l's weight matrix (input width + bias row).
  std::size_t layer_rows(std::size_t l) const { return widths[l] + 1; }
  std::size_t layer_cols(std::size_t l) const { return widths[l + 1]; }
  std::size_t layer_weight_count(std::size_t l) const { return layer_rows(l) * layer_cols(l); }
  std::size_t weight_count() const;

  void validate() const;  // ContractError on bad widths / variances
};

// ---------------------------------------------------------------------------
// Weight samples and the stochastic forward pass
// ---------------------------------------------------------------------------

/// One posterior draw: per-layer weight matrices [(D_{l-1}+1) x D_l] plus the
/// log density of the draw under the posterior (log_q) and the prior (log_p).
struct WeightSample {
  std::vector<Tensor> weights;
  Tensor log_q;
  Tensor log_p;
};

/// Deterministic network evaluation with explicit weights. Bias-augmented at
/// each layer; activation applied between layers only.
Tensor bnn_forward(const BNNConfig& cfg, const std::vector<Tensor>& weights, const Tensor& x);
Tensor bnn_forward(const BNNConfig& cfg, const WeightSample& w, const Tensor& x);

/// Sum over datapoints of the per-point log density (gaussian, isotropic
/// noise) or log mass (bernoulli on the logistic transform of f).
/// Bernoulli targets must be exactly 0 or 1; anything else raises DataError.
Tensor log_likelihood(const BNNConfig& cfg, const Tensor& f, const Tensor& y);

// ---------------------------------------------------------------------------
// Mean-field posterior (and its amortised variant)
// ---------------------------------------------------------------------------

/// Fully-factorised Gaussian over all weights, stored per layer. Log-variances
/// are subject to the module-wide [-10, 10] clamp whenever densities or
/// samples are formed.
struct MFVIPosterior {
  std::vector<Tensor> means;
  std::vector<Tensor> log_vars;

  /// Leaf parameters: means ~ N(0, 1/fan_in) with zero bias rows, log-vars
  /// constant at `init_log_var`.
  static MFVIPosterior init(const BNNConfig& cfg, Rng& rng, double init_log_var = -6.0);
  /// Posterior equal to the prior: zero means, log-var = log(prior_var).
  static MFVIPosterior prior(const BNNConfig& cfg);

  std::vector<Tensor> parameters() const;
};

/// Reparameterised draw; log_q is the factorised posterior density at the
/// sample, log_p the prior density. Noise is keyed per layer.
WeightSample mfvi_sample(const MFVIPosterior& post, const BNNConfig& cfg,
                         const NoiseSource& noise);

/// Analytic KL from the (clamped) factorised posterior to the prior.
Tensor mfvi_kl_to_prior(const MFVIPosterior& post, const BNNConfig& cfg);

/// Analytic KL between two factorised posteriors over the same architecture.
Tensor mfvi_kl(const MFVIPosterior& q, const MFVIPosterior& p, const BNNConfig& cfg);

/// Log density of the factorised posterior at externally supplied weights,
/// differentiable w.r.t. both the posterior parameters and the weights.
Tensor mfvi_log_density(const MFVIPosterior& post, const BNNConfig& cfg,
                        const std::vector<Tensor>& weights);

/// Amortised mean-field model: a single network maps each datapoint (x_n, y_n)
/// to a diagonal Gaussian factor over the full weight vector (means first,
/// then log-variances). The posterior is the product of the factors with the
/// prior.
struct AMFVIModel {
  MLPParams net;  // input D+P, output 2 * weight_count

  static AMFVIModel init(const BNNConfig& cfg, const std::vector<std::size_t>& hidden,
                         Act net_act, Rng& rng);
  std::vector<Tensor> parameters() const { return net.parameters(); }
};

/// Product of per-datapoint factors with the prior, reshaped into per-layer
/// mean / log-variance tensors. Empty task gives the prior. The result's
/// tensors are differentiable functions of the network parameters.
MFVIPosterior amfvi_posterior(const AMFVIModel& m, const Task& task, const BNNConfig& cfg);

// ---------------------------------------------------------------------------
// Pseudo-observation posteriors (inducing-point and amortised variants)
// ---------------------------------------------------------------------------

/// Per-layer conditionals produced by a pseudo-observation posterior: one full
/// Gaussian over each neuron's incoming weight column (bias included).
struct LayerPosterior {
  std::vector<FullGaussian> neurons;
};

/// A weight sample together with the per-layer conditional posteriors it was
/// drawn from (the conditionals depend on earlier layers' sampled weights).
struct SampleDetail {
  WeightSample sample;
  std::vector<LayerPosterior> layers;
};

/// Amortised pseudo-observation model: one inference net per layer maps each
/// datapoint to that layer's pseudo-observation parameters. Hidden layers
/// get means and log-variances; the final layer gets log-variances only, its
/// pseudo-means being fixed to the observed targets.
struct APOVIModel {
  InferenceNetBank bank;

  static APOVIModel init(const BNNConfig& cfg, const std::vector<std::size_t>& hidden,
                         Act net_act, Rng& rng);
  std::vector<Tensor> parameters() const { return bank.parameters(); }
};

/// Sequential layerwise sample conditioned on the task. Features for layer l
/// are the bias-augmented activations of the previous layer's sampled outputs
/// (raw inputs for layer 1); each neuron's conditional is a Bayesian linear
/// regression of its pseudo-means under per-datapoint pseudo-precisions.
/// For a gaussian likelihood the final layer's pseudo-means are y itself; for
/// bernoulli they are logit(clamp(y, 0.05, 0.95)). An empty task samples every
/// layer from the prior (log_q == log_p).
/// Noise draws are keyed by (layer, neuron), so permuting the task rows leaves
/// the sampled weights unchanged.
SampleDetail apovi_sample(const APOVIModel& m, const Task& task, const BNNConfig& cfg,
                          const NoiseSource& noise);

/// Log density of the layerwise posterior at externally supplied weights.
/// The per-layer conditionals are rebuilt by propagating the task inputs
/// through those weights, so the result is the density of the full layerwise
/// factorisation evaluated at them. An empty task gives the prior density.
Tensor apovi_log_density(const APOVIModel& m, const Task& task, const BNNConfig& cfg,
                         const std::vector<Tensor>& weights);

/// Non-amortised pseudo-observation posterior: learnable inducing inputs,
/// per-layer pseudo-means, and per-layer log-precisions shared across the
/// neurons of a layer.
struct POVIPosterior {
  Tensor u0;                     // [M x D0]
  std::vector<Tensor> v;         // layer l: [M x D_{l+1}]
  std::vector<Tensor> log_prec;  // layer l: [M]

  static POVIPosterior init(const BNNConfig& cfg, std::size_t m, Rng& rng,
                            double u0_lo = -2.0, double u0_hi = 2.0,
                            double init_log_prec = 0.0);
  std::size_t inducing_count() const { return u0.rows(); }
  std::vector<Tensor> parameters() const;
};

/// Same layerwise mechanics as apovi_sample with the learnable quantities in
/// place of the amortised ones; inducing inputs are propagated through the
/// sampled weights. Log-precisions are clamped to [-10, 10] before use.
SampleDetail povi_sample(const POVIPosterior& post, const BNNConfig& cfg,
                         const NoiseSource& noise);

// ---------------------------------------------------------------------------
// Moment-matched prediction
// ---------------------------------------------------------------------------

/// Predictive mean and variance per target point and output dimension, both
/// [T x P] constant tensors.
struct Prediction {
  Tensor mean;
  Tensor var;
};

/// Source of weight draws for prediction; each call is one posterior sample.
using WeightSampler = std::function<std::vector<Tensor>()>;

/// Draws S samples, evaluates the network, and moment-matches. Gaussian:
/// sample mean and unbiased sample variance plus the observation noise
/// variance. Bernoulli: mean predicted probability p and variance p(1-p).
/// S < 2 raises ContractError.
Prediction bnn_predict(const BNNConfig& cfg, const WeightSampler& sampler,
                       const Tensor& x_star, std::size_t s = 100);

}  // namespace abnn
