#include "abnn/posteriors.hpp"

#include <cmath>
#include <utility>
#include <string>

#include "abnn/errors.hpp"

namespace abnn {
namespace {

constexpr double kLog2Pi = 1.8378770664093453;

/// N(0, prior_var I) as a FullGaussian (diagonal Cholesky factor).
FullGaussian prior_full(std::size_t n, double prior_var) {
  std::vector<double> cv(n * n, 0.0);
  const double sd = std::sqrt(prior_var);
  for (std::size_t i = 0; i < n; ++i) cv[i * n + i] = sd;
  return FullGaussian(Tensor::zeros({n}), Tensor::from({n, n}, std::move(cv)));
}

/// Pseudo-observation parameters for one layer: per-row means [N x Dl] and
/// one precision vector of length N per neuron.
struct LayerPseudo {
  Tensor means;
  std::vector<Tensor> prec;
};

/// Shared layerwise sampling loop for the inducing-point and amortised
/// pseudo-observation posteriors. `x0` holds the conditioning rows (data or
/// inducing inputs); with n_rows == 0 every layer is drawn from the prior.
SampleDetail sample_from_pseudo(const BNNConfig& cfg, const Tensor& x0, std::size_t n_rows,
                                const std::vector<LayerPseudo>& pseudo,
                                const NoiseSource& noise) {
  const std::size_t layers = cfg.layer_count();
  SampleDetail out;
  Tensor log_q = Tensor::scalar(0.0);
  Tensor log_p = Tensor::scalar(0.0);
  Tensor h;  // previous layer's pre-activations at the conditioning rows
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t din = cfg.layer_rows(l);
    const std::size_t dout = cfg.layer_cols(l);
    Tensor feats;
    if (n_rows > 0) feats = append_ones_col(l == 0 ? x0 : activation(h, cfg.act));
    const DiagGaussian prior_iso = DiagGaussian::isotropic(din, cfg.prior_var);
    LayerPosterior lp;
    std::vector<Tensor> wcols;
    wcols.reserve(dout);
    for (std::size_t d = 0; d < dout; ++d) {
      FullGaussian g =
          n_rows > 0
              ? blr_posterior(feats, col(pseudo[l].means, d), pseudo[l].prec[d], cfg.prior_var)
              : prior_full(din, cfg.prior_var);
      const std::vector<double> eps =
          noise.draw(static_cast<int>(l), static_cast<int>(d), din);
      Tensor w_d = sample_full(g, eps);
      log_q = add(log_q, log_prob_full(g, w_d));
      log_p = add(log_p, log_prob_diag(prior_iso, w_d));
      wcols.push_back(w_d);
      lp.neurons.push_back(std::move(g));
    }
    Tensor w = stack_cols(wcols);
    if (n_rows > 0) h = matmul(feats, w);
    out.sample.weights.push_back(std::move(w));
    out.layers.push_back(std::move(lp));
  }
  out.sample.log_q = std::move(log_q);
  out.sample.log_p = std::move(log_p);
  return out;
}

/// Density of the layerwise factorisation at given weights: the same loop as
/// sample_from_pseudo, but the conditioning rows are propagated through the
/// supplied weights instead of freshly sampled ones.
Tensor log_density_from_pseudo(const BNNConfig& cfg, const Tensor& x0, std::size_t n_rows,
                               const std::vector<LayerPseudo>& pseudo,
                               const std::vector<Tensor>& weights) {
  Tensor log_q = Tensor::scalar(0.0);
  Tensor h;
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const std::size_t din = cfg.layer_rows(l);
    Tensor feats;
    if (n_rows > 0) feats = append_ones_col(l == 0 ? x0 : activation(h, cfg.act));
    for (std::size_t d = 0; d < cfg.layer_cols(l); ++d) {
      FullGaussian g =
          n_rows > 0
              ? blr_posterior(feats, col(pseudo[l].means, d), pseudo[l].prec[d], cfg.prior_var)
              : prior_full(din, cfg.prior_var);
      log_q = add(log_q, log_prob_full(g, col(weights[l], d)));
    }
    if (n_rows > 0) h = matmul(feats, weights[l]);
  }
  return log_q;
}

void check_weight_shapes(const BNNConfig& cfg, const std::vector<Tensor>& weights,
                         const char* who) {
  if (weights.size() != cfg.layer_count())
    throw ShapeError(std::string(who) + ": weight tensor count does not match the layer count");
  for (std::size_t l = 0; l < weights.size(); ++l)
    if (weights[l].ndim() != 2 || weights[l].rows() != cfg.layer_rows(l) ||
        weights[l].cols() != cfg.layer_cols(l))
      throw ShapeError(std::string(who) + ": weight shape mismatch at layer " +
                       std::to_string(l));
}

/// Final-layer pseudo-means: the targets themselves for a gaussian
/// likelihood; for bernoulli, the logit of the clamped target probability so
/// the regression happens on the pre-sigmoid scale.
Tensor final_pseudo_means(const BNNConfig& cfg, const Tensor& y) {
  if (cfg.likelihood.kind == LikelihoodKind::gaussian) return y;
  std::vector<double> v(y.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double p = std::min(0.95, std::max(0.05, y.at(i)));
    v[i] = std::log(p / (1.0 - p));
  }
  return Tensor::from({y.rows(), y.cols()}, std::move(v));
}

void check_task_dims(const Task& task, const BNNConfig& cfg, const char* who) {
  task.validate();
  if (task.size() == 0) return;
  if (task.x.cols() != cfg.in_dim())
    throw ShapeError(std::string(who) + ": task input width does not match the network");
  if (task.y.cols() != cfg.out_dim())
    throw ShapeError(std::string(who) + ": task target width does not match the network");
}

}  // namespace

// ---------------------------------------------------------------------------
// Likelihood / BNNConfig
// ---------------------------------------------------------------------------

Likelihood Likelihood::gaussian(double noise_var, bool trainable) {
  if (!(noise_var > 0.0)) throw ContractError("Likelihood: noise_var must be positive");
  Likelihood lik;
  lik.kind = LikelihoodKind::gaussian;
  lik.log_noise_var = Tensor::param({1}, {std::log(noise_var)});
  lik.noise_trainable = trainable;
  return lik;
}

Likelihood Likelihood::bernoulli() {
  Likelihood lik;
  lik.kind = LikelihoodKind::bernoulli;
  return lik;
}

double Likelihood::noise_var() const {
  if (kind != LikelihoodKind::gaussian)
    throw ContractError("Likelihood: noise_var is only defined for the gaussian likelihood");
  return std::exp(log_noise_var.scalar_value());
}

std::vector<Tensor> Likelihood::parameters() const {
  if (kind == LikelihoodKind::gaussian && noise_trainable) return {log_noise_var};
  return {};
}

std::size_t BNNConfig::weight_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < layer_count(); ++l) n += layer_weight_count(l);
  return n;
}

void BNNConfig::validate() const {
  if (widths.size() < 2) throw ContractError("BNNConfig: need at least input and output widths");
  for (auto w : widths)
    if (w == 0) throw ContractError("BNNConfig: zero layer width");
  if (!(prior_var > 0.0)) throw ContractError("BNNConfig: prior_var must be positive");
  if (likelihood.kind == LikelihoodKind::gaussian && !likelihood.log_noise_var.defined())
    throw ContractError("BNNConfig: gaussian likelihood is missing its noise parameter");
}

// ---------------------------------------------------------------------------
// Forward pass and likelihood
// ---------------------------------------------------------------------------

Tensor bnn_forward(const BNNConfig& cfg, const std::vector<Tensor>& weights, const Tensor& x) {
  cfg.validate();
  if (weights.size() != cfg.layer_count())
    throw ShapeError("bnn_forward: weight tensor count does not match the layer count");
  if (x.ndim() != 2 || x.cols() != cfg.in_dim())
    throw ShapeError("bnn_forward: input width does not match the network");
  Tensor h = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].ndim() != 2 || weights[l].rows() != cfg.layer_rows(l) ||
        weights[l].cols() != cfg.layer_cols(l))
      throw ShapeError("bnn_forward: weight shape mismatch at layer " + std::to_string(l));
    if (l > 0) h = activation(h, cfg.act);
    h = matmul(append_ones_col(h), weights[l]);
  }
  return h;
}

Tensor bnn_forward(const BNNConfig& cfg, const WeightSample& w, const Tensor& x) {
  return bnn_forward(cfg, w.weights, x);
}

Tensor log_likelihood(const BNNConfig& cfg, const Tensor& f, const Tensor& y) {
  if (f.ndim() != 2 || y.ndim() != 2 || f.rows() != y.rows() || f.cols() != y.cols())
    throw ShapeError("log_likelihood: prediction and target shapes differ");
  if (cfg.likelihood.kind == LikelihoodKind::gaussian) {
    const double np = static_cast<double>(f.size());
    Tensor lnv = cfg.likelihood.log_noise_var;
    Tensor quad = mul_scalar(sum(square(sub(f, y))), exp(neg(lnv)));
    return scale(add(add_const(scale(lnv, np), np * kLog2Pi), quad), -0.5);
  }
  for (std::size_t i = 0; i < y.size(); ++i)
    if (y.at(i) != 0.0 && y.at(i) != 1.0)
      throw DataError("log_likelihood: bernoulli targets must be exactly 0 or 1");
  // log Bernoulli(y | sigmoid(f)) = y*f - softplus(f), stable for large |f|.
  return sum(sub(mul(y, f), softplus(f)));
}

// ---------------------------------------------------------------------------
// Mean-field posterior
// ---------------------------------------------------------------------------

MFVIPosterior MFVIPosterior::init(const BNNConfig& cfg, Rng& rng, double init_log_var) {
  cfg.validate();
  MFVIPosterior q;
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const std::size_t win = cfg.widths[l], wout = cfg.layer_cols(l);
    std::vector<double> m((win + 1) * wout, 0.0);
    const double sd = 1.0 / std::sqrt(static_cast<double>(win));
    for (std::size_t i = 0; i < win; ++i)  // bias row stays zero
      for (std::size_t j = 0; j < wout; ++j) m[i * wout + j] = sd * rng.normal();
    q.means.push_back(Tensor::param({win + 1, wout}, std::move(m)));
    q.log_vars.push_back(
        Tensor::param({win + 1, wout}, std::vector<double>((win + 1) * wout, init_log_var)));
  }
  return q;
}

MFVIPosterior MFVIPosterior::prior(const BNNConfig& cfg) {
  cfg.validate();
  MFVIPosterior q;
  const double lv = std::log(cfg.prior_var);
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const Shape shape{cfg.layer_rows(l), cfg.layer_cols(l)};
    const std::size_t n = cfg.layer_weight_count(l);
    q.means.push_back(Tensor::param(shape, std::vector<double>(n, 0.0)));
    q.log_vars.push_back(Tensor::param(shape, std::vector<double>(n, lv)));
  }
  return q;
}

std::vector<Tensor> MFVIPosterior::parameters() const {
  std::vector<Tensor> out;
  out.insert(out.end(), means.begin(), means.end());
  out.insert(out.end(), log_vars.begin(), log_vars.end());
  return out;
}

WeightSample mfvi_sample(const MFVIPosterior& post, const BNNConfig& cfg,
                         const NoiseSource& noise) {
  cfg.validate();
  if (post.means.size() != cfg.layer_count() || post.log_vars.size() != cfg.layer_count())
    throw ShapeError("mfvi_sample: posterior layer count does not match the config");
  WeightSample out;
  Tensor log_q = Tensor::scalar(0.0);
  Tensor log_p = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const std::size_t n = cfg.layer_weight_count(l);
    if (post.means[l].size() != n || post.log_vars[l].size() != n)
      throw ShapeError("mfvi_sample: posterior shape mismatch at layer " + std::to_string(l));
    DiagGaussian g(reshape(post.means[l], {n}), reshape(post.log_vars[l], {n}));
    Tensor w_flat = reparam_sample(g, noise.draw(static_cast<int>(l), 0, n));
    log_q = add(log_q, log_prob_diag(g, w_flat));
    log_p = add(log_p, log_prob_diag(DiagGaussian::isotropic(n, cfg.prior_var), w_flat));
    out.weights.push_back(reshape(w_flat, {cfg.layer_rows(l), cfg.layer_cols(l)}));
  }
  out.log_q = std::move(log_q);
  out.log_p = std::move(log_p);
  return out;
}

Tensor mfvi_kl_to_prior(const MFVIPosterior& post, const BNNConfig& cfg) {
  cfg.validate();
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const std::size_t n = cfg.layer_weight_count(l);
    DiagGaussian q(reshape(post.means[l], {n}), reshape(post.log_vars[l], {n}));
    total = add(total, kl_diag(q, DiagGaussian::isotropic(n, cfg.prior_var)));
  }
  return total;
}

Tensor mfvi_kl(const MFVIPosterior& q, const MFVIPosterior& p, const BNNConfig& cfg) {
  cfg.validate();
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const std::size_t n = cfg.layer_weight_count(l);
    DiagGaussian ql(reshape(q.means[l], {n}), reshape(q.log_vars[l], {n}));
    DiagGaussian pl(reshape(p.means[l], {n}), reshape(p.log_vars[l], {n}));
    total = add(total, kl_diag(ql, pl));
  }
  return total;
}

Tensor mfvi_log_density(const MFVIPosterior& post, const BNNConfig& cfg,
                        const std::vector<Tensor>& weights) {
  cfg.validate();
  check_weight_shapes(cfg, weights, "mfvi_log_density");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const std::size_t n = cfg.layer_weight_count(l);
    DiagGaussian q(reshape(post.means[l], {n}), reshape(post.log_vars[l], {n}));
    total = add(total, log_prob_diag(q, reshape(weights[l], {n})));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Amortised mean-field
// ---------------------------------------------------------------------------

AMFVIModel AMFVIModel::init(const BNNConfig& cfg, const std::vector<std::size_t>& hidden,
                            Act net_act, Rng& rng) {
  cfg.validate();
  std::vector<std::size_t> widths;
  widths.push_back(cfg.in_dim() + cfg.out_dim());
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(2 * cfg.weight_count());
  AMFVIModel m;
  m.net = MLPParams::init(std::move(widths), net_act, rng);
  return m;
}

MFVIPosterior amfvi_posterior(const AMFVIModel& m, const Task& task, const BNNConfig& cfg) {
  cfg.validate();
  check_task_dims(task, cfg, "amfvi_posterior");
  const std::size_t wtot = cfg.weight_count();
  if (m.net.out_dim() != 2 * wtot)
    throw ShapeError("amfvi_posterior: network head does not match the weight count");
  GaussianFactorSet factors;
  if (task.size() > 0) {
    Tensor out_t = transpose(mlp_forward(m.net, concat_cols(task.x, task.y)));  // [2W x N]
    for (std::size_t n = 0; n < task.size(); ++n) {
      Tensor c = col(out_t, n);
      factors.add(DiagGaussian(slice1d(c, 0, wtot), slice1d(c, wtot, wtot)));
    }
  }
  DiagGaussian flat =
      gaussian_product(factors, DiagGaussian::isotropic(wtot, cfg.prior_var));
  MFVIPosterior q;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const Shape shape{cfg.layer_rows(l), cfg.layer_cols(l)};
    const std::size_t n = cfg.layer_weight_count(l);
    q.means.push_back(reshape(slice1d(flat.mean, offset, n), shape));
    q.log_vars.push_back(reshape(slice1d(flat.log_var, offset, n), shape));
    offset += n;
  }
  return q;
}

// ---------------------------------------------------------------------------
// Amortised pseudo-observation posterior
// ---------------------------------------------------------------------------

APOVIModel APOVIModel::init(const BNNConfig& cfg, const std::vector<std::size_t>& hidden,
                            Act net_act, Rng& rng) {
  cfg.validate();
  std::vector<std::size_t> head_dims(cfg.widths.begin() + 1, cfg.widths.end());
  APOVIModel m;
  m.bank = InferenceNetBank::init(cfg.in_dim(), cfg.out_dim(), hidden, head_dims, net_act, rng);
  return m;
}

namespace {

std::vector<LayerPseudo> build_apovi_pseudo(const APOVIModel& m, const Task& task,
                                            const BNNConfig& cfg, const char* who) {
  cfg.validate();
  check_task_dims(task, cfg, who);
  if (m.bank.layer_count() != cfg.layer_count())
    throw ShapeError(std::string(who) + ": inference net bank does not match the layer count");
  std::vector<LayerPseudo> pseudo(cfg.layer_count());
  if (task.size() > 0) {
    auto heads = infer_pseudo_params(m.bank, task.x, task.y);
    for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
      pseudo[l].means = (l + 1 == cfg.layer_count()) ? final_pseudo_means(cfg, task.y)
                                                     : heads[l].means;
      for (std::size_t d = 0; d < cfg.layer_cols(l); ++d)
        pseudo[l].prec.push_back(exp(neg(col(heads[l].log_vars, d))));
    }
  }
  return pseudo;
}

}  // namespace

SampleDetail apovi_sample(const APOVIModel& m, const Task& task, const BNNConfig& cfg,
                          const NoiseSource& noise) {
  auto pseudo = build_apovi_pseudo(m, task, cfg, "apovi_sample");
  return sample_from_pseudo(cfg, task.x, task.size(), pseudo, noise);
}

Tensor apovi_log_density(const APOVIModel& m, const Task& task, const BNNConfig& cfg,
                         const std::vector<Tensor>& weights) {
  auto pseudo = build_apovi_pseudo(m, task, cfg, "apovi_log_density");
  check_weight_shapes(cfg, weights, "apovi_log_density");
  return log_density_from_pseudo(cfg, task.x, task.size(), pseudo, weights);
}

// ---------------------------------------------------------------------------
// Inducing-point pseudo-observation posterior
// ---------------------------------------------------------------------------

POVIPosterior POVIPosterior::init(const BNNConfig& cfg, std::size_t m, Rng& rng, double u0_lo,
                                  double u0_hi, double init_log_prec) {
  cfg.validate();
  if (m == 0) throw ContractError("POVIPosterior: need at least one inducing point");
  POVIPosterior q;
  std::vector<double> u(m * cfg.in_dim());
  for (auto& v : u) v = rng.uniform(u0_lo, u0_hi);
  q.u0 = Tensor::param({m, cfg.in_dim()}, std::move(u));
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    const std::size_t dout = cfg.layer_cols(l);
    std::vector<double> vv(m * dout);
    for (auto& v : vv) v = rng.normal();
    q.v.push_back(Tensor::param({m, dout}, std::move(vv)));
    q.log_prec.push_back(Tensor::param({m}, std::vector<double>(m, init_log_prec)));
  }
  return q;
}

std::vector<Tensor> POVIPosterior::parameters() const {
  std::vector<Tensor> out{u0};
  out.insert(out.end(), v.begin(), v.end());
  out.insert(out.end(), log_prec.begin(), log_prec.end());
  return out;
}

SampleDetail povi_sample(const POVIPosterior& post, const BNNConfig& cfg,
                         const NoiseSource& noise) {
  cfg.validate();
  const std::size_t layers = cfg.layer_count();
  if (post.v.size() != layers || post.log_prec.size() != layers)
    throw ShapeError("povi_sample: posterior layer count does not match the config");
  if (post.u0.ndim() != 2 || post.u0.cols() != cfg.in_dim())
    throw ShapeError("povi_sample: inducing input width does not match the network");
  const std::size_t m = post.inducing_count();
  std::vector<LayerPseudo> pseudo(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    if (post.v[l].rows() != m || post.v[l].cols() != cfg.layer_cols(l) ||
        post.log_prec[l].size() != m)
      throw ShapeError("povi_sample: pseudo-parameter shape mismatch at layer " +
                       std::to_string(l));
    pseudo[l].means = post.v[l];
    // Shared across the layer's neurons; same clamp window as log-variances.
    Tensor lam = exp(clamp(post.log_prec[l], -10.0, 10.0));
    pseudo[l].prec.assign(cfg.layer_cols(l), lam);
  }
  return sample_from_pseudo(cfg, post.u0, m, pseudo, noise);
}

// ---------------------------------------------------------------------------
// Moment-matched prediction
// ---------------------------------------------------------------------------

Prediction bnn_predict(const BNNConfig& cfg, const WeightSampler& sampler,
                       const Tensor& x_star, std::size_t s) {
  cfg.validate();
  if (s < 2) throw ContractError("bnn_predict: at least two samples are required");
  if (x_star.ndim() != 2 || x_star.cols() != cfg.in_dim())
    throw ShapeError("bnn_predict: input width does not match the network");
  const std::size_t t = x_star.rows();
  const std::size_t p = cfg.out_dim();
  const bool bern = cfg.likelihood.kind == LikelihoodKind::bernoulli;
  std::vector<double> mean(t * p, 0.0), m2(t * p, 0.0);
  for (std::size_t k = 1; k <= s; ++k) {
    Tensor f = bnn_forward(cfg, sampler(), x_star);
    if (bern) f = sigmoid(f);
    const std::vector<double>& v = f.value();
    for (std::size_t i = 0; i < v.size(); ++i) {  // Welford update
      const double delta = v[i] - mean[i];
      mean[i] += delta / static_cast<double>(k);
      m2[i] += delta * (v[i] - mean[i]);
    }
  }
  std::vector<double> var(t * p);
  if (bern) {
    for (std::size_t i = 0; i < var.size(); ++i) var[i] = mean[i] * (1.0 - mean[i]);
  } else {
    const double nv = cfg.likelihood.noise_var();
    for (std::size_t i = 0; i < var.size(); ++i)
      var[i] = m2[i] / static_cast<double>(s - 1) + nv;
  }
  return {Tensor::from({t, p}, std::move(mean)), Tensor::from({t, p}, std::move(var))};
}

}  // namespace abnn
