#pragma once

#include <vector>

#include "abnn/tensor.hpp"

namespace abnn {

/// Diagonal Gaussian over a vector: mean + log-variance, both 1-D tensors of
/// equal length. Log-variances are clamped into [-10, 10] at construction so
/// derived precisions stay in [e^-10, e^10].
struct DiagGaussian {
  Tensor mean;
  Tensor log_var;

  DiagGaussian(Tensor mean_, Tensor log_var_);
  std::size_t dim() const { return mean.size(); }

  static DiagGaussian standard(std::size_t n);
  /// N(0, var I)
  static DiagGaussian isotropic(std::size_t n, double var);
};

/// Gaussian with full covariance, stored as the lower Cholesky factor of the
/// covariance (what sampling needs).
struct FullGaussian {
  Tensor mean;      // [n]
  Tensor chol_cov;  // [n x n], lower triangular, positive diagonal

  FullGaussian(Tensor mean_, Tensor chol_cov_);
  std::size_t dim() const { return mean.size(); }
};

/// Product structure: per-datapoint diagonal factors of one common length.
/// Order of factors never affects any derived quantity.
struct GaussianFactorSet {
  std::vector<DiagGaussian> factors;

  GaussianFactorSet() = default;
  void add(DiagGaussian g);
  std::size_t size() const { return factors.size(); }
  bool empty() const { return factors.empty(); }
  std::size_t dim() const;
};

/// mu + exp(log_var / 2) * eps, differentiable w.r.t. the distribution.
Tensor reparam_sample(const DiagGaussian& g, const std::vector<double>& eps);

/// Sum of independent univariate Gaussian log-densities.
Tensor log_prob_diag(const DiagGaussian& g, const Tensor& x);

/// Analytic KL(q || p) for diagonal Gaussians; nonnegative, zero iff equal.
Tensor kl_diag(const DiagGaussian& q, const DiagGaussian& p);

/// Normalised product prior * prod_n factor_n via natural-parameter addition.
DiagGaussian gaussian_product(const GaussianFactorSet& factors, const DiagGaussian& prior);

/// Bayesian linear regression posterior over a weight vector w with
/// observation model t_n ~ N(f_n . w, 1/precision_n) and prior N(0, prior_var I).
/// Covariance = (I/prior_var + F^T diag(prec) F)^{-1}; mean = Cov F^T (prec * t).
/// Differentiable w.r.t. features, targets and precisions. The identity has
/// the input dimension of the features (columns of F).
FullGaussian blr_posterior(const Tensor& features, const Tensor& targets,
                           const Tensor& precisions, double prior_var);

/// mean + chol_cov . eps
Tensor sample_full(const FullGaussian& g, const std::vector<double>& eps);

/// Multivariate Gaussian log-density via the stored Cholesky factor.
Tensor log_prob_full(const FullGaussian& g, const Tensor& x);

}  // namespace abnn
