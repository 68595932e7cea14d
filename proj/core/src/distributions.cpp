#include "abnn/distributions.hpp"

#include <cmath>

namespace abnn {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)
constexpr double kLogVarLo = -10.0, kLogVarHi = 10.0;

void check_1d(const char* op, const Tensor& t) {
  if (t.ndim() != 1) throw ShapeError(std::string(op) + ": expected 1-D tensor, got " + shape_str(t.shape()));
}
}  // namespace

DiagGaussian::DiagGaussian(Tensor mean_, Tensor log_var_)
    : mean(std::move(mean_)), log_var(clamp(log_var_, kLogVarLo, kLogVarHi)) {
  check_1d("DiagGaussian", mean);
  check_1d("DiagGaussian", log_var);
  if (mean.size() != log_var.size())
    throw ShapeError("DiagGaussian: mean and log_var lengths differ");
}

DiagGaussian DiagGaussian::standard(std::size_t n) {
  return DiagGaussian(Tensor::zeros({n}), Tensor::zeros({n}));
}

DiagGaussian DiagGaussian::isotropic(std::size_t n, double var) {
  if (var <= 0.0) throw ContractError("DiagGaussian::isotropic: var must be positive");
  return DiagGaussian(Tensor::zeros({n}), Tensor::full({n}, std::log(var)));
}

FullGaussian::FullGaussian(Tensor mean_, Tensor chol_cov_)
    : mean(std::move(mean_)), chol_cov(std::move(chol_cov_)) {
  check_1d("FullGaussian", mean);
  std::size_t n = mean.size();
  if (chol_cov.ndim() != 2 || chol_cov.rows() != n || chol_cov.cols() != n)
    throw ShapeError("FullGaussian: factor shape does not match mean length");
  for (std::size_t i = 0; i < n; ++i) {
    if (chol_cov.at2(i, i) <= 0.0)
      throw ContractError("FullGaussian: factor diagonal must be strictly positive");
    for (std::size_t j = i + 1; j < n; ++j)
      if (chol_cov.at2(i, j) != 0.0)
        throw ContractError("FullGaussian: factor must be lower triangular");
  }
}

void GaussianFactorSet::add(DiagGaussian g) {
  if (!factors.empty() && g.dim() != factors.front().dim())
    throw ShapeError("GaussianFactorSet: factor length differs from existing factors");
  factors.push_back(std::move(g));
}

std::size_t GaussianFactorSet::dim() const {
  if (factors.empty()) throw ContractError("GaussianFactorSet::dim on empty set");
  return factors.front().dim();
}

Tensor reparam_sample(const DiagGaussian& g, const std::vector<double>& eps) {
  if (eps.size() != g.dim()) throw ShapeError("reparam_sample: eps length mismatch");
  Tensor e = Tensor::from({eps.size()}, eps);
  return add(g.mean, mul(exp(scale(g.log_var, 0.5)), e));
}

Tensor log_prob_diag(const DiagGaussian& g, const Tensor& x) {
  check_1d("log_prob_diag", x);
  if (x.size() != g.dim()) throw ShapeError("log_prob_diag: length mismatch");
  Tensor d = sub(x, g.mean);
  Tensor quad = mul(square(d), exp(neg(g.log_var)));
  Tensor per = add(add_const(g.log_var, kLog2Pi), quad);
  return scale(sum(per), -0.5);
}

Tensor kl_diag(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.dim() != p.dim()) throw ShapeError("kl_diag: length mismatch");
  Tensor lv_diff = sub(q.log_var, p.log_var);
  Tensor var_ratio = exp(lv_diff);
  Tensor mean_term = mul(square(sub(p.mean, q.mean)), exp(neg(p.log_var)));
  Tensor per = sub(add(var_ratio, mean_term), add_const(lv_diff, 1.0));
  return scale(sum(per), 0.5);
}

DiagGaussian gaussian_product(const GaussianFactorSet& factors, const DiagGaussian& prior) {
  Tensor prec = exp(neg(prior.log_var));
  Tensor prec_mean = mul(prec, prior.mean);
  for (const auto& f : factors.factors) {
    if (f.dim() != prior.dim())
      throw ShapeError("gaussian_product: factor length differs from prior");
    Tensor fp = exp(neg(f.log_var));
    prec = add(prec, fp);
    prec_mean = add(prec_mean, mul(fp, f.mean));
  }
  Tensor mean = div(prec_mean, prec);
  Tensor log_var = neg(log(prec));
  return DiagGaussian(mean, log_var);
}

FullGaussian blr_posterior(const Tensor& features, const Tensor& targets,
                           const Tensor& precisions, double prior_var) {
  if (prior_var <= 0.0) throw ContractError("blr_posterior: prior_var must be positive");
  if (features.ndim() != 2) throw ShapeError("blr_posterior: features must be [N x Din]");
  std::size_t n = features.rows(), din = features.cols();
  check_1d("blr_posterior", targets);
  check_1d("blr_posterior", precisions);
  if (targets.size() != n || precisions.size() != n)
    throw ShapeError("blr_posterior: targets/precisions length must equal feature rows");
  for (std::size_t i = 0; i < n; ++i)
    if (precisions.at(i) <= 0.0)
      throw ContractError("blr_posterior: precisions must be strictly positive");

  if (n == 0) {
    Tensor mean = Tensor::zeros({din});
    std::vector<double> l(din * din, 0.0);
    for (std::size_t i = 0; i < din; ++i) l[i * din + i] = std::sqrt(prior_var);
    return FullGaussian(mean, Tensor::from({din, din}, l));
  }

  // A = I/prior_var + F^T diag(prec) F
  Tensor ft = transpose(features);
  Tensor a = add_diag_const(matmul(ft, scale_rows(features, precisions)), 1.0 / prior_var);
  Tensor l = cholesky_jittered(a);

  // mean = A^{-1} F^T (prec * t)
  Tensor rhs = matmul(ft, reshape(mul(precisions, targets), {n, 1}));
  Tensor mean = reshape(solve_lower_t(l, solve_lower(l, rhs)), {din});

  // covariance = A^{-1}, symmetrised before the factorisation
  std::vector<double> eye(din * din, 0.0);
  for (std::size_t i = 0; i < din; ++i) eye[i * din + i] = 1.0;
  Tensor cov = solve_lower_t(l, solve_lower(l, Tensor::from({din, din}, eye)));
  cov = scale(add(cov, transpose(cov)), 0.5);
  Tensor chol_cov = cholesky_jittered(cov);
  return FullGaussian(mean, chol_cov);
}

Tensor sample_full(const FullGaussian& g, const std::vector<double>& eps) {
  if (eps.size() != g.dim()) throw ShapeError("sample_full: eps length mismatch");
  std::size_t n = g.dim();
  Tensor e = Tensor::from({n, 1}, eps);
  return add(g.mean, reshape(matmul(g.chol_cov, e), {n}));
}

Tensor log_prob_full(const FullGaussian& g, const Tensor& x) {
  check_1d("log_prob_full", x);
  std::size_t n = g.dim();
  if (x.size() != n) throw ShapeError("log_prob_full: length mismatch");
  Tensor d = reshape(sub(x, g.mean), {n, 1});
  Tensor z = solve_lower(g.chol_cov, d);
  Tensor quad = sum(square(z));
  Tensor log_det_half = sum(log(diag_part(g.chol_cov)));  // sum log L_ii = 0.5 log|Cov|
  return sub(scale(add_const(quad, static_cast<double>(n) * kLog2Pi), -0.5), log_det_half);
}

}  // namespace abnn
