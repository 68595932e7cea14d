#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <utility>
#include <vector>

#include "abnn/posteriors.hpp"
#include "support.hpp"

using namespace abnn;
using namespace testsupport;

namespace {

BNNConfig make_cfg(std::vector<std::size_t> widths, Act act = Act::relu,
                   double prior_var = 1.0, double noise_var = 0.25) {
  BNNConfig cfg;
  cfg.widths = std::move(widths);
  cfg.act = act;
  cfg.prior_var = prior_var;
  cfg.likelihood = Likelihood::gaussian(noise_var);
  return cfg;
}

Task make_task(Rng& rng, std::size_t n, std::size_t d, std::size_t p) {
  std::vector<double> xv(n * d), yv(n * p);
  for (auto& v : xv) v = rng.uniform(-2.0, 2.0);
  for (auto& v : yv) v = rng.uniform(-1.5, 1.5);
  Task t;
  t.x = Tensor::from({n, d}, std::move(xv));
  t.y = Tensor::from({n, p}, std::move(yv));
  return t;
}

/// Dense Bayesian linear regression oracle on bias-augmented inputs:
/// A = I/prior_var + Phi^T diag(prec) Phi, Sigma = A^{-1}, mu = Sigma Phi^T diag(prec) y.
struct BlrOracle {
  std::vector<double> mean;  // din
  std::vector<double> cov;   // din x din
};

BlrOracle blr_oracle(const std::vector<std::vector<double>>& phi,
                     const std::vector<double>& targets, const std::vector<double>& prec,
                     double prior_var) {
  const std::size_t n = phi.size(), d = phi.empty() ? 0 : phi[0].size();
  std::vector<double> a(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) a[i * d + i] = 1.0 / prior_var;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) a[i * d + j] += prec[k] * phi[k][i] * phi[k][j];
  BlrOracle out;
  out.cov = dense_inverse(a, d);
  std::vector<double> rhs(d, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < d; ++i) rhs[i] += prec[k] * phi[k][i] * targets[k];
  out.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out.mean[i] += out.cov[i * d + j] * rhs[j];
  return out;
}

/// Covariance matrix L L^T of a FullGaussian, as plain values.
std::vector<double> cov_of(const FullGaussian& g) {
  const std::size_t n = g.dim();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += g.chol_cov.at2(i, k) * g.chol_cov.at2(j, k);
      out[i * n + j] = s;
    }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// bnn_forward
// ---------------------------------------------------------------------------

TEST_CASE("bnn_forward with zero weights returns zeros") {
  BNNConfig cfg = make_cfg({2, 3, 1});
  std::vector<Tensor> w{Tensor::zeros({3, 3}), Tensor::zeros({4, 1})};
  Tensor out = bnn_forward(cfg, w, Tensor::from({2, 2}, {1.0, -2.0, 0.5, 3.0}));
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.at(i) == 0.0);
}

TEST_CASE("bnn_forward single layer with canonical basis weights selects a column") {
  BNNConfig cfg = make_cfg({3, 1});
  // Weight column e_1 (zero bias): output = x[:, 1].
  std::vector<Tensor> w{Tensor::from({4, 1}, {0.0, 1.0, 0.0, 0.0})};
  Tensor x = Tensor::from({2, 3}, {1.0, 2.0, 3.0, -4.0, -5.0, -6.0});
  Tensor out = bnn_forward(cfg, w, x);
  CHECK(out.at2(0, 0) == 2.0);
  CHECK(out.at2(1, 0) == -5.0);
}

TEST_CASE("bnn_forward equals row-wise mlp_forward") {
  Rng rng(401);
  MLPParams p = MLPParams::init({2, 4, 3, 1}, Act::tanh, rng);
  BNNConfig cfg = make_cfg({2, 4, 3, 1}, Act::tanh);
  Task t = make_task(rng, 7, 2, 1);
  Tensor batch = bnn_forward(cfg, p.weights, t.x);
  for (std::size_t i = 0; i < 7; ++i) {
    Tensor row = Tensor::from({1, 2}, {t.x.at2(i, 0), t.x.at2(i, 1)});
    Tensor out = mlp_forward(p, row);
    CHECK(std::abs(batch.at2(i, 0) - out.at2(0, 0)) < 1e-12);
  }
}

TEST_CASE("bnn_forward shape errors") {
  BNNConfig cfg = make_cfg({2, 1});
  Tensor x = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
  using WList = std::vector<Tensor>;
  CHECK_THROWS_AS(bnn_forward(cfg, WList{Tensor::zeros({2, 1})}, x), ShapeError);  // no bias row
  CHECK_THROWS_AS(bnn_forward(cfg, WList{Tensor::zeros({3, 2})}, x), ShapeError);  // wrong width
  CHECK_THROWS_AS(bnn_forward(cfg, WList{}, x), ShapeError);                       // no layers
  CHECK_THROWS_AS(bnn_forward(cfg, WList{Tensor::zeros({3, 1})}, Tensor::from({1, 3}, {1, 2, 3})),
                  ShapeError);
}

// ---------------------------------------------------------------------------
// log_likelihood
// ---------------------------------------------------------------------------

TEST_CASE("gaussian log-likelihood at a perfect fit with unit noise") {
  BNNConfig cfg = make_cfg({1, 1}, Act::relu, 1.0, 1.0);
  Tensor f = Tensor::from({3, 2}, {0.1, -0.2, 0.3, 0.0, 1.0, 2.0});
  Tensor ll = log_likelihood(cfg, f, f);
  CHECK(ll.scalar_value() == doctest::Approx(-3.0 * std::log(2.0 * M_PI)).epsilon(1e-12));
}

TEST_CASE("bernoulli log-likelihood of logit zero is ln(1/2)") {
  BNNConfig cfg;
  cfg.widths = {1, 1};
  cfg.likelihood = Likelihood::bernoulli();
  Tensor ll = log_likelihood(cfg, Tensor::from({1, 1}, {0.0}), Tensor::from({1, 1}, {1.0}));
  CHECK(ll.scalar_value() == doctest::Approx(std::log(0.5)).epsilon(1e-14));
  Tensor ll0 = log_likelihood(cfg, Tensor::from({1, 1}, {0.0}), Tensor::from({1, 1}, {0.0}));
  CHECK(ll0.scalar_value() == doctest::Approx(std::log(0.5)).epsilon(1e-14));
}

TEST_CASE("gaussian log-likelihood matches the diagonal Gaussian density") {
  Rng rng(402);
  const double nv = 0.37;
  BNNConfig cfg = make_cfg({1, 1}, Act::relu, 1.0, nv);
  std::vector<double> fv = rand_vec(rng, 8), yv = rand_vec(rng, 8);
  Tensor ll = log_likelihood(cfg, Tensor::from({4, 2}, fv), Tensor::from({4, 2}, yv));
  DiagGaussian ref(Tensor::from({8}, fv), Tensor::full({8}, std::log(nv)));
  Tensor oracle = log_prob_diag(ref, Tensor::from({8}, yv));
  CHECK(ll.scalar_value() == doctest::Approx(oracle.scalar_value()).epsilon(1e-12));
}

TEST_CASE("bernoulli log-likelihood rejects non-binary targets and survives huge logits") {
  BNNConfig cfg;
  cfg.widths = {1, 1};
  cfg.likelihood = Likelihood::bernoulli();
  CHECK_THROWS_AS(log_likelihood(cfg, Tensor::from({1, 1}, {0.0}), Tensor::from({1, 1}, {0.5})),
                  DataError);
  Tensor big = log_likelihood(cfg, Tensor::from({2, 1}, {1000.0, -1000.0}),
                              Tensor::from({2, 1}, {1.0, 0.0}));
  CHECK(std::isfinite(big.scalar_value()));
  CHECK(big.scalar_value() == doctest::Approx(0.0).epsilon(1e-12));
  Tensor worst = log_likelihood(cfg, Tensor::from({1, 1}, {-1000.0}), Tensor::from({1, 1}, {1.0}));
  CHECK(worst.scalar_value() == doctest::Approx(-1000.0).epsilon(1e-12));
}

TEST_CASE("trainable noise parameter receives a gradient") {
  BNNConfig cfg = make_cfg({1, 1}, Act::relu, 1.0, 0.5);
  std::vector<ParamSpec> specs{{{1}, {std::log(0.5)}, false}};
  auto loss = [&](const std::vector<Tensor>& ps) {
    BNNConfig local = cfg;
    local.likelihood.log_noise_var = ps[0];
    Tensor f = Tensor::from({3, 1}, {0.2, -0.4, 1.0});
    Tensor y = Tensor::from({3, 1}, {0.0, 0.1, 0.7});
    return neg(log_likelihood(local, f, y));
  };
  check_gradients(specs, loss);
}

// ---------------------------------------------------------------------------
// MFVI
// ---------------------------------------------------------------------------

TEST_CASE("mfvi_sample with zero noise returns the means") {
  Rng rng(403);
  BNNConfig cfg = make_cfg({1, 2, 1});
  MFVIPosterior q = MFVIPosterior::init(cfg, rng);
  WeightSample w = mfvi_sample(q, cfg, ZeroNoise{});
  REQUIRE(w.weights.size() == 2);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < w.weights[l].size(); ++i)
      CHECK(w.weights[l].at(i) == doctest::Approx(q.means[l].at(i)).epsilon(1e-15));
  CHECK(std::isfinite(w.log_q.scalar_value()));
  CHECK(std::isfinite(w.log_p.scalar_value()));
}

TEST_CASE("mfvi log_q equals the flattened diagonal density and log ratio vanishes at the prior") {
  BNNConfig cfg = make_cfg({1, 2, 1}, Act::relu, 0.7);
  MFVIPosterior q = MFVIPosterior::prior(cfg);
  Rng seeds(404);
  double mean_ratio = 0.0, m2 = 0.0;
  const std::size_t reps = 10000;
  for (std::size_t k = 1; k <= reps; ++k) {
    WeightSample w = mfvi_sample(q, cfg, GaussianNoise{seeds.next_seed()});
    // Self-consistency: log_q re-evaluated from the flattened sample.
    if (k == 1) {
      double re = 0.0;
      for (std::size_t l = 0; l < 2; ++l) {
        std::size_t n = q.means[l].size();
        DiagGaussian g(reshape(q.means[l], {n}), reshape(q.log_vars[l], {n}));
        re += log_prob_diag(g, reshape(w.weights[l], {n})).scalar_value();
      }
      CHECK(std::abs(re - w.log_q.scalar_value()) < 1e-10);
    }
    double r = w.log_q.scalar_value() - w.log_p.scalar_value();
    double delta = r - mean_ratio;
    mean_ratio += delta / static_cast<double>(k);
    m2 += delta * (r - mean_ratio);
  }
  double se = std::sqrt(m2 / static_cast<double>(reps - 1) / static_cast<double>(reps));
  CHECK(std::abs(mean_ratio) < 3.0 * se + 1e-12);
}

TEST_CASE("mfvi MC estimate of the KL matches the analytic value") {
  Rng rng(405);
  BNNConfig cfg = make_cfg({1, 2, 1}, Act::relu, 1.3);
  MFVIPosterior q = MFVIPosterior::init(cfg, rng, -1.0);
  double analytic = mfvi_kl_to_prior(q, cfg).scalar_value();
  CHECK(analytic >= 0.0);
  Rng seeds(406);
  double mean_ratio = 0.0, m2 = 0.0;
  const std::size_t reps = 10000;
  for (std::size_t k = 1; k <= reps; ++k) {
    WeightSample w = mfvi_sample(q, cfg, GaussianNoise{seeds.next_seed()});
    double r = w.log_q.scalar_value() - w.log_p.scalar_value();
    double delta = r - mean_ratio;
    mean_ratio += delta / static_cast<double>(k);
    m2 += delta * (r - mean_ratio);
  }
  double se = std::sqrt(m2 / static_cast<double>(reps - 1) / static_cast<double>(reps));
  CHECK(std::abs(mean_ratio - analytic) < 3.0 * se);
}

// ---------------------------------------------------------------------------
// AMFVI
// ---------------------------------------------------------------------------

TEST_CASE("amfvi posterior of an empty task is the prior") {
  Rng rng(407);
  BNNConfig cfg = make_cfg({1, 2, 1}, Act::relu, 0.8);
  AMFVIModel m = AMFVIModel::init(cfg, {8}, Act::relu, rng);
  MFVIPosterior q = amfvi_posterior(m, Task{}, cfg);
  for (std::size_t l = 0; l < cfg.layer_count(); ++l)
    for (std::size_t i = 0; i < q.means[l].size(); ++i) {
      CHECK(q.means[l].at(i) == doctest::Approx(0.0).epsilon(1e-15));
      CHECK(q.log_vars[l].at(i) == doctest::Approx(std::log(0.8)).epsilon(1e-12));
    }
}

TEST_CASE("amfvi posterior is invariant to datapoint permutation") {
  Rng rng(408);
  BNNConfig cfg = make_cfg({2, 3, 1});
  AMFVIModel m = AMFVIModel::init(cfg, {6}, Act::tanh, rng);
  Task t = make_task(rng, 6, 2, 1);
  std::vector<std::size_t> order{5, 3, 0, 4, 1, 2};
  Task perm = t.subset(order);
  MFVIPosterior qa = amfvi_posterior(m, t, cfg);
  MFVIPosterior qb = amfvi_posterior(m, perm, cfg);
  for (std::size_t l = 0; l < cfg.layer_count(); ++l)
    for (std::size_t i = 0; i < qa.means[l].size(); ++i) {
      CHECK(std::abs(qa.means[l].at(i) - qb.means[l].at(i)) < 1e-12);
      CHECK(std::abs(qa.log_vars[l].at(i) - qb.log_vars[l].at(i)) < 1e-12);
    }
}

TEST_CASE("amfvi two-datapoint posterior matches hand natural-parameter arithmetic") {
  // Network with one weight layer (no hidden): out = [x, y, 1] * W, W is 3x4.
  BNNConfig cfg = make_cfg({1, 1}, Act::relu, 1.0);  // two weights: slope + bias
  Rng rng(409);
  AMFVIModel m = AMFVIModel::init(cfg, {}, Act::relu, rng);
  std::vector<double> wv{0.3,  -0.2, 0.1,  0.4,    // x row
                         -0.5, 0.25, 0.2,  -0.1,   // y row
                         0.05, -0.15, -1.0, -2.0};  // bias row
  m.net.weights[0] = Tensor::param({3, 4}, wv);
  const double pts[2][2] = {{1.0, 2.0}, {-0.5, 0.5}};
  Task t;
  t.x = Tensor::from({2, 1}, {pts[0][0], pts[1][0]});
  t.y = Tensor::from({2, 1}, {pts[0][1], pts[1][1]});
  MFVIPosterior q = amfvi_posterior(m, t, cfg);
  // Oracle in plain doubles.
  for (std::size_t i = 0; i < 2; ++i) {  // weight index within the flat vector
    double prec = 1.0, pm = 0.0;
    for (int n = 0; n < 2; ++n) {
      double mu = pts[n][0] * wv[0 + i] + pts[n][1] * wv[4 + i] + wv[8 + i];
      double lv = pts[n][0] * wv[2 + i] + pts[n][1] * wv[6 + i] + wv[10 + i];
      prec += std::exp(-lv);
      pm += mu * std::exp(-lv);
    }
    CHECK(q.means[0].at(i) == doctest::Approx(pm / prec).epsilon(1e-12));
    CHECK(q.log_vars[0].at(i) == doctest::Approx(-std::log(prec)).epsilon(1e-12));
  }
}

TEST_CASE("amfvi posterior parameters differentiate through the network") {
  Rng rng(410);
  BNNConfig cfg = make_cfg({1, 1});
  AMFVIModel proto = AMFVIModel::init(cfg, {3}, Act::tanh, rng);
  Task t = make_task(rng, 3, 1, 1);
  std::vector<ParamSpec> specs;
  for (const auto& w : proto.net.weights)
    specs.push_back({w.shape(), w.value(), false});
  std::vector<double> wm = rand_vec(rng, 2), wl = rand_vec(rng, 2);
  auto loss = [&](const std::vector<Tensor>& ps) {
    AMFVIModel m = proto;
    m.net.weights.assign(ps.begin(), ps.end());
    MFVIPosterior q = amfvi_posterior(m, t, cfg);
    return add(weigh(q.means[0], wm), weigh(q.log_vars[0], wl));
  };
  check_gradients(specs, loss);
}

// ---------------------------------------------------------------------------
// APOVI
// ---------------------------------------------------------------------------

namespace {

/// Bank for a single-layer network whose variance head always outputs
/// log(noise_var): zero weights, bias of the final affine layer set to
/// log(noise_var). Pseudo-precisions then equal the observation precision.
APOVIModel apovi_with_fixed_variance(const BNNConfig& cfg, double noise_var, Rng& rng) {
  APOVIModel m = APOVIModel::init(cfg, {}, Act::relu, rng);
  for (auto& net : m.bank.nets) {
    for (auto& w : net.weights) {
      std::vector<double> z(w.size(), 0.0);
      w = Tensor::param(w.shape(), std::move(z));
    }
    // Final layer head: bias row is the last row; all heads get log(noise_var).
    Tensor& last = net.weights.back();
    std::vector<double> v(last.size(), 0.0);
    const std::size_t cols = last.cols();
    for (std::size_t j = 0; j < cols; ++j) v[(last.rows() - 1) * cols + j] = std::log(noise_var);
    last = Tensor::param(last.shape(), std::move(v));
  }
  return m;
}

}  // namespace

TEST_CASE("single-layer posterior equals the conjugate Bayesian linear regression") {
  Rng rng(411);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 19));
    const double nv = rng.uniform(0.05, 0.5);
    const double pv = rng.uniform(0.5, 2.0);
    BNNConfig cfg = make_cfg({d, 1}, Act::relu, pv, nv);
    APOVIModel m = apovi_with_fixed_variance(cfg, nv, rng);
    Task t = make_task(rng, n, d, 1);
    SampleDetail s = apovi_sample(m, t, cfg, ZeroNoise{});
    REQUIRE(s.layers.size() == 1);
    REQUIRE(s.layers[0].neurons.size() == 1);
    const FullGaussian& g = s.layers[0].neurons[0];
    // Oracle: dense conjugate posterior on bias-augmented inputs.
    std::vector<std::vector<double>> phi(n, std::vector<double>(d + 1, 1.0));
    std::vector<double> targets(n), prec(n, 1.0 / nv);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) phi[i][j] = t.x.at2(i, j);
      targets[i] = t.y.at2(i, 0);
    }
    BlrOracle oracle = blr_oracle(phi, targets, prec, pv);
    std::vector<double> cov = cov_of(g);
    for (std::size_t i = 0; i <= d; ++i) {
      CHECK(std::abs(g.mean.at(i) - oracle.mean[i]) < 1e-8);
      for (std::size_t j = 0; j <= d; ++j)
        CHECK(std::abs(cov[i * (d + 1) + j] - oracle.cov[i * (d + 1) + j]) < 1e-8);
    }
    // With zero noise the sampled weights are the posterior means.
    for (std::size_t i = 0; i <= d; ++i)
      CHECK(std::abs(s.sample.weights[0].at(i) - oracle.mean[i]) < 1e-8);
  }
}

TEST_CASE("bernoulli final-layer pseudo-means are clamped logits of the targets") {
  Rng rng(412);
  BNNConfig cfg;
  cfg.widths = {2, 1};
  cfg.prior_var = 1.0;
  cfg.likelihood = Likelihood::bernoulli();
  const double nv = 0.3;  // pseudo-variance emitted by the frozen bank
  APOVIModel m = apovi_with_fixed_variance(cfg, nv, rng);
  Task t = make_task(rng, 5, 2, 1);
  std::vector<double> yv{1.0, 0.0, 1.0, 1.0, 0.0};
  t.y = Tensor::from({5, 1}, yv);
  SampleDetail s = apovi_sample(m, t, cfg, ZeroNoise{});
  const double logit1 = std::log(0.95 / 0.05);
  std::vector<std::vector<double>> phi(5, std::vector<double>(3, 1.0));
  std::vector<double> targets(5), prec(5, 1.0 / nv);
  for (std::size_t i = 0; i < 5; ++i) {
    phi[i][0] = t.x.at2(i, 0);
    phi[i][1] = t.x.at2(i, 1);
    targets[i] = yv[i] > 0.5 ? logit1 : -logit1;
  }
  BlrOracle oracle = blr_oracle(phi, targets, prec, 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::abs(s.layers[0].neurons[0].mean.at(i) - oracle.mean[i]) < 1e-8);
}

TEST_CASE("empty task samples every layer from the prior with log_q equal to log_p") {
  Rng rng(413);
  BNNConfig cfg = make_cfg({2, 3, 1}, Act::relu, 1.7);
  APOVIModel m = APOVIModel::init(cfg, {4}, Act::relu, rng);
  SampleDetail s = apovi_sample(m, Task{}, cfg, GaussianNoise{991});
  CHECK(std::abs(s.sample.log_q.scalar_value() - s.sample.log_p.scalar_value()) < 1e-12);
  // The draw is mean 0 with standard deviation sqrt(prior_var).
  GaussianNoise noise{991};
  const double sd = std::sqrt(1.7);
  for (std::size_t l = 0; l < 2; ++l) {
    auto eps_cols = cfg.layer_cols(l);
    for (std::size_t dcol = 0; dcol < eps_cols; ++dcol) {
      auto eps = noise.draw(static_cast<int>(l), static_cast<int>(dcol), cfg.layer_rows(l));
      for (std::size_t i = 0; i < eps.size(); ++i)
        CHECK(s.sample.weights[l].at2(i, dcol) == doctest::Approx(sd * eps[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("apovi posterior parameters and weights are invariant to task permutation") {
  Rng rng(414);
  BNNConfig cfg = make_cfg({2, 3, 2}, Act::tanh);
  APOVIModel m = APOVIModel::init(cfg, {5}, Act::tanh, rng);
  Task t = make_task(rng, 8, 2, 2);
  Task perm = t.subset({7, 2, 5, 0, 3, 6, 1, 4});
  SampleDetail a = apovi_sample(m, t, cfg, GaussianNoise{771});
  SampleDetail b = apovi_sample(m, perm, cfg, GaussianNoise{771});
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    for (std::size_t d = 0; d < cfg.layer_cols(l); ++d) {
      const FullGaussian& ga = a.layers[l].neurons[d];
      const FullGaussian& gb = b.layers[l].neurons[d];
      for (std::size_t i = 0; i < ga.mean.size(); ++i)
        CHECK(std::abs(ga.mean.at(i) - gb.mean.at(i)) < 1e-10);
      for (std::size_t i = 0; i < ga.chol_cov.size(); ++i)
        CHECK(std::abs(ga.chol_cov.at(i) - gb.chol_cov.at(i)) < 1e-10);
    }
    for (std::size_t i = 0; i < a.sample.weights[l].size(); ++i)
      CHECK(std::abs(a.sample.weights[l].at(i) - b.sample.weights[l].at(i)) < 1e-10);
  }
  CHECK(std::abs(a.sample.log_q.scalar_value() - b.sample.log_q.scalar_value()) < 1e-9);
}

TEST_CASE("apovi log_q re-evaluates identically from the stored conditionals") {
  Rng rng(415);
  BNNConfig cfg = make_cfg({1, 4, 1});
  APOVIModel m = APOVIModel::init(cfg, {6}, Act::relu, rng);
  Task t = make_task(rng, 5, 1, 1);
  SampleDetail s = apovi_sample(m, t, cfg, GaussianNoise{229});
  double re_q = 0.0, re_p = 0.0;
  for (std::size_t l = 0; l < cfg.layer_count(); ++l)
    for (std::size_t d = 0; d < cfg.layer_cols(l); ++d) {
      Tensor w_d = col(s.sample.weights[l], d);
      re_q += log_prob_full(s.layers[l].neurons[d], w_d).scalar_value();
      DiagGaussian prior = DiagGaussian::isotropic(cfg.layer_rows(l), cfg.prior_var);
      re_p += log_prob_diag(prior, w_d).scalar_value();
    }
  CHECK(std::abs(re_q - s.sample.log_q.scalar_value()) < 1e-10);
  CHECK(std::abs(re_p - s.sample.log_p.scalar_value()) < 1e-10);
}

TEST_CASE("raising a pseudo-precision never inflates the posterior covariance diagonal") {
  Rng rng(416);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 4));
    const std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    std::vector<double> fv = rand_vec(rng, n * d), tv = rand_vec(rng, n),
                        pv = rand_vec_away(rng, n, 0.2, 3.0);
    for (auto& v : pv) v = std::abs(v);
    Tensor feats = Tensor::from({n, d}, fv);
    Tensor targets = Tensor::from({n}, tv);
    FullGaussian base = blr_posterior(feats, targets, Tensor::from({n}, pv), 1.0);
    std::vector<double> base_diag = cov_of(base);
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<double> bumped = pv;
      bumped[k] *= 2.0;
      FullGaussian up = blr_posterior(feats, targets, Tensor::from({n}, bumped), 1.0);
      std::vector<double> up_diag = cov_of(up);
      for (std::size_t i = 0; i < d; ++i)
        CHECK(up_diag[i * d + i] <= base_diag[i * d + i] + 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// POVI
// ---------------------------------------------------------------------------

TEST_CASE("povi with inducing points set to the data reproduces the apovi single layer") {
  Rng rng(417);
  const double nv = 0.2;
  BNNConfig cfg = make_cfg({2, 1}, Act::relu, 1.0, nv);
  APOVIModel am = apovi_with_fixed_variance(cfg, nv, rng);
  Task t = make_task(rng, 7, 2, 1);
  SampleDetail a = apovi_sample(am, t, cfg, GaussianNoise{55});

  POVIPosterior q;
  q.u0 = Tensor::param({7, 2}, t.x.value());
  q.v.push_back(Tensor::param({7, 1}, t.y.value()));
  q.log_prec.push_back(Tensor::param({7}, std::vector<double>(7, -std::log(nv))));
  SampleDetail b = povi_sample(q, cfg, GaussianNoise{55});

  const FullGaussian& ga = a.layers[0].neurons[0];
  const FullGaussian& gb = b.layers[0].neurons[0];
  for (std::size_t i = 0; i < ga.mean.size(); ++i)
    CHECK(std::abs(ga.mean.at(i) - gb.mean.at(i)) < 1e-10);
  for (std::size_t i = 0; i < ga.chol_cov.size(); ++i)
    CHECK(std::abs(ga.chol_cov.at(i) - gb.chol_cov.at(i)) < 1e-10);
  for (std::size_t i = 0; i < a.sample.weights[0].size(); ++i)
    CHECK(std::abs(a.sample.weights[0].at(i) - b.sample.weights[0].at(i)) < 1e-10);
}

TEST_CASE("floored precisions make the povi posterior collapse to the prior") {
  Rng rng(418);
  BNNConfig cfg = make_cfg({2, 3, 1}, Act::relu, 1.0);
  POVIPosterior q = POVIPosterior::init(cfg, 4, rng, -2.0, 2.0, -10.0);
  Rng seeds(419);
  double acc = 0.0;
  const int reps = 200;
  for (int k = 0; k < reps; ++k) {
    SampleDetail s = povi_sample(q, cfg, GaussianNoise{seeds.next_seed()});
    acc += s.sample.log_q.scalar_value() - s.sample.log_p.scalar_value();
  }
  CHECK(std::abs(acc / reps) < 1e-3);
}

TEST_CASE("permuting inducing rows jointly leaves the povi posterior unchanged") {
  Rng rng(420);
  BNNConfig cfg = make_cfg({1, 2, 1}, Act::tanh);
  POVIPosterior q = POVIPosterior::init(cfg, 5, rng);
  std::vector<std::size_t> order{4, 1, 3, 0, 2};
  POVIPosterior p;
  auto permute_rows = [&](const Tensor& src) {
    std::vector<double> out;
    for (std::size_t r : order)
      for (std::size_t j = 0; j < src.cols(); ++j) out.push_back(src.at2(r, j));
    return Tensor::param({order.size(), src.cols()}, std::move(out));
  };
  p.u0 = permute_rows(q.u0);
  for (std::size_t l = 0; l < 2; ++l) {
    p.v.push_back(permute_rows(q.v[l]));
    std::vector<double> lp;
    for (std::size_t r : order) lp.push_back(q.log_prec[l].at(r));
    p.log_prec.push_back(Tensor::param({order.size()}, std::move(lp)));
  }
  SampleDetail a = povi_sample(q, cfg, GaussianNoise{31});
  SampleDetail b = povi_sample(p, cfg, GaussianNoise{31});
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < a.sample.weights[l].size(); ++i)
      CHECK(std::abs(a.sample.weights[l].at(i) - b.sample.weights[l].at(i)) < 1e-10);
}

TEST_CASE("single-sample evidence bound differentiates w.r.t. povi parameters") {
  Rng rng(421);
  BNNConfig cfg = make_cfg({2, 2, 1}, Act::tanh, 1.0, 0.3);
  POVIPosterior proto = POVIPosterior::init(cfg, 4, rng);
  Task t = make_task(rng, 6, 2, 1);
  const std::uint64_t eps_seed = 777;  // common random numbers across evaluations
  std::vector<ParamSpec> specs;
  specs.push_back({proto.u0.shape(), proto.u0.value(), false});
  for (const auto& vt : proto.v) specs.push_back({vt.shape(), vt.value(), false});
  for (const auto& lp : proto.log_prec) specs.push_back({lp.shape(), lp.value(), false});
  auto loss = [&](const std::vector<Tensor>& ps) {
    POVIPosterior q;
    q.u0 = ps[0];
    q.v = {ps[1], ps[2]};
    q.log_prec = {ps[3], ps[4]};
    SampleDetail s = povi_sample(q, cfg, GaussianNoise{eps_seed});
    Tensor f = bnn_forward(cfg, s.sample, t.x);
    Tensor obj = add(log_likelihood(cfg, f, t.y),
                     sub(s.sample.log_p, s.sample.log_q));
    return neg(obj);
  };
  check_gradients(specs, loss, 1e-5, 1e-3, 1e-6);
}

TEST_CASE("apovi sample differentiates w.r.t. the inference network weights") {
  Rng rng(422);
  BNNConfig cfg = make_cfg({2, 2, 1}, Act::tanh, 1.0, 0.3);
  APOVIModel proto = APOVIModel::init(cfg, {3}, Act::tanh, rng);
  Task t = make_task(rng, 5, 2, 1);
  const std::uint64_t eps_seed = 778;
  std::vector<ParamSpec> specs;
  std::vector<std::pair<std::size_t, std::size_t>> where;  // (net, weight) per spec
  for (std::size_t ni = 0; ni < proto.bank.nets.size(); ++ni)
    for (std::size_t wi = 0; wi < proto.bank.nets[ni].weights.size(); ++wi) {
      const Tensor& w = proto.bank.nets[ni].weights[wi];
      specs.push_back({w.shape(), w.value(), false});
      where.emplace_back(ni, wi);
    }
  auto loss = [&](const std::vector<Tensor>& ps) {
    APOVIModel m = proto;
    for (std::size_t k = 0; k < ps.size(); ++k)
      m.bank.nets[where[k].first].weights[where[k].second] = ps[k];
    SampleDetail s = apovi_sample(m, t, cfg, GaussianNoise{eps_seed});
    Tensor f = bnn_forward(cfg, s.sample, t.x);
    Tensor obj = add(log_likelihood(cfg, f, t.y), sub(s.sample.log_p, s.sample.log_q));
    return neg(obj);
  };
  check_gradients(specs, loss, 1e-5, 1e-3, 1e-6);
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

TEST_CASE("deterministic sampler gives predictive variance exactly noise_var") {
  Rng rng(423);
  BNNConfig cfg = make_cfg({1, 3, 1}, Act::relu, 1.0, 0.07);
  MLPParams p = MLPParams::init({1, 3, 1}, Act::relu, rng);
  auto sampler = [&]() { return p.weights; };
  Tensor xs = Tensor::from({4, 1}, {-1.0, 0.0, 0.5, 2.0});
  Prediction pred = bnn_predict(cfg, sampler, xs, 10);
  Tensor direct = bnn_forward(cfg, p.weights, xs);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(pred.mean.at(i) == direct.at(i));
    CHECK(pred.var.at(i) == cfg.likelihood.noise_var());
  }
  CHECK_THROWS_AS(bnn_predict(cfg, sampler, xs, 1), ContractError);
}

TEST_CASE("bernoulli prediction returns mean probability with its Bernoulli variance") {
  Rng rng(424);
  BNNConfig cfg;
  cfg.widths = {1, 2, 1};
  cfg.likelihood = Likelihood::bernoulli();
  MLPParams p = MLPParams::init({1, 2, 1}, Act::relu, rng);
  auto sampler = [&]() { return p.weights; };
  Tensor xs = Tensor::from({3, 1}, {-0.5, 0.1, 1.2});
  Prediction pred = bnn_predict(cfg, sampler, xs, 5);
  Tensor f = bnn_forward(cfg, p.weights, xs);
  for (std::size_t i = 0; i < 3; ++i) {
    double prob = 1.0 / (1.0 + std::exp(-f.at(i)));
    CHECK(pred.mean.at(i) == doctest::Approx(prob).epsilon(1e-14));
    CHECK(pred.var.at(i) == pred.mean.at(i) * (1.0 - pred.mean.at(i)));
    CHECK(pred.var.at(i) >= 0.0);
  }
}

TEST_CASE("variance of the predictive mean estimate shrinks roughly like 1/S") {
  BNNConfig cfg = make_cfg({1, 1}, Act::relu, 1.0, 0.01);
  Rng seeds(425);
  Tensor xs = Tensor::from({1, 1}, {1.0});
  auto study = [&](std::size_t s) {
    std::vector<double> means;
    for (int rep = 0; rep < 40; ++rep) {
      Rng draw(seeds.next_seed());
      auto sampler = [&]() {
        std::vector<double> w = draw.normals(2);
        return std::vector<Tensor>{Tensor::from({2, 1}, w)};
      };
      means.push_back(bnn_predict(cfg, sampler, xs, s).mean.at(0));
    }
    double mu = 0.0;
    for (double v : means) mu += v;
    mu /= means.size();
    double var = 0.0;
    for (double v : means) var += (v - mu) * (v - mu);
    return var / (means.size() - 1);
  };
  double v_small = study(10), v_big = study(160);
  CHECK(v_small / v_big > 4.0);   // expect about 16
  CHECK(v_small / v_big < 64.0);
}
