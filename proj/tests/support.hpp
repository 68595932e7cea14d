// Shared helpers for the unit suites: finite-difference gradient checking and
// small random-instance generators.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "abnn/rng.hpp"
#include "abnn/tensor.hpp"
#include "doctest.h"

namespace testsupport {

inline std::vector<double> rand_vec(abnn::Rng& rng, std::size_t n, double lo = -1.0,
                                    double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Values bounded away from zero (for relu kinks, denominators).
inline std::vector<double> rand_vec_away(abnn::Rng& rng, std::size_t n, double min_mag = 0.2,
                                         double max_mag = 1.5) {
  std::vector<double> v(n);
  for (auto& x : v) {
    double m = rng.uniform(min_mag, max_mag);
    x = rng.bernoulli(0.5) ? m : -m;
  }
  return v;
}

inline std::vector<double> rand_spd(abnn::Rng& rng, std::size_t n, double ridge = 1.0) {
  std::vector<double> m = rand_vec(rng, n * n);
  std::vector<double> a(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += m[i * n + k] * m[j * n + k];
      a[i * n + j] = acc + (i == j ? ridge : 0.0);
    }
  return a;
}

// In-place Gauss-Jordan inverse; independent of the library's linear algebra.
inline std::vector<double> dense_inverse(std::vector<double> a, std::size_t n) {
  std::vector<double> inv(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) inv[i * n + i] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r * n + c]) > std::abs(a[piv * n + c])) piv = r;
    if (piv != c)
      for (std::size_t j = 0; j < n; ++j) {
        std::swap(a[c * n + j], a[piv * n + j]);
        std::swap(inv[c * n + j], inv[piv * n + j]);
      }
    double d = a[c * n + c];
    for (std::size_t j = 0; j < n; ++j) {
      a[c * n + j] /= d;
      inv[c * n + j] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      double f = a[r * n + c];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        a[r * n + j] -= f * a[c * n + j];
        inv[r * n + j] -= f * inv[c * n + j];
      }
    }
  }
  return inv;
}

struct ParamSpec {
  abnn::Shape shape;
  std::vector<double> init;
  // Perturb (i,j) and (j,i) together and compare the summed adjoint; for ops
  // that require a symmetric input (cholesky, solve_psd).
  bool symmetric_pairs = false;
};

using LossFn = std::function<abnn::Tensor(const std::vector<abnn::Tensor>&)>;

// Central finite differences vs the recorded adjoints.
inline void check_gradients(const std::vector<ParamSpec>& specs, const LossFn& f,
                            double h = 1e-5, double rtol = 1e-4, double atol = 1e-6) {
  using abnn::Tape;
  using abnn::Tensor;

  auto eval = [&](const std::vector<std::vector<double>>& vals) {
    std::vector<Tensor> ps;
    ps.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i)
      ps.push_back(Tensor::from(specs[i].shape, vals[i]));
    return f(ps).scalar_value();
  };

  std::vector<Tensor> ps;
  std::vector<std::vector<double>> base;
  for (const auto& s : specs) {
    ps.push_back(Tensor::param(s.shape, s.init));
    base.push_back(s.init);
  }
  std::vector<std::vector<double>> grads;
  {
    Tape tape;
    Tensor loss = f(ps);
    tape.backward(loss);
    for (auto& p : ps) grads.push_back(p.grad_or_zeros());
  }

  auto agree = [&](double fd, double an) {
    return std::abs(fd - an) <= atol + rtol * std::max(std::abs(fd), std::abs(an));
  };

  for (std::size_t pi = 0; pi < specs.size(); ++pi) {
    const auto& s = specs[pi];
    if (!s.symmetric_pairs) {
      for (std::size_t i = 0; i < base[pi].size(); ++i) {
        auto vp = base, vm = base;
        vp[pi][i] += h;
        vm[pi][i] -= h;
        double fd = (eval(vp) - eval(vm)) / (2.0 * h);
        double an = grads[pi][i];
        CAPTURE(pi);
        CAPTURE(i);
        CAPTURE(fd);
        CAPTURE(an);
        CHECK(agree(fd, an));
      }
    } else {
      std::size_t n = s.shape[0];
      REQUIRE(s.shape.size() == 2);
      REQUIRE(s.shape[1] == n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
          auto vp = base, vm = base;
          vp[pi][i * n + j] += h;
          vm[pi][i * n + j] -= h;
          if (i != j) {
            vp[pi][j * n + i] += h;
            vm[pi][j * n + i] -= h;
          }
          double fd = (eval(vp) - eval(vm)) / (2.0 * h);
          double an = grads[pi][i * n + j] + (i == j ? 0.0 : grads[pi][j * n + i]);
          CAPTURE(pi);
          CAPTURE(i);
          CAPTURE(j);
          CAPTURE(fd);
          CAPTURE(an);
          CHECK(agree(fd, an));
        }
    }
  }
}

// Fixed random linear functional: reduces a non-scalar op output to a scalar
// loss while exposing every output component.
inline abnn::Tensor weigh(const abnn::Tensor& t, const std::vector<double>& w) {
  return abnn::sum(abnn::mul(t, abnn::Tensor::from(t.shape(), w)));
}

}  // namespace testsupport
