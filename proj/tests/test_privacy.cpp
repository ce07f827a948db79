#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "sdelab/error.hpp"
#include "sdelab/privacy.hpp"
#include "sdelab/rng.hpp"
#include "support/oracles.hpp"

using namespace sdelab;

TEST_CASE("gaussian calibration closed form and tail oracle") {
  const double eps = 1.0 - 1e-12;
  const double sigma = calibrate_sigma_gaussian(1.0, eps, 0.05);
  CHECK(sigma == doctest::Approx(std::sqrt(2.0 * std::log(25.0))).epsilon(1e-12));
  CHECK(sigma == doctest::Approx(2.537272).epsilon(1e-6));

  // Numerical check that the calibrated mechanism honors the bound: the
  // privacy loss is N(d^2/2s^2, d^2/s^2); Pr[loss > eps] must be <= delta.
  const double mean = 1.0 / (2.0 * sigma * sigma);
  const double sd = 1.0 / sigma;
  const double tail = 1.0 - oracles::normal_cdf((eps - mean) / sd);
  CHECK(tail <= 0.05);
}

TEST_CASE("gaussian calibration edge cases") {
  CHECK(calibrate_sigma_gaussian(0.0, 0.5, 0.05) == 0.0);
  const double s1 = calibrate_sigma_gaussian(1.0, 0.5, 1e-5);
  const double s2 = calibrate_sigma_gaussian(2.0, 0.5, 1e-5);
  CHECK(s2 == doctest::Approx(2.0 * s1).epsilon(1e-15));
  CHECK_THROWS_AS(calibrate_sigma_gaussian(1.0, 1.5, 0.05), ConfigError);
  CHECK_THROWS_AS(calibrate_sigma_gaussian(1.0, 0.0, 0.05), ConfigError);
  CHECK_THROWS_AS(calibrate_sigma_gaussian(1.0, 0.5, 1.3), ConfigError);
  CHECK_THROWS_AS(calibrate_sigma_gaussian(-1.0, 0.5, 0.05), ConfigError);
}

TEST_CASE("sde calibration equals gaussian calibration with S = T*L") {
  const double sigma = calibrate_sigma_sde(1.0, 1.0, 0.5, 1e-5);
  CHECK(sigma == doctest::Approx(9.689608).epsilon(1e-6));
  CHECK(std::log(1.25 / 1e-5) == doctest::Approx(11.736069).epsilon(1e-6));
  for (double T : {0.125, 0.5, 1.0, 2.0})
    for (double L : {0.3, 1.0, 4.0})
      CHECK(calibrate_sigma_sde(T, L, 0.7, 1e-3) ==
            calibrate_sigma_gaussian(T * L, 0.7, 1e-3));
  // Vanishing interval needs vanishing noise.
  CHECK(calibrate_sigma_sde(1e-12, 1.0, 0.5, 1e-5) < 1e-10);
  // ln(1.25/1.25) = 0: boundary gives zero noise.
  CHECK(calibrate_sigma_gaussian(1.0, 0.5, 1.25) == 0.0);
}

TEST_CASE("training calibration closed form") {
  const TrainingCalibration c = calibrate_sigma_training(100, 1.0, 1.0, 8.0, 1e-5, 1e-5);
  CHECK(c.sigma == doctest::Approx(58.1196).epsilon(1e-5));
  CHECK(c.sigma ==
        doctest::Approx(4.0 * std::sqrt(100.0 * std::log(1.25e5) * std::log(1e5)) / 8.0)
            .epsilon(1e-12));
  CHECK(c.delta_total == doctest::Approx(100 * 1e-5 + 1e-5).epsilon(1e-15));
  CHECK_FALSE(c.vacuous);

  // sqrt(K) scaling: K=4 doubles the K=1 value exactly.
  const double s1 = calibrate_sigma_training(1, 1.0, 1.0, 0.5, 1e-5, 1e-6).sigma;
  const double s4 = calibrate_sigma_training(4, 1.0, 1.0, 0.5, 1e-5, 1e-6).sigma;
  CHECK(s4 == doctest::Approx(2.0 * s1).epsilon(1e-15));
  CHECK(s1 == doctest::Approx(4.0 * std::sqrt(std::log(1.25 / 1e-5) * std::log(1e6)) /
                              0.5).epsilon(1e-12));

  // K*delta + delta' >= 1 makes the guarantee vacuous.
  CHECK(calibrate_sigma_training(1000000, 1.0, 1.0, 0.5, 1e-5, 1e-5).vacuous);
}

TEST_CASE("strong composition worked value and limits") {
  const ComposedBudget b = account_strong_composition(1, 0.1, 1e-6, 1e-6);
  CHECK(b.epsilon ==
        doctest::Approx(0.1 * std::sqrt(2.0 * std::log(1e6)) + 0.1 * (std::exp(0.1) - 1.0))
            .epsilon(1e-12));
  CHECK(b.epsilon == doctest::Approx(0.536170).epsilon(1e-5));
  CHECK(b.delta == doctest::Approx(2e-6).epsilon(1e-12));

  double prev = 0.0;
  for (int k = 1; k <= 4096; k *= 2) {
    const double eps = account_strong_composition(k, 0.1, 1e-6, 1e-6).epsilon;
    CHECK(eps > prev);
    prev = eps;
  }
  CHECK(account_strong_composition(1, 1e-9, 1e-6, 1e-6).epsilon < 1e-5);
  CHECK_THROWS_AS(account_strong_composition(0, 0.1, 1e-6, 1e-6), ConfigError);
}

TEST_CASE("rdp conversion matches the dense grid oracle") {
  const double eps = account_rdp(1, 1.0, 1e-5);
  const double oracle = oracles::rdp_epsilon_dense(1, 1.0, 1e-5);
  CHECK(oracle == doctest::Approx(5.298526).epsilon(1e-5));
  CHECK(eps == doctest::Approx(5.2985).epsilon(1e-3));
  CHECK(eps >= oracle);  // the coarse grid can only be looser

  for (int k : {1, 16, 256})
    for (double s : {0.8, 2.0, 8.0}) {
      const double grid = account_rdp(k, s, 1e-5);
      const double dense = oracles::rdp_epsilon_dense(k, s, 1e-5);
      CHECK(grid >= dense * (1.0 - 1e-12));
      // The fixed 0.25-spaced grid resolves the optimum well once the
      // optimal alpha is a few grid steps above 1; nearer the boundary it
      // is looser by design (fixed grid over marginal tightness).
      const double alpha_star = 1.0 + s * std::sqrt(2.0 * std::log(1e5) / k);
      CHECK(grid == doctest::Approx(dense).epsilon(alpha_star >= 4.0 ? 1e-3 : 0.02));
    }
}

TEST_CASE("rdp composes sublinearly in K") {
  for (double s : {1.0, 3.0}) {
    const double e1 = account_rdp(10, s, 1e-5);
    const double e4 = account_rdp(40, s, 1e-5);
    CHECK(e4 < 4.0 * e1);
    CHECK(e4 > e1);
  }
}

TEST_CASE("rdp epsilon vanishes as sigma_rel grows") {
  CHECK(account_rdp(1, 1e9, 1e-5) < 0.03);
  CHECK(account_rdp(1, 1e9, 1e-5) ==
        doctest::Approx(std::log(1e5) / 511.0).epsilon(1e-3));
}

TEST_CASE("gdp bisection matches the normal-cdf oracle") {
  // delta(0) at mu=1 is Phi(0.5) - Phi(-0.5).
  const double delta0 = oracles::normal_cdf(0.5) - oracles::normal_cdf(-0.5);
  CHECK(delta0 == doctest::Approx(0.382925).epsilon(1e-6));
  // Asking for exactly delta(0) or more yields epsilon 0.
  CHECK(account_gdp(1, 1.0, 0.383) == 0.0);
  // Below delta(0) the bisection must invert delta(eps) to high accuracy.
  for (double delta : {0.1, 0.01, 1e-5}) {
    const double eps = account_gdp(1, 1.0, delta);
    const double back = oracles::normal_cdf(-eps + 0.5) -
                        std::exp(eps) * oracles::normal_cdf(-eps - 0.5);
    CHECK(back == doctest::Approx(delta).epsilon(1e-6));
  }
  CHECK(account_gdp(1, 1e9, 0.5) == 0.0);  // mu -> 0 gives perfect privacy
}

TEST_CASE("gdp delta is strictly decreasing in epsilon (bisection well-posed)") {
  const double mu = 1.7;
  auto delta_of = [mu](double eps) {
    return oracles::normal_cdf(-eps / mu + mu / 2.0) -
           std::exp(eps) * oracles::normal_cdf(-eps / mu - mu / 2.0);
  };
  double prev = delta_of(0.0);
  for (double eps = 0.25; eps <= 6.0; eps += 0.25) {
    const double d = delta_of(eps);
    CHECK(d < prev);
    prev = d;
  }
}

TEST_CASE("all accountants are monotone on a parameter grid") {
  auto eps_of = [](AccountantMethod m, int k, double s, double delta) {
    switch (m) {
      case AccountantMethod::strong_composition: {
        const double es = std::sqrt(2.0 * std::log(1.25 / delta)) / s;
        return account_strong_composition(k, es, delta, 1e-6).epsilon;
      }
      case AccountantMethod::rdp:
        return account_rdp(k, s, delta);
      case AccountantMethod::gdp:
        return account_gdp(k, s, delta);
    }
    return 0.0;
  };
  for (AccountantMethod m : {AccountantMethod::strong_composition, AccountantMethod::rdp,
                             AccountantMethod::gdp}) {
    for (double s : {0.5, 1.0, 2.0, 4.0})
      for (double delta : {1e-3, 1e-5}) {
        double prev = 0.0;
        for (int k : {1, 2, 4, 8, 32, 128}) {
          const double e = eps_of(m, k, s, delta);
          CHECK(e >= prev);
          prev = e;
        }
      }
    for (int k : {1, 16})
      for (double delta : {1e-3, 1e-5}) {
        double prev = 1e100;
        for (double s : {0.5, 1.0, 2.0, 4.0, 8.0}) {
          const double e = eps_of(m, k, s, delta);
          CHECK(e <= prev);
          prev = e;
        }
      }
    for (int k : {1, 16})
      for (double s : {1.0, 4.0}) {
        double prev = 1e100;
        for (double delta : {1e-7, 1e-5, 1e-3, 1e-1}) {
          const double e = eps_of(m, k, s, delta);
          CHECK(e <= prev);
          prev = e;
        }
      }
  }
}

TEST_CASE("accountant state ledger is non-decreasing and tracks deltas") {
  AccountantState acct(AccountantMethod::strong_composition, 20.0, 1e-5, 1e-6);
  CHECK(acct.epsilon() == 0.0);
  acct.step(10);
  CHECK(acct.steps() == 10);
  const auto& ledger = acct.ledger();
  REQUIRE(ledger.size() == 10);
  for (std::size_t i = 1; i < ledger.size(); ++i) CHECK(ledger[i] >= ledger[i - 1]);
  CHECK(acct.delta_total() == doctest::Approx(10 * 1e-5 + 1e-6).epsilon(1e-12));

  AccountantState rdp(AccountantMethod::rdp, 20.0, 1e-5, 1e-6);
  rdp.step(4);
  CHECK(rdp.epsilon() == doctest::Approx(account_rdp(4, 20.0, 1e-5)).epsilon(1e-12));
  CHECK(rdp.delta_total() == 1e-5);
}

TEST_CASE("corollary consistency: inverted per-step budget composes within eps'") {
  for (int k : {1, 10, 100, 1000})
    for (double delta : {1e-3, 1e-5, 1e-7})
      for (double delta_prime : {1e-3, 1e-5, 1e-7})
        for (double eps_prime : {0.1, 0.5, 0.9}) {
          const double TL = 1.0;
          const double sigma =
              calibrate_sigma_training(k, 1.0, TL, eps_prime, delta, delta_prime).sigma;
          // Per-step epsilon implied by inverting the gaussian calibration.
          const double eps_step = std::sqrt(2.0 * std::log(1.25 / delta)) * TL / sigma;
          const ComposedBudget total =
              account_strong_composition(k, eps_step, delta, delta_prime);
          INFO("k ", k, " delta ", delta, " d' ", delta_prime, " e' ", eps_prime);
          CHECK(total.epsilon <= eps_prime);
        }
}

TEST_CASE("lipschitz bound: diagonal, identity, and SVD oracle") {
  DriftSpec d;
  d.time_conditioning = false;

  CHECK(estimate_lipschitz(d, {Tensor::matrix(2, 2, {3, 0, 0, 1})}) ==
        doctest::Approx(3.0).epsilon(1e-9));
  CHECK(estimate_lipschitz(d, {Tensor::matrix(2, 2, {1, 0, 0, 1}),
                               Tensor::matrix(2, 2, {1, 0, 0, 1})}) ==
        doctest::Approx(1.0).epsilon(1e-9));

  Rng rng(3);
  std::vector<double> m(25);
  for (double& v : m) v = rng.normal();
  const double est = estimate_lipschitz(d, {Tensor::matrix(5, 5, m)});
  const double svd = oracles::largest_singular_value(m, 5, 5);
  CHECK(est == doctest::Approx(svd).epsilon(1e-6));
}

TEST_CASE("lipschitz bound excludes the time-conditioning row") {
  DriftSpec d;
  d.time_conditioning = true;
  // 3x2: last row is the t feature with huge weights; state rows are identity.
  const Tensor w = Tensor::matrix(3, 2, {1, 0, 0, 1, 100, 100});
  CHECK(estimate_lipschitz(d, {w}) == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("block lipschitz multiplies layer norms") {
  ModelSpec spec;
  spec.input_dim = 2;
  spec.state_dim = 2;
  spec.n_classes = 2;
  DriftSpec d;
  d.hidden = {2};
  spec.blocks = {BlockSpec{BlockKind::nsde, d}};
  spec.solver.method = SolverMethod::euler_maruyama;
  spec.solver.steps_per_unit = 4;
  Parameters p = build_model(spec);
  const auto layout = param_layout(spec);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].block != 0 || layout[i].shape.size() != 2) continue;
    p.values[i] = Tensor::matrix(2, 2, {2, 0, 0, 2});
  }
  CHECK(estimate_block_lipschitz(spec, p, 0) == doctest::Approx(4.0).epsilon(1e-8));
}

TEST_CASE("privacy loss audit: moments match the loss distribution") {
  const AuditResult r = privacy_loss_audit(2.0, 1.0, 0.5, 0.05, 1000000);
  // loss ~ N(1/8, 1/4): check within 5 standard errors.
  const double se_mean = 0.5 / std::sqrt(1e6);
  const double se_var = 0.25 * std::sqrt(2.0 / 1e6);
  CHECK(std::abs(r.loss_mean - 0.125) <= 5.0 * se_mean);
  CHECK(std::abs(r.loss_variance - 0.25) <= 5.0 * se_var);
}

TEST_CASE("audit passes at the calibrated sigma and fails at half") {
  const double eps = 0.2, delta = 0.05;
  const double sigma = calibrate_sigma_gaussian(1.0, eps, delta);
  CHECK(privacy_loss_audit(sigma, 1.0, eps, delta, 200000).pass);

  // Analytic tail at half the noise: far above delta.
  const double half = sigma / 2.0;
  const double mean = 1.0 / (2.0 * half * half);
  const double sd = 1.0 / half;
  const double tail = 1.0 - oracles::normal_cdf((eps - mean) / sd);
  CHECK(tail > delta);
  CHECK_FALSE(privacy_loss_audit(half, 1.0, eps, delta, 200000).pass);
}

TEST_CASE("audit soundness across the (eps, delta) grid") {
  for (double eps : {0.2, 0.5, 0.9})
    for (double delta : {1e-1, 1e-2}) {
      const double sigma = calibrate_sigma_gaussian(1.0, eps, delta);
      CHECK(privacy_loss_audit(sigma, 1.0, eps, delta, 100000).pass);
    }
  bool any_failure = false;
  for (double eps : {0.2, 0.5, 0.9})
    for (double delta : {1e-1, 1e-2}) {
      const double sigma = 0.5 * calibrate_sigma_gaussian(1.0, eps, delta);
      any_failure |= !privacy_loss_audit(sigma, 1.0, eps, delta, 100000).pass;
    }
  CHECK(any_failure);
}
