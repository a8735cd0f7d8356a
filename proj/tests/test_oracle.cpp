// SPDX-License-Identifier: Apache-2.0
//
// Ground-truth module checks: optimal noise predictors against a
// finite-difference score, closed-form KL against Monte Carlo, the quadratic
// tilt against quadrature and hand algebra, and the fidelity surrogates
// against brute force.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <vector>

#include "dco/oracle.hpp"
#include "dco/rng.hpp"
#include "dco/schedule.hpp"
#include "testutil.hpp"

using namespace dco;

namespace {

Eigen::MatrixXd random_spd(Rng& rng, int d, double jitter = 0.3) {
  Eigen::MatrixXd m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = rng.normal();
  return m * m.transpose() + jitter * Eigen::MatrixXd::Identity(d, d);
}

// Independent log-density of the time-t marginal of a mixture world:
// q_t(z) = sum_k w_k N(z; alpha mu_k, alpha^2 Sigma_k + sigma^2 I).
double noised_log_density(const std::vector<GaussianComponent>& comps,
                          const Eigen::VectorXd& z, double a, double s) {
  int d = static_cast<int>(z.size());
  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
  double best = -1e300;
  std::vector<double> terms;
  for (const auto& g : comps) {
    Eigen::MatrixXd m = a * a * g.cov + s * s * eye;
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    Eigen::VectorXd diff = z - a * g.mean;
    double log_det =
        2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    double term = std::log(g.weight) -
                  0.5 * (d * std::log(2.0 * std::numbers::pi) + log_det) -
                  0.5 * diff.dot(llt.solve(diff));
    terms.push_back(term);
    best = std::max(best, term);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - best);
  return best + std::log(acc);
}

GaussianConceptWorld two_condition_world() {
  GaussianConceptWorld world(2, 99);
  Eigen::MatrixXd cov_a(2, 2), cov_b1(2, 2), cov_b2(2, 2);
  cov_a << 0.5, 0.1, 0.1, 0.4;
  cov_b1 << 0.3, 0.0, 0.0, 0.6;
  cov_b2 << 0.2, -0.05, -0.05, 0.2;
  world.add_condition("subject", {{1.0, to_eigen({2.0, -1.0}), cov_a}});
  world.add_condition("style", {{0.4, to_eigen({-3.0, 2.0}), cov_b1},
                                {0.6, to_eigen({-2.0, 3.5}), cov_b2}});
  return world;
}

}  // namespace

TEST_CASE("optimal predictor closed forms") {
  NoiseSchedule sched;

  SUBCASE("unit-variance one-dimensional data gives sigma_t times z") {
    GaussianConceptWorld world(1, 1);
    world.add_condition(
        "c", {{1.0, to_eigen({0.0}), Eigen::MatrixXd::Identity(1, 1)}});
    for (double t : {0.1, 0.37, 0.5, 0.9}) {
      for (double z : {-1.5, 0.25, 2.0}) {
        auto eps = optimal_eps(world, {z}, 0, t, sched);
        CHECK(eps[0] == doctest::Approx(sched.sigma(t) * z).epsilon(1e-12));
      }
    }
  }

  SUBCASE("at the scaled mean the prediction vanishes") {
    auto world = two_condition_world();
    double t = 0.42;
    const auto& g = world.components(world.require("subject"))[0];
    std::vector<double> z = from_eigen(sched.alpha(t) * g.mean);
    auto eps = optimal_eps(world, z, 0, t, sched);
    CHECK(std::abs(eps[0]) < 1e-12);
    CHECK(std::abs(eps[1]) < 1e-12);
  }

  SUBCASE("matches the finite-difference score of the noised density") {
    auto world = two_condition_world();
    Rng rng(7);
    for (int cond = 0; cond < 2; ++cond) {
      const auto& comps = world.components(cond);
      for (double t : {0.15, 0.5, 0.85}) {
        double a = sched.alpha(t), s = sched.sigma(t);
        Eigen::VectorXd z(2);
        z << rng.normal() * 2.0, rng.normal() * 2.0;
        auto eps = optimal_eps(world, from_eigen(z), cond, t, sched);
        double h = 1e-5;
        for (int i = 0; i < 2; ++i) {
          Eigen::VectorXd up = z, down = z;
          up[i] += h;
          down[i] -= h;
          double score = (noised_log_density(comps, up, a, s) -
                          noised_log_density(comps, down, a, s)) /
                         (2.0 * h);
          CHECK(eps[static_cast<std::size_t>(i)] ==
                doctest::Approx(-s * score).epsilon(1e-6));
        }
      }
    }
  }

  SUBCASE("linear predictor helpers agree with the mixture-free formula") {
    Rng rng(11);
    Eigen::VectorXd mean = to_eigen({0.7, -0.4});
    Eigen::MatrixXd cov = random_spd(rng, 2);
    double t = 0.33;
    NoiseSchedule sch;
    LinearEps lin = optimal_linear_eps(mean, cov, t, sch);

    GaussianConceptWorld world(2, 0);
    world.add_condition("c", {{1.0, mean, cov}});
    for (int rep = 0; rep < 5; ++rep) {
      std::vector<double> z = {rng.normal(), rng.normal()};
      auto a = apply_linear_eps(lin, z);
      auto b = optimal_eps(world, z, 0, t, sch);
      CHECK(a[0] == doctest::Approx(b[0]).epsilon(1e-12));
      CHECK(a[1] == doctest::Approx(b[1]).epsilon(1e-12));
    }
  }

  SUBCASE("expected squared error closed form matches Monte Carlo") {
    Rng rng(13);
    Eigen::VectorXd mean = to_eigen({0.5, 1.0});
    Eigen::MatrixXd cov = random_spd(rng, 2);
    double t = 0.6;
    NoiseSchedule sch;
    double a = sch.alpha(t), s = sch.sigma(t);
    LinearEps lin = optimal_linear_eps(mean, cov, t, sch);
    std::vector<double> x = {1.2, -0.3};

    double closed = expected_eps_error_sq(lin, x, a, s);
    int n = 200000;
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n; ++i) {
      std::vector<double> eps = {rng.normal(), rng.normal()};
      std::vector<double> z = {a * x[0] + s * eps[0], a * x[1] + s * eps[1]};
      auto pred = apply_linear_eps(lin, z);
      double e = 0.0;
      for (int j = 0; j < 2; ++j) {
        double d = pred[static_cast<std::size_t>(j)] -
                   eps[static_cast<std::size_t>(j)];
        e += d * d;
      }
      acc += e;
      acc2 += e * e;
    }
    double mc = acc / n;
    double se = std::sqrt((acc2 / n - mc * mc) / n);
    CHECK(std::abs(closed - mc) < 3.0 * se);
  }
}

TEST_CASE("gaussian KL closed form") {
  SUBCASE("identical arguments give zero") {
    Rng rng(3);
    Eigen::VectorXd m = to_eigen({0.3, -1.2, 0.9});
    Eigen::MatrixXd s = random_spd(rng, 3);
    CHECK(gaussian_kl(m, s, m, s) == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("unit shift in one dimension gives one half") {
    Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(1, 1);
    CHECK(gaussian_kl(to_eigen({0.0}), eye, to_eigen({1.0}), eye) ==
          doctest::Approx(0.5).epsilon(1e-12));
  }

  SUBCASE("matches a Monte-Carlo log-ratio over a million draws") {
    Rng rng(21);
    Eigen::VectorXd m1 = to_eigen({0.4, -0.2, 0.8});
    Eigen::VectorXd m2 = to_eigen({-0.1, 0.3, 0.5});
    Eigen::MatrixXd s1 = random_spd(rng, 3);
    Eigen::MatrixXd s2 = random_spd(rng, 3);
    double closed = gaussian_kl(m1, s1, m2, s2);
    CHECK(closed >= 0.0);

    Eigen::LLT<Eigen::MatrixXd> llt1(s1), llt2(s2);
    Eigen::MatrixXd chol1 = llt1.matrixL();
    double logdet1 =
        2.0 * llt1.matrixL().toDenseMatrix().diagonal().array().log().sum();
    double logdet2 =
        2.0 * llt2.matrixL().toDenseMatrix().diagonal().array().log().sum();

    int n = 1000000;
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd x = m1 + chol1 * to_eigen(rng.normal_vec(3));
      Eigen::VectorXd d1 = x - m1, d2 = x - m2;
      double log_ratio = -0.5 * d1.dot(llt1.solve(d1)) - 0.5 * logdet1 +
                         0.5 * d2.dot(llt2.solve(d2)) + 0.5 * logdet2;
      acc += log_ratio;
      acc2 += log_ratio * log_ratio;
    }
    double mc = acc / n;
    double se = std::sqrt((acc2 / n - mc * mc) / n);
    CHECK(std::abs(closed - mc) < 3.0 * se);
  }

  SUBCASE("rejects non-positive-definite input") {
    Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 2);
    bad(0, 0) = 1.0;
    bad(1, 1) = -1.0;
    Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);
    Eigen::VectorXd m = to_eigen({0.0, 0.0});
    CHECK_THROWS_WITH_AS(gaussian_kl(m, bad, m, eye),
                         doctest::Contains("positive-definite"),
                         std::runtime_error);
  }
}

TEST_CASE("quadratic tilt of a Gaussian") {
  SUBCASE("zero reward leaves the base untouched") {
    Rng rng(5);
    GaussianDist base{to_eigen({0.5, -0.3}), random_spd(rng, 2)};
    ConsistencyFunction f{Eigen::MatrixXd::Zero(2, 2), to_eigen({0.0, 0.0}),
                          0.0};
    auto out = tilted_distribution(base, f, 2.0);
    CHECK((out.dist.mean - base.mean).norm() < 1e-12);
    CHECK((out.dist.cov - base.cov).norm() < 1e-10);
    CHECK(out.log_z == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("huge temperature recovers the base") {
    Rng rng(6);
    GaussianDist base{to_eigen({1.0, 2.0}), random_spd(rng, 2)};
    ConsistencyFunction f;
    f.q = random_spd(rng, 2);
    f.b = to_eigen({0.7, -0.4});
    f.k = 3.0;
    auto out = tilted_distribution(base, f, 1e9);
    CHECK((out.dist.mean - base.mean).norm() < 1e-6);
    CHECK((out.dist.cov - base.cov).norm() < 1e-6);
  }

  SUBCASE("standard normal tilted by minus half x squared halves the variance") {
    GaussianDist base{to_eigen({0.0}), Eigen::MatrixXd::Identity(1, 1)};
    ConsistencyFunction f;
    f.q = -0.5 * Eigen::MatrixXd::Identity(1, 1);
    f.b = to_eigen({0.0});
    f.k = 0.0;
    auto out = tilted_distribution(base, f, 1.0);
    CHECK(out.dist.mean[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(out.dist.cov(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.log_z == doctest::Approx(-0.5 * std::log(2.0)).epsilon(1e-12));

    // Trapezoid quadrature of E_base[exp(f)] as an independent normalizer.
    int n = 40001;
    double lo = -12.0, hi = 12.0, step = (hi - lo) / (n - 1);
    double z_quad = 0.0;
    for (int i = 0; i < n; ++i) {
      double x = lo + i * step;
      double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      z_quad += w * std::exp(-0.5 * x * x) /
                std::sqrt(2.0 * std::numbers::pi) * std::exp(-0.5 * x * x);
    }
    z_quad *= step;
    CHECK(out.log_z == doctest::Approx(std::log(z_quad)).epsilon(1e-6));
  }

  SUBCASE("normalizer matches quadrature for a full quadratic in one dimension") {
    GaussianDist base{to_eigen({0.4}), 0.8 * Eigen::MatrixXd::Identity(1, 1)};
    ConsistencyFunction f;
    f.q = -0.3 * Eigen::MatrixXd::Identity(1, 1);
    f.b = to_eigen({0.5});
    f.k = -0.2;
    double beta = 1.7;
    auto out = tilted_distribution(base, f, beta);

    int n = 80001;
    double lo = -16.0, hi = 16.0, step = (hi - lo) / (n - 1);
    double z_quad = 0.0, m_quad = 0.0, v_quad = 0.0;
    for (int i = 0; i < n; ++i) {
      double x = lo + i * step;
      double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      double base_pdf = std::exp(-0.5 * (x - 0.4) * (x - 0.4) / 0.8) /
                        std::sqrt(2.0 * std::numbers::pi * 0.8);
      double val = f.eval(to_eigen({x}));
      z_quad += w * base_pdf * std::exp(val / beta);
    }
    z_quad *= step;
    for (int i = 0; i < n; ++i) {
      double x = lo + i * step;
      double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      double base_pdf = std::exp(-0.5 * (x - 0.4) * (x - 0.4) / 0.8) /
                        std::sqrt(2.0 * std::numbers::pi * 0.8);
      double val = f.eval(to_eigen({x}));
      m_quad += w * x * base_pdf * std::exp(val / beta) / z_quad;
    }
    m_quad *= step;
    for (int i = 0; i < n; ++i) {
      double x = lo + i * step;
      double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      double base_pdf = std::exp(-0.5 * (x - 0.4) * (x - 0.4) / 0.8) /
                        std::sqrt(2.0 * std::numbers::pi * 0.8);
      double val = f.eval(to_eigen({x}));
      v_quad += w * (x - m_quad) * (x - m_quad) * base_pdf *
                std::exp(val / beta) / z_quad;
    }
    v_quad *= step;
    CHECK(out.log_z == doctest::Approx(std::log(z_quad)).epsilon(1e-6));
    CHECK(out.dist.mean[0] == doctest::Approx(m_quad).epsilon(1e-6));
    CHECK(out.dist.cov(0, 0) == doctest::Approx(v_quad).epsilon(1e-6));
  }

  SUBCASE("tilt that breaks positive-definiteness is rejected") {
    GaussianDist base{to_eigen({0.0}), Eigen::MatrixXd::Identity(1, 1)};
    ConsistencyFunction f;
    f.q = Eigen::MatrixXd::Identity(1, 1);
    f.b = to_eigen({0.0});
    f.k = 0.0;
    CHECK_THROWS_WITH_AS(tilted_distribution(base, f, 1.0),
                         doctest::Contains("positive-definiteness"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(tilted_distribution(base, f, 0.0),
                         doctest::Contains("beta"), std::runtime_error);
  }

  SUBCASE("KL to the base equals the reward identity at the optimum") {
    // For the tilted optimum p* of max E_p[f] - beta KL(p || base):
    // KL(p* || base) = E_p*[f]/beta - log Z, exactly.
    Rng rng(17);
    for (int rep = 0; rep < 4; ++rep) {
      GaussianDist base{to_eigen({rng.normal(), rng.normal(), rng.normal()}),
                        random_spd(rng, 3)};
      ConsistencyFunction f;
      f.q = -random_spd(rng, 3, 0.1);
      f.b = to_eigen({rng.normal(), rng.normal(), rng.normal()});
      f.k = rng.normal();
      double beta = 0.5 + rng.uniform();
      auto out = tilted_distribution(base, f, beta);
      double kl = gaussian_kl(out.dist.mean, out.dist.cov, base.mean, base.cov);
      double identity = expected_value(f, out.dist) / beta - out.log_z;
      CHECK(kl == doctest::Approx(identity).epsilon(1e-8));
    }
  }

  SUBCASE("expected quadratic value matches Monte Carlo") {
    Rng rng(19);
    GaussianDist g{to_eigen({0.2, -0.6}), random_spd(rng, 2)};
    ConsistencyFunction f;
    f.q = random_spd(rng, 2) - 1.5 * Eigen::MatrixXd::Identity(2, 2);
    f.b = to_eigen({0.3, 1.1});
    f.k = -0.7;
    double closed = expected_value(f, g);

    Eigen::LLT<Eigen::MatrixXd> llt(g.cov);
    Eigen::MatrixXd chol = llt.matrixL();
    int n = 400000;
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd x = g.mean + chol * to_eigen(rng.normal_vec(2));
      double v = f.eval(x);
      acc += v;
      acc2 += v * v;
    }
    double mc = acc / n;
    double se = std::sqrt((acc2 / n - mc * mc) / n);
    CHECK(std::abs(closed - mc) < 3.0 * se);
  }
}

TEST_CASE("deviation in noise-error form matches marginal KL differences") {
  // Both predictors are exact optimal predictors of Gaussians, so each
  // induces a diffusion whose time-t marginal is the noised Gaussian and the
  // path divergence collapses to the marginal one. The time derivative of
  // the marginal KL difference must then equal the half lambda-slope times
  // the noise-error difference, and the integral over a band telescopes.
  NoiseSchedule sched;
  Eigen::VectorXd m_theta = to_eigen({0.6, -0.2});
  Eigen::VectorXd m_phi = to_eigen({-0.4, 0.5});
  Rng spd_rng(31);
  Eigen::MatrixXd s_theta = random_spd(spd_rng, 2);
  Eigen::MatrixXd s_phi = random_spd(spd_rng, 2);
  std::vector<double> x = {0.9, -0.7};
  Eigen::VectorXd xv = to_eigen(x);
  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);

  auto kl_diff_at = [&](double t) {
    double a = sched.alpha(t), s = sched.sigma(t);
    Eigen::VectorXd q_mean = a * xv;
    Eigen::MatrixXd q_cov = s * s * eye;
    double to_phi = gaussian_kl(q_mean, q_cov, a * m_phi,
                                a * a * s_phi + s * s * eye);
    double to_theta = gaussian_kl(q_mean, q_cov, a * m_theta,
                                  a * a * s_theta + s * s * eye);
    return to_phi - to_theta;
  };
  auto err_gap_at = [&](double t) {
    double a = sched.alpha(t), s = sched.sigma(t);
    LinearEps theta = optimal_linear_eps(m_theta, s_theta, t, sched);
    LinearEps phi = optimal_linear_eps(m_phi, s_phi, t, sched);
    return expected_eps_error_sq(theta, x, a, s) -
           expected_eps_error_sq(phi, x, a, s);
  };

  SUBCASE("the pointwise derivative identity holds") {
    for (double t : {0.12, 0.3, 0.55, 0.8, 0.93}) {
      double h = 1e-6;
      double fd = (kl_diff_at(t + h) - kl_diff_at(t - h)) / (2.0 * h);
      double closed = 0.5 * sched.log_snr_slope(t) * (-err_gap_at(t));
      CHECK(fd == doctest::Approx(closed).epsilon(1e-5));
    }
  }

  SUBCASE("the stratified estimate matches the telescoped band exactly") {
    double lo = 0.05, hi = 0.95, beta = 1000.0;
    double exact = beta * (kl_diff_at(lo) - kl_diff_at(hi));

    Rng rng(41);
    int reps = 24, strata = 4096;
    std::vector<double> estimates;
    for (int r = 0; r < reps; ++r) {
      double acc = 0.0;
      for (int g = 0; g < strata; ++g) {
        double t = lo + (g + rng.uniform()) * (hi - lo) / strata;
        double a = sched.alpha(t), s = sched.sigma(t);
        LinearEps theta = optimal_linear_eps(m_theta, s_theta, t, sched);
        LinearEps phi = optimal_linear_eps(m_phi, s_phi, t, sched);
        std::vector<double> eps = {rng.normal(), rng.normal()};
        std::vector<double> z = {a * x[0] + s * eps[0],
                                 a * x[1] + s * eps[1]};
        auto pt = apply_linear_eps(theta, z);
        auto pp = apply_linear_eps(phi, z);
        double lt = 0.0, lp = 0.0;
        for (int j = 0; j < 2; ++j) {
          double dt = pt[static_cast<std::size_t>(j)] -
                      eps[static_cast<std::size_t>(j)];
          double dp = pp[static_cast<std::size_t>(j)] -
                      eps[static_cast<std::size_t>(j)];
          lt += dt * dt;
          lp += dp * dp;
        }
        acc += 0.5 * sched.log_snr_slope(t) * (lt - lp);
      }
      estimates.push_back(beta * (hi - lo) * acc / strata);
    }
    double mean = 0.0;
    for (double e : estimates) mean += e;
    mean /= reps;
    double var = 0.0;
    for (double e : estimates) var += (e - mean) * (e - mean);
    var /= (reps - 1);
    double se = std::sqrt(var / reps);
    CHECK(std::abs(mean - exact) < 3.0 * se);
    // The band deviation should be a meaningful, nonzero quantity here.
    CHECK(std::abs(exact) > 10.0 * se);
  }
}

TEST_CASE("local optimality of the exact predictor") {
  // Perturbing the optimal linear predictor in any direction increases the
  // expected noise-prediction error averaged over the data distribution.
  NoiseSchedule sched;
  Rng rng(53);
  Eigen::VectorXd mean = to_eigen({0.8, -0.5});
  Eigen::MatrixXd cov = random_spd(rng, 2);
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  Eigen::MatrixXd chol = llt.matrixL();

  for (double t : {0.2, 0.5, 0.8}) {
    double a = sched.alpha(t), s = sched.sigma(t);
    LinearEps opt = optimal_linear_eps(mean, cov, t, sched);

    // Average the closed-form conditional error over draws of x ~ N(mean,cov).
    auto risk = [&](const LinearEps& pred) {
      Rng inner(99);
      double acc = 0.0;
      int n = 2000;
      for (int i = 0; i < n; ++i) {
        Eigen::VectorXd x = mean + chol * to_eigen(inner.normal_vec(2));
        acc += expected_eps_error_sq(pred, from_eigen(x), a, s);
      }
      return acc / n;
    };

    double base_risk = risk(opt);
    for (int rep = 0; rep < 8; ++rep) {
      LinearEps bumped = opt;
      for (int i = 0; i < 2; ++i) {
        bumped.b[i] += 0.05 * rng.normal();
        for (int j = 0; j < 2; ++j) bumped.a(i, j) += 0.05 * rng.normal();
      }
      CHECK(risk(bumped) > base_risk);
    }
  }
}

TEST_CASE("consistency score") {
  SUBCASE("samples equal to references score one") {
    std::vector<std::vector<double>> refs = {{0.0, 1.0}, {2.0, -1.0}};
    CHECK(consistency_score(refs, refs) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("distant samples score essentially zero") {
    std::vector<std::vector<double>> refs = {{0.0}, {1.0}};
    std::vector<std::vector<double>> far = {{1e6}};
    CHECK(consistency_score(far, refs) < 1e-12);
  }

  SUBCASE("fixed small case matches the brute-force value") {
    // References 0 and 2 in one dimension: the only pairwise squared
    // distance is 4, so the bandwidth is 4. Sample 0.5 sits 0.25 from the
    // nearer reference, sample 3 sits 1 away.
    std::vector<std::vector<double>> refs = {{0.0}, {2.0}};
    std::vector<std::vector<double>> samples = {{0.5}, {3.0}};
    double expected = 0.5 * (std::exp(-0.25 / 4.0) + std::exp(-1.0 / 4.0));
    CHECK(consistency_score(samples, refs) ==
          doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("brute force agreement on a randomized case") {
    Rng rng(61);
    std::vector<std::vector<double>> refs, samples;
    for (int i = 0; i < 5; ++i)
      refs.push_back({rng.normal(), rng.normal(), rng.normal()});
    for (int i = 0; i < 7; ++i)
      samples.push_back({rng.normal(), rng.normal(), rng.normal()});

    std::vector<double> d2;
    for (std::size_t i = 0; i < refs.size(); ++i)
      for (std::size_t j = i + 1; j < refs.size(); ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) {
          double d = refs[i][static_cast<std::size_t>(k)] -
                     refs[j][static_cast<std::size_t>(k)];
          acc += d * d;
        }
        d2.push_back(acc);
      }
    std::sort(d2.begin(), d2.end());
    double bw = d2.size() % 2 == 1
                    ? d2[d2.size() / 2]
                    : 0.5 * (d2[d2.size() / 2 - 1] + d2[d2.size() / 2]);
    double expected = 0.0;
    for (const auto& s : samples) {
      double best = 1e300;
      for (const auto& r : refs) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) {
          double d =
              s[static_cast<std::size_t>(k)] - r[static_cast<std::size_t>(k)];
          acc += d * d;
        }
        best = std::min(best, acc);
      }
      expected += std::exp(-best / bw);
    }
    expected /= samples.size();
    CHECK(consistency_score(samples, refs) ==
          doctest::Approx(expected).epsilon(1e-12));
  }

  SUBCASE("identical references fall back to unit bandwidth") {
    std::vector<std::vector<double>> refs = {{1.0}, {1.0}};
    std::vector<std::vector<double>> samples = {{2.0}};
    CHECK(consistency_score(samples, refs) ==
          doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  }

  SUBCASE("empty inputs are rejected") {
    std::vector<std::vector<double>> refs = {{0.0}};
    CHECK_THROWS_WITH_AS(consistency_score({}, refs),
                         doctest::Contains("nonempty"), std::runtime_error);
    CHECK_THROWS_WITH_AS(consistency_score(refs, {}),
                         doctest::Contains("nonempty"), std::runtime_error);
  }
}

TEST_CASE("prompt fidelity") {
  auto world = two_condition_world();

  SUBCASE("samples at the mixture mean hit the ceiling") {
    int cond = world.require("subject");
    std::vector<std::vector<double>> at_mean = {
        from_eigen(world.components(cond)[0].mean)};
    CHECK(prompt_fidelity(at_mean, cond, world) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("matched samples beat mismatched samples with margin") {
    int subject = world.require("subject");
    int style = world.require("style");
    Rng rng(71);
    int n = 1000;
    std::vector<std::vector<double>> matched, mismatched;
    for (int i = 0; i < n; ++i) matched.push_back(world.sample(subject, rng));
    for (int i = 0; i < n; ++i) mismatched.push_back(world.sample(style, rng));

    // Separation statistic: mean log-density gap with its standard error.
    double acc = 0.0, acc2 = 0.0;
    for (int i = 0; i < n; ++i) {
      double gap = world.log_density(matched[static_cast<std::size_t>(i)],
                                     subject) -
                   world.log_density(mismatched[static_cast<std::size_t>(i)],
                                     subject);
      acc += gap;
      acc2 += gap * gap;
    }
    double mean_gap = acc / n;
    double se = std::sqrt((acc2 / n - mean_gap * mean_gap) / n);
    CHECK(mean_gap > 3.0 * se);
    CHECK(prompt_fidelity(matched, subject, world) >
          prompt_fidelity(mismatched, subject, world));
  }

  SUBCASE("unknown condition is rejected") {
    CHECK_THROWS_WITH_AS(world.require("nope"), doctest::Contains("unknown"),
                         std::runtime_error);
  }
}

TEST_CASE("world construction and persistence") {
  SUBCASE("degenerate covariance is rejected at construction") {
    GaussianConceptWorld world(2, 0);
    CHECK_THROWS_WITH_AS(
        world.add_condition(
            "flat", {{1.0, to_eigen({0.0, 0.0}), Eigen::MatrixXd::Zero(2, 2)}}),
        doctest::Contains("positive-definite"), std::runtime_error);
  }

  SUBCASE("weights must be positive and sum to one") {
    GaussianConceptWorld world(1, 0);
    Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(1, 1);
    CHECK_THROWS_WITH_AS(
        world.add_condition("bad", {{-0.5, to_eigen({0.0}), eye},
                                    {1.5, to_eigen({1.0}), eye}}),
        doctest::Contains("positive"), std::runtime_error);
    CHECK_THROWS_WITH_AS(
        world.add_condition("bad", {{0.3, to_eigen({0.0}), eye},
                                    {0.3, to_eigen({1.0}), eye}}),
        doctest::Contains("sum to 1"), std::runtime_error);
  }

  SUBCASE("sampling respects the mixture moments") {
    auto world = two_condition_world();
    int style = world.require("style");
    Rng rng(81);
    int n = 200000;
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(2);
    for (int i = 0; i < n; ++i) acc += to_eigen(world.sample(style, rng));
    Eigen::VectorXd mean = acc / n;
    Eigen::VectorXd expected =
        0.4 * world.components(style)[0].mean +
        0.6 * world.components(style)[1].mean;
    CHECK((mean - expected).norm() < 0.02);
  }

  SUBCASE("log density normalizes in one dimension") {
    GaussianConceptWorld world(1, 0);
    Eigen::MatrixXd v = 0.7 * Eigen::MatrixXd::Identity(1, 1);
    world.add_condition("c", {{0.5, to_eigen({-1.0}), v},
                              {0.5, to_eigen({2.0}), v}});
    int n = 20001;
    double lo = -20.0, hi = 20.0, step = (hi - lo) / (n - 1);
    double mass = 0.0;
    for (int i = 0; i < n; ++i) {
      double w = (i == 0 || i == n - 1) ? 0.5 : 1.0;
      mass += w * std::exp(world.log_density({lo + i * step}, 0));
    }
    mass *= step;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-8));
  }

  SUBCASE("JSON round-trip preserves densities exactly") {
    auto world = two_condition_world();
    auto text = world.to_json().dump(2);
    auto back = GaussianConceptWorld::from_json(nlohmann::json::parse(text));
    REQUIRE(back.num_conditions() == world.num_conditions());
    Rng rng(91);
    for (int i = 0; i < 20; ++i) {
      std::vector<double> x = {rng.normal() * 3.0, rng.normal() * 3.0};
      int cond = static_cast<int>(rng.index(2));
      CHECK(back.log_density(x, cond) == world.log_density(x, cond));
    }
  }

  SUBCASE("factored covariance specification is accepted") {
    nlohmann::json j = {
        {"dim", 2},
        {"seed", 3},
        {"conditions",
         {{{"name", "c"},
           {"components",
            {{{"weight", 1.0},
              {"mean", {0.0, 0.0}},
              {"chol", {{2.0, 0.0}, {1.0, 1.0}}}}}}}}}};
    auto world = GaussianConceptWorld::from_json(j);
    const auto& g = world.components(0)[0];
    CHECK(g.cov(0, 0) == doctest::Approx(4.0));
    CHECK(g.cov(0, 1) == doctest::Approx(2.0));
    CHECK(g.cov(1, 1) == doctest::Approx(2.0));
  }

  SUBCASE("file load reports missing and malformed inputs") {
    CHECK_THROWS_WITH_AS(GaussianConceptWorld::load("/nonexistent/w.json"),
                         doctest::Contains("cannot open"), std::runtime_error);
    std::string path = "oracle_world_tmp.json";
    {
      std::ofstream out(path);
      out << "{ not json";
    }
    CHECK_THROWS_WITH_AS(GaussianConceptWorld::load(path),
                         doctest::Contains("not valid JSON"),
                         std::runtime_error);
    {
      std::ofstream out(path);
      out << two_condition_world().to_json().dump();
    }
    auto world = GaussianConceptWorld::load(path);
    CHECK(world.num_conditions() == 2);
    CHECK(world.dim() == 2);
    std::remove(path.c_str());
  }
}
