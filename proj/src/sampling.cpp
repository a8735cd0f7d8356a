// SPDX-License-Identifier: Apache-2.0

#include "dco/sampling.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <string>

#include "dco/rng.hpp"

namespace dco {
namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("sampling: " + msg);
}

void check_scale(double omega, const char* name) {
  if (!std::isfinite(omega) || omega < 0.0) {
    fail(std::string(name) + " must be finite and non-negative");
  }
}

void check_same_size(const std::vector<double>& a,
                     const std::vector<double>& b) {
  if (a.size() != b.size()) fail("prediction sizes differ");
}

// The reference model evaluated at an embedding row owned by the fine-tuned
// model, so learned tokens resolve consistently across the pair.
std::vector<double> ref_eval(const EpsModel& phi, const ConditionTable& table,
                             const std::vector<double>& z, int cond,
                             double t) {
  return phi.forward(z, table.row(cond), t).values();
}

}  // namespace

std::vector<double> time_grid(const SamplerConfig& cfg) {
  if (!cfg.grid.empty()) {
    const std::vector<double>& g = cfg.grid;
    if (g.size() < 2) fail("explicit grid needs at least two points");
    if (g.front() != 1.0) fail("grid must start at t = 1");
    for (std::size_t i = 1; i < g.size(); ++i) {
      if (!(g[i] < g[i - 1])) fail("grid must be strictly decreasing");
    }
    if (!(g.back() > 0.0)) fail("grid must end above t = 0");
    return g;
  }
  if (cfg.steps < 1) fail("at least one step required");
  if (!(cfg.t_min > 0.0) || !(cfg.t_min < 1.0)) {
    fail("t_min must lie in (0, 1)");
  }
  std::vector<double> g(cfg.steps + 1);
  for (std::size_t i = 0; i <= cfg.steps; ++i) {
    g[i] = 1.0 - (1.0 - cfg.t_min) * static_cast<double>(i) /
                     static_cast<double>(cfg.steps);
  }
  g.front() = 1.0;
  g.back() = cfg.t_min;
  return g;
}

std::vector<double> cfg_combine(const std::vector<double>& eps_null,
                                const std::vector<double>& eps_cond,
                                double omega) {
  check_scale(omega, "omega");
  check_same_size(eps_null, eps_cond);
  if (omega == 1.0) return eps_cond;
  if (omega == 0.0) return eps_null;
  std::vector<double> out(eps_null.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = eps_null[i] + omega * (eps_cond[i] - eps_null[i]);
  }
  return out;
}

std::vector<double> consistency_combine(
    const std::vector<double>& eps_phi_null,
    const std::vector<double>& eps_phi_cond,
    const std::vector<double>& eps_theta_cond, double omega_text,
    double omega_con) {
  check_scale(omega_text, "omega_text");
  check_scale(omega_con, "omega_con");
  check_same_size(eps_phi_null, eps_phi_cond);
  check_same_size(eps_phi_cond, eps_theta_cond);
  if (omega_text == 1.0 && omega_con == 1.0) return eps_theta_cond;
  if (omega_con == 0.0) {
    return cfg_combine(eps_phi_null, eps_phi_cond, omega_text);
  }
  std::vector<double> out(eps_phi_null.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = eps_phi_null[i] +
             omega_text * (eps_phi_cond[i] - eps_phi_null[i]) +
             omega_con * (eps_theta_cond[i] - eps_phi_cond[i]);
  }
  return out;
}

std::vector<double> cfg_eps(const EpsModel& model,
                            const std::vector<double>& z, int cond, double t,
                            double omega) {
  check_scale(omega, "omega");
  if (omega == 1.0) return model.predict(z, cond, t);
  if (omega == 0.0) {
    model.conditions().row(cond);  // still reject unknown conditions
    return model.predict(z, ConditionTable::kNull, t);
  }
  return cfg_combine(model.predict(z, ConditionTable::kNull, t),
                     model.predict(z, cond, t), omega);
}

std::vector<double> cfg_eps(const AdaptedModel& model,
                            const std::vector<double>& z, int cond, double t,
                            double omega) {
  check_scale(omega, "omega");
  if (omega == 1.0) return model.predict(z, cond, t);
  if (omega == 0.0) {
    model.conditions().row(cond);
    return model.predict(z, ConditionTable::kNull, t);
  }
  return cfg_combine(model.predict(z, ConditionTable::kNull, t),
                     model.predict(z, cond, t), omega);
}

std::vector<double> consistency_guided_eps(const AdaptedModel& theta,
                                           const EpsModel& phi,
                                           const std::vector<double>& z,
                                           int cond, double t,
                                           const GuidanceConfig& cfg) {
  check_scale(cfg.omega_text, "omega_text");
  check_scale(cfg.omega_con, "omega_con");
  if (!phi.frozen()) fail("reference model is not frozen");
  const ConditionTable& table = theta.conditions();
  if (cfg.omega_text == 1.0 && cfg.omega_con == 1.0) {
    return theta.predict(z, cond, t);
  }
  if (cfg.omega_con == 0.0) {
    if (cfg.omega_text == 1.0) return ref_eval(phi, table, z, cond, t);
    std::vector<double> phi_null =
        ref_eval(phi, table, z, ConditionTable::kNull, t);
    if (cfg.omega_text == 0.0) {
      table.row(cond);
      return phi_null;
    }
    return cfg_combine(phi_null, ref_eval(phi, table, z, cond, t),
                       cfg.omega_text);
  }
  std::vector<double> phi_null =
      ref_eval(phi, table, z, ConditionTable::kNull, t);
  std::vector<double> phi_cond = ref_eval(phi, table, z, cond, t);
  std::vector<double> theta_cond = theta.predict(z, cond, t);
  return consistency_combine(phi_null, phi_cond, theta_cond, cfg.omega_text,
                             cfg.omega_con);
}

GuidedEps make_guided_predictor(const AdaptedModel& theta, const EpsModel& phi,
                                int cond, const GuidanceConfig& cfg) {
  if (cfg.plain_cfg) {
    check_scale(cfg.omega, "omega");
    double omega = cfg.omega;
    return [&theta, cond, omega](const std::vector<double>& z, double t) {
      return cfg_eps(theta, z, cond, t, omega);
    };
  }
  check_scale(cfg.omega_text, "omega_text");
  check_scale(cfg.omega_con, "omega_con");
  return [&theta, &phi, cond, cfg](const std::vector<double>& z, double t) {
    return consistency_guided_eps(theta, phi, z, cond, t, cfg);
  };
}

std::vector<std::vector<double>> sample(const GuidedEps& eps_fn,
                                        const NoiseSchedule& sched,
                                        const SamplerConfig& cfg,
                                        std::size_t n, std::size_t dim) {
  if (dim < 1) fail("dim must be positive");
  std::vector<double> grid = time_grid(cfg);
  std::vector<std::vector<double>> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(k)));
    std::vector<double> z = rng.normal_vec(dim);
    std::vector<double> x_hat(dim, 0.0);
    for (std::size_t i = 1; i < grid.size(); ++i) {
      double t = grid[i];
      double alpha = sched.alpha(t);
      double sigma = sched.sigma(t);
      if (std::abs(alpha) < 1e-12) {
        fail("alpha is zero at evaluation time t = " + std::to_string(t));
      }
      std::vector<double> eps = eps_fn(z, t);
      if (eps.size() != dim) fail("predictor returned the wrong dimension");
      for (std::size_t j = 0; j < dim; ++j) {
        x_hat[j] = (z[j] - sigma * eps[j]) / alpha;
      }
      if (i + 1 < grid.size()) {
        double a_next = sched.alpha(grid[i + 1]);
        double s_next = sched.sigma(grid[i + 1]);
        for (std::size_t j = 0; j < dim; ++j) {
          z[j] = a_next * x_hat[j] + s_next * eps[j];
        }
      }
    }
    out.push_back(std::move(x_hat));
  }
  return out;
}

void write_samples_csv(const std::string& path,
                       const std::vector<SampleRow>& rows) {
  if (rows.empty()) fail("csv dump needs at least one row");
  std::size_t dim = rows.front().x.size();
  std::ofstream out(path);
  if (!out) fail("cannot open csv file for writing: " + path);
  out << "seed,condition,omega_text,omega_con";
  for (std::size_t j = 0; j < dim; ++j) out << ",x" << j;
  out << "\n";
  out << std::setprecision(17);
  for (const SampleRow& row : rows) {
    if (row.x.size() != dim) fail("csv rows have inconsistent dimensions");
    out << row.seed << "," << row.condition << "," << row.omega_text << ","
        << row.omega_con;
    for (double v : row.x) out << "," << v;
    out << "\n";
  }
  if (!out) fail("failed writing csv file: " + path);
}

}  // namespace dco
