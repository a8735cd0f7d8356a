// SPDX-License-Identifier: Apache-2.0

#include "dco/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace dco {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("objectives: " + msg);
}

using TracedForward =
    std::function<Tensor(const std::vector<double>&, int, double)>;

TracedForward traced(const EpsModel& m) {
  return [&m](const std::vector<double>& z, int cond, double t) {
    return m.forward(z, m.conditions().row(cond), t);
  };
}

TracedForward traced(const AdaptedModel& m) {
  return [&m](const std::vector<double>& z, int cond, double t) {
    return m.forward(z, m.conditions().row(cond), t);
  };
}

// Reference-branch evaluation: same inputs, but the condition embedding is a
// detached value copy taken from the fine-tuned model's table, so nothing
// the tape watches can be reached through this path.
EpsPredict detached_ref(const EpsModel& ref, const ConditionTable& table) {
  return [&ref, &table](const std::vector<double>& z, int cond, double t) {
    const Tensor& row = table.row(cond);
    Tensor copy(row.shape(), row.values());
    return ref.forward(z, copy, t).values();
  };
}

EpsPredict plain(const EpsModel& m) {
  return [&m](const std::vector<double>& z, int cond, double t) {
    return m.predict(z, cond, t);
  };
}

EpsPredict plain(const AdaptedModel& m) {
  return [&m](const std::vector<double>& z, int cond, double t) {
    return m.predict(z, cond, t);
  };
}

void check_batch(const ConditionedBatch& batch,
                 const std::vector<double>& t_draws,
                 const std::vector<std::vector<double>>& eps_draws) {
  if (batch.empty()) fail("empty batch");
  if (t_draws.size() != batch.size() || eps_draws.size() != batch.size())
    fail("one t and one eps draw per batch element required");
  for (double t : t_draws)
    if (!(t > 0.0) || !(t < 1.0))
      fail("t draw outside (0,1): " + std::to_string(t));
}

double squared_error(const std::vector<double>& pred,
                     const std::vector<double>& eps) {
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - eps[i];
    acc += d * d;
  }
  return acc;
}

Tensor dm_core(const TracedForward& fwd, const ConditionedBatch& batch,
               const NoiseSchedule& sched, const std::vector<double>& t_draws,
               const std::vector<std::vector<double>>& eps_draws) {
  check_batch(batch, t_draws, eps_draws);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double t = t_draws[i];
    std::vector<double> z = forward_draw(sched, batch[i].x, t, eps_draws[i]);
    Tensor pred = fwd(z, batch[i].cond, t);
    Tensor eps({eps_draws[i].size()}, eps_draws[i]);
    Tensor err_sq = sum(square(sub(pred, eps)));
    total = add(total, scale(err_sq, sched.dm_weight(t)));
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

Tensor dco_core(const TracedForward& theta, const EpsPredict& phi,
                const ConditionedBatch& batch, const DcoConfig& cfg,
                const NoiseSchedule& sched,
                const std::vector<double>& t_draws,
                const std::vector<std::vector<double>>& eps_draws) {
  check_batch(batch, t_draws, eps_draws);
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double t = t_draws[i];
    std::vector<double> z = forward_draw(sched, batch[i].x, t, eps_draws[i]);
    Tensor pred = theta(z, batch[i].cond, t);
    std::vector<double> ref_pred = phi(z, batch[i].cond, t);
    if (ref_pred.size() != pred.numel())
      fail("prediction shapes of the two models differ");
    Tensor eps({eps_draws[i].size()}, eps_draws[i]);
    Tensor l_theta = sum(square(sub(pred, eps)));
    double l_phi = squared_error(ref_pred, eps_draws[i]);
    double bt = cfg.beta_t(t, sched);
    Tensor d = scale(sub(l_theta, Tensor::scalar(l_phi)), -bt);
    total = add(total, scale(log_sigmoid(d), -1.0));
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

double scale_core(const EpsPredict& theta, const EpsPredict& phi,
                  const ConditionedSample& sample, double t,
                  const std::vector<double>& eps, const DcoConfig& cfg,
                  const NoiseSchedule& sched) {
  if (!(t > 0.0) || !(t < 1.0)) fail("t outside (0,1)");
  std::vector<double> z = forward_draw(sched, sample.x, t, eps);
  double l_theta = squared_error(theta(z, sample.cond, t), eps);
  double l_phi = squared_error(phi(z, sample.cond, t), eps);
  double d = -cfg.beta_t(t, sched) * (l_theta - l_phi);
  return 1.0 - stable_sigmoid(d);
}

double gap_core(const std::vector<Tensor*>& params, const TracedForward& theta,
                const EpsPredict& phi, const ConditionedSample& sample,
                double t, const std::vector<double>& eps, const DcoConfig& cfg,
                const NoiseSchedule& sched) {
  if (params.empty()) fail("model exposes no trainable parameters");
  ConditionedBatch batch = {sample};
  std::vector<double> t_draws = {t};
  std::vector<std::vector<double>> eps_draws = {eps};

  // Rewatching a leaf on a later tape retargets it, so pull each map's
  // gradients out before the next tape runs.
  std::vector<Tensor> from_loss;
  {
    GradientTape tape;
    for (Tensor* p : params) tape.watch(*p);
    GradientMap map = tape.backward(
        dco_core(theta, phi, batch, cfg, sched, t_draws, eps_draws));
    for (Tensor* p : params) from_loss.push_back(map.at(*p));
  }

  std::vector<double> z = forward_draw(sched, sample.x, t, eps);
  std::vector<Tensor> from_err;
  {
    GradientTape tape;
    for (Tensor* p : params) tape.watch(*p);
    Tensor pred = theta(z, sample.cond, t);
    Tensor eps_t({eps.size()}, eps);
    GradientMap map = tape.backward(sum(square(sub(pred, eps_t))));
    for (Tensor* p : params) from_err.push_back(map.at(*p));
  }

  double l_theta = squared_error(theta(z, sample.cond, t).values(), eps);
  double l_phi = squared_error(phi(z, sample.cond, t), eps);
  double bt = cfg.beta_t(t, sched);
  double d = -bt * (l_theta - l_phi);
  double factor = bt * (1.0 - stable_sigmoid(d));

  double gap = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& a = from_loss[k];
    const Tensor& b = from_err[k];
    for (std::size_t i = 0; i < a.numel(); ++i) {
      double lhs = a.at(i), rhs = factor * b.at(i);
      double denom = std::max({std::abs(lhs), std::abs(rhs), 1e-9});
      gap = std::max(gap, std::abs(lhs - rhs) / denom);
    }
  }
  return gap;
}

DeltaEstimate delta_core(const EpsPredict& theta, const EpsPredict& phi,
                         const ConditionedBatch& batch,
                         const NoiseSchedule& sched, std::size_t n_draws,
                         Rng& rng) {
  if (batch.empty()) fail("empty batch");
  if (n_draws == 0) fail("n_draws must be positive");
  std::vector<double> draws;
  draws.reserve(batch.size() * n_draws);
  for (const auto& sample : batch) {
    for (std::size_t g = 0; g < n_draws; ++g) {
      double t = (static_cast<double>(g) + rng.uniform()) /
                 static_cast<double>(n_draws);
      std::vector<double> eps = rng.normal_vec(sample.x.size());
      std::vector<double> z = forward_draw(sched, sample.x, t, eps);
      double l_theta = squared_error(theta(z, sample.cond, t), eps);
      double l_phi = squared_error(phi(z, sample.cond, t), eps);
      draws.push_back(0.5 * sched.log_snr_slope(t) * (l_theta - l_phi));
    }
  }
  double mean = 0.0;
  for (double v : draws) mean += v;
  mean /= static_cast<double>(draws.size());
  double var = 0.0;
  for (double v : draws) var += (v - mean) * (v - mean);
  DeltaEstimate out;
  out.delta = mean;
  out.se = draws.size() > 1
               ? std::sqrt(var / (static_cast<double>(draws.size()) - 1.0) /
                           static_cast<double>(draws.size()))
               : 0.0;
  return out;
}

void check_ref(const EpsModel& ref) {
  if (!ref.frozen()) fail("reference model is not frozen");
}

}  // namespace

double DcoConfig::beta_t(double t, const NoiseSchedule& sched) const {
  if (mode == BetaMode::constant) {
    if (!(constant_beta_t > 0.0)) fail("constant beta_t must be positive");
    return constant_beta_t;
  }
  if (!(beta > 0.0)) fail("beta must be positive");
  return -0.5 * beta * sched.log_snr_slope(t);
}

Tensor dm_loss(const EpsModel& model, const ConditionedBatch& batch,
               const NoiseSchedule& sched, const std::vector<double>& t_draws,
               const std::vector<std::vector<double>>& eps_draws) {
  return dm_core(traced(model), batch, sched, t_draws, eps_draws);
}

Tensor dm_loss(const AdaptedModel& model, const ConditionedBatch& batch,
               const NoiseSchedule& sched, const std::vector<double>& t_draws,
               const std::vector<std::vector<double>>& eps_draws) {
  return dm_core(traced(model), batch, sched, t_draws, eps_draws);
}

namespace {

template <typename Model>
Tensor prior_core(const Model& model, const ConditionedBatch& ref_batch,
                  const ConditionedBatch& prior_batch,
                  const PriorPreservationConfig& cfg,
                  const NoiseSchedule& sched, const std::vector<double>& ref_t,
                  const std::vector<std::vector<double>>& ref_eps,
                  const std::vector<double>& prior_t,
                  const std::vector<std::vector<double>>& prior_eps) {
  if (cfg.lambda_prior < 0.0) fail("lambda_prior must be nonnegative");
  Tensor ref_loss = dm_loss(model, ref_batch, sched, ref_t, ref_eps);
  Tensor prior_loss = dm_loss(model, prior_batch, sched, prior_t, prior_eps);
  return add(ref_loss, scale(prior_loss, cfg.lambda_prior));
}

}  // namespace

Tensor prior_preservation_loss(
    const EpsModel& model, const ConditionedBatch& ref_batch,
    const ConditionedBatch& prior_batch, const PriorPreservationConfig& cfg,
    const NoiseSchedule& sched, const std::vector<double>& ref_t,
    const std::vector<std::vector<double>>& ref_eps,
    const std::vector<double>& prior_t,
    const std::vector<std::vector<double>>& prior_eps) {
  return prior_core(model, ref_batch, prior_batch, cfg, sched, ref_t, ref_eps,
                    prior_t, prior_eps);
}

Tensor prior_preservation_loss(
    const AdaptedModel& model, const ConditionedBatch& ref_batch,
    const ConditionedBatch& prior_batch, const PriorPreservationConfig& cfg,
    const NoiseSchedule& sched, const std::vector<double>& ref_t,
    const std::vector<std::vector<double>>& ref_eps,
    const std::vector<double>& prior_t,
    const std::vector<std::vector<double>>& prior_eps) {
  return prior_core(model, ref_batch, prior_batch, cfg, sched, ref_t, ref_eps,
                    prior_t, prior_eps);
}

Tensor dco_loss(const EpsModel& model, const EpsModel& ref_model,
                const ConditionedBatch& batch, const DcoConfig& cfg,
                const NoiseSchedule& sched, const std::vector<double>& t_draws,
                const std::vector<std::vector<double>>& eps_draws) {
  check_ref(ref_model);
  return dco_core(traced(model), detached_ref(ref_model, model.conditions()),
                  batch, cfg, sched, t_draws, eps_draws);
}

Tensor dco_loss(const AdaptedModel& model, const EpsModel& ref_model,
                const ConditionedBatch& batch, const DcoConfig& cfg,
                const NoiseSchedule& sched, const std::vector<double>& t_draws,
                const std::vector<std::vector<double>>& eps_draws) {
  check_ref(ref_model);
  return dco_core(traced(model), detached_ref(ref_model, model.conditions()),
                  batch, cfg, sched, t_draws, eps_draws);
}

double dco_gradient_scale(const EpsModel& model, const EpsModel& ref_model,
                          const ConditionedSample& sample, double t,
                          const std::vector<double>& eps, const DcoConfig& cfg,
                          const NoiseSchedule& sched) {
  check_ref(ref_model);
  return scale_core(plain(model), detached_ref(ref_model, model.conditions()),
                    sample, t, eps, cfg, sched);
}

double dco_gradient_scale(const AdaptedModel& model, const EpsModel& ref_model,
                          const ConditionedSample& sample, double t,
                          const std::vector<double>& eps, const DcoConfig& cfg,
                          const NoiseSchedule& sched) {
  check_ref(ref_model);
  return scale_core(plain(model), detached_ref(ref_model, model.conditions()),
                    sample, t, eps, cfg, sched);
}

double dco_factorization_gap(EpsModel& model, const EpsModel& ref_model,
                             const ConditionedSample& sample, double t,
                             const std::vector<double>& eps,
                             const DcoConfig& cfg,
                             const NoiseSchedule& sched) {
  check_ref(ref_model);
  return gap_core(model.trainable_parameters(), traced(model),
                  detached_ref(ref_model, model.conditions()), sample, t, eps,
                  cfg, sched);
}

double dco_factorization_gap(AdaptedModel& model, const EpsModel& ref_model,
                             const ConditionedSample& sample, double t,
                             const std::vector<double>& eps,
                             const DcoConfig& cfg,
                             const NoiseSchedule& sched) {
  check_ref(ref_model);
  std::vector<Tensor*> params = model.trainable_adapter_parameters();
  for (Tensor* p : model.trainable_embedding_parameters()) params.push_back(p);
  return gap_core(params, traced(model),
                  detached_ref(ref_model, model.conditions()), sample, t, eps,
                  cfg, sched);
}

DeltaEstimate delta_estimate(const EpsPredict& theta, const EpsPredict& phi,
                             const ConditionedBatch& batch,
                             const NoiseSchedule& sched, std::size_t n_draws,
                             Rng& rng) {
  return delta_core(theta, phi, batch, sched, n_draws, rng);
}

DeltaEstimate delta_estimate(const EpsModel& model, const EpsModel& ref_model,
                             const ConditionedBatch& batch,
                             const NoiseSchedule& sched, std::size_t n_draws,
                             Rng& rng) {
  check_ref(ref_model);
  return delta_core(plain(model),
                    detached_ref(ref_model, model.conditions()), batch, sched,
                    n_draws, rng);
}

DeltaEstimate delta_estimate(const AdaptedModel& model,
                             const EpsModel& ref_model,
                             const ConditionedBatch& batch,
                             const NoiseSchedule& sched, std::size_t n_draws,
                             Rng& rng) {
  check_ref(ref_model);
  return delta_core(plain(model),
                    detached_ref(ref_model, model.conditions()), batch, sched,
                    n_draws, rng);
}

}  // namespace dco
