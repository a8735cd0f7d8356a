// SPDX-License-Identifier: Apache-2.0
//
// Training losses: plain noise prediction, prior preservation, and the
// log-sigmoid deviation loss against a frozen reference model, plus the
// gradient-scale diagnostic and the Monte-Carlo deviation estimate.

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dco/lora.hpp"
#include "dco/rng.hpp"
#include "dco/schedule.hpp"
#include "dco/tensor.hpp"

namespace dco {

struct ConditionedSample {
  std::vector<double> x;
  int cond = 0;
};

using ConditionedBatch = std::vector<ConditionedSample>;

enum class BetaMode { constant, theoretical };

// Temperature of the deviation loss. The constant mode pins beta_t directly;
// the theoretical mode derives it from the schedule as -beta/2 times the
// log-SNR slope, which is positive everywhere in the interior.
struct DcoConfig {
  BetaMode mode = BetaMode::constant;
  double beta = 1000.0;
  double constant_beta_t = 1000.0;

  double beta_t(double t, const NoiseSchedule& sched) const;
};

struct PriorPreservationConfig {
  double lambda_prior = 1.0;
  std::string prior_condition;  // where the training loop draws prior batches
};

// Mean over the batch of dm_weight(t) * ||eps_hat(z_t; c, t) - eps||^2 with
// z_t = alpha_t x + sigma_t eps; one (t, eps) draw per batch element. The
// result is a traced scalar when a tape is active.
Tensor dm_loss(const EpsModel& model, const ConditionedBatch& batch,
               const NoiseSchedule& sched, const std::vector<double>& t_draws,
               const std::vector<std::vector<double>>& eps_draws);
Tensor dm_loss(const AdaptedModel& model, const ConditionedBatch& batch,
               const NoiseSchedule& sched, const std::vector<double>& t_draws,
               const std::vector<std::vector<double>>& eps_draws);

// dm_loss on the reference batch plus lambda_prior times dm_loss on the
// prior batch, each with its own draws.
Tensor prior_preservation_loss(
    const EpsModel& model, const ConditionedBatch& ref_batch,
    const ConditionedBatch& prior_batch, const PriorPreservationConfig& cfg,
    const NoiseSchedule& sched, const std::vector<double>& ref_t,
    const std::vector<std::vector<double>>& ref_eps,
    const std::vector<double>& prior_t,
    const std::vector<std::vector<double>>& prior_eps);
Tensor prior_preservation_loss(
    const AdaptedModel& model, const ConditionedBatch& ref_batch,
    const ConditionedBatch& prior_batch, const PriorPreservationConfig& cfg,
    const NoiseSchedule& sched, const std::vector<double>& ref_t,
    const std::vector<std::vector<double>>& ref_eps,
    const std::vector<double>& prior_t,
    const std::vector<std::vector<double>>& prior_eps);

// Mean over the batch of -log sigmoid(-beta_t (l(theta) - l(phi))) where
// both squared errors share the same (t, eps) draw. The reference branch is
// evaluated outside the tape with a detached copy of the condition
// embedding, so no gradient reaches it. The embedding itself is resolved
// from the fine-tuned model's table, so learned tokens condition both
// networks identically.
Tensor dco_loss(const EpsModel& model, const EpsModel& ref_model,
                const ConditionedBatch& batch, const DcoConfig& cfg,
                const NoiseSchedule& sched, const std::vector<double>& t_draws,
                const std::vector<std::vector<double>>& eps_draws);
Tensor dco_loss(const AdaptedModel& model, const EpsModel& ref_model,
                const ConditionedBatch& batch, const DcoConfig& cfg,
                const NoiseSchedule& sched, const std::vector<double>& t_draws,
                const std::vector<std::vector<double>>& eps_draws);

// 1 - sigmoid(d_t) with d_t = -beta_t (l(theta) - l(phi)): the adaptive
// weight multiplying the plain noise-prediction gradient.
double dco_gradient_scale(const EpsModel& model, const EpsModel& ref_model,
                          const ConditionedSample& sample, double t,
                          const std::vector<double>& eps, const DcoConfig& cfg,
                          const NoiseSchedule& sched);
double dco_gradient_scale(const AdaptedModel& model, const EpsModel& ref_model,
                          const ConditionedSample& sample, double t,
                          const std::vector<double>& eps, const DcoConfig& cfg,
                          const NoiseSchedule& sched);

// Largest relative disagreement, over all trainable parameter entries,
// between the autodiff gradient of the deviation loss and the factored form
// beta_t (1 - sigmoid(d_t)) grad l(theta).
double dco_factorization_gap(EpsModel& model, const EpsModel& ref_model,
                             const ConditionedSample& sample, double t,
                             const std::vector<double>& eps,
                             const DcoConfig& cfg, const NoiseSchedule& sched);
double dco_factorization_gap(AdaptedModel& model, const EpsModel& ref_model,
                             const ConditionedSample& sample, double t,
                             const std::vector<double>& eps,
                             const DcoConfig& cfg, const NoiseSchedule& sched);

struct DeltaEstimate {
  double delta = 0.0;
  double se = 0.0;
};

using EpsPredict = std::function<std::vector<double>(
    const std::vector<double>& z, int cond, double t)>;

// Monte-Carlo deviation estimate: mean over batch elements and a stratified
// t grid of n_draws strata (one uniform t and one fresh eps per stratum) of
// half the log-SNR slope times the squared-error gap. The standard error
// treats draws as independent, which is conservative under stratification.
DeltaEstimate delta_estimate(const EpsPredict& theta, const EpsPredict& phi,
                             const ConditionedBatch& batch,
                             const NoiseSchedule& sched, std::size_t n_draws,
                             Rng& rng);
DeltaEstimate delta_estimate(const EpsModel& model, const EpsModel& ref_model,
                             const ConditionedBatch& batch,
                             const NoiseSchedule& sched, std::size_t n_draws,
                             Rng& rng);
DeltaEstimate delta_estimate(const AdaptedModel& model,
                             const EpsModel& ref_model,
                             const ConditionedBatch& batch,
                             const NoiseSchedule& sched, std::size_t n_draws,
                             Rng& rng);

}  // namespace dco
