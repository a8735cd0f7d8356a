// SPDX-License-Identifier: Apache-2.0
//
// Training loops: base pretraining on a concept world, the three
// fine-tuning recipes over adapter and token-embedding parameters, and the
// per-timestep noise-distance diagnostic between a fine-tuned model and its
// reference.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dco/lora.hpp"
#include "dco/objectives.hpp"
#include "dco/oracle.hpp"
#include "dco/tensor.hpp"

namespace dco {

enum class Objective { dm, dm_prior, dco };

std::string objective_name(Objective o);
Objective parse_objective(const std::string& name);

struct TrainConfig {
  Objective objective = Objective::dco;
  std::size_t steps = 2000;
  std::size_t batch_size = 1;
  double adapter_lr = 5e-5;
  double embedding_lr = 5e-4;
  DcoConfig dco;
  PriorPreservationConfig prior;
  double offset_noise = 0.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct RunRecord {
  nlohmann::json config;
  std::vector<double> losses;  // one entry per executed step
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;  // informational; kept out of persisted artifacts
  std::string checkpoint;     // adapter file name once saved
};

// Bias-corrected adaptive first-order optimizer over parameter groups, each
// with its own learning rate.
class AdamOptimizer {
 public:
  struct Group {
    std::vector<Tensor*> params;
    double lr = 1e-3;
  };

  explicit AdamOptimizer(std::vector<Group> groups, double beta1 = 0.9,
                         double beta2 = 0.999, double eps = 1e-8);

  // lr_scale multiplies every group's learning rate for this step only.
  void step(const GradientMap& grads, double lr_scale = 1.0);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Group> groups_;
  std::vector<std::vector<std::vector<double>>> m_;
  std::vector<std::vector<std::vector<double>>> v_;
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
};

// Trains a fresh model on every condition of the world with the plain
// noise-prediction loss and 10% condition dropout, then freezes it. Time
// draws are uniform in [1e-4, 1 - 1e-4]. A non-finite loss aborts.
EpsModel pretrain_base(const GaussianConceptWorld& world, const ModelSpec& spec,
                       std::size_t steps, std::uint64_t seed,
                       std::size_t batch_size = 8, double lr = 1e-3);

// Runs the configured objective over the reference set, updating only the
// adapter and new-token-embedding parameters of `model`. The prior set is
// consumed only by the prior-preservation objective; the deviation objective
// uses the frozen base of `model` as its reference network. Per step the
// draws are: for each reference batch element an index, a time, a noise
// vector and (when enabled) an offset draw; prior-batch draws follow.
RunRecord finetune(AdaptedModel& model, const ConditionedBatch& ref,
                   const ConditionedBatch& prior, const TrainConfig& cfg);

struct DeviationReport {
  std::vector<double> t_grid;
  std::vector<double> mean_distance;    // per-t mean squared prediction gap
  std::vector<double> standard_error;   // per-t; zero when one draw only
  double overall_mean = 0.0;            // mean of the per-t means
};

// Mean of ||eps_theta(z_t; c, t) - eps_phi(z_t; c, t)||^2 over the reference
// samples and n_noise fresh draws per sample, for each grid time. The
// reference network sees the fine-tuned model's embedding rows.
DeviationReport noise_distance_profile(const AdaptedModel& theta,
                                       const EpsModel& phi,
                                       const ConditionedBatch& ref,
                                       const std::vector<double>& t_grid,
                                       std::size_t n_noise,
                                       std::uint64_t seed);

// Directory layout: config.json, loss.csv (step,loss) and meta.json with
// the seed and checkpoint reference. Wall-clock time is not persisted so
// reruns produce byte-identical artifacts.
void save_run_record(const RunRecord& record, const std::string& dir);
RunRecord load_run_record(const std::string& dir);

}  // namespace dco
