// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: guidance sweeps with consistency and fidelity
// scoring, Pareto frontier extraction and dominance summaries, the merged
// subject-plus-style experiment, and config-driven pipelines behind the CLI.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dco/oracle.hpp"
#include "dco/sampling.hpp"
#include "dco/training.hpp"

namespace dco {

struct ParetoPoint {
  std::string method;
  double omega_con = 0.0;
  double consistency = 0.0;
  double fidelity = 0.0;
  std::uint64_t seed = 0;
};

// Maximize-both weak dominance: at least as good on both axes and strictly
// better on one.
bool dominates(const ParetoPoint& a, const ParetoPoint& b);

// Non-dominated subset, returned sorted by consistency then fidelity so the
// result is independent of input order.
std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint> points);

// Mean over all cross pairs of: 1 when the first point dominates, 0 when it
// is dominated, and 0.5 for ties and incomparable pairs. Identical sets
// score 0.5 by construction.
double dominance_fraction(const std::vector<ParetoPoint>& a,
                          const std::vector<ParetoPoint>& b);

struct DominanceEntry {
  std::string method_a;
  std::string method_b;
  double fraction = 0.0;
};

// Pairwise dominance fractions between every ordered pair of methods
// present in the point set.
std::vector<DominanceEntry> dominance_matrix(
    const std::vector<ParetoPoint>& points);

// Rank correlation with average ranks on ties; 0 when either input has no
// variation.
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);

void write_pareto_csv(const std::string& path,
                      const std::vector<ParetoPoint>& points);
std::vector<ParetoPoint> read_pareto_csv(const std::string& path);

// Scatter plot with one frontier polyline per method; methods listed in
// `diamond_methods` are drawn with diamond markers.
void write_pareto_svg(const std::string& path,
                      const std::vector<ParetoPoint>& points,
                      const std::vector<std::string>& diamond_methods = {});

// pareto.csv, frontier.csv, dominance.csv and pareto.svg under `dir`.
// Requires at least two methods with at least two points each.
void pareto_report(const std::vector<ParetoPoint>& points,
                   const std::string& dir,
                   const std::vector<std::string>& diamond_methods = {});

struct GuidancePointScore {
  double consistency = 0.0;
  double fidelity = 0.0;
};

// Samples n chains under the given guidance and scores them against the
// reference set (consistency) and the world condition (fidelity).
GuidancePointScore evaluate_guidance_point(
    const AdaptedModel& theta, const EpsModel& phi, int cond,
    const GuidanceConfig& guidance, const SamplerConfig& sampler,
    std::size_t n_samples, const std::vector<std::vector<double>>& refs,
    const GaussianConceptWorld& world, const std::string& fidelity_condition);

struct SubjectStyleReport {
  double subject_consistency = 0.0;
  double style_consistency = 0.0;
  double fidelity = 0.0;
  std::vector<std::vector<double>> samples;
};

// Merges the two adapters with unit coefficients, carries both models'
// learned token rows into the merged model, samples under consistency
// guidance with the named condition, and scores the result against both
// reference sets plus the prompt-fidelity condition.
SubjectStyleReport my_subject_my_style(
    const AdaptedModel& subject, const AdaptedModel& style,
    const std::vector<std::vector<double>>& subject_refs,
    const std::vector<std::vector<double>>& style_refs,
    const GaussianConceptWorld& world, const std::string& fidelity_condition,
    const std::string& sample_condition, const GuidanceConfig& guidance,
    const SamplerConfig& sampler, std::size_t n_samples);

struct ExperimentConfig {
  std::string world_file;
  std::string out_dir;

  struct BaseBlock {
    ModelSpec model;
    std::size_t steps = 4000;
    std::size_t batch = 16;
    double lr = 5e-4;
    std::uint64_t seed = 1;
    std::vector<std::string> holdout;  // world conditions excluded from
                                       // pretraining, used as references
  } base;

  struct FinetuneBlock {
    std::string label;
    TrainConfig train;
    std::size_t rank = 4;
    std::vector<std::uint64_t> seeds;
    std::string ref_condition;     // held-out condition supplying references
    std::string parent_condition;  // trained condition the token starts from
    std::string token;             // empty: fine-tune on parent directly
    std::size_t ref_count = 6;
    std::size_t prior_count = 0;   // only for the prior-preservation recipe
    std::uint64_t ref_seed = 777;
  };
  std::vector<FinetuneBlock> finetunes;

  struct SweepBlock {
    double omega_text = 7.5;
    std::vector<double> omega_cons = {2.0, 3.0, 4.0, 5.0};
    double cfg_omega = 7.5;  // plain-guidance comparison points
    std::size_t samples_per_point = 64;
    std::size_t sampler_steps = 50;
    std::uint64_t seed = 5000;
  } sweep;

  struct MergePair {
    std::string label;
    std::string subject;  // fine-tune block supplying the subject adapter
    std::string style;    // fine-tune block supplying the style adapter
  };
  struct MergeBlock {
    std::vector<MergePair> pairs;
    double omega_text = 7.5;
    double omega_con = 3.0;
    std::size_t samples_per_pair = 32;
    std::size_t sampler_steps = 50;
    std::uint64_t seed = 6000;
  } merges;

  struct DiagnoseBlock {
    std::size_t t_points = 12;
    std::size_t n_noise = 100;
    std::uint64_t seed = 4242;
  } diagnose;

  std::size_t workers = 1;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  // Parse errors are reported with the line they occur on.
  static ExperimentConfig load(const std::string& path);
};

// A world containing only the conditions the base model pretrains on.
GaussianConceptWorld training_world(const GaussianConceptWorld& world,
                                    const std::vector<std::string>& holdout);

struct ExperimentResult {
  std::vector<ParetoPoint> points;
  std::vector<std::string> diamond_methods;
  std::string base_checkpoint;
  std::vector<std::string> run_dirs;
};

// Pipeline stages; each reads its inputs from the output directory of the
// stage before it, so they can run in one process or as separate commands.

// Pretrains on the non-holdout conditions and writes base/model.bin.
std::string run_train_base(const ExperimentConfig& cfg);

// Fine-tunes every block/seed against the saved base and writes one run
// directory (loss trace, config, adapter checkpoint) per run.
std::vector<std::string> run_finetunes(const ExperimentConfig& cfg);

// Sweeps the guidance grid plus the plain-guidance comparison point over
// every saved run and writes the Pareto report. Grid points run on
// `workers` threads; scores are seeded per point, so the thread count does
// not change the numbers.
ExperimentResult run_sweep(const ExperimentConfig& cfg);

// Draws guided samples from every saved run plus plain-guidance samples
// from the base, one CSV per model, under samples/.
std::vector<std::string> run_samples(const ExperimentConfig& cfg);

struct MergeRow {
  std::string label;
  std::uint64_t seed = 0;
  SubjectStyleReport report;
  std::string checkpoint;
};

// Unit-coefficient merge of each configured subject/style pair at every
// seed the two blocks share; writes merged checkpoints and a per-seed
// report table under merge/.
std::vector<MergeRow> run_merges(const ExperimentConfig& cfg);

struct DiagnoseRow {
  std::string label;
  std::uint64_t seed = 0;
  double overall_mean = 0.0;
  std::string profile_csv;
};

// Noise-distance profile of every saved run against the base, plus an
// identity profile of the base against itself, under diagnose/.
std::vector<DiagnoseRow> run_diagnose(const ExperimentConfig& cfg);

// train-base, finetune and sweep back to back.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

}  // namespace dco
