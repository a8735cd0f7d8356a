// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end for the experiment pipeline: base pretraining,
// fine-tuning, sampling, the guidance sweep, adapter merging, noise-distance
// diagnostics, and report regeneration, all driven by one config file.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dco/harness.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir;
  std::string pareto_csv;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<double> beta;
  std::string omega_con;
  std::string objective;
  std::string resolved_out;  // filled once a config resolves, for error.json
};

std::vector<double> parse_scale_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string field;
  while (std::getline(ss, field, ',')) {
    try {
      std::size_t used = 0;
      double v = std::stod(field, &used);
      if (used != field.size()) throw std::invalid_argument(field);
      out.push_back(v);
    } catch (const std::exception&) {
      throw std::runtime_error("cli: bad guidance scale '" + field +
                               "' in --omega-con");
    }
  }
  if (out.empty()) throw std::runtime_error("cli: --omega-con list is empty");
  return out;
}

// Resolution order: --out beats the config value; a relative directory
// lands under $DCO_OUT_ROOT when that is set.
std::string resolve_out_dir(const std::string& from_config,
                            const std::string& from_flag) {
  std::string dir = from_flag.empty() ? from_config : from_flag;
  if (dir.empty()) dir = "out";
  const char* root = std::getenv("DCO_OUT_ROOT");
  if (root != nullptr && *root != '\0' &&
      std::filesystem::path(dir).is_relative()) {
    dir = (std::filesystem::path(root) / dir).string();
  }
  return dir;
}

dco::ExperimentConfig load_config(CliOptions& opts, bool seed_overrides_base) {
  if (opts.config_path.empty()) {
    throw std::runtime_error("cli: --config is required");
  }
  dco::ExperimentConfig cfg = dco::ExperimentConfig::load(opts.config_path);
  cfg.out_dir = resolve_out_dir(cfg.out_dir, opts.out_dir);
  opts.resolved_out = cfg.out_dir;
  if (opts.workers) cfg.workers = *opts.workers;
  if (!opts.omega_con.empty()) {
    cfg.sweep.omega_cons = parse_scale_list(opts.omega_con);
  }
  if (opts.seed) {
    if (seed_overrides_base) {
      cfg.base.seed = *opts.seed;
    } else {
      for (auto& blk : cfg.finetunes) blk.seeds = {*opts.seed};
    }
  }
  if (!opts.objective.empty()) {
    for (auto& blk : cfg.finetunes) {
      blk.train.objective = dco::parse_objective(opts.objective);
    }
  }
  if (opts.beta) {
    for (auto& blk : cfg.finetunes) {
      blk.train.dco.beta = *opts.beta;
      blk.train.dco.constant_beta_t = *opts.beta;
    }
  }
  return cfg;
}

void write_error_record(const std::string& subcommand, const std::string& what,
                        const CliOptions& opts) {
  std::string dir = opts.resolved_out;
  try {
    if (dir.empty()) dir = resolve_out_dir("", opts.out_dir);
    std::filesystem::create_directories(dir);
  } catch (const std::exception&) {
    dir = ".";
  }
  nlohmann::json j = {{"subcommand", subcommand},
                      {"error", what},
                      {"config", opts.config_path}};
  std::ofstream out(dir + "/error.json");
  out << j.dump(2) << "\n";
}

// Trade-off trends are per run: each seed traces its own curve over the
// guidance scales, so the summary averages per-seed rank correlations
// instead of pooling points across seeds.
void print_dominance_summary(const std::vector<dco::ParetoPoint>& points) {
  for (const dco::DominanceEntry& e : dco::dominance_matrix(points)) {
    std::printf("dominance %s over %s: %.4f\n", e.method_a.c_str(),
                e.method_b.c_str(), e.fraction);
  }
  std::map<std::string, std::map<std::uint64_t, std::vector<dco::ParetoPoint>>>
      by_run;
  for (const dco::ParetoPoint& p : points) {
    by_run[p.method][p.seed].push_back(p);
  }
  for (const auto& [method, runs] : by_run) {
    double cons_sum = 0.0;
    double fid_sum = 0.0;
    std::size_t n = 0;
    for (const auto& [seed, pts] : runs) {
      std::set<double> distinct;
      for (const dco::ParetoPoint& p : pts) distinct.insert(p.omega_con);
      if (distinct.size() < 2) continue;
      std::vector<double> omegas;
      std::vector<double> cons;
      std::vector<double> fids;
      for (const dco::ParetoPoint& p : pts) {
        omegas.push_back(p.omega_con);
        cons.push_back(p.consistency);
        fids.push_back(p.fidelity);
      }
      cons_sum += dco::spearman_rho(omegas, cons);
      fid_sum += dco::spearman_rho(omegas, fids);
      ++n;
    }
    if (n == 0) continue;
    std::printf(
        "spearman omega_con vs consistency for %s: %+.4f (fidelity %+.4f, "
        "mean over %zu seeds)\n",
        method.c_str(), cons_sum / static_cast<double>(n),
        fid_sum / static_cast<double>(n), n);
  }
}

int cmd_train_base(CliOptions& opts) {
  dco::ExperimentConfig cfg = load_config(opts, true);
  std::string path = dco::run_train_base(cfg);
  std::printf("wrote base checkpoint %s\n", path.c_str());
  return 0;
}

int cmd_finetune(CliOptions& opts) {
  dco::ExperimentConfig cfg = load_config(opts, false);
  for (const std::string& dir : dco::run_finetunes(cfg)) {
    std::printf("wrote run %s\n", dir.c_str());
  }
  return 0;
}

int cmd_sample(CliOptions& opts) {
  dco::ExperimentConfig cfg = load_config(opts, false);
  for (const std::string& file : dco::run_samples(cfg)) {
    std::printf("wrote samples %s\n", file.c_str());
  }
  return 0;
}

int cmd_sweep(CliOptions& opts) {
  dco::ExperimentConfig cfg = load_config(opts, false);
  dco::ExperimentResult res = dco::run_sweep(cfg);
  std::printf("swept %zu guidance points over %zu runs\n", res.points.size(),
              res.run_dirs.size());
  std::printf("wrote report under %s/sweep\n", cfg.out_dir.c_str());
  print_dominance_summary(res.points);
  return 0;
}

int cmd_merge(CliOptions& opts) {
  dco::ExperimentConfig cfg = load_config(opts, false);
  std::printf("method seed subject style fidelity\n");
  for (const dco::MergeRow& r : dco::run_merges(cfg)) {
    std::printf("%s %llu %.4f %.4f %.4f\n", r.label.c_str(),
                static_cast<unsigned long long>(r.seed),
                r.report.subject_consistency, r.report.style_consistency,
                r.report.fidelity);
  }
  std::printf("wrote report under %s/merge\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_diagnose(CliOptions& opts) {
  dco::ExperimentConfig cfg = load_config(opts, false);
  std::printf("label seed mean_noise_distance\n");
  for (const dco::DiagnoseRow& r : dco::run_diagnose(cfg)) {
    std::printf("%s %llu %.6g\n", r.label.c_str(),
                static_cast<unsigned long long>(r.seed), r.overall_mean);
  }
  std::printf("wrote profiles under %s/diagnose\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_report(CliOptions& opts) {
  std::string csv = opts.pareto_csv;
  if (csv.empty()) {
    if (opts.config_path.empty()) {
      throw std::runtime_error("cli: report needs --csv or --config");
    }
    dco::ExperimentConfig cfg = load_config(opts, false);
    csv = cfg.out_dir + "/sweep/pareto.csv";
  }
  std::vector<dco::ParetoPoint> points = dco::read_pareto_csv(csv);
  std::vector<std::string> diamonds;
  std::set<std::string> seen;
  for (const dco::ParetoPoint& p : points) {
    // Plain-guidance comparison methods are marked by the sweep naming
    // convention.
    if (p.method.size() > 4 &&
        p.method.compare(p.method.size() - 4, 4, "-cfg") == 0 &&
        seen.insert(p.method).second) {
      diamonds.push_back(p.method);
    }
  }
  std::string dir = std::filesystem::path(csv).parent_path().string();
  if (dir.empty()) dir = ".";
  dco::pareto_report(points, dir, diamonds);
  std::printf("rebuilt report under %s from %zu points\n", dir.c_str(),
              points.size());
  print_dominance_summary(points);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale consistency fine-tuning lab"};
  app.require_subcommand(1);

  CliOptions opts;
  std::string active;

  auto add_common = [&](CLI::App* sub, bool with_config = true) {
    if (with_config) {
      sub->add_option("--config", opts.config_path,
                      "Experiment config (JSON)");
    }
    sub->add_option("--out", opts.out_dir,
                    "Output directory (overrides the config)");
    sub->callback([&, sub]() { active = sub->get_name(); });
    return sub;
  };

  CLI::App* train_base = add_common(
      app.add_subcommand("train-base", "Pretrain and save the base model"));
  train_base->add_option("--seed", opts.seed, "Override the base seed");

  CLI::App* finetune = add_common(app.add_subcommand(
      "finetune", "Fine-tune every configured block against the saved base"));
  finetune->add_option("--seed", opts.seed,
                       "Restrict every block to this one seed");
  finetune->add_option("--beta", opts.beta,
                       "Override the deviation-loss temperature");
  finetune->add_option("--objective", opts.objective,
                       "Override the training objective (dm, dm-prior, dco)");

  CLI::App* sample = add_common(app.add_subcommand(
      "sample", "Draw guided samples from every saved run"));
  sample->add_option("--seed", opts.seed,
                     "Restrict every block to this one seed");
  sample->add_option("--omega-con", opts.omega_con,
                     "Comma-separated consistency-guidance scales");

  CLI::App* sweep = add_common(app.add_subcommand(
      "sweep", "Score the guidance grid and write the Pareto report"));
  sweep->add_option("--seed", opts.seed,
                    "Restrict every block to this one seed");
  sweep->add_option("--workers", opts.workers,
                    "Threads for scoring grid points");
  sweep->add_option("--omega-con", opts.omega_con,
                    "Comma-separated consistency-guidance scales");

  CLI::App* merge = add_common(app.add_subcommand(
      "merge", "Merge configured adapter pairs and score the result"));
  merge->add_option("--seed", opts.seed,
                    "Restrict every block to this one seed");

  CLI::App* diagnose = add_common(app.add_subcommand(
      "diagnose", "Noise-distance profiles of every run against the base"));
  diagnose->add_option("--seed", opts.seed,
                       "Restrict every block to this one seed");

  CLI::App* report = add_common(app.add_subcommand(
      "report", "Rebuild the Pareto report from a points CSV"));
  report->add_option("--csv", opts.pareto_csv,
                     "Points CSV (defaults to <out>/sweep/pareto.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (active == "train-base") return cmd_train_base(opts);
    if (active == "finetune") return cmd_finetune(opts);
    if (active == "sample") return cmd_sample(opts);
    if (active == "sweep") return cmd_sweep(opts);
    if (active == "merge") return cmd_merge(opts);
    if (active == "diagnose") return cmd_diagnose(opts);
    if (active == "report") return cmd_report(opts);
    throw std::runtime_error("cli: unknown subcommand");
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_error_record(active, e.what(), opts);
    return 1;
  }
}
