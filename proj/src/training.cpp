// SPDX-License-Identifier: Apache-2.0

#include "dco/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace dco {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTimeLo = 1e-4;
constexpr double kTimeHi = 1.0 - 1e-4;
constexpr double kConditionDropout = 0.1;

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("training: " + msg);
}

// The tensor ops reject non-finite intermediates; annotate such aborts with
// the step they happened in so divergent runs are diagnosable.
template <typename Fn>
GradientMap guarded_step(std::size_t step, double* loss_out, Fn&& fn) {
  try {
    return fn(loss_out);
  } catch (const std::runtime_error& e) {
    std::string what = e.what();
    if (what.find("non-finite") != std::string::npos) {
      fail("non-finite loss at step " + std::to_string(step) + " (" + what +
           ")");
    }
    throw;
  }
}

struct DrawSet {
  ConditionedBatch batch;
  std::vector<double> ts;
  std::vector<std::vector<double>> eps;
};

DrawSet draw_minibatch(const ConditionedBatch& pool, std::size_t batch_size,
                       std::size_t dim, double offset_noise, Rng& rng) {
  DrawSet out;
  for (std::size_t b = 0; b < batch_size; ++b) {
    out.batch.push_back(pool[rng.index(pool.size())]);
    out.ts.push_back(rng.uniform(kTimeLo, kTimeHi));
    std::vector<double> e = rng.normal_vec(dim);
    if (offset_noise > 0.0) {
      e = apply_offset_noise(e, offset_noise, rng.normal());
    }
    out.eps.push_back(std::move(e));
  }
  return out;
}

}  // namespace

std::string objective_name(Objective o) {
  switch (o) {
    case Objective::dm:
      return "dm";
    case Objective::dm_prior:
      return "dm-prior";
    case Objective::dco:
      return "dco";
  }
  fail("unknown objective");
}

Objective parse_objective(const std::string& name) {
  if (name == "dm") return Objective::dm;
  if (name == "dm-prior") return Objective::dm_prior;
  if (name == "dco") return Objective::dco;
  fail("unknown objective '" + name + "'");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["objective"] = objective_name(objective);
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["adapter_lr"] = adapter_lr;
  j["embedding_lr"] = embedding_lr;
  j["offset_noise"] = offset_noise;
  j["seed"] = seed;
  j["dco"] = {{"mode", dco.mode == BetaMode::constant ? "constant"
                                                      : "theoretical"},
              {"beta", dco.beta},
              {"constant_beta_t", dco.constant_beta_t}};
  j["prior"] = {{"lambda_prior", prior.lambda_prior},
                {"prior_condition", prior.prior_condition}};
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  try {
    cfg.objective = parse_objective(j.at("objective").get<std::string>());
    cfg.steps = j.at("steps").get<std::size_t>();
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.adapter_lr = j.value("adapter_lr", cfg.adapter_lr);
    cfg.embedding_lr = j.value("embedding_lr", cfg.embedding_lr);
    cfg.offset_noise = j.value("offset_noise", cfg.offset_noise);
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("dco")) {
      const auto& d = j.at("dco");
      std::string mode = d.value("mode", std::string{"constant"});
      if (mode == "constant") {
        cfg.dco.mode = BetaMode::constant;
      } else if (mode == "theoretical") {
        cfg.dco.mode = BetaMode::theoretical;
      } else {
        fail("unknown beta mode '" + mode + "'");
      }
      cfg.dco.beta = d.value("beta", cfg.dco.beta);
      cfg.dco.constant_beta_t = d.value("constant_beta_t", cfg.dco.beta);
    }
    if (j.contains("prior")) {
      const auto& p = j.at("prior");
      cfg.prior.lambda_prior = p.value("lambda_prior", cfg.prior.lambda_prior);
      cfg.prior.prior_condition =
          p.value("prior_condition", cfg.prior.prior_condition);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad train config: ") + e.what());
  }
  return cfg;
}

AdamOptimizer::AdamOptimizer(std::vector<Group> groups, double beta1,
                             double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Group& g : groups_) {
    if (!(g.lr > 0.0)) fail("optimizer learning rate must be positive");
    m_.emplace_back();
    v_.emplace_back();
    for (const Tensor* p : g.params) {
      m_.back().emplace_back(p->values().size(), 0.0);
      v_.back().emplace_back(p->values().size(), 0.0);
    }
  }
}

void AdamOptimizer::step(const GradientMap& grads, double lr_scale) {
  ++t_;
  double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    double lr = groups_[gi].lr * lr_scale;
    for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
      Tensor* p = groups_[gi].params[pi];
      const std::vector<double>& g = grads.at(*p).values();
      std::vector<double>& m = m_[gi][pi];
      std::vector<double>& v = v_[gi][pi];
      std::vector<double>& w = p->mutable_values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        double m_hat = m[i] / c1;
        double v_hat = v[i] / c2;
        w[i] -= lr * m_hat / (std::sqrt(v_hat) + eps_);
      }
    }
  }
}

EpsModel pretrain_base(const GaussianConceptWorld& world, const ModelSpec& spec,
                       std::size_t steps, std::uint64_t seed,
                       std::size_t batch_size, double lr) {
  if (steps < 1) fail("steps must be at least 1");
  if (batch_size < 1) fail("batch size must be at least 1");
  if (world.num_conditions() == 0) fail("world has no conditions");
  if (spec.data_dim != world.dim()) {
    fail("model data dimension does not match the world");
  }

  EpsModel model(spec, world.condition_names(), derive_seed(seed, "init"));
  const NoiseSchedule& sched = model.schedule();
  AdamOptimizer opt({{model.trainable_parameters(), lr}});
  Rng rng(derive_seed(seed, "pretrain"));

  for (std::size_t step = 0; step < steps; ++step) {
    ConditionedBatch batch;
    std::vector<double> ts;
    std::vector<std::vector<double>> eps;
    for (std::size_t b = 0; b < batch_size; ++b) {
      int world_cond = static_cast<int>(rng.index(world.num_conditions()));
      ConditionedSample s;
      s.x = world.sample(world_cond, rng);
      s.cond = model.conditions().require(world.name_of(world_cond));
      if (rng.uniform() < kConditionDropout) s.cond = ConditionTable::kNull;
      batch.push_back(std::move(s));
      ts.push_back(rng.uniform(kTimeLo, kTimeHi));
      eps.push_back(rng.normal_vec(world.dim()));
    }
    double loss_value = 0.0;
    GradientMap grads = guarded_step(step, &loss_value, [&](double* out) {
      GradientTape tape;
      for (Tensor* p : model.trainable_parameters()) tape.watch(*p);
      Tensor loss = dm_loss(model, batch, sched, ts, eps);
      *out = loss.item();
      return tape.backward(loss);
    });
    // Full rate for the first 70% of the run, cosine tail to zero after:
    // Adam at a fixed rate ends on its gradient-noise floor, and the tail
    // polishes that away without shortening the high-rate phase much.
    double frac = static_cast<double>(step) / static_cast<double>(steps);
    double decay =
        frac < 0.7 ? 1.0
                   : 0.5 * (1.0 + std::cos(kPi * (frac - 0.7) / 0.3));
    opt.step(grads, decay);
  }

  model.freeze();
  return model;
}

RunRecord finetune(AdaptedModel& model, const ConditionedBatch& ref,
                   const ConditionedBatch& prior, const TrainConfig& cfg) {
  if (cfg.steps < 1) fail("steps must be at least 1");
  if (cfg.batch_size < 1) fail("batch size must be at least 1");
  if (!(cfg.adapter_lr > 0.0) || !(cfg.embedding_lr > 0.0)) {
    fail("learning rates must be positive");
  }
  if (cfg.offset_noise < 0.0) fail("offset-noise strength must be non-negative");
  if (ref.empty()) fail("reference set must not be empty");
  if (!model.base().frozen()) fail("base model must be frozen before fine-tuning");
  if (cfg.objective == Objective::dm_prior && prior.empty()) {
    fail("prior set required for the prior-preservation objective");
  }

  const EpsModel& base = model.base();
  const NoiseSchedule& sched = base.schedule();
  std::size_t dim = base.spec().data_dim;
  std::uint64_t base_checksum = base.param_checksum();

  AdamOptimizer opt({{model.trainable_adapter_parameters(), cfg.adapter_lr},
                     {model.trainable_embedding_parameters(),
                      cfg.embedding_lr}});
  Rng rng(derive_seed(cfg.seed, "finetune"));

  RunRecord rec;
  rec.config = cfg.to_json();
  rec.seed = cfg.seed;
  auto start = std::chrono::steady_clock::now();

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    DrawSet r = draw_minibatch(ref, cfg.batch_size, dim, cfg.offset_noise, rng);
    DrawSet p;
    if (cfg.objective == Objective::dm_prior) {
      p = draw_minibatch(prior, cfg.batch_size, dim, cfg.offset_noise, rng);
    }

    double loss_value = 0.0;
    GradientMap grads = guarded_step(step, &loss_value, [&](double* out) {
      GradientTape tape;
      for (Tensor* t : model.trainable_adapter_parameters()) tape.watch(*t);
      for (Tensor* t : model.trainable_embedding_parameters()) tape.watch(*t);
      Tensor loss = Tensor::scalar(0.0);
      switch (cfg.objective) {
        case Objective::dm:
          loss = dm_loss(model, r.batch, sched, r.ts, r.eps);
          break;
        case Objective::dm_prior:
          loss = prior_preservation_loss(model, r.batch, p.batch, cfg.prior,
                                         sched, r.ts, r.eps, p.ts, p.eps);
          break;
        case Objective::dco:
          loss = dco_loss(model, base, r.batch, cfg.dco, sched, r.ts, r.eps);
          break;
      }
      *out = loss.item();
      return tape.backward(loss);
    });
    opt.step(grads);
    rec.losses.push_back(loss_value);
  }

  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  if (base.param_checksum() != base_checksum) {
    fail("base model changed during fine-tuning");
  }
  return rec;
}

DeviationReport noise_distance_profile(const AdaptedModel& theta,
                                       const EpsModel& phi,
                                       const ConditionedBatch& ref,
                                       const std::vector<double>& t_grid,
                                       std::size_t n_noise,
                                       std::uint64_t seed) {
  if (t_grid.empty()) fail("t grid must not be empty");
  if (n_noise < 1) fail("n_noise must be at least 1");
  if (ref.empty()) fail("reference set must not be empty");
  const NoiseSchedule& sched = phi.schedule();
  std::size_t dim = phi.spec().data_dim;
  for (double t : t_grid) {
    if (!(t > 0.0) || !(t < 1.0)) {
      fail("t grid point outside (0, 1): " + std::to_string(t));
    }
  }

  Rng rng(derive_seed(seed, "noise-distance"));
  DeviationReport rep;
  rep.t_grid = t_grid;
  for (double t : t_grid) {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t count = 0;
    for (const ConditionedSample& s : ref) {
      if (s.x.size() != dim) fail("reference sample dimension mismatch");
      const Tensor& row = theta.conditions().row(s.cond);
      for (std::size_t k = 0; k < n_noise; ++k) {
        std::vector<double> eps = rng.normal_vec(dim);
        std::vector<double> z = forward_draw(sched, s.x, t, eps);
        std::vector<double> a = theta.predict(z, s.cond, t);
        std::vector<double> b = phi.forward(z, row, t).values();
        double dist = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          dist += (a[j] - b[j]) * (a[j] - b[j]);
        }
        sum += dist;
        sum_sq += dist * dist;
        ++count;
      }
    }
    double mean = sum / static_cast<double>(count);
    double se = 0.0;
    if (count > 1) {
      double var = (sum_sq - sum * sum / static_cast<double>(count)) /
                   static_cast<double>(count - 1);
      se = std::sqrt(std::max(var, 0.0) / static_cast<double>(count));
    }
    rep.mean_distance.push_back(mean);
    rep.standard_error.push_back(se);
  }
  double total = 0.0;
  for (double m : rep.mean_distance) total += m;
  rep.overall_mean = total / static_cast<double>(rep.mean_distance.size());
  return rep;
}

void save_run_record(const RunRecord& record, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail("cannot create run directory: " + dir);

  std::ofstream cfg(dir + "/config.json");
  if (!cfg) fail("cannot write config.json in " + dir);
  cfg << record.config.dump(2) << "\n";

  std::ofstream loss(dir + "/loss.csv");
  if (!loss) fail("cannot write loss.csv in " + dir);
  loss << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < record.losses.size(); ++i) {
    loss << i << "," << record.losses[i] << "\n";
  }

  nlohmann::json meta;
  meta["seed"] = record.seed;
  meta["steps_executed"] = record.losses.size();
  meta["checkpoint"] = record.checkpoint;
  std::ofstream out(dir + "/meta.json");
  if (!out) fail("cannot write meta.json in " + dir);
  out << meta.dump(2) << "\n";
}

RunRecord load_run_record(const std::string& dir) {
  RunRecord rec;
  std::ifstream cfg(dir + "/config.json");
  if (!cfg) fail("cannot open run record file: " + dir + "/config.json");
  try {
    rec.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    fail("config.json is not valid JSON: " + std::string(e.what()));
  }

  std::ifstream loss(dir + "/loss.csv");
  if (!loss) fail("cannot open run record file: " + dir + "/loss.csv");
  std::string line;
  std::getline(loss, line);  // header
  while (std::getline(loss, line)) {
    if (line.empty()) continue;
    std::size_t comma = line.find(',');
    if (comma == std::string::npos) fail("malformed loss.csv line: " + line);
    rec.losses.push_back(std::stod(line.substr(comma + 1)));
  }

  std::ifstream meta(dir + "/meta.json");
  if (!meta) fail("cannot open run record file: " + dir + "/meta.json");
  try {
    nlohmann::json j = nlohmann::json::parse(meta);
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.checkpoint = j.at("checkpoint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail("meta.json is malformed: " + std::string(e.what()));
  }
  return rec;
}

}  // namespace dco
