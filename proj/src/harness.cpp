// SPDX-License-Identifier: Apache-2.0

#include "dco/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dco/serialize.hpp"

namespace dco {
namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("harness: " + msg);
}

std::vector<std::string> method_labels(const std::vector<ParetoPoint>& points) {
  std::set<std::string> seen;
  for (const ParetoPoint& p : points) seen.insert(p.method);
  return {seen.begin(), seen.end()};
}

std::vector<ParetoPoint> points_of(const std::vector<ParetoPoint>& points,
                                   const std::string& method) {
  std::vector<ParetoPoint> out;
  for (const ParetoPoint& p : points)
    if (p.method == method) out.push_back(p);
  return out;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::string format_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string format_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                          "#9467bd", "#ff7f0e", "#8c564b"};

// Unit-coefficient merge that also carries both models' learned token rows
// into the merged condition table.
AdaptedModel merge_with_tokens(const AdaptedModel& subject,
                               const AdaptedModel& style) {
  const EpsModel& base = subject.base();
  if (subject.adapter().base_checksum() != style.adapter().base_checksum() ||
      base.param_checksum() != subject.adapter().base_checksum()) {
    fail("adapters were trained against different base models");
  }
  MergeSpec spec;
  spec.entries = {{&subject.adapter(), 1.0}, {&style.adapter(), 1.0}};
  AdaptedModel merged = attach(base, merge(spec));
  for (const AdaptedModel* src : {&subject, &style}) {
    for (const TokenEmbedding& tok : src->new_tokens()) {
      const Tensor& trained = src->conditions().row(tok.row);
      int existing = merged.conditions().index_of(tok.name);
      if (existing >= 0) {
        if (merged.conditions().row(existing).values() != trained.values()) {
          fail("conflicting token '" + tok.name + "' in merged adapters");
        }
        continue;
      }
      int id = merged.add_token(tok.name, tok.init_from);
      merged.conditions().mutable_row(id) =
          Tensor(trained.shape(), trained.values());
    }
  }
  return merged;
}

}  // namespace

bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  if (!(a.consistency >= b.consistency && a.fidelity >= b.fidelity)) {
    return false;
  }
  return a.consistency > b.consistency || a.fidelity > b.fidelity;
}

std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint> points) {
  std::vector<ParetoPoint> out;
  for (const ParetoPoint& p : points) {
    bool dominated = false;
    for (const ParetoPoint& q : points) {
      if (dominates(q, p)) {
        dominated = true;
        break;
      }
    }
    if (!dominated) out.push_back(p);
  }
  std::sort(out.begin(), out.end(),
            [](const ParetoPoint& a, const ParetoPoint& b) {
              if (a.consistency != b.consistency)
                return a.consistency < b.consistency;
              if (a.fidelity != b.fidelity) return a.fidelity > b.fidelity;
              if (a.omega_con != b.omega_con) return a.omega_con < b.omega_con;
              return a.seed < b.seed;
            });
  return out;
}

double dominance_fraction(const std::vector<ParetoPoint>& a,
                          const std::vector<ParetoPoint>& b) {
  if (a.empty() || b.empty()) fail("dominance needs nonempty point sets");
  double total = 0.0;
  for (const ParetoPoint& p : a) {
    for (const ParetoPoint& q : b) {
      if (dominates(p, q)) {
        total += 1.0;
      } else if (dominates(q, p)) {
        total += 0.0;
      } else {
        total += 0.5;  // ties and incomparable pairs split the credit
      }
    }
  }
  return total / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

std::vector<DominanceEntry> dominance_matrix(
    const std::vector<ParetoPoint>& points) {
  std::vector<std::string> methods = method_labels(points);
  std::vector<DominanceEntry> out;
  for (const std::string& ma : methods) {
    for (const std::string& mb : methods) {
      if (ma == mb) continue;
      out.push_back(
          {ma, mb, dominance_fraction(points_of(points, ma),
                                      points_of(points, mb))});
    }
  }
  return out;
}

double spearman_rho(const std::vector<double>& x,
                    const std::vector<double>& y) {
  if (x.size() != y.size()) fail("rank correlation needs equal-length series");
  if (x.size() < 2) fail("rank correlation needs at least two points");
  std::vector<double> rx = average_ranks(x);
  std::vector<double> ry = average_ranks(y);
  double n = static_cast<double>(x.size());
  double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double dx = rx[i] - mean;
    double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

void write_pareto_csv(const std::string& path,
                      const std::vector<ParetoPoint>& points) {
  std::ofstream out(path);
  if (!out) fail("cannot open csv file for writing: " + path);
  out << "method,omega_con,seed,consistency,fidelity\n";
  for (const ParetoPoint& p : points) {
    if (p.method.find(',') != std::string::npos) {
      fail("method label must not contain a comma: " + p.method);
    }
    out << p.method << "," << format_num(p.omega_con) << "," << p.seed << ","
        << format_num(p.consistency) << "," << format_num(p.fidelity) << "\n";
  }
  if (!out) fail("failed writing csv file: " + path);
}

std::vector<ParetoPoint> read_pareto_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open csv file: " + path);
  std::string line;
  if (!std::getline(in, line) ||
      line != "method,omega_con,seed,consistency,fidelity") {
    fail("unexpected csv header in " + path);
  }
  std::vector<ParetoPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    ParetoPoint p;
    try {
      std::getline(ss, p.method, ',');
      std::getline(ss, field, ',');
      p.omega_con = std::stod(field);
      std::getline(ss, field, ',');
      p.seed = std::stoull(field);
      std::getline(ss, field, ',');
      p.consistency = std::stod(field);
      std::getline(ss, field, ',');
      p.fidelity = std::stod(field);
    } catch (const std::exception&) {
      fail("malformed csv line in " + path + ": " + line);
    }
    out.push_back(std::move(p));
  }
  return out;
}

void write_pareto_svg(const std::string& path,
                      const std::vector<ParetoPoint>& points,
                      const std::vector<std::string>& diamond_methods) {
  if (points.empty()) fail("nothing to plot");
  double lo_x = points[0].fidelity, hi_x = lo_x;
  double lo_y = points[0].consistency, hi_y = lo_y;
  for (const ParetoPoint& p : points) {
    lo_x = std::min(lo_x, p.fidelity);
    hi_x = std::max(hi_x, p.fidelity);
    lo_y = std::min(lo_y, p.consistency);
    hi_y = std::max(hi_y, p.consistency);
  }
  double pad_x = (hi_x - lo_x) > 0 ? 0.08 * (hi_x - lo_x) : 0.05;
  double pad_y = (hi_y - lo_y) > 0 ? 0.08 * (hi_y - lo_y) : 0.05;
  lo_x -= pad_x;
  hi_x += pad_x;
  lo_y -= pad_y;
  hi_y += pad_y;

  const double w = 640, h = 480, ml = 70, mr = 20, mt = 20, mb = 50;
  auto sx = [&](double v) {
    return ml + (v - lo_x) / (hi_x - lo_x) * (w - ml - mr);
  };
  auto sy = [&](double v) {
    return h - mb - (v - lo_y) / (hi_y - lo_y) * (h - mt - mb);
  };

  std::ofstream out(path);
  if (!out) fail("cannot open svg file for writing: " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
      << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << " " << h
      << "\">\n";
  out << "<rect width=\"" << w << "\" height=\"" << h
      << "\" fill=\"white\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr
      << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double fx = lo_x + (hi_x - lo_x) * i / 4.0;
    double fy = lo_y + (hi_y - lo_y) * i / 4.0;
    out << "<text x=\"" << format_coord(sx(fx)) << "\" y=\"" << h - mb + 18
        << "\" font-size=\"11\" text-anchor=\"middle\">" << format_tick(fx)
        << "</text>\n";
    out << "<text x=\"" << ml - 8 << "\" y=\"" << format_coord(sy(fy) + 4)
        << "\" font-size=\"11\" text-anchor=\"end\">" << format_tick(fy)
        << "</text>\n";
  }
  out << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12
      << "\" font-size=\"13\" text-anchor=\"middle\">prompt fidelity"
      << "</text>\n";
  out << "<text x=\"16\" y=\"" << (mt + h - mb) / 2
      << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 "
      << "16 " << (mt + h - mb) / 2 << ")\">consistency</text>\n";

  std::vector<std::string> methods = method_labels(points);
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    const std::string& method = methods[mi];
    const char* color = kPalette[mi % 6];
    bool diamond = std::find(diamond_methods.begin(), diamond_methods.end(),
                             method) != diamond_methods.end();
    std::vector<ParetoPoint> own = points_of(points, method);
    std::vector<ParetoPoint> front = pareto_frontier(own);
    if (front.size() > 1 && !diamond) {
      out << "<polyline fill=\"none\" stroke=\"" << color
          << "\" stroke-width=\"1.5\" points=\"";
      for (const ParetoPoint& p : front) {
        out << format_coord(sx(p.fidelity)) << ","
            << format_coord(sy(p.consistency)) << " ";
      }
      out << "\"/>\n";
    }
    for (const ParetoPoint& p : own) {
      double cx = sx(p.fidelity), cy = sy(p.consistency);
      if (diamond) {
        out << "<path d=\"M " << format_coord(cx) << " "
            << format_coord(cy - 5) << " L " << format_coord(cx + 5) << " "
            << format_coord(cy) << " L " << format_coord(cx) << " "
            << format_coord(cy + 5) << " L " << format_coord(cx - 5) << " "
            << format_coord(cy) << " Z\" fill=\"" << color << "\"/>\n";
      } else {
        out << "<circle cx=\"" << format_coord(cx) << "\" cy=\""
            << format_coord(cy) << "\" r=\"3.5\" fill=\"" << color
            << "\"/>\n";
      }
    }
    double ly = mt + 16.0 * static_cast<double>(mi) + 10.0;
    out << "<rect x=\"" << w - mr - 150 << "\" y=\"" << format_coord(ly - 8)
        << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
    out << "<text x=\"" << w - mr - 135 << "\" y=\"" << format_coord(ly + 1)
        << "\" font-size=\"12\">" << method << "</text>\n";
  }
  out << "</svg>\n";
  if (!out) fail("failed writing svg file: " + path);
}

void pareto_report(const std::vector<ParetoPoint>& points,
                   const std::string& dir,
                   const std::vector<std::string>& diamond_methods) {
  std::vector<std::string> methods = method_labels(points);
  if (methods.size() < 2) fail("pareto report needs at least two methods");
  for (const std::string& m : methods) {
    if (points_of(points, m).size() < 2) {
      fail("method '" + m + "' has fewer than two points");
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail("cannot create report directory: " + dir);

  write_pareto_csv(dir + "/pareto.csv", points);

  std::vector<ParetoPoint> frontier;
  for (const std::string& m : methods) {
    std::vector<ParetoPoint> f = pareto_frontier(points_of(points, m));
    frontier.insert(frontier.end(), f.begin(), f.end());
  }
  write_pareto_csv(dir + "/frontier.csv", frontier);

  std::ofstream dom(dir + "/dominance.csv");
  if (!dom) fail("cannot open csv file for writing: " + dir +
                 "/dominance.csv");
  dom << "method_a,method_b,fraction\n";
  for (const DominanceEntry& e : dominance_matrix(points)) {
    dom << e.method_a << "," << e.method_b << "," << format_num(e.fraction)
        << "\n";
  }

  write_pareto_svg(dir + "/pareto.svg", points, diamond_methods);
}

GuidancePointScore evaluate_guidance_point(
    const AdaptedModel& theta, const EpsModel& phi, int cond,
    const GuidanceConfig& guidance, const SamplerConfig& sampler,
    std::size_t n_samples, const std::vector<std::vector<double>>& refs,
    const GaussianConceptWorld& world,
    const std::string& fidelity_condition) {
  GuidedEps fn = make_guided_predictor(theta, phi, cond, guidance);
  std::vector<std::vector<double>> samples =
      sample(fn, phi.schedule(), sampler, n_samples, phi.spec().data_dim);
  GuidancePointScore score;
  score.consistency = consistency_score(samples, refs);
  score.fidelity =
      prompt_fidelity(samples, world.require(fidelity_condition), world);
  return score;
}

SubjectStyleReport my_subject_my_style(
    const AdaptedModel& subject, const AdaptedModel& style,
    const std::vector<std::vector<double>>& subject_refs,
    const std::vector<std::vector<double>>& style_refs,
    const GaussianConceptWorld& world, const std::string& fidelity_condition,
    const std::string& sample_condition, const GuidanceConfig& guidance,
    const SamplerConfig& sampler, std::size_t n_samples) {
  const EpsModel& base = subject.base();
  AdaptedModel merged = merge_with_tokens(subject, style);
  int cond = merged.conditions().require(sample_condition);
  GuidedEps fn = make_guided_predictor(merged, base, cond, guidance);
  SubjectStyleReport rep;
  rep.samples =
      sample(fn, base.schedule(), sampler, n_samples, base.spec().data_dim);
  rep.subject_consistency = consistency_score(rep.samples, subject_refs);
  rep.style_consistency = consistency_score(rep.samples, style_refs);
  rep.fidelity = prompt_fidelity(
      rep.samples, world.require(fidelity_condition), world);
  return rep;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["world"] = world_file;
  j["out"] = out_dir;
  j["workers"] = workers;
  j["base"] = {{"steps", base.steps},
               {"batch", base.batch},
               {"lr", base.lr},
               {"seed", base.seed},
               {"holdout", base.holdout},
               {"model",
                {{"data_dim", base.model.data_dim},
                 {"embed_dim", base.model.embed_dim},
                 {"time_dim", base.model.time_dim},
                 {"hidden", base.model.hidden}}}};
  j["finetunes"] = nlohmann::json::array();
  for (const FinetuneBlock& b : finetunes) {
    nlohmann::json fb;
    fb["label"] = b.label;
    fb["train"] = b.train.to_json();
    fb["rank"] = b.rank;
    fb["seeds"] = b.seeds;
    fb["ref_condition"] = b.ref_condition;
    fb["parent_condition"] = b.parent_condition;
    fb["token"] = b.token;
    fb["ref_count"] = b.ref_count;
    fb["prior_count"] = b.prior_count;
    fb["ref_seed"] = b.ref_seed;
    j["finetunes"].push_back(fb);
  }
  j["sweep"] = {{"omega_text", sweep.omega_text},
                {"omega_con", sweep.omega_cons},
                {"cfg_omega", sweep.cfg_omega},
                {"samples_per_point", sweep.samples_per_point},
                {"sampler_steps", sweep.sampler_steps},
                {"seed", sweep.seed}};
  j["merge"] = {{"omega_text", merges.omega_text},
                {"omega_con", merges.omega_con},
                {"samples_per_pair", merges.samples_per_pair},
                {"sampler_steps", merges.sampler_steps},
                {"seed", merges.seed},
                {"pairs", nlohmann::json::array()}};
  for (const MergePair& p : merges.pairs) {
    j["merge"]["pairs"].push_back(
        {{"label", p.label}, {"subject", p.subject}, {"style", p.style}});
  }
  j["diagnose"] = {{"t_points", diagnose.t_points},
                   {"n_noise", diagnose.n_noise},
                   {"seed", diagnose.seed}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  try {
    cfg.world_file = j.at("world").get<std::string>();
    cfg.out_dir = j.at("out").get<std::string>();
    cfg.workers = j.value("workers", std::size_t{1});
    const auto& b = j.at("base");
    cfg.base.steps = b.at("steps").get<std::size_t>();
    cfg.base.batch = b.value("batch", std::size_t{16});
    cfg.base.lr = b.value("lr", 5e-4);
    cfg.base.seed = b.at("seed").get<std::uint64_t>();
    cfg.base.holdout = b.value("holdout", std::vector<std::string>{});
    if (b.contains("model")) {
      const auto& m = b.at("model");
      cfg.base.model.data_dim = m.value("data_dim", std::size_t{0});
      cfg.base.model.embed_dim = m.value("embed_dim", std::size_t{8});
      cfg.base.model.time_dim = m.value("time_dim", std::size_t{8});
      cfg.base.model.hidden =
          m.value("hidden", std::vector<std::size_t>{64, 64});
    } else {
      cfg.base.model.data_dim = 0;
    }
    for (const auto& fb : j.value("finetunes", nlohmann::json::array())) {
      FinetuneBlock blk;
      blk.label = fb.at("label").get<std::string>();
      blk.train = TrainConfig::from_json(fb.at("train"));
      blk.rank = fb.value("rank", std::size_t{4});
      blk.seeds = fb.at("seeds").get<std::vector<std::uint64_t>>();
      blk.ref_condition = fb.at("ref_condition").get<std::string>();
      blk.parent_condition = fb.at("parent_condition").get<std::string>();
      blk.token = fb.value("token", std::string{});
      blk.ref_count = fb.value("ref_count", std::size_t{6});
      blk.prior_count = fb.value("prior_count", std::size_t{0});
      blk.ref_seed = fb.value("ref_seed", std::uint64_t{777});
      cfg.finetunes.push_back(std::move(blk));
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      cfg.sweep.omega_text = s.value("omega_text", 7.5);
      cfg.sweep.omega_cons =
          s.value("omega_con", std::vector<double>{2.0, 3.0, 4.0, 5.0});
      cfg.sweep.cfg_omega = s.value("cfg_omega", 7.5);
      cfg.sweep.samples_per_point =
          s.value("samples_per_point", std::size_t{64});
      cfg.sweep.sampler_steps = s.value("sampler_steps", std::size_t{50});
      cfg.sweep.seed = s.value("seed", std::uint64_t{5000});
    }
    if (j.contains("merge")) {
      const auto& m = j.at("merge");
      cfg.merges.omega_text = m.value("omega_text", 7.5);
      cfg.merges.omega_con = m.value("omega_con", 3.0);
      cfg.merges.samples_per_pair =
          m.value("samples_per_pair", std::size_t{32});
      cfg.merges.sampler_steps = m.value("sampler_steps", std::size_t{50});
      cfg.merges.seed = m.value("seed", std::uint64_t{6000});
      for (const auto& p : m.value("pairs", nlohmann::json::array())) {
        cfg.merges.pairs.push_back({p.at("label").get<std::string>(),
                                    p.at("subject").get<std::string>(),
                                    p.at("style").get<std::string>()});
      }
    }
    if (j.contains("diagnose")) {
      const auto& d = j.at("diagnose");
      cfg.diagnose.t_points = d.value("t_points", std::size_t{12});
      cfg.diagnose.n_noise = d.value("n_noise", std::size_t{100});
      cfg.diagnose.seed = d.value("seed", std::uint64_t{4242});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad experiment config: ") + e.what());
  }
  for (const FinetuneBlock& blk : cfg.finetunes) {
    if (blk.label.empty()) fail("fine-tune block needs a label");
    if (blk.seeds.empty()) fail("fine-tune block needs at least one seed");
    std::set<std::uint64_t> unique(blk.seeds.begin(), blk.seeds.end());
    if (unique.size() != blk.seeds.size()) {
      fail("duplicate seed in fine-tune block '" + blk.label + "'");
    }
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') ++line;
    }
    fail("config parse error in " + path + " at line " +
         std::to_string(line) + ": " + e.what());
  }
  ExperimentConfig cfg = from_json(j);
  std::filesystem::path world(cfg.world_file);
  if (world.is_relative()) {
    world = std::filesystem::path(path).parent_path() / world;
    cfg.world_file = world.string();
  }
  if (!std::filesystem::exists(cfg.world_file)) {
    fail("world file not found: " + cfg.world_file);
  }
  return cfg;
}

GaussianConceptWorld training_world(const GaussianConceptWorld& world,
                                    const std::vector<std::string>& holdout) {
  for (const std::string& name : holdout) world.require(name);
  GaussianConceptWorld out(world.dim(), world.seed());
  for (int c = 0; c < static_cast<int>(world.num_conditions()); ++c) {
    const std::string& name = world.name_of(c);
    if (std::find(holdout.begin(), holdout.end(), name) != holdout.end()) {
      continue;
    }
    out.add_condition(name, world.components(c));
  }
  if (out.num_conditions() == 0) fail("holdout removes every condition");
  return out;
}

namespace {

std::string base_checkpoint_path(const ExperimentConfig& cfg) {
  return cfg.out_dir + "/base/model.bin";
}

std::string run_dir_path(const ExperimentConfig& cfg, const std::string& label,
                         std::uint64_t seed) {
  return cfg.out_dir + "/runs/" + label + "-seed" + std::to_string(seed);
}

EpsModel load_base_checkpoint(const ExperimentConfig& cfg) {
  std::string path = base_checkpoint_path(cfg);
  if (!std::filesystem::exists(path)) {
    fail("missing base checkpoint " + path + "; run train-base first");
  }
  return load_model(path);
}

AdaptedModel load_run_adapter(const EpsModel& base, const std::string& dir) {
  std::string path = dir + "/adapter.bin";
  if (!std::filesystem::exists(path)) {
    fail("missing adapter checkpoint " + path + "; run finetune first");
  }
  bool mismatch = false;
  AdaptedModel model = load_adapter(base, path, &mismatch);
  if (mismatch) {
    fail("adapter " + path + " was trained against a different base model");
  }
  return model;
}

// One fixed reference set per (seed, condition, count): blocks that point at
// the same concept train on the same data regardless of their labels, so
// objective ablations compare like for like.
std::vector<std::vector<double>> block_refs(
    const GaussianConceptWorld& world,
    const ExperimentConfig::FinetuneBlock& blk) {
  int ref_cond = world.require(blk.ref_condition);
  Rng rng(derive_seed(blk.ref_seed, "refs/" + blk.ref_condition));
  std::vector<std::vector<double>> refs;
  for (std::size_t i = 0; i < blk.ref_count; ++i) {
    refs.push_back(world.sample(ref_cond, rng));
  }
  return refs;
}

std::string block_condition(const ExperimentConfig::FinetuneBlock& blk) {
  return blk.token.empty() ? blk.parent_condition : blk.token;
}

const ExperimentConfig::FinetuneBlock& find_block(const ExperimentConfig& cfg,
                                                  const std::string& label) {
  for (const auto& blk : cfg.finetunes) {
    if (blk.label == label) return blk;
  }
  fail("no fine-tune block labelled '" + label + "'");
}

void make_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail("cannot create output directory: " + dir);
}

struct LoadedRun {
  std::string label;
  std::uint64_t seed = 0;
  AdaptedModel model;
  std::vector<std::vector<double>> refs;
  int cond = 0;
  std::string parent;
};

std::vector<LoadedRun> load_runs(const ExperimentConfig& cfg,
                                 const EpsModel& base,
                                 const GaussianConceptWorld& world) {
  std::vector<LoadedRun> runs;
  for (const ExperimentConfig::FinetuneBlock& blk : cfg.finetunes) {
    std::vector<std::vector<double>> refs = block_refs(world, blk);
    for (std::uint64_t seed : blk.seeds) {
      AdaptedModel model =
          load_run_adapter(base, run_dir_path(cfg, blk.label, seed));
      int cond = model.conditions().require(block_condition(blk));
      runs.push_back(
          {blk.label, seed, std::move(model), refs, cond, blk.parent_condition});
    }
  }
  return runs;
}

void write_profile_csv(const std::string& path, const DeviationReport& rep) {
  std::ofstream out(path);
  if (!out) fail("cannot open csv file for writing: " + path);
  out << "t,mean_distance,standard_error\n";
  for (std::size_t i = 0; i < rep.t_grid.size(); ++i) {
    out << format_num(rep.t_grid[i]) << "," << format_num(rep.mean_distance[i])
        << "," << format_num(rep.standard_error[i]) << "\n";
  }
}

}  // namespace

std::string run_train_base(const ExperimentConfig& cfg) {
  GaussianConceptWorld world = GaussianConceptWorld::load(cfg.world_file);
  GaussianConceptWorld base_world = training_world(world, cfg.base.holdout);

  ModelSpec spec = cfg.base.model;
  if (spec.data_dim == 0) {
    spec.data_dim = world.dim();
  } else if (spec.data_dim != world.dim()) {
    fail("model data_dim conflicts with the world");
  }

  make_out_dir(cfg.out_dir + "/base");
  EpsModel base = pretrain_base(base_world, spec, cfg.base.steps,
                                cfg.base.seed, cfg.base.batch, cfg.base.lr);
  std::string path = base_checkpoint_path(cfg);
  save_model(base, path);
  return path;
}

std::vector<std::string> run_finetunes(const ExperimentConfig& cfg) {
  GaussianConceptWorld world = GaussianConceptWorld::load(cfg.world_file);
  GaussianConceptWorld base_world = training_world(world, cfg.base.holdout);
  EpsModel base = load_base_checkpoint(cfg);

  std::vector<std::string> dirs;
  for (const ExperimentConfig::FinetuneBlock& blk : cfg.finetunes) {
    base_world.require(blk.parent_condition);
    std::vector<std::vector<double>> refs = block_refs(world, blk);

    for (std::uint64_t seed : blk.seeds) {
      LoraAdapter adapter =
          LoraAdapter::fresh(base, blk.rank, derive_seed(seed, "adapter"));
      AdaptedModel model = attach(base, adapter);
      int train_cond;
      if (!blk.token.empty()) {
        train_cond = model.add_token(blk.token, blk.parent_condition);
      } else {
        train_cond = model.conditions().require(blk.parent_condition);
      }

      ConditionedBatch ref_batch;
      for (const auto& x : refs) ref_batch.push_back({x, train_cond});

      ConditionedBatch prior_batch;
      if (blk.train.objective == Objective::dm_prior) {
        if (blk.prior_count == 0) {
          fail("prior_count must be positive for the prior-preservation "
               "objective");
        }
        std::string prior_name = blk.train.prior.prior_condition.empty()
                                     ? blk.parent_condition
                                     : blk.train.prior.prior_condition;
        int prior_cond = model.conditions().require(prior_name);
        int prior_world = base_world.require(prior_name);
        Rng prior_rng(derive_seed(blk.ref_seed, "prior/" + prior_name));
        for (std::size_t i = 0; i < blk.prior_count; ++i) {
          prior_batch.push_back(
              {base_world.sample(prior_world, prior_rng), prior_cond});
        }
      }

      TrainConfig tc = blk.train;
      tc.seed = seed;
      RunRecord rec = finetune(model, ref_batch, prior_batch, tc);
      std::string dir = run_dir_path(cfg, blk.label, seed);
      rec.checkpoint = "adapter.bin";
      save_run_record(rec, dir);
      save_adapter(model, dir + "/adapter.bin");
      dirs.push_back(dir);
    }
  }
  return dirs;
}

ExperimentResult run_sweep(const ExperimentConfig& cfg) {
  GaussianConceptWorld world = GaussianConceptWorld::load(cfg.world_file);
  EpsModel base = load_base_checkpoint(cfg);
  std::vector<LoadedRun> runs = load_runs(cfg, base, world);
  if (runs.empty()) fail("experiment has no fine-tune runs to sweep");

  struct Task {
    const LoadedRun* run = nullptr;
    GuidanceConfig guidance;
    std::string method;
    double omega_label = 0.0;
  };
  std::vector<Task> tasks;
  for (const LoadedRun& run : runs) {
    for (double oc : cfg.sweep.omega_cons) {
      GuidanceConfig g;
      g.omega_text = cfg.sweep.omega_text;
      g.omega_con = oc;
      tasks.push_back({&run, g, run.label, oc});
    }
    GuidanceConfig plain;
    plain.plain_cfg = true;
    plain.omega = cfg.sweep.cfg_omega;
    tasks.push_back({&run, plain, run.label + "-cfg", 0.0});
  }

  std::vector<ParetoPoint> points(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      const Task& task = tasks[i];
      SamplerConfig sampler;
      sampler.steps = cfg.sweep.sampler_steps;
      // Seeded by run identity so results do not depend on the worker count
      // or completion order. The guidance scale is left out on purpose:
      // every point of a run's trade-off curve starts from the same noise
      // draws, so the curve reflects the guidance alone.
      sampler.seed = derive_seed(
          cfg.sweep.seed, task.method + "/" + std::to_string(task.run->seed));
      GuidancePointScore score = evaluate_guidance_point(
          task.run->model, base, task.run->cond, task.guidance, sampler,
          cfg.sweep.samples_per_point, task.run->refs, world,
          task.run->parent);
      points[i] = {task.method, task.omega_label, score.consistency,
                   score.fidelity, task.run->seed};
    }
  };
  std::size_t n_workers = std::max<std::size_t>(1, cfg.workers);
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_workers; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  ExperimentResult result;
  result.points = points;
  result.base_checkpoint = base_checkpoint_path(cfg);
  for (const LoadedRun& run : runs) {
    result.run_dirs.push_back(run_dir_path(cfg, run.label, run.seed));
  }
  for (const ExperimentConfig::FinetuneBlock& blk : cfg.finetunes) {
    result.diamond_methods.push_back(blk.label + "-cfg");
  }
  pareto_report(result.points, cfg.out_dir + "/sweep",
                result.diamond_methods);
  return result;
}

std::vector<std::string> run_samples(const ExperimentConfig& cfg) {
  GaussianConceptWorld world = GaussianConceptWorld::load(cfg.world_file);
  EpsModel base = load_base_checkpoint(cfg);
  std::vector<LoadedRun> runs = load_runs(cfg, base, world);
  if (cfg.sweep.omega_cons.empty()) {
    fail("sweep block has no guidance scales to sample with");
  }
  make_out_dir(cfg.out_dir + "/samples");

  std::vector<std::string> files;
  SamplerConfig sampler;
  sampler.steps = cfg.sweep.sampler_steps;

  for (const LoadedRun& run : runs) {
    GuidanceConfig g;
    g.omega_text = cfg.sweep.omega_text;
    g.omega_con = cfg.sweep.omega_cons.front();
    sampler.seed = derive_seed(
        cfg.sweep.seed, "sample/" + run.label + "/" + std::to_string(run.seed));
    GuidedEps fn = make_guided_predictor(run.model, base, run.cond, g);
    auto xs = sample(fn, base.schedule(), sampler, cfg.sweep.samples_per_point,
                     base.spec().data_dim);
    std::vector<SampleRow> rows;
    for (const auto& x : xs) {
      rows.push_back({run.seed, run.model.conditions().name_of(run.cond),
                      g.omega_text, g.omega_con, x});
    }
    std::string path = cfg.out_dir + "/samples/" + run.label + "-seed" +
                       std::to_string(run.seed) + ".csv";
    write_samples_csv(path, rows);
    files.push_back(path);
  }

  std::set<std::string> parents;
  for (const auto& blk : cfg.finetunes) parents.insert(blk.parent_condition);
  for (const std::string& parent : parents) {
    int cond = base.conditions().require(parent);
    sampler.seed = derive_seed(cfg.sweep.seed, "sample/base/" + parent);
    GuidedEps fn = [&](const std::vector<double>& z, double t) {
      return cfg_eps(base, z, cond, t, cfg.sweep.cfg_omega);
    };
    auto xs = sample(fn, base.schedule(), sampler, cfg.sweep.samples_per_point,
                     base.spec().data_dim);
    std::vector<SampleRow> rows;
    for (const auto& x : xs) {
      rows.push_back({0, parent, cfg.sweep.cfg_omega, 0.0, x});
    }
    std::string path = cfg.out_dir + "/samples/base-" + parent + ".csv";
    write_samples_csv(path, rows);
    files.push_back(path);
  }
  return files;
}

std::vector<MergeRow> run_merges(const ExperimentConfig& cfg) {
  if (cfg.merges.pairs.empty()) fail("no merge pairs configured");
  GaussianConceptWorld world = GaussianConceptWorld::load(cfg.world_file);
  EpsModel base = load_base_checkpoint(cfg);
  make_out_dir(cfg.out_dir + "/merge");

  GuidanceConfig guidance;
  guidance.omega_text = cfg.merges.omega_text;
  guidance.omega_con = cfg.merges.omega_con;

  std::vector<MergeRow> rows;
  for (const ExperimentConfig::MergePair& pair : cfg.merges.pairs) {
    const auto& subject_blk = find_block(cfg, pair.subject);
    const auto& style_blk = find_block(cfg, pair.style);
    auto subject_refs = block_refs(world, subject_blk);
    auto style_refs = block_refs(world, style_blk);

    std::vector<std::uint64_t> shared;
    for (std::uint64_t s : subject_blk.seeds) {
      if (std::find(style_blk.seeds.begin(), style_blk.seeds.end(), s) !=
          style_blk.seeds.end()) {
        shared.push_back(s);
      }
    }
    if (shared.empty()) {
      fail("merge pair '" + pair.label + "' has no seed common to both blocks");
    }

    for (std::uint64_t seed : shared) {
      AdaptedModel subject = load_run_adapter(
          base, run_dir_path(cfg, subject_blk.label, seed));
      AdaptedModel style =
          load_run_adapter(base, run_dir_path(cfg, style_blk.label, seed));

      SamplerConfig sampler;
      sampler.steps = cfg.merges.sampler_steps;
      sampler.seed = derive_seed(
          cfg.merges.seed, pair.label + "/" + std::to_string(seed));

      MergeRow row;
      row.label = pair.label;
      row.seed = seed;
      row.report = my_subject_my_style(
          subject, style, subject_refs, style_refs, world,
          subject_blk.parent_condition, block_condition(subject_blk),
          guidance, sampler, cfg.merges.samples_per_pair);

      AdaptedModel merged = merge_with_tokens(subject, style);
      row.checkpoint = cfg.out_dir + "/merge/" + pair.label + "-seed" +
                       std::to_string(seed) + ".bin";
      save_adapter(merged, row.checkpoint);
      rows.push_back(std::move(row));
    }
  }

  std::string path = cfg.out_dir + "/merge/report.csv";
  std::ofstream out(path);
  if (!out) fail("cannot open csv file for writing: " + path);
  out << "method,seed,subject_consistency,style_consistency,fidelity\n";
  for (const MergeRow& r : rows) {
    out << r.label << "," << r.seed << ","
        << format_num(r.report.subject_consistency) << ","
        << format_num(r.report.style_consistency) << ","
        << format_num(r.report.fidelity) << "\n";
  }
  return rows;
}

std::vector<DiagnoseRow> run_diagnose(const ExperimentConfig& cfg) {
  GaussianConceptWorld world = GaussianConceptWorld::load(cfg.world_file);
  EpsModel base = load_base_checkpoint(cfg);
  if (cfg.diagnose.t_points < 2) fail("diagnose needs at least two t points");
  make_out_dir(cfg.out_dir + "/diagnose");

  std::vector<double> grid(cfg.diagnose.t_points);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    grid[i] = 0.05 + 0.9 * static_cast<double>(i) /
                         static_cast<double>(grid.size() - 1);
  }

  std::vector<DiagnoseRow> rows;

  // Zero adapter: the fine-tuned and pretrained conditionals coincide, so
  // the profile is identically zero.
  {
    AdaptedModel identity = attach(base, LoraAdapter::fresh(base, 1, 0));
    Rng rng(derive_seed(cfg.diagnose.seed, "identity"));
    ConditionedBatch batch;
    for (int i = 0; i < 6; ++i) {
      batch.push_back({world.sample(0, rng), ConditionTable::kNull});
    }
    DeviationReport rep =
        noise_distance_profile(identity, base, batch, grid,
                               cfg.diagnose.n_noise,
                               derive_seed(cfg.diagnose.seed, "identity/0"));
    std::string path = cfg.out_dir + "/diagnose/identity.csv";
    write_profile_csv(path, rep);
    rows.push_back({"identity", 0, rep.overall_mean, path});
  }

  for (const ExperimentConfig::FinetuneBlock& blk : cfg.finetunes) {
    std::vector<std::vector<double>> refs = block_refs(world, blk);
    for (std::uint64_t seed : blk.seeds) {
      AdaptedModel model =
          load_run_adapter(base, run_dir_path(cfg, blk.label, seed));
      ConditionedBatch batch;
      int cond = model.conditions().require(block_condition(blk));
      for (const auto& x : refs) batch.push_back({x, cond});
      DeviationReport rep = noise_distance_profile(
          model, base, batch, grid, cfg.diagnose.n_noise,
          derive_seed(cfg.diagnose.seed,
                      blk.label + "/" + std::to_string(seed)));
      std::string path = cfg.out_dir + "/diagnose/" + blk.label + "-seed" +
                         std::to_string(seed) + ".csv";
      write_profile_csv(path, rep);
      rows.push_back({blk.label, seed, rep.overall_mean, path});
    }
  }

  std::string path = cfg.out_dir + "/diagnose/summary.csv";
  std::ofstream out(path);
  if (!out) fail("cannot open csv file for writing: " + path);
  out << "label,seed,overall_mean\n";
  for (const DiagnoseRow& r : rows) {
    out << r.label << "," << r.seed << "," << format_num(r.overall_mean)
        << "\n";
  }
  return rows;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  run_train_base(cfg);
  run_finetunes(cfg);
  return run_sweep(cfg);
}

}  // namespace dco
