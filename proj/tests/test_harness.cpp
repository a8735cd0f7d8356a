// SPDX-License-Identifier: Apache-2.0
//
// Pareto machinery against brute force, rank correlation edge cases, report
// files, merged-adapter evaluation, and the config-driven pipeline.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <vector>

#include "dco/harness.hpp"
#include "dco/serialize.hpp"

using namespace dco;

namespace {

ParetoPoint pt(double consistency, double fidelity,
               const std::string& method = "m", double omega = 0.0,
               std::uint64_t seed = 0) {
  return {method, omega, consistency, fidelity, seed};
}

std::filesystem::path tmp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

GaussianConceptWorld harness_world() {
  GaussianConceptWorld world(1, 11);
  Eigen::MatrixXd unit(1, 1);
  unit << 1.0;
  Eigen::MatrixXd tight(1, 1);
  tight << 0.04;
  world.add_condition("animal", {{1.0, to_eigen({0.0}), unit}});
  world.add_condition("pet", {{1.0, to_eigen({1.0}), tight}});
  world.add_condition("rare_pet", {{1.0, to_eigen({1.6}), tight}});
  return world;
}

ModelSpec harness_spec() {
  ModelSpec spec;
  spec.data_dim = 1;
  spec.embed_dim = 4;
  spec.time_dim = 8;
  spec.hidden = {24, 24};
  return spec;
}

const GaussianConceptWorld& world() {
  static GaussianConceptWorld w = harness_world();
  return w;
}

const EpsModel& tiny_base() {
  static EpsModel base = pretrain_base(training_world(world(), {"rare_pet"}),
                                       harness_spec(), 1200, 17, 16, 1e-3);
  return base;
}

std::vector<std::vector<double>> draw_refs(const std::string& cond,
                                           std::size_t n,
                                           std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(world().sample(world().require(cond), rng));
  return out;
}

AdaptedModel quick_subject(std::uint64_t seed, const std::string& token) {
  AdaptedModel model = attach(
      tiny_base(), LoraAdapter::fresh(tiny_base(), 2, derive_seed(seed, "a")));
  int cond = model.add_token(token, "pet");
  ConditionedBatch batch;
  for (const auto& x : draw_refs("rare_pet", 5, 900)) batch.push_back({x, cond});
  TrainConfig tc;
  tc.objective = Objective::dm;
  tc.steps = 60;
  tc.batch_size = 2;
  tc.adapter_lr = 1e-3;
  tc.embedding_lr = 1e-3;
  tc.seed = seed;
  finetune(model, batch, {}, tc);
  return model;
}

}  // namespace

TEST_CASE("dominance relations and fractions") {
  SUBCASE("pairwise dominance") {
    CHECK(dominates(pt(2, 2), pt(1, 1)));
    CHECK(dominates(pt(2, 2), pt(2, 1)));
    CHECK(dominates(pt(2, 2), pt(1, 2)));
    CHECK_FALSE(dominates(pt(2, 2), pt(2, 2)));
    CHECK_FALSE(dominates(pt(2, 0), pt(0, 2)));
    CHECK_FALSE(dominates(pt(0, 2), pt(2, 0)));
  }

  SUBCASE("pointwise better set scores 1") {
    std::vector<ParetoPoint> a = {pt(2, 2), pt(3, 3)};
    std::vector<ParetoPoint> b = {pt(1, 1), pt(0, 2)};
    CHECK(dominance_fraction(a, b) == 1.0);
    CHECK(dominance_fraction(b, a) == 0.0);
  }

  SUBCASE("identical sets score one half") {
    std::vector<ParetoPoint> a = {pt(1, 2), pt(3, 1)};
    CHECK(dominance_fraction(a, a) == 0.5);
  }

  SUBCASE("incomparable pairs split the credit") {
    CHECK(dominance_fraction({pt(2, 0)}, {pt(1, 1)}) == 0.5);
    std::vector<ParetoPoint> a = {pt(2, 2), pt(0, 3)};
    std::vector<ParetoPoint> b = {pt(1, 1), pt(3, 0)};
    // (2,2)>(1,1); (2,2) vs (3,0), (0,3) vs (1,1), (0,3) vs (3,0) split.
    CHECK(dominance_fraction(a, b) == doctest::Approx(0.625).epsilon(1e-15));
  }

  SUBCASE("complementary fractions sum to one") {
    Rng rng(5);
    std::vector<ParetoPoint> a, b;
    for (int i = 0; i < 7; ++i) a.push_back(pt(rng.normal(), rng.normal()));
    for (int i = 0; i < 9; ++i) b.push_back(pt(rng.normal(), rng.normal()));
    CHECK(dominance_fraction(a, b) + dominance_fraction(b, a) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("matrix covers ordered method pairs") {
    std::vector<ParetoPoint> pts = {pt(2, 2, "x"), pt(3, 3, "x"),
                                    pt(1, 1, "y"), pt(0, 2, "y")};
    auto entries = dominance_matrix(pts);
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].method_a == "x");
    CHECK(entries[0].method_b == "y");
    CHECK(entries[0].fraction == 1.0);
    CHECK(entries[1].method_a == "y");
    CHECK(entries[1].fraction == 0.0);
  }

  SUBCASE("empty sets are rejected") {
    CHECK_THROWS_WITH_AS(dominance_fraction({}, {pt(0, 0)}),
                         "harness: dominance needs nonempty point sets",
                         std::runtime_error);
  }
}

TEST_CASE("pareto frontier extraction") {
  SUBCASE("hand-built frontier") {
    std::vector<ParetoPoint> pts = {pt(1, 4), pt(2, 3), pt(3, 1),
                                    pt(2, 2), pt(0, 5), pt(1, 3)};
    auto front = pareto_frontier(pts);
    REQUIRE(front.size() == 4);
    CHECK(front[0].consistency == 0.0);
    CHECK(front[0].fidelity == 5.0);
    CHECK(front[1].consistency == 1.0);
    CHECK(front[1].fidelity == 4.0);
    CHECK(front[2].consistency == 2.0);
    CHECK(front[2].fidelity == 3.0);
    CHECK(front[3].consistency == 3.0);
    CHECK(front[3].fidelity == 1.0);
  }

  SUBCASE("matches brute force and ignores input order") {
    Rng rng(12);
    std::vector<ParetoPoint> pts;
    for (int i = 0; i < 40; ++i)
      pts.push_back(pt(rng.normal(), rng.normal(), "m", 0.0,
                       static_cast<std::uint64_t>(i)));
    auto front = pareto_frontier(pts);
    for (const ParetoPoint& p : front) {
      for (const ParetoPoint& q : pts) CHECK_FALSE(dominates(q, p));
    }
    std::size_t expected = 0;
    for (const ParetoPoint& p : pts) {
      bool dominated = false;
      for (const ParetoPoint& q : pts) dominated = dominated || dominates(q, p);
      if (!dominated) ++expected;
    }
    CHECK(front.size() == expected);

    std::mt19937 shuffler(99);
    std::vector<ParetoPoint> shuffled = pts;
    std::shuffle(shuffled.begin(), shuffled.end(), shuffler);
    auto front2 = pareto_frontier(shuffled);
    REQUIRE(front2.size() == front.size());
    for (std::size_t i = 0; i < front.size(); ++i) {
      CHECK(front2[i].seed == front[i].seed);
      CHECK(front2[i].consistency == front[i].consistency);
    }
  }

  SUBCASE("duplicates of a frontier point all survive") {
    std::vector<ParetoPoint> pts = {pt(1, 1), pt(1, 1), pt(0, 0)};
    CHECK(pareto_frontier(pts).size() == 2);
  }
}

TEST_CASE("rank correlation") {
  CHECK(spearman_rho({1, 2, 3, 4}, {10, 20, 30, 40}) == 1.0);
  CHECK(spearman_rho({1, 2, 3, 4}, {5, 1, 0.5, 0.25}) == -1.0);
  CHECK(spearman_rho({1, 2, 3, 4}, {2, 8, 3, 9}) ==
        doctest::Approx(0.8).epsilon(1e-12));
  // Tied values take average ranks.
  CHECK(spearman_rho({1, 2, 2, 3}, {10, 20, 20, 40}) == 1.0);
  CHECK(spearman_rho({1, 2, 3}, {3, 1, 2}) ==
        doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(spearman_rho({1, 1, 1}, {2, 5, 9}) == 0.0);
  CHECK_THROWS_WITH_AS(spearman_rho({1, 2}, {1, 2, 3}),
                       "harness: rank correlation needs equal-length series",
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(spearman_rho({1}, {1}),
                       "harness: rank correlation needs at least two points",
                       std::runtime_error);
}

TEST_CASE("report CSVs round-trip through the report parser") {
  std::vector<ParetoPoint> pts = {
      {"dco", 2.0, 0.1 + 0.2, 1.0 / 3.0, 41},
      {"dco", 3.5, 0.7431298471, -0.25, 42},
      {"dm-cfg", 0.0, 1e-17, 12345.6789012345678, 7}};
  auto path = tmp_path("dco_pareto_roundtrip.csv");
  write_pareto_csv(path.string(), pts);
  auto back = read_pareto_csv(path.string());
  REQUIRE(back.size() == pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(back[i].method == pts[i].method);
    CHECK(back[i].omega_con == pts[i].omega_con);
    CHECK(back[i].seed == pts[i].seed);
    CHECK(back[i].consistency == pts[i].consistency);
    CHECK(back[i].fidelity == pts[i].fidelity);
  }
  std::filesystem::remove(path);

  CHECK_THROWS_WITH_AS(
      write_pareto_csv(path.string(), {{"a,b", 0, 0, 0, 0}}),
      "harness: method label must not contain a comma: a,b",
      std::runtime_error);
  CHECK_THROWS_AS(read_pareto_csv((tmp_path("dco_missing.csv")).string()),
                  std::runtime_error);
  auto bad = tmp_path("dco_bad_header.csv");
  std::ofstream(bad.string()) << "x,y\n1,2\n";
  CHECK_THROWS_WITH(read_pareto_csv(bad.string()),
                    doctest::Contains("unexpected csv header"));
  std::filesystem::remove(bad);
}

TEST_CASE("pareto report directory") {
  std::vector<ParetoPoint> pts = {pt(1, 4, "dco", 2), pt(2, 3, "dco", 3),
                                  pt(3, 1, "dco", 4), pt(0.5, 3.5, "dm", 2),
                                  pt(1.5, 2, "dm", 3)};
  auto dir = tmp_path("dco_report_dir");
  std::filesystem::remove_all(dir);
  pareto_report(pts, dir.string(), {"dm"});
  for (const char* name :
       {"pareto.csv", "frontier.csv", "dominance.csv", "pareto.svg"}) {
    CHECK(std::filesystem::exists(dir / name));
  }

  auto front = read_pareto_csv((dir / "frontier.csv").string());
  for (const ParetoPoint& p : front) {
    for (const ParetoPoint& q : pts) {
      if (q.method == p.method) CHECK_FALSE(dominates(q, p));
    }
  }

  std::ifstream dom((dir / "dominance.csv").string());
  std::string line;
  std::getline(dom, line);
  CHECK(line == "method_a,method_b,fraction");
  std::size_t rows = 0;
  while (std::getline(dom, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);

  std::ifstream svg_in((dir / "pareto.svg").string());
  std::stringstream svg;
  svg << svg_in.rdbuf();
  std::string body = svg.str();
  CHECK(body.find("<svg") != std::string::npos);
  CHECK(body.find(">dco</text>") != std::string::npos);
  CHECK(body.find(">dm</text>") != std::string::npos);
  CHECK(body.find("<polyline") != std::string::npos);  // dco frontier line
  CHECK(body.find("<path d=") != std::string::npos);   // dm diamonds
  std::filesystem::remove_all(dir);

  CHECK_THROWS_WITH(pareto_report({pt(1, 1, "only"), pt(2, 2, "only")},
                                  dir.string()),
                    doctest::Contains("at least two methods"));
  CHECK_THROWS_WITH(
      pareto_report({pt(1, 1, "a"), pt(2, 2, "a"), pt(3, 3, "b")},
                    dir.string()),
      doctest::Contains("fewer than two points"));
  CHECK_THROWS_WITH_AS(write_pareto_svg(tmp_path("x.svg").string(), {}),
                       "harness: nothing to plot", std::runtime_error);
}

TEST_CASE("guidance sweep point scoring") {
  AdaptedModel subject = quick_subject(21, "sks");
  int cond = subject.conditions().require("sks");
  auto refs = draw_refs("rare_pet", 6, 901);

  GuidanceConfig guidance;
  guidance.omega_text = 2.0;
  guidance.omega_con = 3.0;
  SamplerConfig sampler;
  sampler.steps = 8;
  sampler.seed = 404;

  GuidancePointScore a = evaluate_guidance_point(
      subject, tiny_base(), cond, guidance, sampler, 12, refs, world(), "pet");
  CHECK(a.consistency >= 0.0);
  CHECK(a.consistency <= 1.0);
  CHECK(a.fidelity >= 0.0);
  CHECK(a.fidelity <= 1.0);

  GuidancePointScore b = evaluate_guidance_point(
      subject, tiny_base(), cond, guidance, sampler, 12, refs, world(), "pet");
  CHECK(b.consistency == a.consistency);
  CHECK(b.fidelity == a.fidelity);

  sampler.seed = 405;
  GuidancePointScore c = evaluate_guidance_point(
      subject, tiny_base(), cond, guidance, sampler, 12, refs, world(), "pet");
  CHECK(c.consistency != a.consistency);
}

TEST_CASE("merged subject and style adapters") {
  AdaptedModel subject = quick_subject(21, "sks");
  auto subject_refs = draw_refs("rare_pet", 6, 901);
  auto style_refs = draw_refs("animal", 6, 902);

  GuidanceConfig guidance;
  guidance.omega_text = 2.0;
  guidance.omega_con = 2.5;
  SamplerConfig sampler;
  sampler.steps = 8;
  sampler.seed = 505;

  SUBCASE("zero style adapter reduces to the subject alone") {
    AdaptedModel zero_style =
        attach(tiny_base(), LoraAdapter::fresh(tiny_base(), 2, 555));
    SubjectStyleReport rep = my_subject_my_style(
        subject, zero_style, subject_refs, style_refs, world(), "pet", "sks",
        guidance, sampler, 10);
    GuidancePointScore solo = evaluate_guidance_point(
        subject, tiny_base(), subject.conditions().require("sks"), guidance,
        sampler, 10, subject_refs, world(), "pet");
    CHECK(rep.subject_consistency == solo.consistency);
    CHECK(rep.fidelity == solo.fidelity);
    CHECK(rep.samples.size() == 10);
  }

  SUBCASE("same adapter on both sides scores both columns equally") {
    SubjectStyleReport rep = my_subject_my_style(
        subject, subject, subject_refs, subject_refs, world(), "pet", "sks",
        guidance, sampler, 8);
    CHECK(rep.subject_consistency == rep.style_consistency);
  }

  SUBCASE("conflicting token rows are rejected") {
    AdaptedModel other = quick_subject(77, "sks");
    CHECK_THROWS_WITH(my_subject_my_style(subject, other, subject_refs,
                                          style_refs, world(), "pet", "sks",
                                          guidance, sampler, 4),
                      doctest::Contains("conflicting token 'sks'"));
  }

  SUBCASE("adapters from different bases are rejected") {
    EpsModel other_base = pretrain_base(training_world(world(), {"rare_pet"}),
                                        harness_spec(), 5, 99, 4, 1e-3);
    AdaptedModel foreign =
        attach(other_base, LoraAdapter::fresh(other_base, 2, 1));
    CHECK_THROWS_WITH(my_subject_my_style(subject, foreign, subject_refs,
                                          style_refs, world(), "pet", "sks",
                                          guidance, sampler, 4),
                      doctest::Contains("different base models"));
  }
}

TEST_CASE("experiment config") {
  SUBCASE("json round-trip") {
    ExperimentConfig cfg;
    cfg.world_file = "world.json";
    cfg.out_dir = "out";
    cfg.workers = 3;
    cfg.base.steps = 123;
    cfg.base.holdout = {"rare_pet"};
    cfg.base.model.data_dim = 1;
    ExperimentConfig::FinetuneBlock blk;
    blk.label = "dco";
    blk.train.objective = Objective::dco;
    blk.train.steps = 17;
    blk.seeds = {4, 5};
    blk.ref_condition = "rare_pet";
    blk.parent_condition = "pet";
    blk.token = "sks";
    cfg.finetunes.push_back(blk);
    cfg.sweep.omega_cons = {2.0, 4.0};
    cfg.merges.pairs = {{"both", "dco", "dm"}};
    cfg.merges.omega_con = 2.5;
    cfg.diagnose.t_points = 7;

    ExperimentConfig back = ExperimentConfig::from_json(cfg.to_json());
    CHECK(back.world_file == cfg.world_file);
    CHECK(back.workers == 3);
    CHECK(back.base.steps == 123);
    CHECK(back.base.holdout == cfg.base.holdout);
    CHECK(back.base.model.data_dim == 1);
    REQUIRE(back.finetunes.size() == 1);
    CHECK(back.finetunes[0].label == "dco");
    CHECK(back.finetunes[0].train.steps == 17);
    CHECK(back.finetunes[0].seeds == std::vector<std::uint64_t>{4, 5});
    CHECK(back.finetunes[0].token == "sks");
    CHECK(back.sweep.omega_cons == std::vector<double>{2.0, 4.0});
    REQUIRE(back.merges.pairs.size() == 1);
    CHECK(back.merges.pairs[0].label == "both");
    CHECK(back.merges.pairs[0].subject == "dco");
    CHECK(back.merges.pairs[0].style == "dm");
    CHECK(back.merges.omega_con == 2.5);
    CHECK(back.diagnose.t_points == 7);
  }

  SUBCASE("parse errors carry the line number") {
    auto path = tmp_path("dco_bad_config.json");
    std::ofstream(path.string()) << "{\n  \"world\": \"w.json\",\n  oops\n}\n";
    CHECK_THROWS_WITH(ExperimentConfig::load(path.string()),
                      doctest::Contains("at line 3"));
    std::filesystem::remove(path);
  }

  SUBCASE("duplicate seeds are rejected") {
    ExperimentConfig cfg;
    cfg.world_file = "w";
    cfg.out_dir = "o";
    ExperimentConfig::FinetuneBlock blk;
    blk.label = "x";
    blk.seeds = {4, 4};
    blk.ref_condition = "r";
    blk.parent_condition = "p";
    cfg.finetunes.push_back(blk);
    CHECK_THROWS_WITH(ExperimentConfig::from_json(cfg.to_json()),
                      doctest::Contains("duplicate seed"));
  }

  SUBCASE("missing world file is rejected at load") {
    auto path = tmp_path("dco_cfg_no_world.json");
    nlohmann::json j = {{"world", "/nonexistent/world.json"},
                        {"out", "out"},
                        {"base", {{"steps", 10}, {"seed", 1}}}};
    std::ofstream(path.string()) << j.dump(2);
    CHECK_THROWS_WITH(ExperimentConfig::load(path.string()),
                      doctest::Contains("world file not found"));
    std::filesystem::remove(path);
  }

  SUBCASE("missing required keys are reported") {
    CHECK_THROWS_WITH(ExperimentConfig::from_json(nlohmann::json::object()),
                      doctest::Contains("bad experiment config"));
  }
}

TEST_CASE("training world drops holdout conditions") {
  GaussianConceptWorld cut = training_world(world(), {"rare_pet"});
  CHECK(cut.num_conditions() == 2);
  CHECK(cut.index_of("rare_pet") == -1);
  CHECK(cut.index_of("animal") >= 0);
  CHECK(cut.index_of("pet") >= 0);
  CHECK(cut.dim() == world().dim());

  CHECK_THROWS_WITH(training_world(world(), {"ghost"}),
                    doctest::Contains("unknown condition"));
  CHECK_THROWS_WITH(
      training_world(world(), {"animal", "pet", "rare_pet"}),
      doctest::Contains("holdout removes every condition"));
}

TEST_CASE("pipeline stages demand their upstream artifacts") {
  auto root = tmp_path("dco_stage_order");
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);
  std::ofstream((root / "world.json").string()) << world().to_json().dump();

  ExperimentConfig cfg;
  cfg.world_file = (root / "world.json").string();
  cfg.out_dir = (root / "out").string();
  cfg.base.steps = 5;
  cfg.base.batch = 2;
  cfg.base.seed = 1;
  cfg.base.holdout = {"rare_pet"};
  cfg.base.model = harness_spec();
  ExperimentConfig::FinetuneBlock blk;
  blk.label = "dco";
  blk.seeds = {4};
  blk.ref_condition = "rare_pet";
  blk.parent_condition = "pet";
  cfg.finetunes.push_back(blk);

  CHECK_THROWS_WITH(run_sweep(cfg),
                    doctest::Contains("missing base checkpoint"));
  CHECK_THROWS_WITH(run_diagnose(cfg),
                    doctest::Contains("missing base checkpoint"));
  run_train_base(cfg);
  CHECK_THROWS_WITH(run_sweep(cfg),
                    doctest::Contains("missing adapter checkpoint"));
  CHECK_THROWS_WITH(run_merges(cfg),
                    doctest::Contains("no merge pairs configured"));
  cfg.merges.pairs = {{"x", "ghost", "dco"}};
  CHECK_THROWS_WITH(run_merges(cfg),
                    doctest::Contains("no fine-tune block labelled 'ghost'"));
  std::filesystem::remove_all(root);
}

TEST_CASE("experiment pipeline smoke run") {
  auto root = tmp_path("dco_experiment");
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);
  auto world_path = root / "world.json";
  std::ofstream(world_path.string()) << world().to_json().dump(2);

  ExperimentConfig cfg;
  cfg.world_file = world_path.string();
  cfg.out_dir = (root / "out").string();
  cfg.base.steps = 300;
  cfg.base.batch = 8;
  cfg.base.seed = 17;
  cfg.base.holdout = {"rare_pet"};
  cfg.base.model = harness_spec();

  ExperimentConfig::FinetuneBlock blk;
  blk.label = "dco";
  blk.train.objective = Objective::dco;
  blk.train.steps = 40;
  blk.train.batch_size = 2;
  blk.rank = 2;
  blk.seeds = {4, 5};
  blk.ref_condition = "rare_pet";
  blk.parent_condition = "pet";
  blk.token = "sks";
  blk.ref_count = 4;
  cfg.finetunes.push_back(blk);

  ExperimentConfig::FinetuneBlock style = blk;
  style.label = "dm";
  style.train.objective = Objective::dm;
  style.ref_condition = "animal";
  style.parent_condition = "animal";
  style.token = "sty";
  cfg.finetunes.push_back(style);

  cfg.sweep.omega_cons = {2.0, 4.0};
  cfg.sweep.samples_per_point = 6;
  cfg.sweep.sampler_steps = 6;
  cfg.merges.pairs = {{"both", "dco", "dm"}};
  cfg.merges.samples_per_pair = 5;
  cfg.merges.sampler_steps = 6;
  cfg.diagnose.t_points = 5;
  cfg.diagnose.n_noise = 10;

  ExperimentResult one = run_experiment(cfg);
  CHECK(std::filesystem::exists(one.base_checkpoint));
  REQUIRE(one.run_dirs.size() == 4);
  for (const std::string& dir : one.run_dirs) {
    CHECK(std::filesystem::exists(dir + "/config.json"));
    CHECK(std::filesystem::exists(dir + "/loss.csv"));
    CHECK(std::filesystem::exists(dir + "/adapter.bin"));
  }
  // Per run: two sweep scales plus the plain-guidance comparison point.
  REQUIRE(one.points.size() == 12);
  CHECK(one.diamond_methods ==
        std::vector<std::string>{"dco-cfg", "dm-cfg"});
  CHECK(std::filesystem::exists(cfg.out_dir + "/sweep/pareto.csv"));
  CHECK(std::filesystem::exists(cfg.out_dir + "/sweep/pareto.svg"));

  std::size_t plain = 0;
  for (const ParetoPoint& p : one.points) {
    CHECK(p.consistency >= 0.0);
    CHECK(p.fidelity >= 0.0);
    if (p.method == "dco-cfg") ++plain;
  }
  CHECK(plain == 2);

  // The sweep is seeded by task identity, so the worker count is
  // irrelevant to the numbers.
  cfg.out_dir = (root / "out2").string();
  cfg.workers = 3;
  ExperimentResult two = run_experiment(cfg);
  REQUIRE(two.points.size() == one.points.size());
  for (std::size_t i = 0; i < one.points.size(); ++i) {
    CHECK(two.points[i].method == one.points[i].method);
    CHECK(two.points[i].consistency == one.points[i].consistency);
    CHECK(two.points[i].fidelity == one.points[i].fidelity);
  }

  // Loading the saved adapter onto the saved base reproduces the run.
  EpsModel base_back = load_model(one.base_checkpoint);
  bool mismatch = false;
  AdaptedModel adapted =
      load_adapter(base_back, one.run_dirs[0] + "/adapter.bin", &mismatch);
  CHECK_FALSE(mismatch);
  CHECK(adapted.conditions().index_of("sks") >= 0);

  cfg.out_dir = (root / "out").string();
  cfg.workers = 1;

  auto sample_files = run_samples(cfg);
  CHECK(sample_files.size() == 6);  // four runs plus the two base conditions
  for (const std::string& f : sample_files) {
    std::ifstream in(f);
    std::string header;
    std::getline(in, header);
    CHECK(header == "seed,condition,omega_text,omega_con,x0");
    std::size_t rows = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    CHECK(rows == cfg.sweep.samples_per_point);
  }

  auto merge_rows = run_merges(cfg);
  REQUIRE(merge_rows.size() == 2);  // one pair, two shared seeds
  for (const MergeRow& r : merge_rows) {
    CHECK(r.label == "both");
    CHECK(std::filesystem::exists(r.checkpoint));
    CHECK(r.report.subject_consistency >= 0.0);
    CHECK(r.report.subject_consistency <= 1.0);
    CHECK(r.report.style_consistency >= 0.0);
    CHECK(r.report.samples.size() == 5);
  }
  CHECK(std::filesystem::exists(cfg.out_dir + "/merge/report.csv"));
  AdaptedModel merged_back =
      load_adapter(base_back, merge_rows[0].checkpoint, &mismatch);
  CHECK_FALSE(mismatch);
  CHECK(merged_back.conditions().index_of("sks") >= 0);
  CHECK(merged_back.conditions().index_of("sty") >= 0);

  auto diag_rows = run_diagnose(cfg);
  REQUIRE(diag_rows.size() == 5);  // identity plus four runs
  CHECK(diag_rows[0].label == "identity");
  CHECK(diag_rows[0].overall_mean == 0.0);
  for (std::size_t i = 1; i < diag_rows.size(); ++i) {
    CHECK(diag_rows[i].overall_mean > 0.0);
    CHECK(std::filesystem::exists(diag_rows[i].profile_csv));
  }
  std::ifstream identity_csv(diag_rows[0].profile_csv);
  std::string line;
  std::getline(identity_csv, line);
  CHECK(line == "t,mean_distance,standard_error");
  while (std::getline(identity_csv, line)) {
    if (line.empty()) continue;
    auto first = line.find(',');
    CHECK(line.substr(first + 1) == "0,0");
  }
  CHECK(std::filesystem::exists(cfg.out_dir + "/diagnose/summary.csv"));

  std::filesystem::remove_all(root);
}
