// SPDX-License-Identifier: Apache-2.0
//
// Gaussian-mixture worlds and the closed forms built on them.

#include "dco/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace dco {

namespace {

[[noreturn]] void fail(const std::string& msg) {
  throw std::runtime_error("oracle: " + msg);
}

// Cholesky with a positive-definiteness failure message.
Eigen::LLT<Eigen::MatrixXd> checked_llt(const Eigen::MatrixXd& m,
                                        const std::string& what) {
  if (m.rows() != m.cols()) fail(what + " is not square");
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    fail(what + " is not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) fail(what + " is not positive-definite");
  return llt;
}

double log_det_from_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

double logsumexp(const std::vector<double>& v) {
  double hi = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

}  // namespace

double ConsistencyFunction::eval(const Eigen::VectorXd& x) const {
  return x.dot(q * x) + b.dot(x) + k;
}

GaussianConceptWorld::GaussianConceptWorld(std::size_t dim, std::uint64_t seed)
    : dim_(dim), seed_(seed) {
  if (dim_ == 0) fail("world dimension must be positive");
}

void GaussianConceptWorld::add_condition(
    const std::string& name, std::vector<GaussianComponent> components) {
  if (name.empty()) fail("empty condition name");
  if (index_of(name) >= 0) fail("duplicate condition '" + name + "'");
  if (components.empty()) fail("condition '" + name + "' has no components");

  Condition cond;
  cond.name = name;
  double weight_sum = 0.0;
  for (auto& g : components) {
    if (!(g.weight > 0.0)) fail("component weights must be positive");
    weight_sum += g.weight;
    if (g.mean.size() != static_cast<Eigen::Index>(dim_) ||
        g.cov.rows() != static_cast<Eigen::Index>(dim_) ||
        g.cov.cols() != static_cast<Eigen::Index>(dim_))
      fail("component dimensions do not match the world");
    auto llt = checked_llt(g.cov, "covariance of '" + name + "'");
    Component c;
    c.g = std::move(g);
    c.chol = llt.matrixL();
    c.precision = llt.solve(Eigen::MatrixXd::Identity(
        static_cast<Eigen::Index>(dim_), static_cast<Eigen::Index>(dim_)));
    c.log_norm = -0.5 * (static_cast<double>(dim_) *
                             std::log(2.0 * std::numbers::pi) +
                         log_det_from_llt(llt));
    cond.plain.push_back(c.g);
    cond.comps.push_back(std::move(c));
  }
  if (std::abs(weight_sum - 1.0) > 1e-9)
    fail("component weights of '" + name + "' must sum to 1");
  conditions_.push_back(std::move(cond));
}

int GaussianConceptWorld::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < conditions_.size(); ++i)
    if (conditions_[i].name == name) return static_cast<int>(i);
  return -1;
}

int GaussianConceptWorld::require(const std::string& name) const {
  int id = index_of(name);
  if (id < 0) fail("unknown condition '" + name + "'");
  return id;
}

const GaussianConceptWorld::Condition& GaussianConceptWorld::cond(
    int id) const {
  if (id < 0 || id >= static_cast<int>(conditions_.size()))
    fail("unknown condition id " + std::to_string(id));
  return conditions_[static_cast<std::size_t>(id)];
}

const std::string& GaussianConceptWorld::name_of(int id) const {
  return cond(id).name;
}

std::vector<std::string> GaussianConceptWorld::condition_names() const {
  std::vector<std::string> out;
  for (const auto& c : conditions_) out.push_back(c.name);
  return out;
}

const std::vector<GaussianComponent>& GaussianConceptWorld::components(
    int id) const {
  return cond(id).plain;
}

std::vector<double> GaussianConceptWorld::sample(int id, Rng& rng) const {
  const Condition& c = cond(id);
  double u = rng.uniform();
  std::size_t pick = c.comps.size() - 1;
  double acc = 0.0;
  for (std::size_t k = 0; k < c.comps.size(); ++k) {
    acc += c.comps[k].g.weight;
    if (u < acc) {
      pick = k;
      break;
    }
  }
  const Component& comp = c.comps[pick];
  Eigen::VectorXd eps = to_eigen(rng.normal_vec(dim_));
  return from_eigen(comp.g.mean + comp.chol * eps);
}

double GaussianConceptWorld::log_density(const std::vector<double>& x,
                                         int id) const {
  if (x.size() != dim_) fail("point dimension does not match the world");
  const Condition& c = cond(id);
  Eigen::VectorXd xv = to_eigen(x);
  std::vector<double> terms;
  for (const auto& comp : c.comps) {
    Eigen::VectorXd d = xv - comp.g.mean;
    terms.push_back(std::log(comp.g.weight) + comp.log_norm -
                    0.5 * d.dot(comp.precision * d));
  }
  return logsumexp(terms);
}

nlohmann::json GaussianConceptWorld::to_json() const {
  nlohmann::json conds = nlohmann::json::array();
  for (const auto& c : conditions_) {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& comp : c.comps) {
      nlohmann::json cov = nlohmann::json::array();
      for (Eigen::Index i = 0; i < comp.g.cov.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < comp.g.cov.cols(); ++j)
          row.push_back(comp.g.cov(i, j));
        cov.push_back(row);
      }
      comps.push_back({{"weight", comp.g.weight},
                       {"mean", from_eigen(comp.g.mean)},
                       {"cov", cov}});
    }
    conds.push_back({{"name", c.name}, {"components", comps}});
  }
  return {{"dim", dim_}, {"seed", seed_}, {"conditions", conds}};
}

GaussianConceptWorld GaussianConceptWorld::from_json(const nlohmann::json& j) {
  try {
    GaussianConceptWorld world(j.at("dim").get<std::size_t>(),
                               j.value("seed", std::uint64_t{0}));
    for (const auto& c : j.at("conditions")) {
      std::vector<GaussianComponent> comps;
      for (const auto& comp : c.at("components")) {
        GaussianComponent g;
        g.weight = comp.at("weight").get<double>();
        g.mean = to_eigen(comp.at("mean").get<std::vector<double>>());
        bool factored = comp.contains("chol");
        auto rows = comp.at(factored ? "chol" : "cov")
                        .get<std::vector<std::vector<double>>>();
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                          static_cast<Eigen::Index>(rows.size()));
        for (std::size_t a = 0; a < rows.size(); ++a) {
          if (rows[a].size() != rows.size()) fail("covariance is not square");
          for (std::size_t b = 0; b < rows.size(); ++b)
            m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
                rows[a][b];
        }
        g.cov = factored ? Eigen::MatrixXd(m * m.transpose()) : m;
        comps.push_back(std::move(g));
      }
      world.add_condition(c.at("name").get<std::string>(), std::move(comps));
    }
    if (world.num_conditions() == 0) fail("world has no conditions");
    return world;
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("bad world specification: ") + e.what());
  }
}

GaussianConceptWorld GaussianConceptWorld::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open world file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail("world file '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

std::vector<double> optimal_eps(const GaussianConceptWorld& world,
                                const std::vector<double>& z, int cond,
                                double t, const NoiseSchedule& sched) {
  if (z.size() != world.dim()) fail("latent dimension does not match world");
  double a = sched.alpha(t), s = sched.sigma(t);
  Eigen::VectorXd zv = to_eigen(z);
  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(
      static_cast<Eigen::Index>(world.dim()),
      static_cast<Eigen::Index>(world.dim()));

  const auto& comps = world.components(cond);
  std::vector<double> log_resp;
  std::vector<Eigen::VectorXd> per_comp;
  for (const auto& g : comps) {
    Eigen::MatrixXd marg_cov = a * a * g.cov + s * s * eye;
    auto llt = checked_llt(marg_cov, "noised covariance");
    Eigen::VectorXd d = zv - a * g.mean;
    Eigen::VectorXd solve = llt.solve(d);
    per_comp.push_back(s * solve);
    log_resp.push_back(std::log(g.weight) - 0.5 * d.dot(solve) -
                       0.5 * log_det_from_llt(llt));
  }
  double lse = logsumexp(log_resp);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(zv.size());
  for (std::size_t k = 0; k < per_comp.size(); ++k)
    out += std::exp(log_resp[k] - lse) * per_comp[k];
  return from_eigen(out);
}

double gaussian_kl(const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1,
                   const Eigen::VectorXd& m2, const Eigen::MatrixXd& s2) {
  if (m1.size() != m2.size() || s1.rows() != s2.rows())
    fail("gaussian_kl dimension mismatch");
  auto llt1 = checked_llt(s1, "first covariance");
  auto llt2 = checked_llt(s2, "second covariance");
  double d = static_cast<double>(m1.size());
  Eigen::VectorXd dm = m2 - m1;
  double trace = llt2.solve(s1).trace();
  double quad = dm.dot(llt2.solve(dm));
  double log_det = log_det_from_llt(llt2) - log_det_from_llt(llt1);
  return 0.5 * (trace + quad - d + log_det);
}

TiltResult tilted_distribution(const GaussianDist& base,
                               const ConsistencyFunction& f, double beta) {
  if (!(beta > 0.0)) fail("tilt requires beta > 0");
  if ((f.q - f.q.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    fail("consistency function Q must be symmetric");

  auto base_llt = checked_llt(base.cov, "base covariance");
  Eigen::Index n = base.cov.rows();
  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd precision = base_llt.solve(eye);
  Eigen::MatrixXd tilted_precision = precision - (2.0 / beta) * f.q;
  tilted_precision = 0.5 * (tilted_precision + tilted_precision.transpose());

  Eigen::LLT<Eigen::MatrixXd> tilt_llt(tilted_precision);
  if (tilt_llt.info() != Eigen::Success)
    fail("tilt destroys positive-definiteness");

  Eigen::VectorXd h = precision * base.mean + f.b / beta;
  Eigen::VectorXd mean = tilt_llt.solve(h);
  Eigen::MatrixXd cov = tilt_llt.solve(eye);
  cov = 0.5 * (cov + cov.transpose());

  double log_z = f.k / beta +
                 0.5 * (h.dot(mean) - base.mean.dot(precision * base.mean)) -
                 0.5 * (log_det_from_llt(tilt_llt) + log_det_from_llt(base_llt));
  return {{std::move(mean), std::move(cov)}, log_z};
}

double expected_value(const ConsistencyFunction& f, const GaussianDist& g) {
  return (f.q * g.cov).trace() + g.mean.dot(f.q * g.mean) + f.b.dot(g.mean) +
         f.k;
}

double consistency_score(const std::vector<std::vector<double>>& samples,
                         const std::vector<std::vector<double>>& references) {
  if (samples.empty() || references.empty())
    fail("consistency_score requires nonempty inputs");

  auto sq_dist = [](const std::vector<double>& a,
                    const std::vector<double>& b) {
    if (a.size() != b.size()) fail("consistency_score dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      double d = a[i] - b[i];
      acc += d * d;
    }
    return acc;
  };

  double bandwidth = 1.0;
  if (references.size() >= 2) {
    std::vector<double> pair_d2;
    for (std::size_t i = 0; i < references.size(); ++i)
      for (std::size_t j = i + 1; j < references.size(); ++j)
        pair_d2.push_back(sq_dist(references[i], references[j]));
    std::sort(pair_d2.begin(), pair_d2.end());
    double median = pair_d2.size() % 2 == 1
                        ? pair_d2[pair_d2.size() / 2]
                        : 0.5 * (pair_d2[pair_d2.size() / 2 - 1] +
                                 pair_d2[pair_d2.size() / 2]);
    if (median > 0.0) bandwidth = median;
  }

  double acc = 0.0;
  for (const auto& s : samples) {
    double best = sq_dist(s, references[0]);
    for (std::size_t j = 1; j < references.size(); ++j)
      best = std::min(best, sq_dist(s, references[j]));
    acc += std::exp(-best / bandwidth);
  }
  return acc / static_cast<double>(samples.size());
}

double prompt_fidelity(const std::vector<std::vector<double>>& samples,
                       int cond, const GaussianConceptWorld& world) {
  if (samples.empty()) fail("prompt_fidelity requires nonempty samples");
  double mean_log_q = 0.0;
  for (const auto& s : samples) mean_log_q += world.log_density(s, cond);
  mean_log_q /= static_cast<double>(samples.size());

  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& g : world.components(cond))
    hi = std::max(hi, world.log_density(from_eigen(g.mean), cond));
  double span = 4.0 * static_cast<double>(world.dim()) + 4.0;
  double score = (mean_log_q - (hi - span)) / span;
  return std::clamp(score, 0.0, 1.0);
}

LinearEps optimal_linear_eps(const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov, double t,
                             const NoiseSchedule& sched) {
  double a = sched.alpha(t), s = sched.sigma(t);
  Eigen::Index n = cov.rows();
  Eigen::MatrixXd marg = a * a * cov + s * s * Eigen::MatrixXd::Identity(n, n);
  auto llt = checked_llt(marg, "noised covariance");
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(n, n));
  return {s * inv, -s * a * (inv * mean)};
}

std::vector<double> apply_linear_eps(const LinearEps& pred,
                                     const std::vector<double>& z) {
  return from_eigen(pred.a * to_eigen(z) + pred.b);
}

double expected_eps_error_sq(const LinearEps& pred,
                             const std::vector<double>& x, double alpha,
                             double sigma) {
  Eigen::VectorXd bias = alpha * (pred.a * to_eigen(x)) + pred.b;
  Eigen::MatrixXd noise_gain =
      sigma * pred.a -
      Eigen::MatrixXd::Identity(pred.a.rows(), pred.a.cols());
  return bias.squaredNorm() + (noise_gain * noise_gain.transpose()).trace();
}

}  // namespace dco
