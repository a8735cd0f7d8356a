// SPDX-License-Identifier: Apache-2.0
//
// Analytic ground truth for the experiments: conditional Gaussian-mixture
// worlds, exact optimal noise predictors, closed-form KL, the exponential
// tilt of a Gaussian by a quadratic reward, and surrogate fidelity metrics.

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dco/rng.hpp"
#include "dco/schedule.hpp"

namespace dco {

struct GaussianComponent {
  double weight;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

struct GaussianDist {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Quadratic reward f(x) = x'Qx + b'x + k with symmetric Q.
struct ConsistencyFunction {
  Eigen::MatrixXd q;
  Eigen::VectorXd b;
  double k = 0.0;

  double eval(const Eigen::VectorXd& x) const;
};

struct TiltResult {
  GaussianDist dist;
  double log_z;  // log of the normalizer E_base[exp(f / beta)]
};

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(),
                                           static_cast<Eigen::Index>(v.size()));
}

inline std::vector<double> from_eigen(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

// Conditional data distribution: each named condition is a mixture of
// Gaussians in d dimensions. Covariances are validated symmetric
// positive-definite at construction.
class GaussianConceptWorld {
 public:
  GaussianConceptWorld(std::size_t dim, std::uint64_t seed);

  void add_condition(const std::string& name,
                     std::vector<GaussianComponent> components);

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t num_conditions() const { return conditions_.size(); }
  int index_of(const std::string& name) const;
  int require(const std::string& name) const;
  const std::string& name_of(int cond) const;
  std::vector<std::string> condition_names() const;
  const std::vector<GaussianComponent>& components(int cond) const;

  std::vector<double> sample(int cond, Rng& rng) const;
  double log_density(const std::vector<double>& x, int cond) const;

  nlohmann::json to_json() const;
  static GaussianConceptWorld from_json(const nlohmann::json& j);
  static GaussianConceptWorld load(const std::string& path);

 private:
  struct Component {
    GaussianComponent g;
    Eigen::MatrixXd chol;       // lower factor of cov
    Eigen::MatrixXd precision;  // cov^{-1}
    double log_norm;            // -1/2 log det(2 pi cov)
  };
  struct Condition {
    std::string name;
    std::vector<Component> comps;
    std::vector<GaussianComponent> plain;  // what components() hands out
  };

  const Condition& cond(int id) const;

  std::size_t dim_;
  std::uint64_t seed_;
  std::vector<Condition> conditions_;
};

// epsilon* = sigma_t (alpha_t^2 Sigma + sigma_t^2 I)^{-1} (z - alpha_t mu),
// responsibility-weighted across mixture components.
std::vector<double> optimal_eps(const GaussianConceptWorld& world,
                                const std::vector<double>& z, int cond,
                                double t, const NoiseSchedule& sched);

double gaussian_kl(const Eigen::VectorXd& m1, const Eigen::MatrixXd& s1,
                   const Eigen::VectorXd& m2, const Eigen::MatrixXd& s2);

// Exact Gaussian tilt base(x) * exp(f(x)/beta) / Z: new precision
// Sigma^{-1} - 2Q/beta, completed-square mean, exact log Z.
TiltResult tilted_distribution(const GaussianDist& base,
                               const ConsistencyFunction& f, double beta);

// E_g[f] for Gaussian g: tr(Q Sigma) + mu'Q mu + b'mu + k.
double expected_value(const ConsistencyFunction& f, const GaussianDist& g);

// Mean over samples of exp(-min squared distance to a reference / h); h is
// the median pairwise squared reference distance (1 when degenerate).
double consistency_score(const std::vector<std::vector<double>>& samples,
                         const std::vector<std::vector<double>>& references);

// Mean log q(x|c) rescaled affinely so that the mixture-mean maximum maps to
// 1; clamped to [0,1].
double prompt_fidelity(const std::vector<std::vector<double>>& samples,
                       int cond, const GaussianConceptWorld& world);

// Linear noise predictor eps_hat(z) = A z + b at one fixed (condition, t).
struct LinearEps {
  Eigen::MatrixXd a;
  Eigen::VectorXd b;
};

LinearEps optimal_linear_eps(const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov, double t,
                             const NoiseSchedule& sched);

std::vector<double> apply_linear_eps(const LinearEps& pred,
                                     const std::vector<double>& z);

// Closed form of E_eps ||pred(alpha x + sigma eps) - eps||^2:
// ||alpha A x + b||^2 + tr[(sigma A - I)(sigma A - I)'].
double expected_eps_error_sq(const LinearEps& pred,
                             const std::vector<double>& x, double alpha,
                             double sigma);

}  // namespace dco
