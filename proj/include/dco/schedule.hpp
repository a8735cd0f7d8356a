// SPDX-License-Identifier: Apache-2.0
//
// Continuous-time variance-preserving noise schedule and the forward
// corruption draw z_t = alpha_t x + sigma_t eps.

#pragma once

#include <string>
#include <vector>

#include "dco/rng.hpp"

namespace dco {

struct SchedulePoint {
  double t;
  double alpha;
  double sigma;
  double log_snr;        // lambda_t = log(alpha_t^2 / sigma_t^2)
  double log_snr_slope;  // d lambda / d t
  double loss_weight;    // w_t, chosen so -1/2 w_t lambda'_t = 1
};

// Cosine schedule: alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2). alpha
// and sigma are exact at the endpoints; the log-SNR quantities clamp t to
// [kTimeEps, 1 - kTimeEps] so the slope stays finite there.
class NoiseSchedule {
 public:
  static constexpr double kTimeEps = 1e-5;

  explicit NoiseSchedule(std::string name = "cosine-vp");

  double clamp_t(double t) const;
  double alpha(double t) const;
  double sigma(double t) const;
  double log_snr(double t) const;
  double log_snr_slope(double t) const;
  double loss_weight(double t) const;
  // Effective epsilon-loss weight -1/2 w_t lambda'_t; identically 1 for the
  // default weighting.
  double dm_weight(double t) const;

  SchedulePoint eval(double t) const;
  const std::string& name() const { return name_; }

 private:
  void check_range(double t) const;
  std::string name_;
};

// z_t = alpha_t x + sigma_t eps.
std::vector<double> forward_draw(const NoiseSchedule& sched,
                                 const std::vector<double>& x, double t,
                                 const std::vector<double>& eps);

// eps + strength * u * 1 with the caller's shared draw u ~ N(0,1); the
// per-coordinate output variance is 1 + strength^2 for unit-variance noise.
std::vector<double> apply_offset_noise(const std::vector<double>& eps,
                                       double strength, double u);

}  // namespace dco
