// SPDX-License-Identifier: Apache-2.0
//
// Cosine variance-preserving schedule in closed form.

#include "dco/schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dco {

namespace {
constexpr double kPi = std::numbers::pi;
}

NoiseSchedule::NoiseSchedule(std::string name) : name_(std::move(name)) {
  if (name_ != "cosine-vp")
    throw std::runtime_error("schedule: unknown schedule name '" + name_ + "'");
}

void NoiseSchedule::check_range(double t) const {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::runtime_error("schedule: t outside [0,1]: " + std::to_string(t));
}

double NoiseSchedule::clamp_t(double t) const {
  check_range(t);
  if (t < kTimeEps) return kTimeEps;
  if (t > 1.0 - kTimeEps) return 1.0 - kTimeEps;
  return t;
}

double NoiseSchedule::alpha(double t) const {
  check_range(t);
  return std::cos(0.5 * kPi * t);
}

double NoiseSchedule::sigma(double t) const {
  check_range(t);
  return std::sin(0.5 * kPi * t);
}

double NoiseSchedule::log_snr(double t) const {
  double tc = clamp_t(t);
  return 2.0 * (std::log(std::cos(0.5 * kPi * tc)) -
                std::log(std::sin(0.5 * kPi * tc)));
}

double NoiseSchedule::log_snr_slope(double t) const {
  return -2.0 * kPi / std::sin(kPi * clamp_t(t));
}

double NoiseSchedule::loss_weight(double t) const {
  return std::sin(kPi * clamp_t(t)) / kPi;
}

double NoiseSchedule::dm_weight(double t) const {
  check_range(t);
  return 1.0;
}

SchedulePoint NoiseSchedule::eval(double t) const {
  return {clamp_t(t), alpha(t),           sigma(t),
          log_snr(t), log_snr_slope(t),   loss_weight(t)};
}

std::vector<double> forward_draw(const NoiseSchedule& sched,
                                 const std::vector<double>& x, double t,
                                 const std::vector<double>& eps) {
  if (x.size() != eps.size())
    throw std::runtime_error("forward_draw: x and eps dimension mismatch");
  double a = sched.alpha(t), s = sched.sigma(t);
  std::vector<double> z(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z[i] = a * x[i] + s * eps[i];
  return z;
}

std::vector<double> apply_offset_noise(const std::vector<double>& eps,
                                       double strength, double u) {
  if (strength < 0.0)
    throw std::runtime_error("apply_offset_noise: negative strength");
  std::vector<double> out(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) out[i] = eps[i] + strength * u;
  return out;
}

}  // namespace dco
