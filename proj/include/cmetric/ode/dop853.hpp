/**
 * @file dop853.hpp
 * @brief Adaptive explicit Runge-Kutta 8(5,3) integrator with 7th-order dense
 *        output, for general non-autonomous right-hand sides y' = F(t, y).
 */
#pragma once

#include "cmetric/errors.hpp"
#include "cmetric/linalg.hpp"
#include "cmetric/ode/dop853_tableau.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmetric::ode {

struct Tolerances {
  double rtol = 1e-10;
  double atol = 1e-12;
  double max_step = kInf;
  std::size_t max_steps = 2'000'000;
};

using Rhs = std::function<void(double t, const Vec& y, Vec& dydt)>;

/// Dense solution of an initial value problem. Immutable once built; safe to
/// share between threads.
class Trajectory {
 public:
  Trajectory() = default;

  [[nodiscard]] double t0() const { return times_.front(); }
  [[nodiscard]] double t1() const { return times_.back(); }
  [[nodiscard]] Eigen::Index dim() const { return states_.empty() ? 0 : states_.front().size(); }
  [[nodiscard]] int direction() const { return direction_; }
  [[nodiscard]] const std::vector<double>& mesh() const { return times_; }
  [[nodiscard]] const Vec& node_state(std::size_t i) const { return states_.at(i); }
  [[nodiscard]] std::size_t steps() const { return coeffs_.size(); }
  [[nodiscard]] const Tolerances& tolerances() const { return tol_; }
  [[nodiscard]] bool empty() const { return times_.empty(); }

  /// True when t lies in the covered span (with a few ulps of slack).
  [[nodiscard]] bool covers(double t) const {
    if (times_.empty()) return false;
    const double lo = std::min(t0(), t1()), hi = std::max(t0(), t1());
    const double slack = 8.0 * std::numeric_limits<double>::epsilon() * std::max({1.0, std::abs(lo), std::abs(hi)});
    return t >= lo - slack && t <= hi + slack;
  }

  [[nodiscard]] Vec state(double t) const {
    Vec out;
    evaluate(t, &out, nullptr);
    return out;
  }

  /// Time derivative of the dense interpolant.
  [[nodiscard]] Vec derivative(double t) const {
    Vec out;
    evaluate(t, nullptr, &out);
    return out;
  }

  void evaluate(double t, Vec* y, Vec* dy) const {
    if (!covers(t)) {
      throw std::out_of_range("trajectory evaluated outside its span at t=" + std::to_string(t));
    }
    if (coeffs_.empty()) {
      if (y) *y = states_.front();
      if (dy) *dy = Vec::Zero(dim());
      return;
    }
    const std::size_t i = locate(t);
    const double ta = times_[i], tb = times_[i + 1];
    if (y && (t == ta || t == tb)) {
      *y = (t == ta) ? states_[i] : states_[i + 1];
      if (!dy) return;
    }
    const double h = tb - ta;
    double x = (t - ta) / h;
    x = std::clamp(x, 0.0, 1.0);
    const Mat& F = coeffs_[i];
    const Eigen::Index n = F.rows();
    Vec val = Vec::Zero(n), der = Vec::Zero(n);
    const int p = static_cast<int>(F.cols());
    for (int k = 0; k < p; ++k) {
      val += F.col(p - 1 - k);
      if (k % 2 == 0) {
        der = der * x + val;
        val *= x;
      } else {
        der = der * (1.0 - x) - val;
        val *= (1.0 - x);
      }
    }
    if (y && !(t == ta || t == tb)) *y = states_[i] + val;
    if (dy) *dy = der / h;
  }

 private:
  friend class Dop853;

  std::size_t locate(double t) const {
    const std::size_t last = times_.size() - 2;
    if (direction_ > 0) {
      auto it = std::upper_bound(times_.begin(), times_.end(), t);
      std::size_t j = static_cast<std::size_t>(it - times_.begin());
      return j == 0 ? 0 : std::min(j - 1, last);
    }
    auto it = std::upper_bound(times_.begin(), times_.end(), t, std::greater<double>());
    std::size_t j = static_cast<std::size_t>(it - times_.begin());
    return j == 0 ? 0 : std::min(j - 1, last);
  }

  std::vector<double> times_;
  std::vector<Vec> states_;
  std::vector<Mat> coeffs_;
  Tolerances tol_;
  int direction_ = 1;
};

/// Stepper that appends accepted steps to a Trajectory. Supports integrating
/// in chunks while keeping the step size history.
class Dop853 {
 public:
  Dop853(Rhs rhs, double t0, const Vec& y0, const Tolerances& tol, int direction)
      : rhs_(std::move(rhs)), tol_(tol), t_(t0), y_(y0), direction_(direction >= 0 ? 1 : -1) {
    if (!(tol.rtol > 0.0) || !(tol.atol > 0.0)) {
      throw std::invalid_argument("integrator tolerances must be positive");
    }
    traj_.tol_ = tol;
    traj_.direction_ = direction_;
    traj_.times_.push_back(t0);
    traj_.states_.push_back(y0);
    f_.resize(y0.size());
    rhs_(t0, y_, f_);
    if (!f_.allFinite() || !y0.allFinite()) {
      throw Error(ErrorKind::NonFiniteState, "right-hand side not finite at the initial state");
    }
  }

  [[nodiscard]] double time() const { return t_; }
  [[nodiscard]] const Vec& state() const { return y_; }
  [[nodiscard]] const Trajectory& trajectory() const { return traj_; }
  [[nodiscard]] Trajectory release() { return std::move(traj_); }

  void advance_to(double t_bound) {
    if (direction_ * (t_bound - t_) < 0.0) {
      throw std::invalid_argument("advance_to target lies behind the current time");
    }
    if (t_bound == t_) return;
    if (h_abs_ <= 0.0) h_abs_ = initial_step(t_bound);
    while (t_ != t_bound) {
      if (traj_.coeffs_.size() >= tol_.max_steps) {
        throw Error(ErrorKind::StepSizeUnderflow, "maximum number of steps exceeded");
      }
      step(t_bound);
    }
  }

 private:
  static double rms(const Vec& v) {
    return v.size() == 0 ? 0.0 : v.norm() / std::sqrt(static_cast<double>(v.size()));
  }

  double initial_step(double t_bound) {
    const double interval = std::abs(t_bound - t_);
    const Vec scale = (tol_.atol + y_.array().abs() * tol_.rtol).matrix();
    const double d0 = rms(y_.cwiseQuotient(scale));
    const double d1 = rms(f_.cwiseQuotient(scale));
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, interval);
    Vec y1 = y_ + h0 * direction_ * f_;
    Vec f1(y_.size());
    rhs_(t_ + h0 * direction_, y1, f1);
    const double d2 = rms((f1 - f_).cwiseQuotient(scale)) / h0;
    double h1;
    if (d1 <= 1e-15 && d2 <= 1e-15) {
      h1 = std::max(1e-6, h0 * 1e-3);
    } else {
      h1 = std::pow(0.01 / std::max(d1, d2), 1.0 / 8.0);
    }
    double h = std::min({100.0 * h0, h1, interval});
    if (!std::isfinite(h) || h <= 0.0) h = std::min(1e-6, interval);
    return h;
  }

  void step(double t_bound) {
    using namespace dop853;
    constexpr double kSafety = 0.9, kMinFactor = 0.2, kMaxFactor = 10.0;
    const Eigen::Index n = y_.size();
    const double min_step =
        10.0 * std::abs(std::nextafter(t_, direction_ * kInf) - t_);
    double h_abs = std::clamp(h_abs_, min_step, tol_.max_step);
    bool rejected = false, saw_nonfinite = false;
    Mat K(n, kStagesExtended);
    Vec y_new(n), f_new(n), tmp(n), stage(n);
    double h = 0.0, t_new = t_;
    while (true) {
      if (h_abs < min_step) {
        if (saw_nonfinite) {
          throw Error(ErrorKind::NonFiniteState, "state became non-finite near t=" + std::to_string(t_));
        }
        throw Error(ErrorKind::StepSizeUnderflow, "step size underflow near t=" + std::to_string(t_));
      }
      h = h_abs * direction_;
      t_new = t_ + h;
      if (direction_ * (t_new - t_bound) > 0.0) t_new = t_bound;
      h = t_new - t_;
      h_abs = std::abs(h);

      K.col(0) = f_;
      for (int s = 1; s < kStages; ++s) {
        tmp.setZero();
        for (int j = 0; j < s; ++j) {
          if (A[s][j] != 0.0) tmp += A[s][j] * K.col(j);
        }
        stage = y_ + h * tmp;
        Vec ks(n);
        rhs_(t_ + C[s] * h, stage, ks);
        K.col(s) = ks;
      }
      tmp.setZero();
      for (int j = 0; j < kStages; ++j) {
        if (A[kStages][j] != 0.0) tmp += A[kStages][j] * K.col(j);
      }
      y_new = y_ + h * tmp;
      rhs_(t_ + h, y_new, f_new);
      K.col(kStages) = f_new;

      double err_norm;
      if (!y_new.allFinite() || !f_new.allFinite()) {
        saw_nonfinite = true;
        err_norm = kInf;
      } else {
        const Vec scale = (tol_.atol + y_.array().abs().max(y_new.array().abs()) * tol_.rtol).matrix();
        Vec e5 = Vec::Zero(n), e3 = Vec::Zero(n);
        for (int j = 0; j <= kStages; ++j) {
          if (E5[j] != 0.0) e5 += E5[j] * K.col(j);
          if (E3[j] != 0.0) e3 += E3[j] * K.col(j);
        }
        e5 = e5.cwiseQuotient(scale);
        e3 = e3.cwiseQuotient(scale);
        const double n5 = e5.squaredNorm(), n3 = e3.squaredNorm();
        if (n5 == 0.0 && n3 == 0.0) {
          err_norm = 0.0;
        } else {
          err_norm = h_abs * n5 / std::sqrt((n5 + 0.01 * n3) * static_cast<double>(n));
        }
        if (!std::isfinite(err_norm)) {
          saw_nonfinite = true;
          err_norm = kInf;
        }
      }

      if (err_norm < 1.0) {
        double factor = err_norm == 0.0 ? kMaxFactor
                                        : std::min(kMaxFactor, kSafety * std::pow(err_norm, -1.0 / 8.0));
        if (rejected) factor = std::min(1.0, factor);
        h_abs_ = h_abs * factor;
        break;
      }
      h_abs *= std::isfinite(err_norm) ? std::max(kMinFactor, kSafety * std::pow(err_norm, -1.0 / 8.0))
                                       : kMinFactor;
      rejected = true;
    }

    // Extra stages for the continuous extension.
    for (int s = kStages + 1; s < kStagesExtended; ++s) {
      tmp.setZero();
      for (int j = 0; j < s; ++j) {
        if (A[s][j] != 0.0) tmp += A[s][j] * K.col(j);
      }
      stage = y_ + h * tmp;
      Vec ks(n);
      rhs_(t_ + C[s] * h, stage, ks);
      if (!ks.allFinite()) throw Error(ErrorKind::NonFiniteState, "dense-output stage not finite");
      K.col(s) = ks;
    }
    Mat F(n, kInterpolatorPower);
    const Vec dy = y_new - y_;
    F.col(0) = dy;
    F.col(1) = h * f_ - dy;
    F.col(2) = 2.0 * dy - h * (f_new + f_);
    for (int r = 0; r < kInterpolatorPower - 3; ++r) {
      tmp.setZero();
      for (int j = 0; j < kStagesExtended; ++j) {
        if (D[r][j] != 0.0) tmp += D[r][j] * K.col(j);
      }
      F.col(3 + r) = h * tmp;
    }

    t_ = t_new;
    y_ = y_new;
    f_ = f_new;
    traj_.times_.push_back(t_);
    traj_.states_.push_back(y_);
    traj_.coeffs_.push_back(std::move(F));
  }

  Rhs rhs_;
  Tolerances tol_;
  double t_;
  Vec y_;
  Vec f_;
  double h_abs_ = 0.0;
  int direction_;
  Trajectory traj_;
};

/// Integrate y' = F(t, y) from (t0, y0) to t1 (either direction).
[[nodiscard]] inline Trajectory integrate_rhs(const Rhs& rhs, double t0, const Vec& y0, double t1,
                                              const Tolerances& tol = {}) {
  Dop853 stepper(rhs, t0, y0, tol, t1 >= t0 ? 1 : -1);
  stepper.advance_to(t1);
  return stepper.release();
}

}  // namespace cmetric::ode
