#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "errors.hpp"
#include "phasor.hpp"

namespace mgrid {

struct OdeOptions {
  double dt = 1e-5;        // nominal step
  double rtol = 1e-6;
  double atol = 1e-8;
  double dt_min = 1e-9;
  double divergence = 1e3;  // max |x_i| before DivergenceDetected
};

// Dormand-Prince 5(4) with a fixed nominal step, halved on error and regrown
// by doubling after quiet steps.
class Dopri5 {
 public:
  using Rhs = std::function<void(double, const Vec&, Vec&)>;
  using PostStep = std::function<void(double, Vec&)>;

  explicit Dopri5(OdeOptions opt = {}) : opt_(opt), h_(opt.dt) {}

  const OdeOptions& options() const { return opt_; }
  double step_size() const { return h_; }
  long accepted() const { return accepted_; }
  long rejected() const { return rejected_; }
  long evaluations() const { return evals_; }

  // Integrates x from t0 to t1 exactly. `post` may adjust the state after each
  // accepted step (angle wrapping) as long as the rhs is unchanged by it.
  void integrate(const Rhs& f, double t0, double t1, Vec& x, const PostStep& post = {}) {
    const Eigen::Index n = x.size();
    for (auto* k : {&k1_, &k2_, &k3_, &k4_, &k5_, &k6_, &k7_}) k->resize(n);
    tmp_.resize(n);
    xn_.resize(n);
    double t = t0;
    f(t, x, k1_);
    ++evals_;
    while (t < t1) {
      double h = std::min(h_, t1 - t);
      const bool last = h >= t1 - t;
      for (;;) {
        step(f, t, h, x);
        const double err = error_norm(x);
        if (err <= 1.0 && std::isfinite(err)) {
          t = last ? t1 : t + h;
          x.swap(xn_);
          k1_.swap(k7_);
          ++accepted_;
          if (post) post(t, x);
          check_divergence(t, x);
          // regrow toward the nominal step after a comfortable step
          if (err < 0.1 && h_ < opt_.dt && h >= h_) h_ = std::min(opt_.dt, 2.0 * h_);
          break;
        }
        ++rejected_;
        h *= 0.5;
        h_ = std::min(h_, h);
        if (h < opt_.dt_min) throw StiffnessFailure("step size underflow", t);
      }
    }
  }

  void reset_step() { h_ = opt_.dt; }

 private:
  void step(const Rhs& f, double t, double h, const Vec& x) {
    static constexpr double a21 = 1.0 / 5, a31 = 3.0 / 40, a32 = 9.0 / 40, a41 = 44.0 / 45, a42 = -56.0 / 15,
                            a43 = 32.0 / 9, a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729, a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656, b1 = 35.0 / 384, b3 = 500.0 / 1113,
                            b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    tmp_ = x + h * a21 * k1_;
    f(t + h / 5, tmp_, k2_);
    tmp_ = x + h * (a31 * k1_ + a32 * k2_);
    f(t + 3 * h / 10, tmp_, k3_);
    tmp_ = x + h * (a41 * k1_ + a42 * k2_ + a43 * k3_);
    f(t + 4 * h / 5, tmp_, k4_);
    tmp_ = x + h * (a51 * k1_ + a52 * k2_ + a53 * k3_ + a54 * k4_);
    f(t + 8 * h / 9, tmp_, k5_);
    tmp_ = x + h * (a61 * k1_ + a62 * k2_ + a63 * k3_ + a64 * k4_ + a65 * k5_);
    f(t + h, tmp_, k6_);
    xn_ = x + h * (b1 * k1_ + b3 * k3_ + b4 * k4_ + b5 * k5_ + b6 * k6_);
    f(t + h, xn_, k7_);
    evals_ += 6;
    h_used_ = h;
  }

  double error_norm(const Vec& x) const {
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                            e6 = 22.0 / 525, e7 = -1.0 / 40;
    double worst = 0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double e = h_used_ * (e1 * k1_(i) + e3 * k3_(i) + e4 * k4_(i) + e5 * k5_(i) + e6 * k6_(i) + e7 * k7_(i));
      const double sc = opt_.atol + opt_.rtol * std::max(std::abs(x(i)), std::abs(xn_(i)));
      worst = std::max(worst, std::abs(e) / sc);
      if (!std::isfinite(xn_(i))) return std::numeric_limits<double>::infinity();
    }
    return worst;
  }

  void check_divergence(double t, const Vec& x) const {
    const double m = x.cwiseAbs().maxCoeff();
    if (!(m <= opt_.divergence)) throw DivergenceDetected("state norm " + std::to_string(m) + " exceeds limit", t);
  }

  OdeOptions opt_;
  double h_;
  double h_used_ = 0;
  long accepted_ = 0, rejected_ = 0, evals_ = 0;
  Vec k1_, k2_, k3_, k4_, k5_, k6_, k7_, tmp_, xn_;
};

}  // namespace mgrid
