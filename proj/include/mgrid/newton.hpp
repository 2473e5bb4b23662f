#pragma once

#include <cmath>
#include <functional>

#include "errors.hpp"
#include "phasor.hpp"

namespace mgrid {

struct NewtonResult {
  Vec x;
  double residual = 0;
  int iterations = 0;
  bool converged = false;
};

// Damped Newton with a central-difference Jacobian. Residuals are compared in
// the max norm after dividing by `scale` (per equation, defaults to 1).
inline NewtonResult newton_solve(const std::function<Vec(const Vec&)>& f, Vec x, double tol = 1e-12,
                                 int max_iter = 60, Vec scale = {}) {
  NewtonResult r;
  const Eigen::Index n = x.size();
  Vec fx = f(x);
  if (scale.size() == 0) scale = Vec::Ones(fx.size());
  auto norm = [&](const Vec& v) { return v.cwiseQuotient(scale).cwiseAbs().maxCoeff(); };
  double nf = norm(fx);
  for (r.iterations = 0; r.iterations < max_iter && nf > tol; ++r.iterations) {
    Mat jac(fx.size(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double h = 1e-7 * std::max(1.0, std::abs(x(i)));
      Vec xp = x, xm = x;
      xp(i) += h;
      xm(i) -= h;
      jac.col(i) = (f(xp) - f(xm)) / (2 * h);
    }
    const Vec dx = jac.colPivHouseholderQr().solve(-fx);
    double a = 1.0;
    for (int ls = 0; ls < 30; ++ls, a *= 0.5) {
      const Vec xn = x + a * dx;
      const Vec fn = f(xn);
      const double nn = norm(fn);
      if (std::isfinite(nn) && (nn < nf || ls == 29)) {
        x = xn;
        fx = fn;
        nf = nn;
        break;
      }
    }
  }
  r.x = x;
  r.residual = nf;
  r.converged = nf <= tol;
  return r;
}

}  // namespace mgrid
