#pragma once

// Small dense SDP solver.
//
//   minimize   c'y
//   subject to F_k(y) = F0_k + sum_i y_i F_ik  >= 0   (every block k)
//
// Internally the problem is the dual of the standard pair
//   min <C,X>  s.t. <A_i,X> = b_i, X >= 0
//   max b'y    s.t. C - sum_i y_i A_i = S >= 0
// with C = F0, A_i = -F_i, b = -c, solved through the homogeneous self-dual
// embedding (Nesterov-Todd scaling, Mehrotra predictor-corrector).
// Any linear structure on matrix variables is carried by the parameter
// vector y, so it holds exactly at every iterate.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "phasor.hpp"

namespace mgrid::sdp {

struct Block {
  Mat constant;
  std::vector<Mat> coeffs;  // one per variable, same size as constant
};

struct Problem {
  Vec objective;
  std::vector<Block> blocks;
  int num_vars() const { return static_cast<int>(objective.size()); }
};

enum class Status { optimal, infeasible, unbounded, numerical_failure };

inline const char* to_string(Status s) {
  switch (s) {
    case Status::optimal: return "optimal";
    case Status::infeasible: return "infeasible";
    case Status::unbounded: return "unbounded";
    default: return "numerical-failure";
  }
}

struct Options {
  int max_iterations = 200;
  double tolerance = 1e-8;
  // accepted when progress stalls before reaching tolerance
  double acceptable_tolerance = 1e-6;
  bool equilibrate = true;
  std::function<void(int, const Vec&)> on_iterate;  // receives unscaled y
};

struct Solution {
  Status status = Status::numerical_failure;
  Vec y;
  std::vector<Mat> slack;  // F_k(y)
  std::vector<Mat> dual;   // X_k; for infeasible problems the certificate
  Vec ray;                 // unbounded direction when status == unbounded
  double objective = 0, dual_objective = 0;
  double gap = 0, primal_residual = 0, dual_residual = 0;
  double condition_estimate = 0;
  int iterations = 0;
  std::string message;
};

inline Mat evaluate_block(const Block& b, const Vec& y) {
  Mat f = b.constant;
  for (int i = 0; i < y.size(); ++i)
    if (y(i) != 0.0 && b.coeffs[i].size() > 0) f += y(i) * b.coeffs[i];
  return f;
}

namespace detail {

using BlockMat = std::vector<Mat>;

inline double inner(const BlockMat& a, const BlockMat& b) {
  double s = 0;
  for (size_t k = 0; k < a.size(); ++k) s += (a[k].array() * b[k].array()).sum();
  return s;
}

inline double fro(const BlockMat& a) { return std::sqrt(inner(a, a)); }

struct Standard {
  BlockMat c;
  std::vector<BlockMat> a;  // a[i][k]
  Vec b;
  int m() const { return static_cast<int>(b.size()); }
};

inline Vec apply_a(const Standard& p, const BlockMat& x) {
  Vec r(p.m());
  for (int i = 0; i < p.m(); ++i) r(i) = inner(p.a[i], x);
  return r;
}

inline BlockMat apply_at(const Standard& p, const Vec& y) {
  BlockMat r;
  for (const auto& ck : p.c) r.push_back(Mat::Zero(ck.rows(), ck.cols()));
  for (int i = 0; i < p.m(); ++i)
    if (y(i) != 0.0)
      for (size_t k = 0; k < r.size(); ++k) r[k] += y(i) * p.a[i][k];
  return r;
}

struct Scaling {
  Mat g, ginv, w;
  Vec lambda;
};

inline bool nt_scaling(const Mat& x, const Mat& s, Scaling& out) {
  Eigen::LLT<Mat> lx(x), ls(s);
  if (lx.info() != Eigen::Success || ls.info() != Eigen::Success) return false;
  const Mat Lx = lx.matrixL();
  const Mat Ls = ls.matrixL();
  Eigen::JacobiSVD<Mat> svd(Ls.transpose() * Lx, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec sig = svd.singularValues();
  if (sig.minCoeff() <= 0) return false;
  const Vec isq = sig.array().rsqrt();
  out.g = Lx * svd.matrixV() * isq.asDiagonal();
  // G^{-1} = diag(sqrt(sig)) V' Lx^{-1}
  const Mat lxinv = Lx.triangularView<Eigen::Lower>().solve(Mat::Identity(x.rows(), x.cols()));
  out.ginv = sig.array().sqrt().matrix().asDiagonal() * svd.matrixV().transpose() * lxinv;
  out.w = out.g * out.g.transpose();
  out.lambda = sig;
  return true;
}

// Largest alpha in (0, inf] with lambda + alpha*D >= 0, via lambda^{-1/2} D lambda^{-1/2}.
inline double max_step(const Vec& lambda, const Mat& d) {
  const Vec is = lambda.array().rsqrt();
  Mat t = is.asDiagonal() * d * is.asDiagonal();
  t = 0.5 * (t + t.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(t, Eigen::EigenvaluesOnly);
  const double mn = es.eigenvalues().minCoeff();
  if (mn >= 0) return std::numeric_limits<double>::infinity();
  return -1.0 / mn;
}

inline Mat jordan(const Mat& a, const Mat& b) { return 0.5 * (a * b + b * a); }

struct RawResult {
  Status status = Status::numerical_failure;
  BlockMat x, s;
  Vec y;
  double tau = 1, kappa = 1;
  int iterations = 0;
  double pinf = 0, dinf = 0, gap = 0, cond = 0;
  std::string message;
};

inline RawResult hsd(const Standard& p, const Options& opt, const std::function<void(int, const Vec&)>& cb) {
  const int m = p.m();
  const size_t nb = p.c.size();
  int n = 0;
  for (const auto& ck : p.c) n += static_cast<int>(ck.rows());

  RawResult r;
  BlockMat X, S;
  for (const auto& ck : p.c) {
    X.push_back(Mat::Identity(ck.rows(), ck.cols()));
    S.push_back(Mat::Identity(ck.rows(), ck.cols()));
  }
  Vec y = Vec::Zero(m);
  double tau = 1, kappa = 1;
  const double bnorm = p.b.norm();
  const double cnorm = fro(p.c);

  struct Best {
    double err = std::numeric_limits<double>::infinity();
    BlockMat x, s;
    Vec y;
    double tau = 1, kappa = 1, pinf = 0, dinf = 0, gap = 0;
  } best;

  std::vector<Scaling> sc(nb);
  for (int it = 0; it <= opt.max_iterations; ++it) {
    r.iterations = it;
    const Vec rp = apply_a(p, X) - tau * p.b;
    BlockMat rd = apply_at(p, y);
    for (size_t k = 0; k < nb; ++k) rd[k] += S[k] - tau * p.c[k];
    const double cx = inner(p.c, X), by = p.b.dot(y);
    const double rg = cx - by + kappa;
    const double mu = (inner(X, S) + tau * kappa) / (n + 1);

    r.pinf = rp.norm() / tau / (1 + bnorm);
    r.dinf = fro(rd) / tau / (1 + cnorm);
    r.gap = std::abs(cx - by) / tau / (1 + std::abs(cx / tau) + std::abs(by / tau));
    if (cb) cb(it, y / tau);
#ifdef MGRID_SDP_TRACE
    std::fprintf(stderr, "%3d pinf %.2e dinf %.2e gap %.2e tau %.2e kap %.2e mu %.2e\n", it, r.pinf, r.dinf, r.gap, tau, kappa, mu);
#endif
    if (r.pinf < opt.tolerance && r.dinf < opt.tolerance && r.gap < opt.tolerance) {
      r.status = Status::optimal;
      break;
    }
    if (const double e = std::max({r.pinf, r.dinf, r.gap}); e < best.err) {
      best = {e, X, S, y, tau, kappa, r.pinf, r.dinf, r.gap};
    }
    // infeasibility certificates
    if (tau < 1e-6 * std::max(1.0, kappa) || it == opt.max_iterations) {
      BlockMat aty = apply_at(p, y);
      for (size_t k = 0; k < nb; ++k) aty[k] += S[k];
      if (by > 0 && fro(aty) / by < 1e-7) {
        r.status = Status::unbounded;  // primal of the standard pair infeasible
        break;
      }
      if (cx < 0 && apply_a(p, X).norm() / (-cx) < 1e-7) {
        r.status = Status::infeasible;
        break;
      }
    }
    if (it == opt.max_iterations) {
      r.message = "iteration limit";
      break;
    }

    bool ok = true;
    for (size_t k = 0; k < nb && ok; ++k) ok = nt_scaling(X[k], S[k], sc[k]);
    if (!ok) {
      r.message = "loss of positive definiteness";
      break;
    }

    // Schur complement M_ij = <A_i, W A_j W>
    std::vector<BlockMat> waw(m, BlockMat(nb));
    for (int j = 0; j < m; ++j)
      for (size_t k = 0; k < nb; ++k) waw[j][k] = sc[k].w * p.a[j][k] * sc[k].w;
    Mat M(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = i; j < m; ++j) M(i, j) = M(j, i) = inner(p.a[i], waw[j]);
    BlockMat wcw(nb);
    for (size_t k = 0; k < nb; ++k) wcw[k] = sc[k].w * p.c[k] * sc[k].w;
    const Vec g = apply_a(p, wcw);
    const double cwc = inner(p.c, wcw);

    const double diag_max = M.diagonal().maxCoeff();
    Eigen::LLT<Mat> chol(M);
    if (chol.info() != Eigen::Success) {
      Mat mr = M;
      mr.diagonal().array() += 1e-14 * diag_max;
      chol.compute(mr);
      if (chol.info() != Eigen::Success) {
        r.message = "Schur complement not positive definite";
        break;
      }
    }
    {
      Eigen::SelfAdjointEigenSolver<Mat> es(M, Eigen::EigenvaluesOnly);
      r.cond = es.eigenvalues().maxCoeff() / std::max(es.eigenvalues().minCoeff(), 1e-300);
    }
    const Vec v = chol.solve(g + p.b);
    const Vec gmb = g - p.b;
    const double den = gmb.dot(v) - cwc - kappa / tau;

    struct Dir {
      BlockMat dx, ds;
      Vec dy;
      double dtau, dkappa;
    };
    auto solve_dir = [&](double eta, const BlockMat& rc, double rtk) {
      Dir d;
      BlockMat T(nb);
      for (size_t k = 0; k < nb; ++k) {
        const Vec& lam = sc[k].lambda;
        Mat z(lam.size(), lam.size());
        for (int a = 0; a < lam.size(); ++a)
          for (int b = 0; b < lam.size(); ++b) z(a, b) = 2.0 * rc[k](a, b) / (lam(a) + lam(b));
        T[k] = sc[k].g * z * sc[k].g.transpose() + eta * sc[k].w * rd[k] * sc[k].w;
      }
      const Vec h = -eta * rp - apply_a(p, T);
      const double h3 = -eta * rg - inner(p.c, T) - rtk / tau;
      const Vec u = chol.solve(h);
      d.dtau = (h3 - gmb.dot(u)) / den;
      d.dy = u + d.dtau * v;
      d.ds = apply_at(p, d.dy);
      d.dx.resize(nb);
      for (size_t k = 0; k < nb; ++k) {
        d.ds[k] = -eta * rd[k] - d.ds[k] + d.dtau * p.c[k];
        d.dx[k] = T[k] + sc[k].w * (apply_at(p, d.dy)[k] - d.dtau * p.c[k]) * sc[k].w;
      }
      d.dkappa = (rtk - kappa * d.dtau) / tau;
      return d;
    };
    auto step_len = [&](const Dir& d) {
      double a = std::numeric_limits<double>::infinity();
      for (size_t k = 0; k < nb; ++k) {
        a = std::min(a, max_step(sc[k].lambda, sc[k].ginv * d.dx[k] * sc[k].ginv.transpose()));
        a = std::min(a, max_step(sc[k].lambda, sc[k].g.transpose() * d.ds[k] * sc[k].g));
      }
      if (d.dtau < 0) a = std::min(a, -tau / d.dtau);
      if (d.dkappa < 0) a = std::min(a, -kappa / d.dkappa);
      return a;
    };

    // predictor
    BlockMat rc(nb);
    for (size_t k = 0; k < nb; ++k) rc[k] = -Mat(sc[k].lambda.array().square().matrix().asDiagonal());
    const Dir pred = solve_dir(1.0, rc, -tau * kappa);
    const double aa = std::min(1.0, step_len(pred));
    double xs_aff = 0;
    for (size_t k = 0; k < nb; ++k) xs_aff += ((X[k] + aa * pred.dx[k]).array() * (S[k] + aa * pred.ds[k]).array()).sum();
    const double mu_aff = (xs_aff + (tau + aa * pred.dtau) * (kappa + aa * pred.dkappa)) / (n + 1);
    const double sigma = std::clamp(std::pow(std::max(mu_aff, 0.0) / mu, 3.0), 0.0, 1.0);

    // corrector
    for (size_t k = 0; k < nb; ++k) {
      const Mat dxa = sc[k].ginv * pred.dx[k] * sc[k].ginv.transpose();
      const Mat dsa = sc[k].g.transpose() * pred.ds[k] * sc[k].g;
      rc[k] = sigma * mu * Mat::Identity(sc[k].lambda.size(), sc[k].lambda.size()) -
              Mat(sc[k].lambda.array().square().matrix().asDiagonal()) - jordan(dxa, dsa);
    }
    const Dir cor = solve_dir(1.0 - sigma, rc, sigma * mu - tau * kappa - pred.dtau * pred.dkappa);
    const double alpha = std::min(1.0, 0.99 * step_len(cor));
    if (!(alpha > 1e-12)) {
      r.message = "step length underflow";
      break;
    }
    for (size_t k = 0; k < nb; ++k) {
      X[k] += alpha * cor.dx[k];
      S[k] += alpha * cor.ds[k];
      X[k] = 0.5 * (X[k] + X[k].transpose()).eval();
      S[k] = 0.5 * (S[k] + S[k].transpose()).eval();
    }
    y += alpha * cor.dy;
    tau += alpha * cor.dtau;
    kappa += alpha * cor.dkappa;
  }
  if (r.status == Status::numerical_failure && best.err < opt.acceptable_tolerance) {
    X = best.x;
    S = best.s;
    y = best.y;
    tau = best.tau;
    kappa = best.kappa;
    r.pinf = best.pinf;
    r.dinf = best.dinf;
    r.gap = best.gap;
    r.status = Status::optimal;
    r.message = "reduced accuracy (" + r.message + ")";
  }
  r.x = X;
  r.s = S;
  r.y = y;
  r.tau = tau;
  r.kappa = kappa;
  return r;
}

}  // namespace detail

inline Solution solve(const Problem& prob, const Options& opt = {}) {
  const int m = prob.num_vars();
  const size_t nb = prob.blocks.size();
  for (const auto& b : prob.blocks) {
    if (b.constant.rows() != b.constant.cols()) throw DimensionError("sdp: block not square");
    if (static_cast<int>(b.coeffs.size()) != m) throw DimensionError("sdp: coefficient count mismatch");
  }

  // Ruiz-style equilibration: row congruence per block, column scaling per variable.
  std::vector<Vec> d(nb);
  for (size_t k = 0; k < nb; ++k) d[k] = Vec::Ones(prob.blocks[k].constant.rows());
  Vec s = Vec::Ones(m);
  if (opt.equilibrate) {
    for (int pass = 0; pass < 25; ++pass) {
      for (size_t k = 0; k < nb; ++k) {
        const auto& bk = prob.blocks[k];
        const Eigen::Index n = bk.constant.rows();
        Vec rn = Vec::Zero(n);
        for (int i = 0; i < m; ++i) {
          if (bk.coeffs[i].size() == 0) continue;
          const Mat t = (d[k].asDiagonal() * bk.coeffs[i] * d[k].asDiagonal()) * s(i);
          rn = rn.cwiseMax(t.cwiseAbs().rowwise().maxCoeff());
        }
        for (Eigen::Index j = 0; j < n; ++j)
          if (rn(j) > 0) d[k](j) /= std::sqrt(rn(j));
      }
      for (int i = 0; i < m; ++i) {
        double cn = 0;
        for (size_t k = 0; k < nb; ++k) {
          const auto& ci = prob.blocks[k].coeffs[i];
          if (ci.size() == 0) continue;
          cn = std::max(cn, (d[k].asDiagonal() * ci * d[k].asDiagonal()).cwiseAbs().maxCoeff() * s(i));
        }
        if (cn > 0) s(i) /= std::sqrt(cn);
      }
    }
  }

  detail::Standard st;
  st.b.resize(m);
  for (int i = 0; i < m; ++i) st.b(i) = -prob.objective(i) * s(i);
  const double bscale = std::max(1.0, st.b.cwiseAbs().maxCoeff());
  st.b /= bscale;
  double cscale = 0;
  for (size_t k = 0; k < nb; ++k) {
    st.c.push_back(d[k].asDiagonal() * prob.blocks[k].constant * d[k].asDiagonal());
    cscale = std::max(cscale, st.c.back().cwiseAbs().maxCoeff());
  }
  cscale = std::max(1.0, cscale);
  for (auto& ck : st.c) ck /= cscale;
  st.a.resize(m);
  for (int i = 0; i < m; ++i)
    for (size_t k = 0; k < nb; ++k) {
      const auto& ci = prob.blocks[k].coeffs[i];
      const Eigen::Index n = prob.blocks[k].constant.rows();
      st.a[i].push_back(ci.size() == 0 ? Mat(Mat::Zero(n, n))
                                       : Mat(-(d[k].asDiagonal() * ci * d[k].asDiagonal()) * (s(i) / cscale)));
    }

  // y_orig = s .* yhat * cscale  (C and A scaled together by 1/cscale keep y unchanged up to s)
  auto unscale_y = [&](const Vec& yh) { return Vec(s.cwiseProduct(yh)); };
  std::function<void(int, const Vec&)> cb;
  if (opt.on_iterate) cb = [&](int it, const Vec& yh) { opt.on_iterate(it, unscale_y(yh)); };

  const detail::RawResult raw = detail::hsd(st, opt, cb);

  Solution sol;
  sol.status = raw.status;
  sol.iterations = raw.iterations;
  sol.condition_estimate = raw.cond;
  sol.message = raw.message;
  sol.primal_residual = raw.dinf;
  sol.dual_residual = raw.pinf;
  sol.gap = raw.gap;
  if (raw.status == Status::optimal || raw.status == Status::numerical_failure) {
    sol.y = unscale_y(raw.y / raw.tau);
    for (size_t k = 0; k < nb; ++k) {
      sol.slack.push_back(evaluate_block(prob.blocks[k], sol.y));
      const Vec dk = d[k];
      sol.dual.push_back(dk.asDiagonal() * (raw.x[k] / raw.tau) * dk.asDiagonal() * (bscale / cscale));
    }
    sol.objective = prob.objective.dot(sol.y);
    double dobj = 0;
    for (size_t k = 0; k < nb; ++k) dobj -= (prob.blocks[k].constant.array() * sol.dual[k].array()).sum();
    sol.dual_objective = dobj;
  } else if (raw.status == Status::infeasible) {
    for (size_t k = 0; k < nb; ++k) sol.dual.push_back(d[k].asDiagonal() * raw.x[k] * d[k].asDiagonal());
    sol.message = "LMI infeasible; certificate X >= 0 with <F_i,X> = 0 and <F_0,X> < 0";
  } else if (raw.status == Status::unbounded) {
    sol.ray = unscale_y(raw.y);
    sol.message = "objective unbounded below along the returned ray";
  }
  return sol;
}

}  // namespace mgrid::sdp
