#pragma once

#include <chrono>
#include <complex>
#include <string>
#include <vector>

#include "params.hpp"
#include "sdp.hpp"

namespace mgrid {

// Matrices of the DER pH form. Real pairs ordered
// (I_b, V_o, I_t, beta, xi) then the swing pair (x6, x7).
struct DerMatrices {
  CMat F0;   // 12x12
  CMat F1;   // 12x12
  CMat G1;   // 12x5
  CMat B;    // 12x2
  Vec q1;    // diagonal of Q1 (10), +inf for L_c = 0
  Mat F0p;   // 10x10 real, last two dims removed
  Mat Bp;    // 10x2
};

inline Mat jmat2() {
  Mat j(2, 2);
  j << 0, -1, 1, 0;
  return j;
}

inline Mat f0_prime(const DerParams& p, double k_iv) {
  Mat f = Mat::Zero(10, 10);
  const Mat I = Mat::Identity(2, 2);
  const Mat J = jmat2();
  auto put = [&](int r, int c, const Mat& b) { f.block(2 * r, 2 * c, 2, 2) = b; };
  put(0, 0, -p.r_c * I);
  put(0, 1, I);
  put(1, 0, -I);
  put(1, 2, I);
  put(2, 1, -I);
  put(2, 2, -p.r_f * I);
  put(3, 1, -I);
  put(3, 2, -p.x * J);
  put(4, 3, k_iv * I);
  put(4, 4, p.omega_n * J);
  return f;
}

inline Mat b_prime(const DerParams& p) {
  Mat b = Mat::Zero(10, 2);
  b.block(4, 0, 2, 2) = 0.5 * p.v_dc * Mat::Identity(2, 2);
  return b;
}

inline DerMatrices assemble_der_matrices(const DerParams& p, double k_iv, double eps, double phi) {
  DerMatrices m;
  m.F0p = f0_prime(p, k_iv);
  m.Bp = b_prime(p);
  m.F0 = CMat::Zero(12, 12);
  m.F0.topLeftCorner(10, 10) = m.F0p.cast<Phasor>();
  m.F0(10, 4) = -j1 * eps * p.psi() * std::polar(1.0, -phi);  // e_1^* picks the r-part
  m.F0(10, 10) = -p.D();
  m.F0(10, 11) = -1.0;
  m.F0(11, 10) = 1.0;
  m.F1 = CMat::Zero(12, 12);
  const Mat J = jmat2();
  for (int k = 0; k < 5; ++k) {
    m.F1.block(2 * k, 2 * k, 2, 2) = j1 * CMat::Identity(2, 2) - J.cast<Phasor>();
  }
  m.G1 = CMat::Zero(12, 5);
  m.G1.block(0, 0, 2, 2) = -CMat::Identity(2, 2);
  m.G1.block(8, 2, 3, 3) = CMat::Identity(3, 3);
  m.B = CMat::Zero(12, 2);
  m.B.topRows(10) = m.Bp.cast<Phasor>();
  const auto q = p.q1();
  m.q1.resize(10);
  for (int k = 0; k < 5; ++k) m.q1(2 * k) = m.q1(2 * k + 1) = q[k];
  return m;
}

// ---------------------------------------------------------------------------
// gain synthesis SDP

struct GainWeights {
  double k1 = 1, k2 = 1e2, k3 = 1e5;
};

struct GainSdpResult {
  sdp::Status status = sdp::Status::numerical_failure;
  DerGains gains;
  Mat L;      // 2x10
  Mat Qi22;   // 8x8, inverse of Q~22
  Mat P;      // 10x10
  double alpha = 0, zeta = 0, gamma = 0;
  Vec q22_eigenvalues;   // eigenvalues of Q~22 (Q~1 also holds L_c^{-1} I2)
  Vec he_eigenvalues;    // eigenvalues of 1/2 He{F0'P + B'L}
  double max_residual = 0;   // worst violation over the constraint blocks
  double recovery_error = 0; // ||K P - L||
  double solve_seconds = 0;
  int iterations = 0;
  double condition_estimate = 0;
  std::string message;
  sdp::Solution raw;
};

namespace detail {

// parameter layout: L (10) | Y diag (4) | Y offdiag (12) | alpha zeta gamma
struct GainLayout {
  static constexpr int nl = 10, nyd = 4, nyo = 12;
  static constexpr int y0 = nl, yo0 = nl + nyd, alpha = nl + nyd + nyo, zeta = alpha + 1, gamma = alpha + 2, n = gamma + 1;
};

inline Mat build_y(const Vec& v, int offset_diag, int offset_off) {
  Mat y = Mat::Zero(8, 8);
  for (int k = 0; k < 4; ++k) y.block(2 * k, 2 * k, 2, 2) = v(offset_diag + k) * Mat::Identity(2, 2);
  int idx = offset_off;
  for (int k = 0; k < 4; ++k)
    for (int l = k + 1; l < 4; ++l) {
      const Mat b = cblock(v(idx), v(idx + 1));
      y.block(2 * k, 2 * l, 2, 2) = b;
      y.block(2 * l, 2 * k, 2, 2) = b.transpose();
      idx += 2;
    }
  return y;
}

inline Mat build_l(const Vec& v) {
  Mat l(2, 10);
  for (int k = 0; k < 5; ++k) l.block(0, 2 * k, 2, 2) = cblock(v(2 * k), v(2 * k + 1));
  return l;
}

inline Mat p_from_y(const Mat& y, const Vec& q1) {
  Mat p = Mat::Zero(10, 10);
  p.topLeftCorner(2, 2).setIdentity();
  p.bottomRightCorner(8, 8) = q1.tail(8).asDiagonal() * y;
  return p;
}

// Turns an affine matrix-valued map into an sdp::Block by probing unit vectors.
template <class F>
sdp::Block affine_block(int nvar, F&& f) {
  sdp::Block b;
  const Vec z = Vec::Zero(nvar);
  b.constant = f(z);
  for (int i = 0; i < nvar; ++i) {
    Vec e = z;
    e(i) = 1.0;
    Mat c = f(e) - b.constant;
    if (c.cwiseAbs().maxCoeff() == 0) c.resize(0, 0);
    b.coeffs.push_back(c);
  }
  return b;
}

inline Mat sym(const Mat& a) { return 0.5 * (a + a.transpose()); }

inline double min_eig(const Mat& a) {
  Eigen::SelfAdjointEigenSolver<Mat> es(sym(a), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

}  // namespace detail

inline constexpr double kStrictMargin = 1e-6;

inline GainSdpResult solve_gain_sdp(const DerParams& p, const GainWeights& w, double k_iv,
                                    const sdp::Options& opt = {}) {
  using G = detail::GainLayout;
  const auto t0 = std::chrono::steady_clock::now();
  const Mat F0p = f0_prime(p, k_iv);
  const Mat Bp = b_prime(p);
  const DerMatrices dm = assemble_der_matrices(p, k_iv, 1.0, 0.0);
  const Vec q1 = dm.q1;

  auto lmi1 = [&](const Vec& v) {
    const Mat L = detail::build_l(v);
    const Mat P = detail::p_from_y(detail::build_y(v, G::y0, G::yo0), q1);
    Mat m(20, 20);
    m.topLeftCorner(10, 10) = detail::sym(F0p * P + Bp * L);
    m.topRightCorner(10, 10) = P.transpose();
    m.bottomLeftCorner(10, 10) = P;
    m.bottomRightCorner(10, 10) = -v(G::gamma) * Mat::Identity(10, 10);
    return Mat(-m - kStrictMargin * Mat::Identity(20, 20));
  };
  auto lmi2 = [&](const Vec& v) {
    const Mat L = detail::build_l(v);
    Mat m(12, 12);
    m.topLeftCorner(10, 10) = v(G::alpha) * Mat::Identity(10, 10);
    m.topRightCorner(10, 2) = L.transpose();
    m.bottomLeftCorner(2, 10) = L;
    m.bottomRightCorner(2, 2).setIdentity();
    return m;
  };
  auto lmi3 = [&](const Vec& v) {
    Mat m(16, 16);
    m.topLeftCorner(8, 8) = detail::build_y(v, G::y0, G::yo0);
    m.topRightCorner(8, 8).setIdentity();
    m.bottomLeftCorner(8, 8).setIdentity();
    m.bottomRightCorner(8, 8) = v(G::zeta) * Mat::Identity(8, 8);
    return m;
  };

  sdp::Problem prob;
  prob.objective = Vec::Zero(G::n);
  prob.objective(G::alpha) = w.k1;
  prob.objective(G::zeta) = w.k2;
  prob.objective(G::gamma) = w.k3;
  prob.blocks = {detail::affine_block(G::n, lmi1), detail::affine_block(G::n, lmi2), detail::affine_block(G::n, lmi3)};

  GainSdpResult r;
  r.raw = sdp::solve(prob, opt);
  r.status = r.raw.status;
  r.iterations = r.raw.iterations;
  r.condition_estimate = r.raw.condition_estimate;
  r.message = r.raw.message;
  r.solve_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (r.status != sdp::Status::optimal) return r;

  const Vec& v = r.raw.y;
  r.L = detail::build_l(v);
  r.Qi22 = detail::build_y(v, G::y0, G::yo0);
  r.P = detail::p_from_y(r.Qi22, q1);
  r.alpha = v(G::alpha);
  r.zeta = v(G::zeta);
  r.gamma = v(G::gamma);
  const Mat K = r.L * r.P.inverse();
  r.gains.k_hat = K;
  r.gains.k_iv = k_iv;
  r.recovery_error = (K * r.P - r.L).cwiseAbs().maxCoeff();
  Eigen::SelfAdjointEigenSolver<Mat> eq(detail::sym(r.Qi22.inverse()), Eigen::EigenvaluesOnly);
  r.q22_eigenvalues = eq.eigenvalues();
  Eigen::SelfAdjointEigenSolver<Mat> eh(detail::sym(F0p * r.P + Bp * r.L), Eigen::EigenvaluesOnly);
  r.he_eigenvalues = eh.eigenvalues();
  double worst = 0;
  for (const auto& s : r.raw.slack) worst = std::min(worst, detail::min_eig(s));
  r.max_residual = -worst;
  return r;
}

// ---------------------------------------------------------------------------
// Verification of F(phi) + F(phi)^* < 0 with a scaled Hamiltonian.

struct GainVerification {
  bool certificate_found = false;
  Mat P;                       // 10x10 scaling, identity-like when none found
  double eps = 0;
  double worst_lambda_max = 0; // over the phi grid
  double worst_phi = 0;
  std::vector<double> lambda_max;  // per grid point
  double spectral_abscissa = 0;    // of (F0' + B'K) Q1, a necessary condition
  double unscaled_lambda_max = 0;  // lambda_max He{F0' + B'K}
  bool pass = false;
  bool slack = false;
  std::string message;
};

inline Mat closed_loop(const DerParams& p, const DerGains& k) {
  return f0_prime(p, k.k_iv) + b_prime(p) * k.k_hat;
}

// Largest real part of the linear DER dynamics in costate coordinates.
// With L_c = 0 the I_b pair is algebraic and is eliminated first.
inline double closed_loop_abscissa(const DerParams& p, const DerGains& k) {
  const Mat F = closed_loop(p, k);
  const Vec q1 = assemble_der_matrices(p, k.k_iv, 1.0, 0.0).q1;
  Mat A;
  if (p.has_lc()) {
    A = q1.asDiagonal() * F;
  } else {
    const Mat red = F.bottomRightCorner(8, 8) -
                    F.bottomLeftCorner(8, 2) * F.topLeftCorner(2, 2).inverse() * F.topRightCorner(2, 8);
    A = q1.tail(8).asDiagonal() * red;
  }
  Eigen::EigenSolver<Mat> es(A, false);
  return es.eigenvalues().real().maxCoeff();
}

// Hermitian 11x11 He{F(phi) diag(P, 1)} without the structurally zero x7 dimension.
inline CMat scaled_hermitian(const DerParams& p, const DerGains& k, const Mat& P, double eps, double phi,
                             bool slack) {
  const Mat A = closed_loop(p, k) * P;
  CMat h = CMat::Zero(11, 11);
  h.topLeftCorner(10, 10) = (A + A.transpose()).cast<Phasor>();
  const Phasor c = -j1 * eps * p.psi() * std::polar(1.0, -phi);
  for (int jdx = 0; jdx < 10; ++jdx) {
    h(10, jdx) = c * P(4, jdx);
    h(jdx, 10) = std::conj(h(10, jdx));
  }
  h(10, 10) = -2.0 * p.D() + (slack ? p.D() : 0.0);
  return h;
}

inline double lambda_max_herm(const CMat& h) {
  Eigen::SelfAdjointEigenSolver<CMat> es(0.5 * (h + h.adjoint()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

// Finds a certificate P for fixed K by solving the gain SDP with L = K P.
inline std::pair<bool, Mat> find_certificate(const DerParams& p, const DerGains& k, const GainWeights& w = {}) {
  const Mat A = closed_loop(p, k);
  const Vec q1 = assemble_der_matrices(p, k.k_iv, 1.0, 0.0).q1;
  constexpr int ny = 16, nv = ny + 2;
  auto P_of = [&](const Vec& v) { return detail::p_from_y(detail::build_y(v, 0, 4), q1); };
  auto lmi1 = [&](const Vec& v) {
    const Mat P = P_of(v);
    Mat m(20, 20);
    m.topLeftCorner(10, 10) = detail::sym(A * P);
    m.topRightCorner(10, 10) = P.transpose();
    m.bottomLeftCorner(10, 10) = P;
    m.bottomRightCorner(10, 10) = -v(ny + 1) * Mat::Identity(10, 10);
    return Mat(-m - kStrictMargin * Mat::Identity(20, 20));
  };
  auto lmi3 = [&](const Vec& v) {
    Mat m(16, 16);
    m.topLeftCorner(8, 8) = detail::build_y(v, 0, 4);
    m.topRightCorner(8, 8).setIdentity();
    m.bottomLeftCorner(8, 8).setIdentity();
    m.bottomRightCorner(8, 8) = v(ny) * Mat::Identity(8, 8);
    return m;
  };
  sdp::Problem prob;
  prob.objective = Vec::Zero(nv);
  prob.objective(ny) = w.k2;
  prob.objective(ny + 1) = w.k3;
  prob.blocks = {detail::affine_block(nv, lmi1), detail::affine_block(nv, lmi3)};
  const auto sol = sdp::solve(prob);
  if (sol.status != sdp::Status::optimal) return {false, Mat()};
  const Mat P = P_of(sol.y);
  // independent check of the strict inequality
  Eigen::SelfAdjointEigenSolver<Mat> es(detail::sym(A * P), Eigen::EigenvaluesOnly);
  if (es.eigenvalues().maxCoeff() >= -1e-9) return {false, Mat()};
  return {true, P};
}

inline std::vector<double> uniform_phi_grid(int n = 64) {
  std::vector<double> g(n);
  for (int i = 0; i < n; ++i) g[i] = 2.0 * std::numbers::pi * i / n;
  return g;
}

// eps <= 0 selects half of the inner bound computed from the certificate.
inline GainVerification verify_gain(const DerGains& k, const DerParams& p, double eps,
                                    const std::vector<double>& phi_grid, bool with_damping_slack) {
  GainVerification r;
  r.slack = with_damping_slack;
  const Mat A = closed_loop(p, k);
  const Vec q1 = assemble_der_matrices(p, k.k_iv, 1.0, 0.0).q1;
  {
    r.spectral_abscissa = closed_loop_abscissa(p, k);
    Eigen::SelfAdjointEigenSolver<Mat> eh(A + A.transpose(), Eigen::EigenvaluesOnly);
    r.unscaled_lambda_max = eh.eigenvalues().maxCoeff();
  }
  auto [found, P] = find_certificate(p, k);
  r.certificate_found = found;
  r.P = found ? P : Mat(Mat::Identity(10, 10));
  if (eps <= 0) {
    const Mat a = r.P.transpose() * A.transpose() + A * r.P;
    Eigen::SelfAdjointEigenSolver<Mat> es(detail::sym(a), Eigen::EigenvaluesOnly);
    const double lmin_neg = -es.eigenvalues().maxCoeff();
    const double bn2 = (p.psi() * r.P.row(4)).squaredNorm();
    const double denom = (with_damping_slack ? 1.0 : 2.0) * p.D();
    eps = (lmin_neg > 0 && bn2 > 0) ? 0.5 * std::sqrt(lmin_neg * denom / bn2) : 1e-3;
  }
  r.eps = eps;
  r.worst_lambda_max = -std::numeric_limits<double>::infinity();
  for (double phi : phi_grid) {
    const double lm = lambda_max_herm(scaled_hermitian(p, k, r.P, eps, phi, with_damping_slack));
    r.lambda_max.push_back(lm);
    if (lm > r.worst_lambda_max) {
      r.worst_lambda_max = lm;
      r.worst_phi = phi;
    }
  }
  r.pass = r.worst_lambda_max < -1e-9;
  if (!found)
    r.message = "no scaling certificate exists for this gain (closed-loop spectral abscissa " +
                std::to_string(r.spectral_abscissa) + "); unscaled costate coordinates used";
  return r;
}

}  // namespace mgrid
