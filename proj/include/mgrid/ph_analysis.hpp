#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <vector>

#include "edges.hpp"
#include "errors.hpp"
#include "gain_design.hpp"
#include "simulator.hpp"

namespace mgrid {

// <p, q> on C^12: structured product on the ten split entries, Re{p^* q} on the swing pair.
inline double ph_inner(const CVec& p, const CVec& q) {
  if (p.size() != 12 || q.size() != 12) throw DimensionError("ph_inner: expected 12 entries");
  double s = structured_inner(p.head(10), q.head(10));
  for (int i = 10; i < 12; ++i) s += (std::conj(p(i)) * q(i)).real();
  return s;
}

// Lifted state of one DER at frame offset phi. xi is stored unshifted; the
// Hamiltonian subtracts eta e^{j theta} = eta e^{j phi} x7 / eps itself.
inline CVec lift_state(const GfmState& s, const DerParams& p, double eps, double phi) {
  CVec x = CVec::Zero(12);
  const Phasor e = std::polar(1.0, s.theta);
  const Phasor z[5] = {p.l_c * s.i_b, p.c_f * s.v_o, p.l_f * s.i_t, s.beta, s.xi};
  for (int c = 0; c < 5; ++c) {
    x(2 * c) = z[c].real() * e;
    x(2 * c + 1) = z[c].imag() * e;
  }
  const Phasor e1 = std::polar(1.0, s.theta - phi);
  x(10) = j1 * eps * p.J() * s.w * e1;
  x(11) = eps * e1;
  return x;
}

namespace detail {

inline Phasor xi_tilde(const CVec& x, double eta, double eps, double phi) {
  return x(8) + j1 * x(9) - eta * std::polar(1.0, phi) * x(11) / eps;
}

}  // namespace detail

// H = 1/2 <x~_1, Q1 x~_1> + 1/2 eps^-2 J^-1 |x6 x7^*|^2
inline double hamiltonian(const CVec& x, const DerParams& p, double eta, double eps, double phi) {
  if (!(eps > 0)) throw ConfigError("hamiltonian: eps must be positive");
  if (x.size() != 12) throw DimensionError("hamiltonian: expected 12 entries");
  const auto q = p.q1();
  double h = 0;
  for (int c = 0; c < 4; ++c) {
    if (c == 0 && !p.has_lc()) continue;  // no inductor, no stored energy
    h += 0.5 * q[c] * std::norm(x(2 * c) + j1 * x(2 * c + 1));
  }
  h += 0.5 * q[4] * std::norm(detail::xi_tilde(x, eta, eps, phi));
  h += 0.5 / (eps * eps * p.J()) * std::norm(x(10)) * std::norm(x(11));
  return h;
}

// Gradient with respect to ph_inner. The split entries are Q1 x~_1; the x7
// entry carries the eta-shift dependence of x~_1 on the frame angle.
inline CVec hamiltonian_gradient(const CVec& x, const DerParams& p, double eta, double eps, double phi) {
  const auto q = p.q1();
  CVec g = CVec::Zero(12);
  for (int c = 0; c < 4; ++c) {
    if (c == 0 && !p.has_lc()) continue;
    g(2 * c) = q[c] * x(2 * c);
    g(2 * c + 1) = q[c] * x(2 * c + 1);
  }
  const Phasor xt = detail::xi_tilde(x, eta, eps, phi);
  g(8) = q[4] * xt;  // any representer with N g = xt works; keep it in the r-slot
  g(9) = 0.0;
  const double c = 1.0 / (eps * eps * p.J());
  g(10) = c * std::norm(x(11)) * x(10);
  g(11) = c * std::norm(x(10)) * x(11) - q[4] * eta / eps * std::polar(1.0, -phi) * xt;
  return g;
}

// H(x) - H(xbar) - <grad H(xbar), x - xbar>
inline double shifted_hamiltonian(const CVec& x, const CVec& xbar, const DerParams& p, double eta, double eps,
                                  double phi) {
  return hamiltonian(x, p, eta, eps, phi) - hamiltonian(xbar, p, eta, eps, phi) -
         ph_inner(hamiltonian_gradient(xbar, p, eta, eps, phi), x - xbar);
}

// Average over phi of a first-order sinusoid a + b cos(phi) + c sin(phi),
// taken as the mean of the values at its minimizer and maximizer.
struct SinusoidAverage {
  double average = 0, phi_min = 0, phi_max = 0, amplitude = 0;
};

inline SinusoidAverage sinusoid_average(const std::function<double(double)>& f) {
  const double f0 = f(0.0), f1 = f(2 * std::numbers::pi / 3), f2 = f(4 * std::numbers::pi / 3);
  const double a = (f0 + f1 + f2) / 3;
  const double b = (2 * f0 - f1 - f2) / 3;
  const double c = (f1 - f2) / std::sqrt(3.0);
  SinusoidAverage r;
  r.amplitude = std::hypot(b, c);
  r.phi_max = std::atan2(c, b);
  r.phi_min = wrap_angle(r.phi_max + std::numbers::pi);
  r.average = 0.5 * (f(r.phi_min) + f(r.phi_max));
  (void)a;
  return r;
}

// phi-averaged shifted Hamiltonian of one DER between two physical states.
inline double averaged_shifted_hamiltonian(const GfmState& s, const GfmState& sbar, const DerParams& p, double eta,
                                           double eps) {
  return sinusoid_average([&](double phi) {
           return shifted_hamiltonian(lift_state(s, p, eps, phi), lift_state(sbar, p, eps, phi), p, eta, eps, phi);
         })
      .average;
}

// ---------------------------------------------------------------------------
// epsilon bounds and the set Lambda_1

// sqrt(lambda_min(-A) / max_phi lambda_max(D^-1 b b^*))
inline double epsilon_bound_inner(const CMat& a, const std::vector<CVec>& b_of_phi, double d) {
  if (!(d > 0)) throw ConfigError("epsilon_bound_inner: D must be positive");
  Eigen::SelfAdjointEigenSolver<CMat> es(0.5 * (a + a.adjoint()), Eigen::EigenvaluesOnly);
  const double worst = es.eigenvalues().maxCoeff();
  if (!(worst < -1e-9)) throw ConditionFailure("A is not negative definite", worst);
  double bmax = 0;
  for (const auto& b : b_of_phi) bmax = std::max(bmax, b.squaredNorm() / d);
  if (!(bmax > 0)) return std::numeric_limits<double>::infinity();
  return std::sqrt(-worst / bmax);
}

inline double epsilon_bound_inner(const Mat& a, const std::vector<CVec>& b_of_phi, double d) {
  return epsilon_bound_inner(CMat(a.cast<Phasor>()), b_of_phi, d);
}

// Largest eigenvalue of [A, eps b; eps b^*, -D] (the damping-slack condition
// without its structurally zero row) and of its Schur complement A + eps^2 b b^* / D.
inline double slack_condition_lambda(const CMat& a, const CVec& b, double d, double eps) {
  const Eigen::Index n = a.rows();
  CMat m(n + 1, n + 1);
  m.topLeftCorner(n, n) = a;
  m.topRightCorner(n, 1) = eps * b;
  m.bottomLeftCorner(1, n) = eps * b.adjoint();
  m(n, n) = -d;
  Eigen::SelfAdjointEigenSolver<CMat> es(0.5 * (m + m.adjoint()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

inline double inner_condition_lambda(const CMat& a, const CVec& b, double d, double eps) {
  const CMat m = a + (eps * eps / d) * b * b.adjoint();
  Eigen::SelfAdjointEigenSolver<CMat> es(0.5 * (m + m.adjoint()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().maxCoeff();
}

// (delta/2) sqrt( lambda_min(Q)/lambda_max(Q) * lambda_min(-S)/(mu1 sum T0) )
inline double epsilon_bound_ultimate(const Mat& q_hat1, const Mat& s, double mu1_sum_t0, double delta) {
  if (!(delta > 0)) throw ConfigError("epsilon_bound_ultimate: delta must be positive");
  if (!(mu1_sum_t0 > 0)) throw ConfigError("epsilon_bound_ultimate: mu1 * sum T0 must be positive");
  Eigen::SelfAdjointEigenSolver<Mat> eq(0.5 * (q_hat1 + q_hat1.transpose()), Eigen::EigenvaluesOnly);
  Eigen::SelfAdjointEigenSolver<Mat> esd(0.5 * (s + s.transpose()), Eigen::EigenvaluesOnly);
  const double smax = esd.eigenvalues().maxCoeff();
  if (!(smax < -1e-12)) throw ConditionFailure("S is not negative definite", smax);
  const double qmin = eq.eigenvalues().minCoeff(), qmax = eq.eigenvalues().maxCoeff();
  if (!(qmin > 0)) throw ConditionFailure("Q_hat_1 is not positive definite", qmin);
  return 0.5 * delta * std::sqrt((qmin / qmax) * (-smax / mu1_sum_t0));
}

// Inner bound for one DER from its scaling certificate: A = He{F0' P + B' K P},
// b(phi) = psi e^{-j phi} P^T e_{I_t,r}.
struct DerEpsilonBound {
  double eps = 0;
  bool certified = false;
  double worst_eigenvalue = 0;
};

inline DerEpsilonBound der_epsilon_bound(const DerParams& p, const DerGains& k, int n_phi = 64) {
  DerEpsilonBound r;
  auto [found, P] = find_certificate(p, k);
  r.certified = found;
  if (!found) P = Mat::Identity(10, 10);
  const Mat a = closed_loop(p, k) * P;
  const Mat he = a + a.transpose();
  std::vector<CVec> bs;
  for (double phi : uniform_phi_grid(n_phi)) {
    const Phasor c = -j1 * p.psi() * std::polar(1.0, -phi);
    bs.push_back((c * P.row(4).transpose().cast<Phasor>()).eval());
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(he, Eigen::EigenvaluesOnly);
  r.worst_eigenvalue = es.eigenvalues().maxCoeff();
  r.eps = epsilon_bound_inner(he, bs, 2.0 * p.D());
  return r;
}

inline double lambda1_threshold(const DerParams& p, double omega0) { return 2.0 * p.T0(omega0) / p.D(); }

// |omega_e| > 2 T0 / D, with omega_e measured from the orbit frequency omega0.
inline std::vector<bool> lambda1_membership(const std::vector<double>& omega_dev, const std::vector<DerParams>& p,
                                            double omega0) {
  if (omega_dev.size() != p.size()) throw DimensionError("lambda1_membership: one frequency per DER");
  std::vector<bool> in(p.size());
  for (size_t e = 0; e < p.size(); ++e) in[e] = std::abs(omega_dev[e]) > std::abs(lambda1_threshold(p[e], omega0));
  return in;
}

inline double mu1(const std::vector<DerParams>& p, double omega0) {
  double m = 0;
  for (const auto& d : p) m = std::max(m, std::abs(lambda1_threshold(d, omega0)));
  return m;
}

// ---------------------------------------------------------------------------
// Reference orbit and orbit distance.

struct OrbitReference {
  Vec state;          // full microgrid state at t_ref
  double t_ref = 0;
  double omega0 = 0;  // absolute orbit frequency, rad/s
};

// Global rotation by tau: network phasors times e^{j tau}, DER angles plus tau.
inline Vec rotate_state(const Microgrid& mg, const Vec& x, double tau) {
  Vec y = x;
  const Phasor r = std::polar(1.0, tau);
  for (size_t l = 0; l < mg.topology().lines.size(); ++l)
    Microgrid::put(y, mg.line_offset(static_cast<int>(l)), r * Microgrid::get(x, mg.line_offset(static_cast<int>(l))));
  if (mg.topology().infinite_bus)
    Microgrid::put(y, mg.infinite_offset(), r * Microgrid::get(x, mg.infinite_offset()));
  for (size_t v = 0; v < mg.interconnection().nodes.bus_of.size(); ++v)
    Microgrid::put(y, mg.node_offset(static_cast<int>(v)), r * Microgrid::get(x, mg.node_offset(static_cast<int>(v))));
  for (int k = 0; k < mg.ders(); ++k) y(mg.theta_index(k)) = wrap_angle(x(mg.theta_index(k)) + tau);
  return y;
}

inline Vec reference_at(const Microgrid& mg, const OrbitReference& ref, double t) {
  return rotate_state(mg, ref.state, ref.omega0 * (t - ref.t_ref));
}

// z_1: DER costate-scaled quantities in the external frame, then lines, then nodes.
inline CVec orbit_coordinates(const Microgrid& mg, const Vec& x, const DerGains& k) {
  std::vector<Phasor> z;
  for (int e = 0; e < mg.ders(); ++e) {
    if (mg.kind(e) != ControllerKind::proposed) throw ConfigError("orbit coordinates need proposed-controller DERs");
    const auto& p = mg.topology().ders[e].params;
    const GfmState s = mg.gfm_state(x, e);
    const Phasor r = std::polar(1.0, s.theta);
    z.insert(z.end(), {p.l_c * s.i_b * r, p.c_f * s.v_o * r, p.l_f * s.i_t * r, s.beta * r, (s.xi - p.eta(k.k_iv)) * r});
  }
  for (size_t l = 0; l < mg.topology().lines.size(); ++l) z.push_back(Microgrid::get(x, mg.line_offset(static_cast<int>(l))));
  if (mg.topology().infinite_bus) z.push_back(Microgrid::get(x, mg.infinite_offset()));
  for (size_t v = 0; v < mg.interconnection().nodes.bus_of.size(); ++v)
    z.push_back(Microgrid::get(x, mg.node_offset(static_cast<int>(v))));
  CVec out(z.size());
  for (size_t i = 0; i < z.size(); ++i) out(i) = z[i];
  return out;
}

struct OrbitDistance {
  double distance = 0;
  double tau = 0;
  double frequency_error = 0;  // max_e |omega_hat_e - omega0|
};

// min over tau of ||z - e^{j tau} zbar||, 1024-point grid refined by bisection
// on the derivative.
inline OrbitDistance orbit_distance(const CVec& z, const CVec& zbar) {
  if (z.size() != zbar.size()) throw DimensionError("orbit_distance: size mismatch");
  if (!(zbar.norm() > 0)) throw ReferenceError("reference orbit is degenerate (z_bar = 0)");
  auto dist = [&](double tau) { return (z - std::polar(1.0, tau) * zbar).norm(); };
  // d/dtau ||z - e^{j tau} zbar||^2 = 2 Re{ j e^{-j tau} zbar^* z }... sign handled numerically
  auto slope = [&](double tau) { return (std::polar(1.0, -tau) * zbar.dot(z) * -j1).real(); };
  constexpr int n = 1024;
  int best = 0;
  double bd = INFINITY;
  for (int i = 0; i < n; ++i) {
    const double d = dist(2 * std::numbers::pi * i / n);
    if (d < bd) {
      bd = d;
      best = i;
    }
  }
  const double h = 2 * std::numbers::pi / n;
  double lo = (best - 1) * h, hi = (best + 1) * h;
  // the squared distance is 2 Re{e^{-j tau} zbar^* z} below a constant; its slope changes sign at the minimum
  double slo = slope(lo), shi = slope(hi);
  OrbitDistance r;
  if (slo * shi < 0) {
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double sm = slope(mid);
      if ((sm < 0) == (slo < 0)) {
        lo = mid;
        slo = sm;
      } else {
        hi = mid;
      }
    }
    r.tau = 0.5 * (lo + hi);
  } else {
    r.tau = best * h;
  }
  r.distance = std::min(dist(r.tau), bd);
  r.tau = wrap_angle(r.tau);
  return r;
}

inline OrbitDistance orbit_distance(const Microgrid& mg, const Vec& x, const OrbitReference& ref, const DerGains& k) {
  OrbitDistance r = orbit_distance(orbit_coordinates(mg, x, k), orbit_coordinates(mg, ref.state, k));
  for (int e = 0; e < mg.ders(); ++e) {
    const auto& p = mg.topology().ders[e].params;
    r.frequency_error = std::max(r.frequency_error, std::abs(p.omega_n + mg.gfm_state(x, e).w - ref.omega0));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Overall shifted Hamiltonian and the energy balance audit.

struct EnergyTerms {
  double h = 0;            // overall shifted Hamiltonian
  double dh_exact = 0;     // derivative along the vector field
  double bound = 0;        // right-hand side of the overall balance
  double complete = 0;     // bound plus the frame term: equals dh_exact for the simulated model
  double line_dissipation = 0, shunt_terms = 0, der_dissipation = 0, forcing = 0, frame = 0, supply_sum = 0;
  std::vector<double> line_h, line_rate;  // per line: 1/2 L |dI|^2 and -R|dI|^2 + Re{dI^* dV}
};

// Shifted Hamiltonian with the moving reference xbar; eps scales the swing part.
inline EnergyTerms energy_terms(const Microgrid& mg, const DerGains& k, double t, const Vec& x, const Vec& xbar,
                                double omega0, double eps) {
  EnergyTerms r;
  const auto& topo = mg.topology();
  if (topo.infinite_bus && topo.infinite_bus->closed) throw ConfigError("energy audit: infinite bus must be open");
  Vec dx(mg.size());
  mg.rhs(t, x, dx);
  auto phasor = [](const Vec& v, int i) { return Microgrid::get(v, i); };
  // DERs
  for (int e = 0; e < mg.ders(); ++e) {
    const auto& p = topo.ders[e].params;
    const double eta = p.eta(k.k_iv);
    const GfmState s = mg.gfm_state(x, e), sb = mg.gfm_state(xbar, e);
    const GfmState ds = mg.gfm_state(dx, e);
    const Phasor vb = mg.node_voltage(x, e), vbb = mg.node_voltage(xbar, e);
    const Phasor ib = coupling_current(s, p, vb * std::polar(1.0, -s.theta));
    const Phasor ibb = coupling_current(sb, p, vbb * std::polar(1.0, -sb.theta));
    const Phasor r0 = std::polar(1.0, s.theta), rb = std::polar(1.0, sb.theta);
    const double wh = p.omega_n + s.w;
    const double om = wh - omega0;  // internal frequency relative to the orbit
    // storage pairs (coefficient c, costate q = z / c) in the external frame
    struct Pair {
      double c;
      Phasor v, vb, dv;
    };
    std::vector<Pair> pairs = {{p.c_f, s.v_o * r0, sb.v_o * rb, (ds.v_o + j1 * wh * s.v_o) * r0},
                               {p.l_f, s.i_t * r0, sb.i_t * rb, (ds.i_t + j1 * wh * s.i_t) * r0},
                               {1.0, s.beta * r0, sb.beta * rb, (ds.beta + j1 * wh * s.beta) * r0},
                               {1.0, (s.xi - eta) * r0, (sb.xi - eta) * rb, (ds.xi + j1 * wh * (s.xi - eta)) * r0}};
    if (p.has_lc()) pairs.push_back({p.l_c, s.i_b * r0, sb.i_b * rb, (ds.i_b + j1 * wh * s.i_b) * r0});
    for (const auto& pr : pairs) {
      const Phasor d = pr.v - pr.vb;
      r.h += 0.5 * pr.c * std::norm(d);
      r.dh_exact += pr.c * (std::conj(d) * (pr.dv - j1 * omega0 * pr.vb)).real();
    }
    r.h += 0.5 * eps * eps * p.J() * om * om;
    r.dh_exact += eps * eps * p.J() * om * ds.w;
    // bound terms from the pH form: <dg, (F0 + B K) dg> on the costates
    const Phasor cost[5] = {ib * r0 - ibb * rb, s.v_o * r0 - sb.v_o * rb, s.i_t * r0 - sb.i_t * rb,
                            s.beta * r0 - sb.beta * rb, (s.xi - eta) * r0 - (sb.xi - eta) * rb};
    // structured blocks act on the complex costates as scalars
    const Mat F = closed_loop(p, k);
    double diss = 0;
    for (int a = 0; a < 5; ++a)
      for (int b = 0; b < 5; ++b) {
        const Phasor gab = block_scalar(F, a, b);
        diss += (std::conj(cost[a]) * gab * cost[b]).real();
      }
    // swing row: -D |eps om|^2 and the psi coupling -eps^2 om psi Re{e^{-j theta} dI_t}
    diss += -p.D() * eps * eps * om * om;
    diss += -eps * eps * om * p.psi() * (s.i_t.real() - sb.i_t.real() * std::cos(sb.theta - s.theta));
    r.der_dissipation += diss;
    r.forcing += eps * eps * p.T0(omega0) * om * (1.0 - std::cos(s.theta - sb.theta));
    r.supply_sum += -(std::conj(ib * r0 - ibb * rb) * (vb - vbb)).real();
    // The eta offset of xi rotates with the DER frame, and the optional
    // frequency input; neither is part of the F(phi) dissipation form.
    Phasor extra = -j1 * eta * (wh * r0 - omega0 * rb);
    const auto& opt = mg.gfm_options();
    if (opt.frequency_input) extra += j1 * (wh - opt.omega_bar) * r0;
    r.frame += (std::conj(cost[4]) * extra).real();
  }
  // lines
  for (size_t l = 0; l < topo.lines.size(); ++l) {
    const auto& ln = topo.lines[l];
    if (!ln.closed) continue;
    const int o = mg.line_offset(static_cast<int>(l));
    const Phasor d = phasor(x, o) - phasor(xbar, o);
    const Phasor dv = (mg.bus_voltage(x, ln.from) - mg.bus_voltage(x, ln.to)) -
                      (mg.bus_voltage(xbar, ln.from) - mg.bus_voltage(xbar, ln.to));
    const double hl = 0.5 * ln.l * std::norm(d);
    const double rate = -ln.r * std::norm(d) + (std::conj(d) * dv).real();
    r.h += hl;
    r.dh_exact += ln.l * (std::conj(d) * (phasor(dx, o) - j1 * omega0 * phasor(xbar, o))).real();
    r.line_dissipation += -ln.r * std::norm(d);
    r.supply_sum += (std::conj(d) * dv).real();
    r.line_h.push_back(hl);
    r.line_rate.push_back(rate);
  }
  // shunts with their ZIP loads; inj is the current delivered by DERs and lines
  std::vector<Phasor> inj(mg.interconnection().nodes.bus_of.size()), injb(inj.size());
  for (int e = 0; e < mg.ders(); ++e) {
    const auto& p = topo.ders[e].params;
    const GfmState s = mg.gfm_state(x, e), sb = mg.gfm_state(xbar, e);
    inj[e] += coupling_current(s, p, mg.node_voltage(x, e) * std::polar(1.0, -s.theta)) * std::polar(1.0, s.theta);
    injb[e] += coupling_current(sb, p, mg.node_voltage(xbar, e) * std::polar(1.0, -sb.theta)) * std::polar(1.0, sb.theta);
  }
  for (size_t l = 0; l < topo.lines.size(); ++l) {
    if (!topo.lines[l].closed) continue;
    const int a = mg.interconnection().nodes.node(topo.lines[l].from), b = mg.interconnection().nodes.node(topo.lines[l].to);
    const int o = mg.line_offset(static_cast<int>(l));
    inj[a] -= phasor(x, o);
    inj[b] += phasor(x, o);
    injb[a] -= phasor(xbar, o);
    injb[b] += phasor(xbar, o);
  }
  for (const auto& sh : topo.shunts) {
    const int node = mg.interconnection().nodes.node(sh.bus);
    const int o = mg.node_offset(node);
    const Phasor v = phasor(x, o), vbr = phasor(xbar, o), d = v - vbr;
    r.h += 0.5 * sh.c * std::norm(d);
    r.dh_exact += sh.c * (std::conj(d) * (phasor(dx, o) - j1 * omega0 * vbr)).real();
    double s = -sh.g * std::norm(d);
    r.supply_sum += (std::conj(d) * (inj[node] - injb[node])).real();
    for (const auto& z : topo.loads)
      if (z.bus == sh.bus) s += (std::conj(d) * (zip_current(v, z) - zip_current(vbr, z))).real();
    r.shunt_terms += s;
  }
  r.bound = r.line_dissipation + r.shunt_terms + r.der_dissipation + r.forcing;
  r.complete = r.bound + r.frame;
  return r;
}

struct EnergyAuditReport {
  int samples = 0;
  int satisfied = 0;           // FD <= bound + tol
  int satisfied_complete = 0;  // FD <= bound + frame + tol
  double fraction = 0, fraction_complete = 0;
  double worst_violation = 0;     // max (FD - bound) / scale
  double worst_time = 0;
  double max_identity_error = 0;  // |dh_exact - complete| / scale
  double max_frame = 0;           // |frame| / scale
  double max_supply_sum = 0;      // interconnection powers, should cancel
  double max_fd_error = 0;        // |FD - dh_exact| / scale
  double max_line_error = 0;      // per-line R-L balance
  double max_forcing = 0;
  double rel_floor = 0;
  bool pass = false;
};

// Central differences of the overall shifted Hamiltonian on the sample grid.
// A sample satisfies the balance when FD <= bound + rel_floor * scale, where
// scale sums the magnitudes of the balance terms (finite-difference noise floor).
inline EnergyAuditReport energy_balance_audit(const Microgrid& mg, const DerGains& k, const std::vector<double>& t,
                                              const std::vector<Vec>& states, const OrbitReference& ref, double eps,
                                              double rel_floor = 1e-3, double min_fraction = 0.999) {
  if (ref.state.size() != mg.size()) throw ReferenceError("reference orbit does not match the system");
  if (t.size() != states.size() || t.size() < 3) throw ConfigError("audit needs at least three samples");
  EnergyAuditReport r;
  r.rel_floor = rel_floor;
  std::vector<EnergyTerms> terms;
  terms.reserve(t.size());
  for (size_t i = 0; i < t.size(); ++i)
    terms.push_back(energy_terms(mg, k, t[i], states[i], reference_at(mg, ref, t[i]), ref.omega0, eps));
  for (size_t i = 1; i + 1 < t.size(); ++i) {
    const double h = t[i + 1] - t[i - 1];
    const double fd = (terms[i + 1].h - terms[i - 1].h) / h;
    const auto& e = terms[i];
    const double scale = std::abs(e.line_dissipation) + std::abs(e.shunt_terms) + std::abs(e.der_dissipation) +
                         std::abs(e.forcing) + std::abs(e.frame) + 1e-300;
    const double viol = (fd - e.bound) / scale;
    ++r.samples;
    if (viol <= rel_floor) ++r.satisfied;
    if ((fd - e.complete) / scale <= rel_floor) ++r.satisfied_complete;
    if (r.samples == 1 || viol > r.worst_violation) {
      r.worst_violation = viol;
      r.worst_time = t[i];
    }
    r.max_identity_error = std::max(r.max_identity_error, std::abs(e.dh_exact - e.complete) / scale);
    r.max_frame = std::max(r.max_frame, std::abs(e.frame) / scale);
    r.max_supply_sum = std::max(r.max_supply_sum, std::abs(e.supply_sum) / scale);
    r.max_fd_error = std::max(r.max_fd_error, std::abs(fd - e.dh_exact) / scale);
    r.max_forcing = std::max(r.max_forcing, std::abs(e.forcing));
    for (size_t l = 0; l < e.line_h.size(); ++l) {
      const double fdl = (terms[i + 1].line_h[l] - terms[i - 1].line_h[l]) / h;
      r.max_line_error = std::max(r.max_line_error, std::abs(fdl - e.line_rate[l]) / scale);
    }
  }
  r.fraction = static_cast<double>(r.satisfied) / r.samples;
  r.fraction_complete = static_cast<double>(r.satisfied_complete) / r.samples;
  r.pass = r.fraction >= min_fraction;
  return r;
}

// ---------------------------------------------------------------------------
// Perturbed starts and orbit files.

// Global rotation by tau, then every non-angle state scaled by (1 + U(-rel, rel)).
inline Vec perturbed_state(const Microgrid& mg, const Vec& x, double rel, double tau, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-rel, rel);
  Vec y = rotate_state(mg, x, tau);
  std::vector<bool> angle(y.size(), false);
  for (int k = 0; k < mg.ders(); ++k) angle[mg.theta_index(k)] = true;
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (!angle[i]) y(i) *= 1.0 + u(rng);
  return y;
}

// The reference is the state at the end of a settled run; omega0 is taken
// from the first DER's internal frequency there.
inline OrbitReference orbit_from_run(const Microgrid& mg, const Vec& x_end, double t_end) {
  if (mg.ders() == 0) throw ReferenceError("orbit reference needs at least one DER");
  double w0 = 0;
  if (mg.kind(0) == ControllerKind::proposed)
    w0 = mg.topology().ders[0].params.omega_n + mg.gfm_state(x_end, 0).w;
  else
    w0 = 2 * std::numbers::pi * mg.channels(x_end, 0)[0];
  return {x_end, t_end, w0};
}

inline nlohmann::json orbit_to_json(const OrbitReference& r, const std::string& scenario_file) {
  return {{"scenario", scenario_file},
          {"t_ref_s", r.t_ref},
          {"omega0_rad_s", r.omega0},
          {"state", std::vector<double>(r.state.data(), r.state.data() + r.state.size())}};
}

struct OrbitFile {
  OrbitReference ref;
  std::string scenario;  // resolved path
};

inline OrbitFile load_orbit(const std::string& path) {
  const auto j = read_json_file(path);
  try {
    OrbitFile o;
    const auto st = j.at("state").get<std::vector<double>>();
    o.ref.state = Eigen::Map<const Vec>(st.data(), static_cast<Eigen::Index>(st.size()));
    o.ref.t_ref = j.at("t_ref_s").get<double>();
    o.ref.omega0 = j.at("omega0_rad_s").get<double>();
    std::filesystem::path sp(j.at("scenario").get<std::string>());
    if (sp.is_relative()) sp = std::filesystem::path(path).parent_path() / sp;
    o.scenario = sp.string();
    if (o.ref.state.size() == 0 || !(o.ref.state.norm() > 0)) throw ReferenceError(path + ": degenerate reference state");
    return o;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// Full state trajectories: header t,x0,x1,...
inline void write_states_csv(const std::string& path, const Trajectory& tr) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << "t";
  if (!tr.states.empty())
    for (Eigen::Index i = 0; i < tr.states.front().size(); ++i) out << ",x" << i;
  out << '\n';
  char buf[32];
  for (size_t r = 0; r < tr.states.size(); ++r) {
    std::snprintf(buf, sizeof buf, "%.9f", tr.t[r]);
    out << buf;
    for (Eigen::Index i = 0; i < tr.states[r].size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", tr.states[r](i));
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline std::pair<std::vector<double>, std::vector<Vec>> read_states_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,x0", 0) != 0) throw ConfigError(path + ": not a state trajectory (expected t,x0,...)");
  const auto n = static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ','));
  std::vector<double> t;
  std::vector<Vec> xs;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Vec x(n);
    try {
      std::getline(ss, cell, ',');
      t.push_back(std::stod(cell));
      Eigen::Index i = 0;
      for (; i < n && std::getline(ss, cell, ','); ++i) x(i) = std::stod(cell);
      if (i != n) throw ConfigError("short row");
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": bad row");
    }
    xs.push_back(std::move(x));
  }
  return {t, xs};
}

// Optional "initial" block of a scenario: start from a perturbed orbit state.
//   {"orbit": "ref/orbit.json", "rotation_rad": 0.3, "perturb_rel": 0.2, "seed": 1}
inline void apply_initial_block(Scenario& s, const nlohmann::json& j, const std::filesystem::path& dir) {
  if (!j.contains("initial")) return;
  const auto& b = j.at("initial");
  std::filesystem::path op(b.at("orbit").get<std::string>());
  if (op.is_relative()) op = dir / op;
  const OrbitFile o = load_orbit(op.string());
  Microgrid mg(s);
  if (o.ref.state.size() != mg.size()) throw ConfigError("initial orbit does not match the scenario topology");
  s.initial = perturbed_state(mg, o.ref.state, b.value("perturb_rel", 0.0), b.value("rotation_rad", 0.0),
                              b.value("seed", 1u));
}

}  // namespace mgrid
