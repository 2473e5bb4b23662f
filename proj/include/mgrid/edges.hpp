#pragma once

#include <array>
#include <cmath>

#include "errors.hpp"
#include "network.hpp"
#include "params.hpp"
#include "phasor.hpp"

namespace mgrid {

// L dI/dt = -R I + V
inline Phasor rl_line_rhs(double r, double l, Phasor i, Phasor v) { return (-r * i + v) / l; }

inline constexpr double kVoltageFloor = 0.05;

// Load current drawn into the shunt node equation (enters additively).
inline Phasor zip_current(Phasor v, const ZipLoad& z, double v_min = kVoltageFloor) {
  const double mag = std::abs(v);
  Phasor u = z.y * v;
  const bool nonlinear = z.s != Phasor(0, 0) || z.i != 0.0;
  if (nonlinear && mag <= v_min) throw VoltageCollapse("shunt voltage " + std::to_string(mag) + " pu below floor");
  if (z.i != 0.0) u += z.i * v / mag;
  if (z.s != Phasor(0, 0)) u += std::conj(z.s / v);
  return -u;
}

// C dV/dt = -G V + I_in + Upsilon(V)
inline Phasor shunt_rhs(const Shunt& s, const ZipLoad* z, Phasor v, Phasor i_in) {
  Phasor d = -s.g * v + i_in;
  if (z) d += zip_current(v, *z);
  return d / s.c;
}

// ---------------------------------------------------------------------------
// Proposed grid-forming DER, internal-frame coordinates.

struct GfmState {
  Phasor i_b{0, 0};  // state only when L_c > 0
  Phasor v_o{0, 0}, i_t{0, 0}, beta{0, 0}, xi{0, 0};
  double theta = 0;  // external angle
  double w = 0;      // omega_hat - omega_n, rad/s
};

struct GfmOptions {
  bool original_power = false;   // Re{I_t^* V_o} instead of V_n Re{I_t}
  bool frequency_input = false;  // j(omega_hat - omega_bar) term of the current loop
  double omega_bar = 0;          // absolute rad/s, used with frequency_input
};

struct GfmDeriv {
  GfmState d;
  Phasor i_b{0, 0};    // internal-frame coupling current (algebraic when L_c = 0)
  Phasor i_inj{0, 0};  // external-frame injection into the bus
  Phasor m{0, 0};
  double p = 0;        // power term of the swing equation
};

inline Phasor coupling_current(const GfmState& s, const DerParams& p, Phasor v_b_int) {
  return p.has_lc() ? s.i_b : (s.v_o - v_b_int) / p.r_c;
}

struct CircuitDeriv {
  Phasor i_b{0, 0}, v_o{0, 0}, i_t{0, 0};
};

// Filter and coupling segment in a frame rotating at w (absolute rad/s).
inline CircuitDeriv circuit_rhs(const DerParams& p, double w, Phasor i_b, Phasor v_o, Phasor i_t, Phasor m,
                                Phasor v_b) {
  CircuitDeriv d;
  if (p.has_lc()) d.i_b = (-j1 * w * p.l_c * i_b - p.r_c * i_b + v_o - v_b) / p.l_c;
  d.v_o = -j1 * w * v_o + (i_t - i_b) / p.c_f;
  d.i_t = -j1 * w * i_t + (-p.r_f * i_t + 0.5 * p.v_dc * m - v_o) / p.l_f;
  return d;
}

inline Phasor modulation(const DerGains& k, const std::array<Phasor, 5>& s) {
  const auto g = k.complex_gains();
  Phasor m = 0;
  for (int i = 0; i < 5; ++i) m += g[i] * s[i];
  return m;
}

inline GfmDeriv gfm_der_rhs(const GfmState& s, const DerParams& p, const DerGains& k, Phasor v_b_ext,
                            const GfmOptions& opt = {}) {
  GfmDeriv r;
  const Phasor rot = std::polar(1.0, -s.theta);
  const Phasor v_b = v_b_ext * rot;
  const double wh = p.omega_n + s.w;
  const Phasor i_b = coupling_current(s, p, v_b);
  const double eta = p.eta(k.k_iv);
  r.m = modulation(k, {i_b, s.v_o, s.i_t, s.beta, s.xi - eta});

  r.p = opt.original_power ? (std::conj(s.i_t) * s.v_o).real() : p.v_n * s.i_t.real();
  r.d.w = (-s.w / p.r_reg - (r.p - p.p_n)) / p.m;
  r.d.theta = wh;
  r.d.beta = -j1 * wh * s.beta - s.v_o - j1 * p.x * s.i_t;
  r.d.xi = -j1 * wh * s.xi + j1 * p.omega_n * s.xi + k.k_iv * (s.beta - j1 * p.psi());
  if (opt.frequency_input) r.d.xi += j1 * (wh - opt.omega_bar);
  const auto c = circuit_rhs(p, wh, i_b, s.v_o, s.i_t, r.m, v_b);
  r.d.i_b = c.i_b;
  r.d.v_o = c.v_o;
  r.d.i_t = c.i_t;
  r.i_b = i_b;
  r.i_inj = i_b / rot;
  return r;
}

// State with V_o = V_n, beta = j psi, zero currents and m = V_o / (V_dc/2).
inline GfmState gfm_flat_start(const DerParams& p, const DerGains& k, double theta = 0) {
  GfmState s;
  s.v_o = p.v_n;
  s.beta = j1 * p.psi();
  s.theta = theta;
  const auto g = k.complex_gains();
  const Phasor target = s.v_o / (0.5 * p.v_dc) - g[1] * s.v_o - g[3] * s.beta - g[0] * coupling_current(s, p, s.v_o);
  s.xi = p.eta(k.k_iv) + (std::abs(g[4]) > 0 ? target / g[4] : Phasor(0, 0));
  return s;
}

// Lifted pH coordinates of one DER.
struct LiftedDer {
  CVec x;  // 12
  CVec u;  // 5
  CVec y;  // 5
};

inline LiftedDer lift_to_ph(const GfmState& s, const DerParams& p, const DerGains& k, double eps, double phi,
                            Phasor v_b_ext) {
  if (!(eps > 0)) throw ConfigError("lift_to_ph: eps must be positive");
  LiftedDer l;
  l.x = CVec::Zero(12);
  l.u = CVec::Zero(5);
  l.y = CVec::Zero(5);
  const Phasor e = std::polar(1.0, s.theta);
  const Phasor e1 = std::polar(1.0, s.theta - phi);
  const Phasor v_b = v_b_ext / e;
  const Phasor i_b = coupling_current(s, p, v_b);
  const double eta = p.eta(k.k_iv);
  const std::array<Phasor, 5> z = {p.l_c * i_b, p.c_f * s.v_o, p.l_f * s.i_t, s.beta, s.xi};
  for (int c = 0; c < 5; ++c) {
    l.x(2 * c) = z[c].real() * e;
    l.x(2 * c + 1) = z[c].imag() * e;
  }
  l.x(10) = j1 * eps * p.J() * s.w * e1;
  l.x(11) = eps * e1;
  const Phasor xe = s.xi - eta;
  l.u(0) = v_b.real() * e;
  l.u(1) = v_b.imag() * e;
  l.u(2) = 0.0;
  l.u(3) = s.w * e;
  l.u(4) = j1 * eps * p.T0(p.omega_n) * e1 - xe / eps * e1;
  l.y(0) = -i_b.real() * e;
  l.y(1) = -i_b.imag() * e;
  l.y(2) = xe.real() * e;
  l.y(3) = xe.imag() * e;
  l.y(4) = j1 * eps * s.w * e1;
  return l;
}

// ---------------------------------------------------------------------------
// Baseline cascaded droop DER (frame rotating at the droop frequency).

struct DroopState {
  Phasor i_b{0, 0};  // state only when L_c > 0
  Phasor v_o{0, 0}, i_t{0, 0};
  Phasor phi{0, 0};    // voltage PI integrator
  Phasor gamma{0, 0};  // current PI integrator
  double theta = 0;
  double p_f = 0, q_f = 0;  // filtered powers, system pu
};

struct DroopDeriv {
  DroopState d;
  Phasor i_b{0, 0}, i_inj{0, 0}, m{0, 0};
  double omega = 0;
  Phasor v_ref{0, 0};
};

inline double droop_omega(const DerParams& p, const DroopGains& g, double p_f) {
  return p.omega_n - g.m_p * p.omega_n * p_f / g.device_base;
}

inline double droop_voltage(const DerParams& p, const DroopGains& g, double q_f) {
  return p.v_n - g.n_q * q_f / g.device_base;
}

// Gains are on the device base: admittance-type gains scale by device_base,
// impedance-type gains by 1/device_base.
inline DroopDeriv droop_der_rhs(const DroopState& s, const DerParams& p, const DroopGains& g, Phasor v_b_ext) {
  DroopDeriv r;
  const Phasor rot = std::polar(1.0, -s.theta);
  const Phasor v_b = v_b_ext * rot;
  const Phasor i_b = p.has_lc() ? s.i_b : (s.v_o - v_b) / p.r_c;
  const double w = droop_omega(p, g, s.p_f);
  const double v_star = droop_voltage(p, g, s.q_f);
  const double sb = g.device_base;
  const Phasor s_out = s.v_o * std::conj(i_b);
  r.d.p_f = g.omega_c * (s_out.real() - s.p_f);
  r.d.q_f = g.omega_c * (s_out.imag() - s.q_f);
  r.d.theta = w;
  r.d.phi = v_star - s.v_o;
  const Phasor i_ref = g.k_f * i_b + j1 * p.omega_n * p.c_f * s.v_o + g.k_pv * sb * (v_star - s.v_o) + g.k_iv * sb * s.phi;
  r.d.gamma = i_ref - s.i_t;
  const Phasor v_i = j1 * p.omega_n * p.l_f * s.i_t + g.k_pc / sb * (i_ref - s.i_t) + g.k_ic / sb * s.gamma;
  r.m = v_i / (0.5 * p.v_dc);
  const auto c = circuit_rhs(p, w, i_b, s.v_o, s.i_t, r.m, v_b);
  r.d.i_b = c.i_b;
  r.d.v_o = c.v_o;
  r.d.i_t = c.i_t;
  r.i_b = i_b;
  r.i_inj = i_b / rot;
  r.omega = w;
  r.v_ref = v_star;
  return r;
}

inline DroopState droop_flat_start(const DerParams& p, const DroopGains& g, double theta = 0) {
  DroopState s;
  s.v_o = p.v_n;
  s.theta = theta;
  // integrator holds the modulation needed for V_t = V_o
  s.gamma = p.v_n / (g.k_ic / g.device_base);
  return s;
}

}  // namespace mgrid
