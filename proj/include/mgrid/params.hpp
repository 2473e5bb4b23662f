#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <numbers>

#include "phasor.hpp"

namespace mgrid {

struct Base {
  double v_ll = 400.0;   // V
  double p = 1.0e6;      // W
  double f_hz = 60.0;
  double z() const { return v_ll * v_ll / p; }
  double omega() const { return 2.0 * std::numbers::pi * f_hz; }
  double ohm(double r) const { return r / z(); }
  double henry(double l) const { return l / z(); }    // pu*s
  double farad(double c) const { return c * z(); }    // pu*s
  double siemens(double g) const { return g * z(); }
};

// One DER, per unit with time in seconds.
struct DerParams {
  double r_f = 0, l_f = 0, c_f = 0, r_c = 0, l_c = 0;
  double m = 0;       // inertia constant M
  double r_reg = 0;   // rad/s per pu power
  double x = 0;       // virtual reactance
  double v_n = 1, v_dc = 2, omega_n = 2.0 * std::numbers::pi * 60.0, p_n = 0;

  double J() const { return m / omega_n; }
  double D() const { return 1.0 / (r_reg * omega_n); }
  double psi() const { return v_n / omega_n; }
  double eta(double k_iv) const { return k_iv * v_n / (omega_n * omega_n); }
  double T0(double omega0) const { return ((omega_n - omega0) / r_reg + p_n) / omega_n; }
  bool has_lc() const { return l_c > 0; }
  // diagonal of Q1 per complex coordinate (I_b, V_o, I_t, beta, xi)
  std::array<double, 5> q1() const {
    return {l_c > 0 ? 1.0 / l_c : std::numeric_limits<double>::infinity(), 1.0 / c_f, 1.0 / l_f, 1.0, 1.0};
  }
};

// Feedback m = Khat [I_b, V_o, I_t, beta, xi - eta] on real pairs.
struct DerGains {
  Eigen::Matrix<double, 2, 10> k_hat = Eigen::Matrix<double, 2, 10>::Zero();
  double k_iv = 0;

  // complex gain per costate, m = sum_k g_k s_k
  std::array<Phasor, 5> complex_gains() const {
    std::array<Phasor, 5> g;
    for (int k = 0; k < 5; ++k) g[k] = {k_hat(0, 2 * k), -k_hat(0, 2 * k + 1)};
    return g;
  }
};

// Cascaded droop controller gains, device base (P_B = 0.1 MW by default).
struct DroopGains {
  double m_p = 0.005;        // per device pu power, fraction of omega_n
  double n_q = 0.0667;       // per device pu reactive power
  double omega_c = 2.0 * std::numbers::pi * 6.0;
  double k_pv = 0.1833, k_iv = 230.94, k_pc = 7.59, k_ic = 4.48e4, k_f = 0.75;
  double device_base = 0.1;  // device power base in system pu
};

// Reference DER parameter set.
inline DerParams table1_der(const Base& b = {}) {
  DerParams p;
  p.r_f = b.ohm(0.1);
  p.l_f = b.henry(1.35e-3);
  p.c_f = b.farad(50e-6);
  p.r_c = b.ohm(0.14);
  p.l_c = 0.0;
  p.omega_n = b.omega();
  p.r_reg = 0.05 * p.omega_n;
  p.m = 2.0 / p.omega_n;
  p.x = 0.4;
  p.v_n = 1.0;
  p.v_dc = 2.0;
  p.p_n = 0.01;
  return p;
}

inline DerGains table1_gains() {
  DerGains g;
  g.k_hat << 117, 0.5, -129, 0, -115, 0.3, 1293, 4471, 499, -11.6,
             -0.5, 117, 0, -129, -0.3, -115, -4471, 1293, 11.6, 499;
  g.k_iv = 2e4;
  return g;
}

}  // namespace mgrid
