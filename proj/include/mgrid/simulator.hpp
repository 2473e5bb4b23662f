#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "edges.hpp"
#include "errors.hpp"
#include "gains_io.hpp"
#include "network.hpp"
#include "ode.hpp"

namespace mgrid {

enum class ControllerKind { proposed, baseline };

inline const char* to_string(ControllerKind c) { return c == ControllerKind::proposed ? "proposed" : "baseline"; }

struct Event {
  double t = 0;
  std::string kind;    // zip-scale | breaker-open | breaker-close | connect-infinite-bus
  int bus = -1;        // zip-scale
  std::string target;  // breaker events: line or infinite-bus name
  // zip-scale factors relative to the nominal load: Re/Im of Y, Re/Im of S, |I|
  double g = 1, b = 1, p = 1, q = 1, i = 1;
  double v = 1, angle = 0;  // connect-infinite-bus
};

struct Scenario {
  std::string name = "scenario";
  Topology topology;
  std::vector<ControllerKind> controllers;  // per DER; empty means all proposed
  DerGains gains = table1_gains();
  DroopGains droop;
  GfmOptions gfm;
  std::vector<Event> events;
  double duration = 1.0;
  double dt = 1e-5;
  double record_dt = 1e-3;
  double preroll = 1.0;
  double rtol = 1e-6, atol = 1e-8;
  double rotation = 0;  // global rotation of the warm-start state
  bool keep_states = false;
  std::optional<Vec> initial;  // replaces the warm start when set

  ControllerKind controller(int k) const { return controllers.empty() ? ControllerKind::proposed : controllers[k]; }
  void validate() const;
};

inline void Scenario::validate() const {
  if (!(duration > 0) || !(dt > 0) || !(record_dt > 0) || preroll < 0) throw ConfigError("scenario times must be positive");
  if (!controllers.empty() && controllers.size() != topology.ders.size())
    throw ConfigError("one controller per DER required");
  for (size_t k = 0; k < topology.ders.size(); ++k)
    if (controller(static_cast<int>(k)) == ControllerKind::baseline && dt > 50e-6)
      throw ConfigError("baseline controller needs dt <= 50 us");
  for (size_t e = 1; e < events.size(); ++e)
    if (events[e].t < events[e - 1].t) throw ConfigError("events must be time-sorted");
  for (const auto& e : events)
    if (e.t < 0 || e.t > duration) throw ConfigError("event time outside the run");
  build_incidence(topology);
}

// ---------------------------------------------------------------------------
// State layout and the interconnected right-hand side.

class Microgrid {
 public:
  explicit Microgrid(const Scenario& s)
      : topo_(s.topology), nominal_(s.topology.loads), gains_(s.gains), droop_(s.droop), gfm_(s.gfm) {
    ic_ = build_incidence(topo_);
    const int g = topo_.g();
    int off = 0;
    for (int k = 0; k < g; ++k) {
      const auto& p = topo_.ders[k].params;
      kind_.push_back(s.controller(k));
      der_off_.push_back(off);
      off += (p.has_lc() ? 2 : 0) + (kind_[k] == ControllerKind::proposed ? 10 : 11);
    }
    for (size_t l = 0; l < topo_.lines.size(); ++l) {
      line_off_.push_back(off);
      off += 2;
    }
    inf_off_ = off;
    if (topo_.infinite_bus) off += 2;
    const int n = static_cast<int>(ic_.nodes.bus_of.size());
    node_off_ = off;
    off += 2 * n;
    size_ = off;
    shunt_of_node_.assign(n, -1);
    for (size_t i = 0; i < topo_.shunts.size(); ++i) shunt_of_node_[ic_.nodes.node(topo_.shunts[i].bus)] = static_cast<int>(i);
    for (int v = 0; v < n; ++v)
      if (shunt_of_node_[v] < 0) throw TopologyError("bus " + std::to_string(ic_.nodes.bus_of[v]) + " has no shunt");
    loads_of_node_.assign(n, {});
    for (size_t i = 0; i < topo_.loads.size(); ++i) loads_of_node_[ic_.nodes.node(topo_.loads[i].bus)].push_back(static_cast<int>(i));
    line_from_.clear();
    line_to_.clear();
    for (const auto& ln : topo_.lines) {
      line_from_.push_back(ic_.nodes.node(ln.from));
      line_to_.push_back(ic_.nodes.node(ln.to));
    }
    if (topo_.infinite_bus) inf_node_ = ic_.nodes.node(topo_.infinite_bus->bus);
    inj_.resize(n);
  }

  int size() const { return size_; }
  int ders() const { return topo_.g(); }
  const Topology& topology() const { return topo_; }
  const Interconnection& interconnection() const { return ic_; }
  ControllerKind kind(int k) const { return kind_[k]; }
  int der_offset(int k) const { return der_off_[k]; }
  int line_offset(int l) const { return line_off_[l]; }
  int node_offset(int node) const { return node_off_ + 2 * node; }
  int infinite_offset() const { return inf_off_; }
  const GfmOptions& gfm_options() const { return gfm_; }

  static Phasor get(const Vec& x, int i) { return {x(i), x(i + 1)}; }
  static void put(Vec& x, int i, Phasor v) {
    x(i) = v.real();
    x(i + 1) = v.imag();
  }

  Phasor node_voltage(const Vec& x, int node) const { return get(x, node_offset(node)); }
  Phasor bus_voltage(const Vec& x, int bus) const { return node_voltage(x, ic_.nodes.node(bus)); }
  Phasor infinite_voltage(double t) const {
    const auto& ib = *topo_.infinite_bus;
    return std::polar(ib.v, ib.angle + topo_.base.omega() * t);
  }

  GfmState gfm_state(const Vec& x, int k) const {
    GfmState s;
    int o = der_off_[k];
    if (topo_.ders[k].params.has_lc()) {
      s.i_b = get(x, o);
      o += 2;
    }
    s.v_o = get(x, o);
    s.i_t = get(x, o + 2);
    s.beta = get(x, o + 4);
    s.xi = get(x, o + 6);
    s.theta = x(o + 8);
    s.w = x(o + 9);
    return s;
  }
  void put_gfm(Vec& x, int k, const GfmState& s) const {
    int o = der_off_[k];
    if (topo_.ders[k].params.has_lc()) {
      put(x, o, s.i_b);
      o += 2;
    }
    put(x, o, s.v_o);
    put(x, o + 2, s.i_t);
    put(x, o + 4, s.beta);
    put(x, o + 6, s.xi);
    x(o + 8) = s.theta;
    x(o + 9) = s.w;
  }
  DroopState droop_state(const Vec& x, int k) const {
    DroopState s;
    int o = der_off_[k];
    if (topo_.ders[k].params.has_lc()) {
      s.i_b = get(x, o);
      o += 2;
    }
    s.v_o = get(x, o);
    s.i_t = get(x, o + 2);
    s.phi = get(x, o + 4);
    s.gamma = get(x, o + 6);
    s.theta = x(o + 8);
    s.p_f = x(o + 9);
    s.q_f = x(o + 10);
    return s;
  }
  void put_droop(Vec& x, int k, const DroopState& s) const {
    int o = der_off_[k];
    if (topo_.ders[k].params.has_lc()) {
      put(x, o, s.i_b);
      o += 2;
    }
    put(x, o, s.v_o);
    put(x, o + 2, s.i_t);
    put(x, o + 4, s.phi);
    put(x, o + 6, s.gamma);
    x(o + 8) = s.theta;
    x(o + 9) = s.p_f;
    x(o + 10) = s.q_f;
  }
  int theta_index(int k) const { return der_off_[k] + (topo_.ders[k].params.has_lc() ? 2 : 0) + 8; }

  // Flat start rotated by `rotation`: V = V_n everywhere, no line current.
  Vec initial_state(double rotation = 0) const {
    Vec x = Vec::Zero(size_);
    for (int k = 0; k < ders(); ++k) {
      const auto& p = topo_.ders[k].params;
      if (kind_[k] == ControllerKind::proposed)
        put_gfm(x, k, gfm_flat_start(p, gains_, rotation));
      else
        put_droop(x, k, droop_flat_start(p, droop_, rotation));
    }
    const double vn = topo_.ders.empty() ? 1.0 : topo_.ders.front().params.v_n;
    for (size_t v = 0; v < ic_.nodes.bus_of.size(); ++v) put(x, node_offset(static_cast<int>(v)), std::polar(vn, rotation));
    return x;
  }

  void rhs(double t, const Vec& x, Vec& dx) const {
    dx.setZero(size_);
    std::fill(inj_.begin(), inj_.end(), Phasor(0, 0));
    for (int k = 0; k < ders(); ++k) {
      const auto& p = topo_.ders[k].params;
      const int node = k;  // DER nodes come first
      const Phasor vb = node_voltage(x, node);
      if (kind_[k] == ControllerKind::proposed) {
        const auto d = gfm_der_rhs(gfm_state(x, k), p, gains_, vb, gfm_);
        put_gfm(dx, k, d.d);
        inj_[node] += d.i_inj;
      } else {
        const auto d = droop_der_rhs(droop_state(x, k), p, droop_, vb);
        put_droop(dx, k, d.d);
        inj_[node] += d.i_inj;
      }
    }
    for (size_t l = 0; l < topo_.lines.size(); ++l) {
      const auto& ln = topo_.lines[l];
      if (!ln.closed) continue;
      const int a = line_from_[l], b = line_to_[l];
      const Phasor i = get(x, line_off_[l]);
      put(dx, line_off_[l], rl_line_rhs(ln.r, ln.l, i, node_voltage(x, a) - node_voltage(x, b)));
      inj_[a] -= i;
      inj_[b] += i;
    }
    if (topo_.infinite_bus && topo_.infinite_bus->closed) {
      const auto& ib = *topo_.infinite_bus;
      const Phasor i = get(x, inf_off_);
      put(dx, inf_off_, rl_line_rhs(ib.r, ib.l, i, node_voltage(x, inf_node_) - infinite_voltage(t)));
      inj_[inf_node_] -= i;
    }
    for (size_t v = 0; v < inj_.size(); ++v) {
      const Phasor vv = node_voltage(x, static_cast<int>(v));
      Phasor in = inj_[v];
      for (int li : loads_of_node_[v]) in += zip_current(vv, topo_.loads[li]);
      put(dx, node_offset(static_cast<int>(v)), shunt_rhs(topo_.shunts[shunt_of_node_[v]], nullptr, vv, in));
    }
  }

  void wrap_angles(Vec& x) const {
    for (int k = 0; k < ders(); ++k) {
      double& th = x(theta_index(k));
      if (std::abs(th) > std::numbers::pi) th = wrap_angle(th);
    }
  }

  void apply_event(const Event& e, Vec& x) {
    if (e.kind == "zip-scale") {
      bool hit = false;
      for (size_t i = 0; i < topo_.loads.size(); ++i) {
        if (topo_.loads[i].bus != e.bus) continue;
        const auto& n = nominal_[i];
        auto& z = topo_.loads[i];
        z.y = {n.y.real() * e.g, n.y.imag() * e.b};
        z.s = {n.s.real() * e.p, n.s.imag() * e.q};
        z.i = n.i * e.i;
        hit = true;
      }
      if (!hit) throw ConfigError("zip-scale: no load on bus " + std::to_string(e.bus));
    } else if (e.kind == "breaker-open" || e.kind == "breaker-close") {
      const bool close = e.kind == "breaker-close";
      const int l = topo_.line_index(e.target);
      if (l >= 0) {
        topo_.lines[l].closed = close;
        put(x, line_off_[l], 0.0);
      } else if (topo_.infinite_bus && topo_.infinite_bus->name == e.target) {
        topo_.infinite_bus->closed = close;
        put(x, inf_off_, 0.0);
      } else {
        throw ConfigError(e.kind + ": unknown breaker " + e.target);
      }
      ic_ = build_incidence(topo_);
    } else if (e.kind == "connect-infinite-bus") {
      if (!topo_.infinite_bus) throw ConfigError("connect-infinite-bus: topology has no infinite bus");
      auto& ib = *topo_.infinite_bus;
      ib.v = e.v;
      ib.angle = e.angle;
      ib.closed = true;
      put(x, inf_off_, 0.0);
    } else {
      throw ConfigError("unknown event kind " + e.kind);
    }
  }

  // Derived channels of DER k: f Hz, |V_o|, P, Q, droop voltage residual.
  // P is the power entering the frequency droop law of the DER's controller.
  std::array<double, 5> channels(const Vec& x, int k) const {
    const auto& p = topo_.ders[k].params;
    const Phasor vb = node_voltage(x, k);
    if (kind_[k] == ControllerKind::proposed) {
      const GfmState s = gfm_state(x, k);
      const auto d = gfm_der_rhs(s, p, gains_, vb, gfm_);
      const double q = (s.v_o * std::conj(s.i_t)).imag();
      return {(p.omega_n + s.w) / (2 * std::numbers::pi), std::abs(s.v_o), d.p, q,
              std::abs(s.v_o - p.v_n + j1 * p.x * s.i_t)};
    }
    const DroopState s = droop_state(x, k);
    const auto d = droop_der_rhs(s, p, droop_, vb);
    const Phasor so = s.v_o * std::conj(d.i_b);
    return {d.omega / (2 * std::numbers::pi), std::abs(s.v_o), so.real(), so.imag(), std::abs(s.v_o - d.v_ref)};
  }

  // Complex power delivered into the infinite-bus node from the main grid.
  Phasor infinite_power(const Vec& x) const {
    if (!topo_.infinite_bus) return 0.0;
    return node_voltage(x, inf_node_) * std::conj(-get(x, inf_off_));
  }

 private:
  Topology topo_;
  std::vector<ZipLoad> nominal_;
  DerGains gains_;
  DroopGains droop_;
  GfmOptions gfm_;
  Interconnection ic_;
  std::vector<ControllerKind> kind_;
  std::vector<int> der_off_, line_off_, line_from_, line_to_, shunt_of_node_;
  std::vector<std::vector<int>> loads_of_node_;
  int inf_off_ = 0, node_off_ = 0, inf_node_ = -1, size_ = 0;
  mutable std::vector<Phasor> inj_;
};

// ---------------------------------------------------------------------------
// Trajectories.

struct Trajectory {
  std::vector<std::string> columns;  // without "t"
  std::vector<double> t;
  std::vector<std::vector<double>> rows;
  std::vector<Vec> states;  // when Scenario::keep_states
  int n_der = 0;
  std::vector<double> event_times;
  bool diverged = false;
  double failure_time = 0;
  std::string failure;
  double wall_seconds = 0;
  long steps = 0, rejected = 0;

  int column(const std::string& name) const {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw ConfigError("trajectory has no column " + name);
    return static_cast<int>(it - columns.begin());
  }
  std::vector<double> series(const std::string& name) const {
    const int c = column(name);
    std::vector<double> v;
    v.reserve(rows.size());
    for (const auto& r : rows) v.push_back(r[c]);
    return v;
  }
};

inline std::string der_column(int k, const char* what) { return "der" + std::to_string(k + 1) + "_" + what; }

inline std::vector<std::string> trajectory_columns(int n_der, bool infinite_bus) {
  std::vector<std::string> c;
  for (int k = 0; k < n_der; ++k)
    for (const char* w : {"f_hz", "v_pu", "p_pu", "q_pu"}) c.push_back(der_column(k, w));
  for (int k = 0; k < n_der; ++k) c.push_back(der_column(k, "vdroop_pu"));
  if (infinite_bus) {
    c.push_back("inf_p_pu");
    c.push_back("inf_q_pu");
  }
  return c;
}

inline std::vector<double> record_row(const Microgrid& mg, const Vec& x) {
  std::vector<double> r;
  const int g = mg.ders();
  r.reserve(5 * g + 2);
  std::vector<std::array<double, 5>> ch(g);
  for (int k = 0; k < g; ++k) ch[k] = mg.channels(x, k);
  for (int k = 0; k < g; ++k)
    for (int i = 0; i < 4; ++i) r.push_back(ch[k][i]);
  for (int k = 0; k < g; ++k) r.push_back(ch[k][4]);
  if (mg.topology().infinite_bus) {
    const Phasor s = mg.infinite_power(x);
    r.push_back(s.real());
    r.push_back(s.imag());
  }
  return r;
}

// Integrates the scenario into `out`; the partial trajectory survives a throw.
inline void run_scenario_into(const Scenario& s, Trajectory& out) {
  s.validate();
  const auto start = std::chrono::steady_clock::now();
  Microgrid mg(s);
  out = Trajectory{};
  out.n_der = mg.ders();
  out.columns = trajectory_columns(mg.ders(), s.topology.infinite_bus.has_value());
  for (const auto& e : s.events) out.event_times.push_back(e.t);
  Dopri5 ode({s.dt, s.rtol, s.atol});
  auto f = [&mg](double t, const Vec& x, Vec& dx) { mg.rhs(t, x, dx); };
  auto post = [&mg](double, Vec& x) { mg.wrap_angles(x); };
  Vec x = s.initial ? *s.initial : mg.initial_state(s.rotation);
  if (x.size() != mg.size()) throw ConfigError("initial state has the wrong dimension");
  auto finish = [&] {
    out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.steps = ode.accepted();
    out.rejected = ode.rejected();
  };
  auto record = [&](double t) {
    out.t.push_back(t);
    out.rows.push_back(record_row(mg, x));
    if (s.keep_states) out.states.push_back(x);
  };
  try {
    // warm start, discarded
    for (double t = s.initial ? 0.0 : -s.preroll; t < 0;) {
      const double t1 = std::min(0.0, t + 0.01);
      ode.integrate(f, t, t1, x, post);
      t = t1;
    }
    size_t next_event = 0;
    const long n_rec = std::lround(std::floor(s.duration / s.record_dt + 1e-9));
    double t = 0;
    for (long r = 0; r <= n_rec; ++r) {
      const double tr = r * s.record_dt;
      while (true) {
        const double te = next_event < s.events.size() ? s.events[next_event].t : INFINITY;
        const double stop = std::min(te, tr);
        if (stop > t) {
          ode.integrate(f, t, stop, x, post);
          t = stop;
        }
        if (te <= tr && te <= t) {
          // record before an event falling on a sample time, then switch
          if (te == tr && (out.t.empty() || out.t.back() != tr)) record(tr);
          mg.apply_event(s.events[next_event++], x);
          continue;
        }
        break;
      }
      if (out.t.empty() || out.t.back() != tr) record(tr);
    }
  } catch (const DivergenceDetected& e) {
    out.diverged = true;
    out.failure_time = e.time;
    out.failure = e.what();
    finish();
    throw;
  } catch (const Error& e) {
    out.failure = e.what();
    finish();
    throw;
  }
  finish();
}

inline Trajectory run_scenario(const Scenario& s) {
  Trajectory t;
  run_scenario_into(s, t);
  return t;
}

// ---------------------------------------------------------------------------
// Steady-state metrics.

struct DerMetrics {
  double f_hz = 0, v_pu = 0, p_pu = 0, q_pu = 0;
  double droop_p_residual = 0;  // |P - P_n + (omega - omega_n)/R_reg|
  double droop_v_residual = 0;  // |V_o - V_n + j X I_t|
};

struct MetricsReport {
  std::vector<DerMetrics> ders;
  double freq_spread_hz = 0;
  double max_variance = 0;
  std::string worst_channel;
  int samples = 0;
};

struct DroopSetpoint {
  double omega_n = 2 * std::numbers::pi * 60, r_reg = 0.05 * 2 * std::numbers::pi * 60, p_n = 0.01;
};

inline MetricsReport steady_state_metrics(const Trajectory& tr, double t0, double t1,
                                          const std::vector<DroopSetpoint>& sp, double var_tol = 1e-6) {
  if (!(t1 > t0)) throw ConfigError("metrics window must have t1 > t0");
  if (tr.t.empty() || t0 < tr.t.front() - 1e-12 || t1 > tr.t.back() + 1e-12)
    throw ConfigError("metrics window outside the trajectory");
  if (static_cast<int>(sp.size()) != tr.n_der) throw ConfigError("one droop setpoint per DER required");
  std::vector<size_t> idx;
  for (size_t i = 0; i < tr.t.size(); ++i)
    if (tr.t[i] >= t0 - 1e-12 && tr.t[i] <= t1 + 1e-12) idx.push_back(i);
  if (idx.empty()) throw ConfigError("metrics window holds no samples");
  MetricsReport r;
  r.samples = static_cast<int>(idx.size());
  auto mean_var = [&](int c) {
    double m = 0;
    for (size_t i : idx) m += tr.rows[i][c];
    m /= idx.size();
    double v = 0;
    for (size_t i : idx) v += (tr.rows[i][c] - m) * (tr.rows[i][c] - m);
    return std::pair{m, v / idx.size()};
  };
  double fmin = INFINITY, fmax = -INFINITY;
  for (int k = 0; k < tr.n_der; ++k) {
    DerMetrics d;
    double* dst[] = {&d.f_hz, &d.v_pu, &d.p_pu, &d.q_pu, &d.droop_v_residual};
    const char* names[] = {"f_hz", "v_pu", "p_pu", "q_pu", "vdroop_pu"};
    for (int i = 0; i < 5; ++i) {
      const auto [m, v] = mean_var(tr.column(der_column(k, names[i])));
      *dst[i] = m;
      if (v > r.max_variance) {
        r.max_variance = v;
        r.worst_channel = der_column(k, names[i]);
      }
    }
    d.droop_p_residual = std::abs(d.p_pu - sp[k].p_n + (2 * std::numbers::pi * d.f_hz - sp[k].omega_n) / sp[k].r_reg);
    fmin = std::min(fmin, d.f_hz);
    fmax = std::max(fmax, d.f_hz);
    r.ders.push_back(d);
  }
  r.freq_spread_hz = tr.n_der > 0 ? fmax - fmin : 0;
  if (r.max_variance > var_tol)
    throw NotSettled("channel " + r.worst_channel + " variance " + std::to_string(r.max_variance) + " in window");
  return r;
}

inline std::vector<DroopSetpoint> droop_setpoints(const Topology& t) {
  std::vector<DroopSetpoint> sp;
  for (const auto& d : t.ders) sp.push_back({d.params.omega_n, d.params.r_reg, d.params.p_n});
  return sp;
}

// Largest instantaneous cross-DER frequency spread over [t0, t1].
inline double frequency_spread(const Trajectory& tr, double t0, double t1) {
  double worst = 0;
  std::vector<int> cols;
  for (int k = 0; k < tr.n_der; ++k) cols.push_back(tr.column(der_column(k, "f_hz")));
  for (size_t i = 0; i < tr.t.size(); ++i) {
    if (tr.t[i] < t0 - 1e-12 || tr.t[i] > t1 + 1e-12) continue;
    double lo = INFINITY, hi = -INFINITY;
    for (int c : cols) {
      lo = std::min(lo, tr.rows[i][c]);
      hi = std::max(hi, tr.rows[i][c]);
    }
    worst = std::max(worst, hi - lo);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Files.

inline void write_csv(const std::string& path, const Trajectory& tr) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << "t";
  for (const auto& c : tr.columns) out << ',' << c;
  out << '\n';
  char buf[32];
  for (size_t i = 0; i < tr.t.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6f", tr.t[i]);
    out << buf;
    for (double v : tr.rows[i]) {
      std::snprintf(buf, sizeof buf, ",%.12g", v);
      out << buf;
    }
    out << '\n';
  }
}

inline Trajectory read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  Trajectory tr;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError(path + ": empty file");
  {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    if (cell != "t") throw ConfigError(path + ": first column must be t");
    while (std::getline(ss, cell, ',')) tr.columns.push_back(cell);
  }
  while (tr.n_der < static_cast<int>(tr.columns.size()) &&
         std::find(tr.columns.begin(), tr.columns.end(), der_column(tr.n_der, "f_hz")) != tr.columns.end())
    ++tr.n_der;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    std::getline(ss, cell, ',');
    try {
      tr.t.push_back(std::stod(cell));
      while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": bad number");
    }
    if (row.size() != tr.columns.size()) throw ConfigError(path + ":" + std::to_string(lineno) + ": wrong column count");
    tr.rows.push_back(std::move(row));
  }
  return tr;
}

// Static line plot of one channel for every DER.
inline void write_svg(const std::string& path, const Trajectory& tr, const std::string& channel, const std::string& ylabel) {
  constexpr double W = 800, H = 360, ml = 70, mr = 20, mt = 30, mb = 45;
  std::vector<std::vector<double>> ys;
  for (int k = 0; k < tr.n_der; ++k) ys.push_back(tr.series(der_column(k, channel.c_str())));
  if (tr.t.empty() || ys.empty()) return;
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& y : ys)
    for (double v : y) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(hi > lo)) {
    lo -= 0.5 * std::max(1e-9, std::abs(lo) * 1e-6);
    hi = lo + 2 * (std::abs(hi - lo) > 0 ? hi - lo : std::max(1e-9, std::abs(lo) * 1e-6));
  }
  const double t0 = tr.t.front(), t1 = std::max(tr.t.back(), t0 + 1e-9);
  auto px = [&](double t) { return ml + (t - t0) / (t1 - t0) * (W - ml - mr); };
  auto py = [&](double v) { return H - mb - (v - lo) / (hi - lo) * (H - mt - mb); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path);
  out << std::setprecision(6);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << W - ml - mr << "\" height=\"" << H - mt - mb
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4, t = t0 + (t1 - t0) * i / 4;
    out << "<text x=\"" << ml - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
    out << "<text x=\"" << px(t) << "\" y=\"" << H - mb + 16 << "\" text-anchor=\"middle\">" << t << "</text>\n";
  }
  out << "<text x=\"" << (W + ml - mr) / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\">t (s)</text>\n";
  out << "<text x=\"14\" y=\"" << (H - mb + mt) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << (H - mb + mt) / 2 << ")\">" << ylabel << "</text>\n";
  const size_t stride = std::max<size_t>(1, tr.t.size() / 4000);
  for (size_t k = 0; k < ys.size(); ++k) {
    out << "<polyline fill=\"none\" stroke-width=\"1\" stroke=\"" << colors[k % 8] << "\" points=\"";
    for (size_t i = 0; i < tr.t.size(); i += stride) out << px(tr.t[i]) << ',' << py(ys[k][i]) << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << ml + 10 + 70 * k << "\" y=\"" << mt - 10 << "\" fill=\"" << colors[k % 8] << "\">DER "
        << k + 1 << "</text>\n";
  }
  out << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Scenario files.

inline Event event_from_json(const nlohmann::json& j) {
  Event e;
  e.t = j.at("t_s").get<double>();
  e.kind = j.at("kind").get<std::string>();
  if (e.kind == "zip-scale") {
    e.bus = j.at("bus").get<int>();
    e.g = j.value("g", 1.0);
    e.b = j.value("b", 1.0);
    e.p = j.value("p", 1.0);
    e.q = j.value("q", 1.0);
    e.i = j.value("i", 1.0);
  } else if (e.kind == "breaker-open" || e.kind == "breaker-close") {
    e.target = j.at("target").get<std::string>();
  } else if (e.kind == "connect-infinite-bus") {
    e.v = j.at("v_pu").get<double>();
    e.angle = j.at("angle_rad").get<double>();
  } else {
    throw ConfigError("unknown event kind " + e.kind);
  }
  return e;
}

inline DroopGains droop_gains_from_json(const nlohmann::json& j) {
  DroopGains g;
  g.m_p = j.value("m_p", g.m_p);
  g.n_q = j.value("n_q", g.n_q);
  g.omega_c = j.value("omega_c", g.omega_c);
  g.k_pv = j.value("k_pv", g.k_pv);
  g.k_iv = j.value("k_iv", g.k_iv);
  g.k_pc = j.value("k_pc", g.k_pc);
  g.k_ic = j.value("k_ic", g.k_ic);
  g.k_f = j.value("k_f", g.k_f);
  g.device_base = j.value("device_base_pu", g.device_base);
  return g;
}

inline ControllerKind controller_from_string(const std::string& s) {
  if (s == "proposed") return ControllerKind::proposed;
  if (s == "baseline") return ControllerKind::baseline;
  throw ConfigError("controller must be proposed or baseline, got " + s);
}

// Relative file references resolve against the scenario's directory.
inline Scenario scenario_from_json(const nlohmann::json& j, const std::filesystem::path& dir = ".") {
  try {
    Scenario s;
    s.name = j.value("name", s.name);
    auto resolve = [&](const std::string& ref) {
      const std::filesystem::path p(ref);
      return (p.is_absolute() ? p : dir / p).string();
    };
    const auto& topo = j.at("topology");
    s.topology = topo.is_string() ? load_topology(resolve(topo.get<std::string>())) : topology_from_json(topo);
    if (j.contains("controllers")) {
      for (const auto& c : j.at("controllers")) s.controllers.push_back(controller_from_string(c.get<std::string>()));
    } else if (j.contains("controller")) {
      s.controllers.assign(s.topology.ders.size(), controller_from_string(j.at("controller").get<std::string>()));
    }
    if (j.contains("gains")) {
      const auto& g = j.at("gains");
      s.gains = g.is_string() ? (g == "table1" ? table1_gains() : load_gains(resolve(g.get<std::string>())))
                              : gains_from_json(g);
    }
    if (j.contains("droop_gains")) s.droop = droop_gains_from_json(j.at("droop_gains"));
    s.gfm.original_power = j.value("original_power", false);
    s.duration = j.value("duration_s", s.duration);
    s.dt = j.value("dt_s", s.dt);
    s.record_dt = j.value("record_dt_s", s.record_dt);
    s.preroll = j.value("preroll_s", s.preroll);
    s.rtol = j.value("rtol", s.rtol);
    s.atol = j.value("atol", s.atol);
    s.rotation = j.value("rotation_rad", s.rotation);
    for (const auto& e : j.value("events", nlohmann::json::array())) s.events.push_back(event_from_json(e));
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scenario: ") + e.what());
  }
}

inline Scenario load_scenario(const std::string& path) {
  return scenario_from_json(read_json_file(path), std::filesystem::path(path).parent_path());
}

// Metadata written next to the CSV so `metrics` can recover the droop set points.
inline nlohmann::json run_metadata(const Scenario& s, const Trajectory& tr) {
  nlohmann::json j;
  j["name"] = s.name;
  j["duration_s"] = s.duration;
  j["dt_s"] = s.dt;
  j["record_dt_s"] = s.record_dt;
  j["events_s"] = tr.event_times;
  j["diverged"] = tr.diverged;
  if (tr.diverged) j["divergence_time_s"] = tr.failure_time;
  j["wall_seconds"] = tr.wall_seconds;
  j["steps"] = tr.steps;
  j["rejected_steps"] = tr.rejected;
  for (size_t k = 0; k < s.topology.ders.size(); ++k) {
    const auto& p = s.topology.ders[k].params;
    j["ders"].push_back({{"bus", s.topology.ders[k].bus},
                         {"controller", to_string(s.controller(static_cast<int>(k)))},
                         {"omega_n", p.omega_n},
                         {"r_reg", p.r_reg},
                         {"p_n", p.p_n},
                         {"v_n", p.v_n},
                         {"x", p.x}});
  }
  return j;
}

inline std::vector<DroopSetpoint> setpoints_from_metadata(const nlohmann::json& j) {
  std::vector<DroopSetpoint> sp;
  for (const auto& d : j.at("ders")) sp.push_back({d.at("omega_n").get<double>(), d.at("r_reg").get<double>(), d.at("p_n").get<double>()});
  return sp;
}

// ---------------------------------------------------------------------------
// The two published test cases on the four-DER system.

inline std::vector<Event> test1_events() {
  std::vector<Event> ev;
  Event e;
  e.kind = "zip-scale";
  e.t = 0.01;
  e.bus = 9;
  e.g = 0.6;
  e.b = 0.5;
  ev.push_back(e);
  e = {};
  e.kind = "zip-scale";
  e.t = 0.01;
  e.bus = 10;
  e.g = 0.8;
  e.p = 1.4;
  ev.push_back(e);
  e = {};
  e.kind = "breaker-open";
  e.t = 5;
  e.target = "CB1";
  ev.push_back(e);
  for (int bus : {9, 10}) {
    e = {};
    e.kind = "zip-scale";
    e.t = 10;
    e.bus = bus;
    ev.push_back(e);
  }
  e = {};
  e.kind = "breaker-close";
  e.t = 15;
  e.target = "CB1";
  ev.push_back(e);
  e = {};
  e.kind = "connect-infinite-bus";
  e.t = 20;
  e.v = 0.95;
  e.angle = 0.6;
  ev.push_back(e);
  return ev;
}

// Test 1 uses 0.2 ohm / 4 mH lines, Test 2 0.1 ohm / 0.1 mH.
inline Scenario fig2_scenario(int which, ControllerKind c, const DerGains& gains) {
  Scenario s;
  Fig2Options o;
  if (which == 2) {
    o.line_r_ohm = 0.1;
    o.line_l_h = 0.1e-3;
  }
  s.name = "test" + std::to_string(which) + "_" + to_string(c);
  s.topology = fig2_topology(o);
  s.controllers.assign(s.topology.ders.size(), c);
  s.gains = gains;
  s.events = test1_events();
  s.duration = 25;
  s.dt = c == ControllerKind::baseline ? 5e-6 : 1e-5;
  return s;
}

}  // namespace mgrid
