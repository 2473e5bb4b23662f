#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "params.hpp"
#include "phasor.hpp"

namespace mgrid {

enum class NodeKind { der, load };

struct Bus {
  int id = 0;
  NodeKind kind = NodeKind::load;
};

// R-L line between two buses (bus ids), per unit.
struct Line {
  std::string name;
  int from = 0, to = 0;
  double r = 0, l = 0;
  bool closed = true;
};

struct Shunt {
  int bus = 0;
  double g = 0, c = 0;
};

// Y = 1/Z_ld; Upsilon(V) = -(Y V + I_ld V/|V| + (S_ld/V)^*)
struct ZipLoad {
  int bus = 0;
  Phasor y{0, 0};
  double i = 0;
  Phasor s{0, 0};
};

struct DerSite {
  int bus = 0;
  DerParams params;
};

// Ideal source behind an R-L segment, attached through a breaker.
struct InfiniteBus {
  std::string name = "CB2";
  int bus = 0;
  double r = 0, l = 0;
  double v = 1, angle = 0;
  bool closed = false;
};

struct Topology {
  Base base;
  std::vector<Bus> buses;
  std::vector<Line> lines;
  std::vector<Shunt> shunts;
  std::vector<ZipLoad> loads;
  std::vector<DerSite> ders;
  std::optional<InfiniteBus> infinite_bus;

  int g() const { return static_cast<int>(ders.size()); }
  int l() const { return static_cast<int>(buses.size()) - g(); }
  int line_index(const std::string& name) const {
    for (size_t k = 0; k < lines.size(); ++k)
      if (lines[k].name == name) return static_cast<int>(k);
    return -1;
  }
};

// Node order: DER buses in the order of `ders`, then load buses in the order of `buses`.
struct NodeMap {
  std::vector<int> bus_of;          // node -> bus id
  std::map<int, int> node_of;       // bus id -> node
  int node(int bus) const {
    auto it = node_of.find(bus);
    if (it == node_of.end()) throw TopologyError("unknown bus " + std::to_string(bus));
    return it->second;
  }
};

inline NodeMap node_map(const Topology& t) {
  NodeMap m;
  std::set<int> der_buses;
  for (const auto& d : t.ders) {
    if (!der_buses.insert(d.bus).second) throw TopologyError("two DERs on bus " + std::to_string(d.bus));
    m.node_of[d.bus] = static_cast<int>(m.bus_of.size());
    m.bus_of.push_back(d.bus);
  }
  std::set<int> seen;
  for (const auto& b : t.buses) {
    if (!seen.insert(b.id).second) throw TopologyError("duplicate bus " + std::to_string(b.id));
    const bool is_der = der_buses.count(b.id) > 0;
    if (is_der != (b.kind == NodeKind::der)) throw TopologyError("bus " + std::to_string(b.id) + " kind does not match DER list");
    if (is_der) continue;
    m.node_of[b.id] = static_cast<int>(m.bus_of.size());
    m.bus_of.push_back(b.id);
  }
  for (int b : der_buses)
    if (!seen.count(b)) throw TopologyError("DER on undeclared bus " + std::to_string(b));
  return m;
}

struct Interconnection {
  Mat M;    // (g+l+1) x (g + T + g+l), ground row last
  Mat M1;   // (g+l) x T, closed lines only
  Mat W;    // (g + T + g+l) square, skew
  std::vector<int> line_of_col;  // M1 column -> index into Topology::lines
  NodeMap nodes;
  std::vector<std::vector<int>> islands;  // node sets of the closed-line graph
};

namespace detail {

inline std::vector<std::vector<int>> components(int n, const std::vector<std::pair<int, int>>& edges) {
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (auto [a, b] : edges) parent[find(a)] = find(b);
  std::map<int, std::vector<int>> groups;
  for (int i = 0; i < n; ++i) groups[find(i)].push_back(i);
  std::vector<std::vector<int>> out;
  for (auto& [root, v] : groups) out.push_back(v);
  return out;
}

}  // namespace detail

// Connectivity is checked with every breaker closed; open lines are left out of M.
inline Interconnection build_incidence(const Topology& t) {
  Interconnection ic;
  ic.nodes = node_map(t);
  const int g = t.g(), n = static_cast<int>(ic.nodes.bus_of.size());

  std::vector<int> shunt_count(n, 0);
  for (const auto& s : t.shunts) {
    const int k = ic.nodes.node(s.bus);
    if (++shunt_count[k] > 1) throw TopologyError("duplicate shunt on bus " + std::to_string(s.bus));
    if (!(s.c > 0) || s.g < 0) throw TopologyError("shunt on bus " + std::to_string(s.bus) + " needs C > 0, G >= 0");
  }
  for (int k = 0; k < n; ++k)
    if (shunt_count[k] == 0) throw TopologyError("bus " + std::to_string(ic.nodes.bus_of[k]) + " has no shunt capacitor");

  std::vector<std::pair<int, int>> all_edges, closed_edges;
  for (size_t k = 0; k < t.lines.size(); ++k) {
    const auto& ln = t.lines[k];
    const int a = ic.nodes.node(ln.from), b = ic.nodes.node(ln.to);
    if (a == b) throw TopologyError("self-loop on bus " + std::to_string(ln.from));
    if (!(ln.l > 0) || ln.r < 0) throw TopologyError("line " + ln.name + " needs L > 0, R >= 0");
    all_edges.emplace_back(a, b);
    if (ln.closed) {
      closed_edges.emplace_back(a, b);
      ic.line_of_col.push_back(static_cast<int>(k));
    }
  }
  if (n > 0 && detail::components(n, all_edges).size() != 1) throw TopologyError("graph is not connected");
  ic.islands = detail::components(n, closed_edges);

  const int T = static_cast<int>(ic.line_of_col.size());
  ic.M1 = Mat::Zero(n, T);
  for (int c = 0; c < T; ++c) {
    ic.M1(closed_edges[c].first, c) = 1.0;
    ic.M1(closed_edges[c].second, c) = -1.0;
  }
  ic.M = Mat::Zero(n + 1, g + T + n);
  ic.M.block(0, 0, g, g).setIdentity();
  ic.M.block(n, 0, 1, g).setConstant(-1.0);
  ic.M.block(0, g, n, T) = ic.M1;
  ic.M.block(0, g + T, n, n).setIdentity();
  ic.M.block(n, g + T, 1, n).setConstant(-1.0);

  const int dim = g + T + n;
  ic.W = Mat::Zero(dim, dim);
  ic.W.block(0, g + T, g, g).setIdentity();
  ic.W.block(g + T, 0, g, g) = -Mat::Identity(g, g);
  ic.W.block(g, g + T, T, n) = ic.M1.transpose();
  ic.W.block(g + T, g, n, T) = -ic.M1;
  return ic;
}

inline Topology apply_breakers(Topology t, const std::set<int>& open_lines) {
  for (int k : open_lines) {
    if (k < 0 || k >= static_cast<int>(t.lines.size())) throw ConfigError("line index out of range");
    t.lines[k].closed = false;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Test system: four DERs on buses 5-8, loads on 9-12, CB1 between 6 and 11,
// CB2 from bus 11 to the main grid.

struct Fig2Options {
  double line_r_ohm = 0.2;
  double line_l_h = 4e-3;
  double shunt_c_f = 16e-6;
  double shunt_g_s = 0.0;
  Phasor z_ld{65.29, 48.97};
  Phasor s_ld{1e-3, 0.75e-3};
  double v_inf = 0.95, angle_inf = 0.6;
};

inline Topology fig2_topology(const Fig2Options& o = {}) {
  Topology t;
  const Base& b = t.base;
  for (int id = 5; id <= 8; ++id) t.buses.push_back({id, NodeKind::der});
  for (int id = 9; id <= 12; ++id) t.buses.push_back({id, NodeKind::load});
  const double r = b.ohm(o.line_r_ohm), l = b.henry(o.line_l_h);
  const std::vector<std::tuple<std::string, int, int>> lines = {
      {"L9-5", 9, 5}, {"L5-10", 5, 10}, {"L10-6", 10, 6}, {"CB1", 6, 11},
      {"L8-12", 8, 12}, {"L12-7", 12, 7}, {"L7-11", 7, 11}};
  for (const auto& [name, f, to] : lines) t.lines.push_back({name, f, to, r, l, true});
  for (int id = 5; id <= 12; ++id) t.shunts.push_back({id, b.siemens(o.shunt_g_s), b.farad(o.shunt_c_f)});
  for (int id = 9; id <= 12; ++id) t.loads.push_back({id, 1.0 / o.z_ld, 0.0, o.s_ld});
  for (int id = 5; id <= 8; ++id) t.ders.push_back({id, table1_der(b)});
  InfiniteBus ib;
  ib.bus = 11;
  ib.r = r;
  ib.l = l;
  ib.v = o.v_inf;
  ib.angle = o.angle_inf;
  t.infinite_bus = ib;
  return t;
}

// Two DERs (buses 1, 2) joined by one line, a shunt and a ZIP load on each bus.
inline Topology two_der_topology(const Fig2Options& o = {.line_r_ohm = 0.1, .line_l_h = 0.1e-3}) {
  Topology t;
  const Base& b = t.base;
  for (int id = 1; id <= 2; ++id) {
    t.buses.push_back({id, NodeKind::der});
    t.shunts.push_back({id, b.siemens(o.shunt_g_s), b.farad(o.shunt_c_f)});
    t.loads.push_back({id, 1.0 / o.z_ld, 0.0, o.s_ld});
    t.ders.push_back({id, table1_der(b)});
  }
  t.lines.push_back({"L1-2", 1, 2, b.ohm(o.line_r_ohm), b.henry(o.line_l_h), true});
  return t;
}

// ---------------------------------------------------------------------------
// JSON I/O. Lines, shunts and DER filters in SI units; loads and controller
// quantities in pu.

namespace detail {

template <class T>
T get_or(const nlohmann::json& j, const char* key, T def) {
  return j.contains(key) ? j.at(key).get<T>() : def;
}

inline Phasor get_phasor(const nlohmann::json& j, const char* key, Phasor def = {0, 0}) {
  if (!j.contains(key)) return def;
  const auto& v = j.at(key);
  if (v.is_number()) return {v.get<double>(), 0.0};
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string(key) + ": expected [re, im]");
  return {v[0].get<double>(), v[1].get<double>()};
}

}  // namespace detail

inline DerParams der_params_from_json(const nlohmann::json& j, const Base& b) {
  DerParams p = table1_der(b);
  using detail::get_or;
  if (j.contains("r_f_ohm")) p.r_f = b.ohm(j["r_f_ohm"].get<double>());
  if (j.contains("l_f_h")) p.l_f = b.henry(j["l_f_h"].get<double>());
  if (j.contains("c_f_f")) p.c_f = b.farad(j["c_f_f"].get<double>());
  if (j.contains("r_c_ohm")) p.r_c = b.ohm(j["r_c_ohm"].get<double>());
  if (j.contains("l_c_h")) p.l_c = b.henry(j["l_c_h"].get<double>());
  // R_reg in units of omega_n per pu, M in units of 1/omega_n
  if (j.contains("r_reg")) p.r_reg = j["r_reg"].get<double>() * p.omega_n;
  if (j.contains("m")) p.m = j["m"].get<double>() / p.omega_n;
  p.x = get_or(j, "x_pu", p.x);
  p.v_n = get_or(j, "v_n_pu", p.v_n);
  p.v_dc = get_or(j, "v_dc_pu", p.v_dc);
  p.p_n = get_or(j, "p_n_pu", p.p_n);
  if (!(p.l_f > 0 && p.c_f > 0 && p.r_f >= 0 && p.r_c > 0 && p.m > 0 && p.r_reg > 0 && p.v_n > 0))
    throw ConfigError("DER parameters must be positive");
  if (p.v_dc < 2 * p.v_n) throw ConfigError("V_dc must be at least 2 V_n");
  return p;
}

inline nlohmann::json der_params_to_json(const DerParams& p, const Base& b) {
  return {{"r_f_ohm", p.r_f * b.z()}, {"l_f_h", p.l_f * b.z()}, {"c_f_f", p.c_f / b.z()},
          {"r_c_ohm", p.r_c * b.z()}, {"l_c_h", p.l_c * b.z()},  {"r_reg", p.r_reg / p.omega_n},
          {"m", p.m * p.omega_n},     {"x_pu", p.x},             {"v_n_pu", p.v_n},
          {"v_dc_pu", p.v_dc},        {"p_n_pu", p.p_n}};
}

inline Base base_from_json(const nlohmann::json& j) {
  Base b;
  if (!j.is_object()) return b;
  b.v_ll = detail::get_or(j, "v_ll", b.v_ll);
  b.p = detail::get_or(j, "p_mw", b.p / 1e6) * 1e6;
  b.f_hz = detail::get_or(j, "f_hz", b.f_hz);
  if (!(b.v_ll > 0 && b.p > 0 && b.f_hz > 0)) throw ConfigError("base values must be positive");
  return b;
}

inline Topology topology_from_json(const nlohmann::json& j) {
  try {
    Topology t;
    t.base = base_from_json(j.value("base", nlohmann::json::object()));
    const Base& b = t.base;
    for (const auto& e : j.at("buses")) {
      const std::string kind = e.at("kind").get<std::string>();
      if (kind != "der" && kind != "load") throw ConfigError("bus kind must be der or load");
      t.buses.push_back({e.at("id").get<int>(), kind == "der" ? NodeKind::der : NodeKind::load});
    }
    for (const auto& e : j.value("lines", nlohmann::json::array()))
      t.lines.push_back({e.value("name", "line" + std::to_string(t.lines.size())), e.at("from").get<int>(),
                         e.at("to").get<int>(), b.ohm(e.at("r_ohm").get<double>()), b.henry(e.at("l_h").get<double>()),
                         e.value("closed", true)});
    for (const auto& e : j.at("shunts"))
      t.shunts.push_back({e.at("bus").get<int>(), b.siemens(e.value("g_s", 0.0)), b.farad(e.at("c_f").get<double>())});
    for (const auto& e : j.value("loads", nlohmann::json::array())) {
      ZipLoad z;
      z.bus = e.at("bus").get<int>();
      const Phasor zl = detail::get_phasor(e, "z_pu", {0, 0});
      z.y = std::abs(zl) > 0 ? 1.0 / zl : Phasor(0, 0);
      z.i = e.value("i_pu", 0.0);
      z.s = detail::get_phasor(e, "s_pu");
      t.loads.push_back(z);
    }
    const nlohmann::json defaults = j.value("der_defaults", nlohmann::json::object());
    for (const auto& e : j.at("ders")) {
      nlohmann::json merged = defaults;
      if (e.contains("params")) merged.update(e.at("params"));
      t.ders.push_back({e.at("bus").get<int>(), der_params_from_json(merged, b)});
    }
    if (j.contains("infinite_bus")) {
      const auto& e = j.at("infinite_bus");
      InfiniteBus ib;
      ib.name = e.value("name", "CB2");
      ib.bus = e.at("bus").get<int>();
      ib.r = b.ohm(e.at("r_ohm").get<double>());
      ib.l = b.henry(e.at("l_h").get<double>());
      ib.v = e.value("v_pu", 1.0);
      ib.angle = e.value("angle_rad", 0.0);
      ib.closed = e.value("closed", false);
      t.infinite_bus = ib;
    }
    build_incidence(t);
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("topology: ") + e.what());
  }
}

inline nlohmann::json topology_to_json(const Topology& t) {
  const Base& b = t.base;
  nlohmann::json j;
  j["base"] = {{"v_ll", b.v_ll}, {"p_mw", b.p / 1e6}, {"f_hz", b.f_hz}};
  for (const auto& bus : t.buses) j["buses"].push_back({{"id", bus.id}, {"kind", bus.kind == NodeKind::der ? "der" : "load"}});
  j["lines"] = nlohmann::json::array();
  for (const auto& ln : t.lines)
    j["lines"].push_back({{"name", ln.name}, {"from", ln.from}, {"to", ln.to}, {"r_ohm", ln.r * b.z()},
                          {"l_h", ln.l * b.z()}, {"closed", ln.closed}});
  for (const auto& s : t.shunts) j["shunts"].push_back({{"bus", s.bus}, {"g_s", s.g / b.z()}, {"c_f", s.c / b.z()}});
  j["loads"] = nlohmann::json::array();
  for (const auto& z : t.loads) {
    const Phasor zl = std::abs(z.y) > 0 ? 1.0 / z.y : Phasor(0, 0);
    j["loads"].push_back({{"bus", z.bus}, {"z_pu", {zl.real(), zl.imag()}}, {"i_pu", z.i}, {"s_pu", {z.s.real(), z.s.imag()}}});
  }
  for (const auto& d : t.ders) j["ders"].push_back({{"bus", d.bus}, {"params", der_params_to_json(d.params, b)}});
  if (t.infinite_bus) {
    const auto& ib = *t.infinite_bus;
    j["infinite_bus"] = {{"name", ib.name}, {"bus", ib.bus}, {"r_ohm", ib.r * b.z()}, {"l_h", ib.l * b.z()},
                         {"v_pu", ib.v},     {"angle_rad", ib.angle}, {"closed", ib.closed}};
  }
  return j;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline Topology load_topology(const std::string& path) { return topology_from_json(read_json_file(path)); }

}  // namespace mgrid
