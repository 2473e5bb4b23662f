#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "errors.hpp"
#include "gain_design.hpp"
#include "network.hpp"

namespace mgrid {

inline nlohmann::json gains_to_json(const DerGains& k) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 2; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < 10; ++c) row.push_back(k.k_hat(r, c));
    rows.push_back(row);
  }
  return {{"k_hat", rows}, {"k_iv", k.k_iv}};
}

inline DerGains gains_from_json(const nlohmann::json& j) {
  try {
    DerGains k;
    const auto& rows = j.at("k_hat");
    if (!rows.is_array() || rows.size() != 2) throw ConfigError("k_hat must have 2 rows");
    for (int r = 0; r < 2; ++r) {
      if (rows[r].size() != 10) throw ConfigError("k_hat rows must have 10 entries");
      for (int c = 0; c < 10; ++c) k.k_hat(r, c) = rows[r][c].get<double>();
    }
    k.k_iv = j.at("k_iv").get<double>();
    if (!std::isfinite(k.k_hat.sum()) || !(k.k_iv > 0)) throw ConfigError("gains must be finite with K_iv > 0");
    return k;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("gains: ") + e.what());
  }
}

// "table1" names the published gain; anything else is a gains file.
inline DerGains load_gains(const std::string& ref) {
  if (ref == "table1") return table1_gains();
  return gains_from_json(read_json_file(ref));
}

inline nlohmann::json sdp_report_json(const GainSdpResult& r) {
  auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j = gains_to_json(r.gains);
  j["diagnostics"] = {{"status", sdp::to_string(r.status)},
                      {"message", r.message},
                      {"iterations", r.iterations},
                      {"solve_seconds", r.solve_seconds},
                      {"alpha", r.alpha},
                      {"zeta", r.zeta},
                      {"gamma", r.gamma},
                      {"max_residual", r.max_residual},
                      {"recovery_error", r.recovery_error},
                      {"condition_estimate", r.condition_estimate},
                      {"q22_eigenvalues", vec(r.q22_eigenvalues)},
                      {"he_eigenvalues", vec(r.he_eigenvalues)}};
  return j;
}

inline DerParams load_der_params(const std::string& path) {
  const auto j = read_json_file(path);
  const Base b = base_from_json(j.value("base", nlohmann::json::object()));
  return der_params_from_json(j.contains("params") ? j.at("params") : j, b);
}

}  // namespace mgrid
