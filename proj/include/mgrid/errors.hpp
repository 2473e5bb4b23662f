#pragma once

#include <stdexcept>
#include <string>

namespace mgrid {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BalanceViolation : Error { using Error::Error; };
struct DimensionError : Error { using Error::Error; };
struct TopologyError : Error { using Error::Error; };
struct VoltageCollapse : Error { using Error::Error; };
struct ReferenceError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct NotSettled : Error { using Error::Error; };

struct ConditionFailure : Error {
  double worst_eigenvalue;
  ConditionFailure(const std::string& what, double worst)
      : Error(what), worst_eigenvalue(worst) {}
};

struct DivergenceDetected : Error {
  double time;
  DivergenceDetected(const std::string& what, double t) : Error(what), time(t) {}
};

struct StiffnessFailure : Error {
  double time;
  StiffnessFailure(const std::string& what, double t) : Error(what), time(t) {}
};

}  // namespace mgrid
