#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace bilmpc {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

/// Base class for all solver errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
  using Error::Error;
};

struct InvalidProblem : Error {
  using Error::Error;
};

struct InfeasibleError : Error {
  using Error::Error;
};

struct SingularError : Error {
  using Error::Error;
};

struct BudgetExceeded : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

}  // namespace bilmpc
