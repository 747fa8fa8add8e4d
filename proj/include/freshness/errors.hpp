#pragma once

#include <stdexcept>
#include <string>

namespace freshness {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidRate : Error {
  using Error::Error;
};
struct NotIrreducible : Error {
  using Error::Error;
};
struct NotReversible : Error {
  using Error::Error;
};
struct NumericalFailure : Error {
  using Error::Error;
};
struct QuadratureFailure : Error {
  using Error::Error;
};
struct SingularSystem : Error {
  using Error::Error;
};
struct BudgetInfeasible : Error {
  using Error::Error;
};
struct NoConvergence : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};

}  // namespace freshness
