#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fetsim {

// Shape disagreement between tensors / matrices.
struct DimError : std::runtime_error {
  explicit DimError(const std::string& what) : std::runtime_error(what) {}
};

// A precondition of an operation was violated by the caller.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// An iterative numeric routine failed to converge or produced a non-finite value.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Bad user input: config keys, CSV columns, CLI arguments.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// The configured privacy budget was exhausted mid-training.
struct BudgetError : std::runtime_error {
  explicit BudgetError(const std::string& what) : std::runtime_error(what) {}
};

inline void check_dim(bool ok, const std::string& what) {
  if (!ok) throw DimError(what);
}

inline void check_contract(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace fetsim
