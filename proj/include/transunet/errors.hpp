// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace transunet {

// Shape or extent disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Caller broke an API precondition (e.g. backward on a non-scalar).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid or inconsistent configuration, detected before compute.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed file content (headers, payload sizes, manifests).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-supplied data (non-finite costs, mismatched masks, ...).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN / Inf observed where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Gradient-check oracle could not produce a finite reference.
struct OracleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

}  // namespace transunet
