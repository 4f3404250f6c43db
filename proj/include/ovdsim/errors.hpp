#pragma once

#include <stdexcept>
#include <string>

namespace ovdsim {

/// A caller broke an API contract (e.g. fed a pseudo-label into a code path
/// that must only ever see ground truth).
struct ContractViolation : std::logic_error {
  explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

/// Invalid configuration values or inconsistent config combinations.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input file. Carries a 1-based line number when it applies.
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? what + " (line " + std::to_string(line) + ")"
                                    : what),
        line_number(line) {}
  int line_number;
};

/// A region feature with (near-)zero norm reached the classifier. Upstream
/// code is required to never produce one.
struct DegenerateFeatureError : std::logic_error {
  explicit DegenerateFeatureError(const std::string& what)
      : std::logic_error(what) {}
};

/// Training produced non-finite parameters or gradients.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ovdsim
