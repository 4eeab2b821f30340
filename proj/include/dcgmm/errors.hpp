// Error taxonomy shared by the whole library. CLI exit codes map onto these:
// usage errors are handled by the argument parser, DataError -> 2,
// NumericalError -> 3.

#pragma once

#include <stdexcept>
#include <string>

namespace dcgmm {

// Shape mismatch between operands. The message always names both shapes.
class ShapeError : public std::invalid_argument {
public:
  explicit ShapeError(const std::string &msg) : std::invalid_argument(msg) {}
};

// Input outside an operation's mathematical domain (log of non-positive,
// noise level outside (0, 0.5), ...).
class DomainError : public std::domain_error {
public:
  explicit DomainError(const std::string &msg) : std::domain_error(msg) {}
};

// Non-finite value detected mid-computation. `term` names the offending
// quantity so training aborts with a usable diagnostic.
class NumericalError : public std::runtime_error {
public:
  explicit NumericalError(const std::string &msg, std::string term = {})
      : std::runtime_error(term.empty() ? msg : term + ": " + msg),
        term_(std::move(term)) {}

  [[nodiscard]] const std::string &term() const noexcept { return term_; }

private:
  std::string term_;
};

// Malformed or truncated files, bad headers, out-of-range indices in inputs.
class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string &msg) : std::runtime_error(msg) {}
};

// Invalid or unknown configuration keys/values.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string &msg) : std::runtime_error(msg) {}
};

} // namespace dcgmm
