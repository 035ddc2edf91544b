#pragma once

#include <stdexcept>
#include <string>

namespace filterreg {

// Malformed or inconsistent caller input (dimension mismatch, NaN, bad range).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// File parse failure; carries the offending line when known.
class ParseError : public InputError {
 public:
  ParseError(const std::string& what, long line = -1)
      : InputError(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

// The problem is numerically degenerate: no inliers, antipodal blend, unbound nodes.
class DegenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Linear solve failed even after damping escalation.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace filterreg
