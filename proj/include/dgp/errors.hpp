#pragma once

#include <stdexcept>
#include <string>

namespace dgp {

// Base for all library errors.
class DgpError : public std::runtime_error {
 public:
  explicit DgpError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid arguments, configs, or data (bad shapes, non-finite inputs, ...).
class ValidationError : public DgpError {
 public:
  explicit ValidationError(const std::string& msg) : DgpError(msg) {}
};

// Constraint points too close together; the derivative Gram matrix is
// numerically singular.
class DegenerateConstraintError : public DgpError {
 public:
  explicit DegenerateConstraintError(const std::string& msg) : DgpError(msg) {}
};

// Cholesky failed even at the largest jitter level.
class NotPositiveDefiniteError : public DgpError {
 public:
  NotPositiveDefiniteError(const std::string& msg, double final_jitter)
      : DgpError(msg), final_jitter_(final_jitter) {}

  double final_jitter() const { return final_jitter_; }

 private:
  double final_jitter_;
};

// Malformed input file; carries the 1-based line number when known.
class ParseError : public DgpError {
 public:
  ParseError(const std::string& msg, long line)
      : DgpError(msg + " (line " + std::to_string(line) + ")"), line_(line) {}

  long line() const { return line_; }

 private:
  long line_;
};

}  // namespace dgp
