#pragma once

#include <stdexcept>
#include <string>

namespace otr {

/// Base class for every error raised by the toolchain. The CLI maps these to
/// exit code 1 and prints what().
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

/// Matrix/bias/vector extents that disagree with the declared architecture.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ActivationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Full materialization would need more leaves than the configured budget.
class BudgetExceeded : public Error {
 public:
  BudgetExceeded(const std::string& what, unsigned long long required_nodes)
      : Error(what), required_nodes_(required_nodes) {}
  unsigned long long required_nodes() const noexcept { return required_nodes_; }

 private:
  unsigned long long required_nodes_;
};

/// A trace was recorded on a different network than the one (or the tree)
/// it is being applied to.
class TraceMismatch : public Error {
 public:
  using Error::Error;
};

class UnknownEnvironment : public Error {
 public:
  using Error::Error;
};

class ThetaShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteAction : public Error {
 public:
  using Error::Error;
};

}  // namespace otr
