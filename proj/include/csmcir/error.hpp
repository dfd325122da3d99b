// Exception types shared by every csmcir module.
//
// Contract errors mean the caller broke a precondition (shapes, ids, sizes).
// Domain errors mean numerically invalid input (empty softmax, zero vector).
// State errors mean the object is not ready for the call (cold memory bank).

#ifndef CSMCIR_ERROR_HPP
#define CSMCIR_ERROR_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace csmcir {

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a value that must be finite is NaN or infinite.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file or record failed schema validation. `line()` is 1-based, 0 if unknown.
class SchemaError : public std::runtime_error {
 public:
  SchemaError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line == 0 ? what : "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace csmcir

#endif  // CSMCIR_ERROR_HPP
