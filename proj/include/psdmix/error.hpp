#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace psdmix {

/// Argument outside the domain of an operation (e.g. theta >= R).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A computation would exceed a fixed resource budget (box size, scan cap).
class ResourceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A model assigns zero probability to an observed row.
class DegenerateModelError : public std::runtime_error {
 public:
  DegenerateModelError(const std::string& what, std::size_t row)
      : std::runtime_error(what + " (row " + std::to_string(row) + ")"), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Iterative solver hit its iteration cap; carries the best iterate found.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, std::vector<double> best)
      : std::runtime_error(what), best_(std::move(best)) {}
  const std::vector<double>& best() const noexcept { return best_; }

 private:
  std::vector<double> best_;
};

/// Malformed input file (CSV or JSON).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace psdmix
