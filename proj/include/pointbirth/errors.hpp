#pragma once

#include <stdexcept>
#include <string>

namespace pointbirth {

// Argument outside the mathematical domain of an operation (t <= 0, x = 0, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A quadrature, table inversion or iteration that did not reach its tolerance.
// Carries the best accuracy that was achieved so callers can report it.
class NonConvergenceError : public std::runtime_error {
 public:
  NonConvergenceError(const std::string& what, double achieved)
      : std::runtime_error(what + " (achieved " + std::to_string(achieved) + ")"),
        achieved_(achieved) {}

  double achieved() const noexcept { return achieved_; }

 private:
  double achieved_;
};

// Configuration rejected by parsing or validation.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Simulation aborted because the particle population exceeded its cap.
class ParticleCapError : public std::runtime_error {
 public:
  ParticleCapError(const std::string& what, std::size_t count)
      : std::runtime_error(what), count_(count) {}

  std::size_t count() const noexcept { return count_; }

 private:
  std::size_t count_;
};

}  // namespace pointbirth
