#pragma once

#include <stdexcept>
#include <string>

namespace afu {

// Bad shapes, invalid hyperparameters, malformed config files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient (usually a learning rate that is too large).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dirichlet partition could not give every client a sample within the retry bound.
class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Experiment preconditions not met, e.g. the backdoor failed to implant.
class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace afu
