#pragma once

#include <stdexcept>
#include <string>

namespace aml {

/// A caller violated a documented precondition (shape, dimension, range).
class ContractError : public std::invalid_argument {
 public:
  explicit ContractError(const std::string& what) : std::invalid_argument(what) {}
};

/// The computation graph is malformed or incompletely bound.
class StructuralError : public std::logic_error {
 public:
  explicit StructuralError(const std::string& what) : std::logic_error(what) {}
};

/// Reading or writing an artifact failed (missing file, bad schema, corrupt content).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

/// A relation could not be trained to vanish within its budget.
class TrainingFailure : public std::runtime_error {
 public:
  TrainingFailure(const std::string& what, double final_ratio)
      : std::runtime_error(what), final_ratio_(final_ratio) {}
  double final_ratio() const noexcept { return final_ratio_; }

 private:
  double final_ratio_;
};

}  // namespace aml
