#pragma once

#include <stdexcept>
#include <string>

namespace fewshot {

// Error categories map one-to-one onto CLI exit codes (see tools/fewshot.cpp).

/// Caller passed something outside an operation's domain.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input data failed a structural check (non-finite tensors, manifest drift).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unknown presets, missing prerequisite checkpoints, contradictory flags.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A guarantee about data provenance was violated (class-disjointness, frozen parameters).
class AuditError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training or inference produced a non-finite number.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Episode sampler could not satisfy its constraints.
class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Evaluation protocol could not be honoured (a category with no episodes, ...).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fewshot
