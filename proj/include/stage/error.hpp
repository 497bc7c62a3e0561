#pragma once

#include <stdexcept>
#include <string>

namespace stage {

// Precondition violated by the caller (bad shape, range, or configuration).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unreadable or unsupported file contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Token sequence that does not follow the delay pattern.
class MalformedSequence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Loss over a sequence with no unmasked target.
class UndefinedLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Not enough data, divergence, or any other failure during training.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stage
