#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace peftlab {

// Shape disagreement between operands. The message names both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Row/column or token id outside the valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A parameter update was requested for a tensor without a populated gradient,
// or gradient state was accessed before any backward pass produced it.
class GradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The tape was asked to replay entries it has already consumed, or backward
// was called with no recording in scope.
class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke an API contract that is not a shape problem: empty reference
// list, mismatched experiment pairing, and the like.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent experiment configuration. The CLI maps this to
// exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed serialized payload (quantized stream, checkpoint, dataset).
// Carries the byte offset at which parsing gave up. CLI exit code 3.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  explicit FormatError(const std::string& what) : std::runtime_error(what), offset_(0) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// A stored code violates the value range its scheme allows. Distinct from
// FormatError: the container parsed fine but the payload is corrupt.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Optimization blew up (non-finite loss) or could not proceed. The message
// names the failing step. CLI exit code 4.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Budget schedule queried outside its domain or asked for an impossible
// budget.
class ScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace peftlab
