#pragma once

#include <stdexcept>
#include <string>

namespace chanopt {

// Malformed or unreadable artifact file (snapshot, graph spec, sizes file,
// CSV). Carries the byte offset where parsing failed when known.
class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg, long long byte_offset = -1)
      : std::runtime_error(byte_offset >= 0
                               ? msg + " (byte " + std::to_string(byte_offset) + ")"
                               : msg),
        byte_offset_(byte_offset) {}
  long long byte_offset() const { return byte_offset_; }

 private:
  long long byte_offset_;
};

// Structural problem in a network graph (cycle, dangling edge, bad combine
// mode arity, ...).
class GraphError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unsatisfiable channel constraints discovered while assigning variables.
// Message names the nodes whose depths cannot be reconciled.
class ConstraintConflict : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Two artifacts that must agree do not (archive vs. graph dims, sizes file
// vs. assignment variables, ...).
class IncompatibilityError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training could not proceed (divergence, replay exhausted). Carries the
// trial/epoch index in the message.
class TrainerFailure : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace chanopt
