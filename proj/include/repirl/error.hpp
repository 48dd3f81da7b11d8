#pragma once

#include <stdexcept>
#include <string>

namespace repirl {

enum class ErrorKind {
  step_limit,
  invalid_action,
  lookup,
  enumeration_too_large,
  empty_trajectory,
  empty_set,
  missing_logprob,
  group_too_small,
  config,
  parse,
  annotation_required,
  degenerate_sample,
  index_out_of_range,
  invalid_label,
  io,
};

const char* to_string(ErrorKind kind) noexcept;

// Every failure raised by the library carries a category so the CLI can map
// it to a message prefix and tests can match on it.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace repirl
