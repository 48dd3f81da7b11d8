#include "repirl/error.hpp"

namespace repirl {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::step_limit: return "step-limit";
    case ErrorKind::invalid_action: return "invalid-action";
    case ErrorKind::lookup: return "lookup";
    case ErrorKind::enumeration_too_large: return "enumeration-too-large";
    case ErrorKind::empty_trajectory: return "empty-trajectory";
    case ErrorKind::empty_set: return "empty-set";
    case ErrorKind::missing_logprob: return "missing-logprob";
    case ErrorKind::group_too_small: return "group-too-small";
    case ErrorKind::config: return "config";
    case ErrorKind::parse: return "parse";
    case ErrorKind::annotation_required: return "annotation-required";
    case ErrorKind::degenerate_sample: return "degenerate-sample";
    case ErrorKind::index_out_of_range: return "index-out-of-range";
    case ErrorKind::invalid_label: return "invalid-label";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

}  // namespace repirl
