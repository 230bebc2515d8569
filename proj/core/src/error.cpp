#include "tilefuse/error.hpp"

namespace tilefuse {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::format: return "format";
    case ErrorCode::unsupported_datatype: return "unsupported-datatype";
    case ErrorCode::corrupt_file: return "corrupt-file";
    case ErrorCode::write_failure: return "write";
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::invalid_interp: return "invalid-interp";
    case ErrorCode::singular_transform: return "singular-transform";
    case ErrorCode::degenerate_input: return "degenerate-input";
    case ErrorCode::optimization_failure: return "optimization-failure";
    case ErrorCode::zero_variance: return "zero-variance";
    case ErrorCode::geometry_mismatch: return "geometry-mismatch";
    case ErrorCode::empty_mask: return "empty-mask";
    case ErrorCode::degenerate_fit: return "degenerate-fit";
    case ErrorCode::invalid_lattice: return "invalid-lattice";
    case ErrorCode::coverage_gap: return "coverage-gap";
    case ErrorCode::out_of_bounds: return "out-of-bounds";
    case ErrorCode::label_range: return "label-range";
    case ErrorCode::insufficient_data: return "insufficient-data";
    case ErrorCode::plugin_failure: return "plugin-failure";
    case ErrorCode::timeout: return "timeout";
    case ErrorCode::protocol_violation: return "protocol-violation";
    case ErrorCode::undefined_distance: return "undefined-distance";
    case ErrorCode::configuration: return "configuration";
    case ErrorCode::spec: return "spec";
  }
  return "unknown";
}

}  // namespace tilefuse
