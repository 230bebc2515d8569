#pragma once

#include <stdexcept>
#include <string>

namespace tilefuse {

enum class ErrorCode {
  format,
  unsupported_datatype,
  corrupt_file,
  write_failure,
  invalid_argument,
  invalid_interp,
  singular_transform,
  degenerate_input,
  optimization_failure,
  zero_variance,
  geometry_mismatch,
  empty_mask,
  degenerate_fit,
  invalid_lattice,
  coverage_gap,
  out_of_bounds,
  label_range,
  insufficient_data,
  plugin_failure,
  timeout,
  protocol_violation,
  undefined_distance,
  configuration,
  spec,
};

const char* to_string(ErrorCode code) noexcept;

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tilefuse
