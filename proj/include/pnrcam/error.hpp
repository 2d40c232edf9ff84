#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pnrcam {

/// Machine-readable failure category carried by every pnrcam exception.
enum class ErrorCode {
  invalid_argument,
  tail_too_heavy,
  zero_mean,
  dimension_mismatch,
  beam_out_of_bounds,
  noise_estimate_invalid,
  degenerate_fit,
  empty_grid,
  insufficient_frames,
  fit_diverged,
  not_converged,
  no_plateau,
  model_mismatch,
  schema,
  config,
  io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "InvalidArgument";
    case ErrorCode::tail_too_heavy: return "TailTooHeavy";
    case ErrorCode::zero_mean: return "ZeroMean";
    case ErrorCode::dimension_mismatch: return "DimensionMismatch";
    case ErrorCode::beam_out_of_bounds: return "BeamOutOfBounds";
    case ErrorCode::noise_estimate_invalid: return "NoiseEstimateInvalid";
    case ErrorCode::degenerate_fit: return "DegenerateFit";
    case ErrorCode::empty_grid: return "EmptyGrid";
    case ErrorCode::insufficient_frames: return "InsufficientFrames";
    case ErrorCode::fit_diverged: return "FitDiverged";
    case ErrorCode::not_converged: return "NotConverged";
    case ErrorCode::no_plateau: return "NoPlateau";
    case ErrorCode::model_mismatch: return "ModelMismatch";
    case ErrorCode::schema: return "SchemaError";
    case ErrorCode::config: return "ConfigError";
    case ErrorCode::io: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace pnrcam
