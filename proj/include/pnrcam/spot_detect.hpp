#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "pnrcam/camera_sim.hpp"
#include "pnrcam/error.hpp"
#include "pnrcam/parallel.hpp"

namespace pnrcam {

struct DetectParams {
  int neighbor_radius = 3;
  double threshold_sigmas = 5.0;
  /// Readout noise in ADU; estimated from the frame when absent.
  std::optional<double> noise_sigma;

  void validate() const {
    require(neighbor_radius >= 1, ErrorCode::config, "neighbor_radius must be >= 1");
    require(threshold_sigmas > 0.0, ErrorCode::config, "threshold_sigmas must be > 0");
    if (noise_sigma)
      require(*noise_sigma > 0.0 && std::isfinite(*noise_sigma), ErrorCode::noise_estimate_invalid,
              "noise_sigma must be > 0");
  }
};

enum class FitStatus { ok, not_maximum, too_far, degenerate };

struct SubpixelFit {
  double x = 0.0;
  double y = 0.0;
  FitStatus status = FitStatus::ok;
};

struct DetectionDiagnostics {
  double noise_sigma = 0.0;
  double pedestal = 0.0;
  int fallbacks = 0;
  int degenerate = 0;
};

struct DetectionResult {
  FrameEvents events;
  DetectionDiagnostics diagnostics;
};

namespace detail {

inline double median_inplace(std::vector<double>& v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  }
  return m;
}

}  // namespace detail

inline double frame_median(const Frame& frame) {
  require(!frame.pixels.empty(), ErrorCode::invalid_argument, "empty frame");
  std::vector<double> v(frame.pixels.begin(), frame.pixels.end());
  return detail::median_inplace(v);
}

/// Robust noise estimate 1.4826 * MAD; falls back to the standard deviation
/// when the MAD vanishes. Returns 0 for a constant frame.
inline double estimate_noise_sigma(const Frame& frame) {
  const double med = frame_median(frame);
  std::vector<double> dev(frame.pixels.size());
  for (std::size_t i = 0; i < dev.size(); ++i) dev[i] = std::abs(frame.pixels[i] - med);
  const double mad = 1.4826 * detail::median_inplace(dev);
  if (mad > 0.0) return mad;
  double mean = 0.0;
  for (auto p : frame.pixels) mean += p;
  mean /= static_cast<double>(frame.pixels.size());
  double var = 0.0;
  for (auto p : frame.pixels) var += (p - mean) * (p - mean);
  return std::sqrt(var / static_cast<double>(frame.pixels.size()));
}

/// Least-squares fit of a quadratic surface to log(max(I - pedestal, 1)) over
/// the Euclidean disc of `radius` around (cx, cy). Returns the stationary
/// point, or the integer center when the fit is unusable.
inline SubpixelFit subpixel_fit(const Frame& frame, int cx, int cy, int radius, double pedestal) {
  Eigen::Matrix<double, 6, 6> ata = Eigen::Matrix<double, 6, 6>::Zero();
  Eigen::Matrix<double, 6, 1> atb = Eigen::Matrix<double, 6, 1>::Zero();
  int used = 0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy > radius * radius) continue;
      const int x = cx + dx, y = cy + dy;
      if (x < 0 || y < 0 || x >= frame.width || y >= frame.height) continue;
      const double z = std::log(std::max(frame.at(x, y) - pedestal, 1.0));
      Eigen::Matrix<double, 6, 1> row;
      row << 1.0, dx, dy, double(dx * dx), double(dy * dy), double(dx * dy);
      ata.noalias() += row * row.transpose();
      atb.noalias() += row * z;
      ++used;
    }
  SubpixelFit out{static_cast<double>(cx), static_cast<double>(cy), FitStatus::ok};
  Eigen::FullPivLU<Eigen::Matrix<double, 6, 6>> lu(ata);
  if (used < 6 || lu.rank() < 6) {
    out.status = FitStatus::degenerate;
    return out;
  }
  const Eigen::Matrix<double, 6, 1> c = lu.solve(atb);
  const double b = c(1), cc = c(2), d = c(3), e = c(4), f = c(5);
  const double det = 4.0 * d * e - f * f;
  if (!(d < 0.0 && det > 0.0)) {
    out.status = FitStatus::not_maximum;
    return out;
  }
  const double ox = (f * cc - 2.0 * e * b) / det;
  const double oy = (f * b - 2.0 * d * cc) / det;
  if (!(ox * ox + oy * oy <= 1.0)) {
    out.status = FitStatus::too_far;
    return out;
  }
  out.x = cx + ox;
  out.y = cy + oy;
  return out;
}

/// Local-maximum spot finder. A pixel is an event center when it exceeds the
/// pedestal by threshold_sigmas * noise_sigma and dominates its square
/// neighborhood (strictly against earlier pixels in raster order, non-strictly
/// against later ones). Centers inside the border band are dropped.
inline DetectionResult detect_spots(const Frame& frame, const DetectParams& p) {
  p.validate();
  const int r = p.neighbor_radius;
  require(frame.width >= 2 * r + 1 && frame.height >= 2 * r + 1, ErrorCode::invalid_argument,
          "frame smaller than the detection window");
  DetectionResult res;
  res.diagnostics.pedestal = frame_median(frame);
  const double sigma = p.noise_sigma ? *p.noise_sigma : estimate_noise_sigma(frame);
  res.diagnostics.noise_sigma = sigma;
  if (!(sigma > 0.0)) return res;
  const double level = res.diagnostics.pedestal + p.threshold_sigmas * sigma;

  for (int y = r; y < frame.height - r; ++y)
    for (int x = r; x < frame.width - r; ++x) {
      const double v = frame.at(x, y);
      if (!(v > level)) continue;
      bool peak = true;
      for (int dy = -r; dy <= r && peak; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const double u = frame.at(x + dx, y + dy);
          const bool earlier = dy < 0 || (dy == 0 && dx < 0);
          if (earlier ? u >= v : u > v) {
            peak = false;
            break;
          }
        }
      if (!peak) continue;
      const SubpixelFit fit = subpixel_fit(frame, x, y, r, res.diagnostics.pedestal);
      if (fit.status != FitStatus::ok) ++res.diagnostics.fallbacks;
      if (fit.status == FitStatus::degenerate) ++res.diagnostics.degenerate;
      res.events.push_back({fit.x, fit.y});
    }
  return res;
}

inline std::vector<DetectionResult> detect_frames(const std::vector<Frame>& frames, const DetectParams& p,
                                                  unsigned threads = 1) {
  std::vector<DetectionResult> out(frames.size());
  parallel_for(frames.size(), threads, [&](std::size_t i) { out[i] = detect_spots(frames[i], p); });
  return out;
}

}  // namespace pnrcam
