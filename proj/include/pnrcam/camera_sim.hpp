#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pnrcam/error.hpp"
#include "pnrcam/parallel.hpp"
#include "pnrcam/random.hpp"

namespace pnrcam {

/// Axis-aligned rectangle in pixel coordinates, half-open [x, x+width) x [y, y+height).
struct Rect {
  double x = 0.0;
  double y = 0.0;
  double width = 0.0;
  double height = 0.0;

  bool contains(double px, double py) const { return px >= x && px < x + width && py >= y && py < y + height; }
  bool operator==(const Rect&) const = default;
};

struct DetectorConfig {
  double quantum_efficiency = 0.2;
  int sensor_width = 64;
  int sensor_height = 64;
  double spot_fwhm = 5.0;
  /// Mean flash peak amplitude in units of noise_sigma.
  double spot_amplitude_mean = 500.0;
  /// Relative standard deviation of the lognormal flash amplitude.
  double spot_amplitude_spread = 0.3;
  double noise_sigma = 10.0;
  /// Constant offset added before quantization so readout noise is not clipped at zero.
  double bias_level = 100.0;
  /// Probability of one dark event per beam region per frame.
  double dark_count_rate = 6e-6;
  std::uint64_t rng_seed = 0;

  void validate() const {
    require(quantum_efficiency > 0.0 && quantum_efficiency <= 1.0, ErrorCode::config, "quantum_efficiency must be in (0,1]");
    require(sensor_width >= 1 && sensor_height >= 1, ErrorCode::config, "sensor dimensions must be positive");
    require(spot_fwhm > 0.0, ErrorCode::config, "spot_fwhm must be > 0");
    require(spot_amplitude_mean > 0.0 && spot_amplitude_spread >= 0.0, ErrorCode::config, "invalid spot amplitude");
    require(noise_sigma > 0.0, ErrorCode::config, "noise_sigma must be > 0");
    require(bias_level >= 0.0, ErrorCode::config, "bias_level must be >= 0");
    require(dark_count_rate >= 0.0 && dark_count_rate <= 1.0, ErrorCode::config, "dark_count_rate must be in [0,1]");
  }
};

enum class SourceKind { coherent, mixture };

struct MixtureBranch {
  double weight = 0.0;
  /// Mean photon number per pulse for each beam region.
  std::vector<double> means;
};

/// Flat-top illumination of one or more beam regions. For a mixture, one
/// branch is drawn per frame and all regions use that branch's means.
struct SourceSpec {
  SourceKind kind = SourceKind::coherent;
  std::vector<double> means;
  std::vector<MixtureBranch> mixture_branches;
  std::vector<Rect> beam_regions;

  static SourceSpec coherent(std::vector<double> means, std::vector<Rect> regions) {
    SourceSpec s;
    s.means = std::move(means);
    s.beam_regions = std::move(regions);
    return s;
  }

  static SourceSpec mixture(std::vector<MixtureBranch> branches, std::vector<Rect> regions) {
    SourceSpec s;
    s.kind = SourceKind::mixture;
    s.mixture_branches = std::move(branches);
    s.beam_regions = std::move(regions);
    return s;
  }

  std::size_t n_regions() const { return beam_regions.size(); }

  void validate(const DetectorConfig& cfg) const {
    require(!beam_regions.empty(), ErrorCode::config, "source needs at least one beam region");
    for (const Rect& r : beam_regions) {
      require(r.width > 0.0 && r.height > 0.0, ErrorCode::config, "beam region must have positive size");
      require(r.x >= 0.0 && r.y >= 0.0 && r.x + r.width <= cfg.sensor_width && r.y + r.height <= cfg.sensor_height,
              ErrorCode::beam_out_of_bounds, "beam region exceeds the sensor");
    }
    auto check_means = [&](const std::vector<double>& m) {
      require(m.size() == beam_regions.size(), ErrorCode::config, "one mean per beam region is required");
      for (double v : m) require(v >= 0.0 && std::isfinite(v), ErrorCode::config, "means must be finite and >= 0");
    };
    if (kind == SourceKind::coherent) {
      check_means(means);
    } else {
      require(!mixture_branches.empty(), ErrorCode::config, "mixture needs at least one branch");
      double total = 0.0;
      for (const auto& b : mixture_branches) {
        require(b.weight >= 0.0, ErrorCode::config, "mixture weights must be >= 0");
        check_means(b.means);
        total += b.weight;
      }
      require(std::abs(total - 1.0) <= 1e-9, ErrorCode::config, "mixture weights must sum to 1");
    }
  }
};

/// 16-bit image, row-major; pixel (x, y) has its center at integer coordinates.
struct Frame {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> pixels;

  Frame() = default;
  Frame(int w, int h, std::uint16_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  std::uint16_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint16_t& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Frame&) const = default;
};

struct Event {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Event&) const = default;
};

using FrameEvents = std::vector<Event>;
/// Events for consecutive frames; the frame id is the vector index.
using EventList = std::vector<FrameEvents>;

/// Ground truth of one simulated frame before any merging.
struct FrameTruth {
  std::vector<Event> photoelectrons;
  /// Photoelectrons per beam region, excluding dark events.
  std::vector<int> counts;
  /// Dark events per beam region.
  std::vector<int> dark;
  int branch = 0;
};

/// Draws photon numbers, thins them by the quantum efficiency, places
/// photoelectrons uniformly in their beam region and adds dark events.
inline FrameTruth sample_photoelectrons(const DetectorConfig& cfg, const SourceSpec& src, std::uint64_t frame_index) {
  Engine rng = make_engine(cfg.rng_seed, frame_index);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  FrameTruth truth;
  const std::vector<double>* means = &src.means;
  if (src.kind == SourceKind::mixture) {
    const double u = unit(rng);
    double acc = 0.0;
    truth.branch = static_cast<int>(src.mixture_branches.size()) - 1;
    for (std::size_t b = 0; b < src.mixture_branches.size(); ++b) {
      acc += src.mixture_branches[b].weight;
      if (u < acc) {
        truth.branch = static_cast<int>(b);
        break;
      }
    }
    means = &src.mixture_branches[static_cast<std::size_t>(truth.branch)].means;
  }
  truth.counts.assign(src.n_regions(), 0);
  truth.dark.assign(src.n_regions(), 0);
  for (std::size_t r = 0; r < src.n_regions(); ++r) {
    const Rect& region = src.beam_regions[r];
    const double mean = (*means)[r];
    int photons = 0;
    if (mean > 0.0) photons = std::poisson_distribution<int>(mean)(rng);
    int electrons = photons;
    if (photons > 0 && cfg.quantum_efficiency < 1.0)
      electrons = std::binomial_distribution<int>(photons, cfg.quantum_efficiency)(rng);
    if (cfg.dark_count_rate > 0.0 && unit(rng) < cfg.dark_count_rate) truth.dark[r] = 1;
    truth.counts[r] = electrons;
    for (int i = 0; i < electrons + truth.dark[r]; ++i) {
      const double x = region.x + unit(rng) * region.width;
      const double y = region.y + unit(rng) * region.height;
      truth.photoelectrons.push_back({x, y});
    }
  }
  return truth;
}

/// Renders flashes at the given positions, adds readout noise and quantizes.
inline Frame render_frame(const DetectorConfig& cfg, const std::vector<Event>& spots, std::uint64_t frame_index) {
  Engine rng = make_engine(derive_seed(cfg.rng_seed, 0x72656e646572ULL), frame_index);
  const double sigma = cfg.spot_fwhm / (2.0 * std::sqrt(2.0 * std::log(2.0)));
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
  const int reach = static_cast<int>(std::ceil(5.0 * sigma));
  const double amp_mean = cfg.spot_amplitude_mean * cfg.noise_sigma;
  const double log_var = std::log1p(cfg.spot_amplitude_spread * cfg.spot_amplitude_spread);
  std::lognormal_distribution<double> amplitude(std::log(amp_mean) - 0.5 * log_var, std::sqrt(log_var));

  std::vector<double> image(static_cast<std::size_t>(cfg.sensor_width) * cfg.sensor_height, cfg.bias_level);
  for (const Event& s : spots) {
    const double a = cfg.spot_amplitude_spread > 0.0 ? amplitude(rng) : amp_mean;
    const int x0 = std::max(0, static_cast<int>(std::floor(s.x)) - reach);
    const int x1 = std::min(cfg.sensor_width - 1, static_cast<int>(std::ceil(s.x)) + reach);
    const int y0 = std::max(0, static_cast<int>(std::floor(s.y)) - reach);
    const int y1 = std::min(cfg.sensor_height - 1, static_cast<int>(std::ceil(s.y)) + reach);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - s.x, dy = y - s.y;
        image[static_cast<std::size_t>(y) * cfg.sensor_width + x] += a * std::exp(-(dx * dx + dy * dy) * inv_two_var);
      }
  }
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  Frame frame(cfg.sensor_width, cfg.sensor_height);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::round(image[i] + noise(rng));
    frame.pixels[i] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
  }
  return frame;
}

inline Frame simulate_frame(const DetectorConfig& cfg, const SourceSpec& src, std::uint64_t frame_index) {
  return render_frame(cfg, sample_photoelectrons(cfg, src, frame_index).photoelectrons, frame_index);
}

/// Frames first_frame .. first_frame + n_frames - 1; output is independent of `threads`.
/// When `truth` is given it receives the sampled photoelectrons of each frame.
inline std::vector<Frame> simulate_frames(const DetectorConfig& cfg, const SourceSpec& src, std::size_t n_frames,
                                          unsigned threads = 1, std::uint64_t first_frame = 0,
                                          std::vector<FrameTruth>* truth = nullptr) {
  cfg.validate();
  src.validate(cfg);
  require(n_frames >= 1, ErrorCode::config, "n_frames must be >= 1");
  std::vector<Frame> frames(n_frames);
  if (truth) truth->assign(n_frames, FrameTruth{});
  parallel_for(n_frames, threads, [&](std::size_t i) {
    FrameTruth t = sample_photoelectrons(cfg, src, first_frame + i);
    frames[i] = render_frame(cfg, t.photoelectrons, first_frame + i);
    if (truth) (*truth)[i] = std::move(t);
  });
  return frames;
}

// ---------------------------------------------------------------------------
// Event-level path

enum class MergeModel {
  /// Photoelectrons in the same square cell of pitch merge_radius coalesce.
  cell_lattice,
  /// Photoelectrons closer than merge_radius are joined transitively.
  single_linkage,
};

struct EventSimOptions {
  double merge_radius = 3.0;
  MergeModel model = MergeModel::cell_lattice;
};

/// Number of merge cells a region holds under the lattice model.
inline int lattice_cells(const Rect& region, double merge_radius) {
  return static_cast<int>(std::ceil(region.width / merge_radius - 1e-9) * std::ceil(region.height / merge_radius - 1e-9));
}

namespace detail {

inline FrameEvents centroids(const std::vector<Event>& points, const std::vector<std::size_t>& label, std::size_t n_labels) {
  std::vector<double> sx(n_labels, 0.0), sy(n_labels, 0.0);
  std::vector<int> n(n_labels, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    sx[label[i]] += points[i].x;
    sy[label[i]] += points[i].y;
    ++n[label[i]];
  }
  FrameEvents out;
  for (std::size_t c = 0; c < n_labels; ++c)
    if (n[c] > 0) out.push_back({sx[c] / n[c], sy[c] / n[c]});
  return out;
}

}  // namespace detail

/// Coalesces photoelectrons into photo-events. Each output event sits at the
/// centroid of its group; groups are emitted in order of first appearance.
inline FrameEvents merge_photoelectrons(const std::vector<Event>& points, const std::vector<Rect>& regions,
                                        const EventSimOptions& opts) {
  require(opts.merge_radius > 0.0, ErrorCode::invalid_argument, "merge_radius must be > 0");
  const std::size_t n = points.size();
  std::vector<std::size_t> label(n);
  std::size_t n_labels = 0;
  if (opts.model == MergeModel::cell_lattice) {
    std::vector<std::pair<std::int64_t, std::size_t>> keys;  // cell key -> label
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      while (r + 1 < regions.size() && !regions[r].contains(points[i].x, points[i].y)) ++r;
      const auto cx = static_cast<std::int64_t>(std::floor((points[i].x - regions[r].x) / opts.merge_radius));
      const auto cy = static_cast<std::int64_t>(std::floor((points[i].y - regions[r].y) / opts.merge_radius));
      const std::int64_t key = (static_cast<std::int64_t>(r) << 40) ^ (cy << 20) ^ cx;
      auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& kv) { return kv.first == key; });
      if (it == keys.end()) {
        keys.emplace_back(key, n_labels);
        label[i] = n_labels++;
      } else {
        label[i] = it->second;
      }
    }
    return detail::centroids(points, label, n_labels);
  }
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  const double r2 = opts.merge_radius * opts.merge_radius;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = points[i].x - points[j].x, dy = points[i].y - points[j].y;
      if (dx * dx + dy * dy < r2) parent[find(j)] = find(i);
    }
  std::vector<std::size_t> root_label(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t root = find(i);
    if (root_label[root] == n) root_label[root] = n_labels++;
    label[i] = root_label[root];
  }
  return detail::centroids(points, label, n_labels);
}

inline EventList simulate_events(const DetectorConfig& cfg, const SourceSpec& src, std::size_t n_frames,
                                 const EventSimOptions& opts = {}, unsigned threads = 1, std::uint64_t first_frame = 0) {
  cfg.validate();
  src.validate(cfg);
  require(n_frames >= 1, ErrorCode::config, "n_frames must be >= 1");
  require(opts.merge_radius > 0.0, ErrorCode::config, "merge_radius must be > 0");
  EventList out(n_frames);
  parallel_for(n_frames, threads, [&](std::size_t i) {
    out[i] = merge_photoelectrons(sample_photoelectrons(cfg, src, first_frame + i).photoelectrons, src.beam_regions, opts);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Analytic on-off occupancy model

/// Distribution of the number of occupied cells when n photoelectrons land
/// uniformly on N cells, on k = 0..k_max. Mass above k_max is dropped.
inline std::vector<double> occupancy_response(int N, int n, int k_max) {
  require(N >= 1 && n >= 0 && k_max >= 0, ErrorCode::invalid_argument, "invalid occupancy parameters");
  const int width = std::min(n, N);
  std::vector<double> p(static_cast<std::size_t>(width) + 1, 0.0);
  p[0] = 1.0;
  for (int m = 1; m <= n; ++m) {
    const int top = std::min(m, N);
    for (int k = top; k >= 1; --k) {
      const double stay = p[static_cast<std::size_t>(k)] * static_cast<double>(k) / N;
      const double grow = p[static_cast<std::size_t>(k) - 1] * static_cast<double>(N - k + 1) / N;
      p[static_cast<std::size_t>(k)] = stay + grow;
    }
    p[0] = 0.0;
  }
  std::vector<double> col(static_cast<std::size_t>(k_max) + 1, 0.0);
  for (int k = 0; k <= std::min(width, k_max); ++k) col[static_cast<std::size_t>(k)] = p[static_cast<std::size_t>(k)];
  return col;
}

/// Occupancy response as a (k_max+1) x (n_max+1) column-stochastic matrix.
inline Eigen::MatrixXd occupancy_matrix(int N, int k_max, int n_max) {
  Eigen::MatrixXd pi(k_max + 1, n_max + 1);
  for (int n = 0; n <= n_max; ++n) {
    const auto col = occupancy_response(N, n, k_max);
    for (int k = 0; k <= k_max; ++k) pi(k, n) = col[static_cast<std::size_t>(k)];
  }
  return pi;
}

/// Mean number of photo-events of N on-off cells under Poisson illumination
/// with mean eta_m photoelectrons.
inline double mean_events_model(double N, double eta_m) {
  require(N > 0.0, ErrorCode::invalid_argument, "N must be > 0");
  return N * -std::expm1(-eta_m / N);
}

}  // namespace pnrcam
