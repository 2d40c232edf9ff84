#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "pnrcam/camera_sim.hpp"
#include "pnrcam/error.hpp"
#include "pnrcam/parallel.hpp"
#include "pnrcam/stats.hpp"

namespace pnrcam {

/// Regular grid of half-open tiles; tile index = row * n_cols + col.
struct TileGrid {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double tile_width = 1.0;
  double tile_height = 1.0;
  int n_cols = 1;
  int n_rows = 1;

  int n_tiles() const { return n_cols * n_rows; }

  void validate() const {
    require(n_cols >= 1 && n_rows >= 1, ErrorCode::empty_grid, "tile grid has no tiles");
    require(tile_width > 0.0 && tile_height > 0.0, ErrorCode::empty_grid, "tile size must be positive");
  }

  std::optional<int> tile_of(double x, double y) const {
    const double fx = std::floor((x - origin_x) / tile_width);
    const double fy = std::floor((y - origin_y) / tile_height);
    if (!(fx >= 0.0 && fy >= 0.0 && fx < n_cols && fy < n_rows)) return std::nullopt;
    return static_cast<int>(fy) * n_cols + static_cast<int>(fx);
  }

  Rect tile_rect(int index) const {
    const int col = index % n_cols, row = index / n_cols;
    return {origin_x + col * tile_width, origin_y + row * tile_height, tile_width, tile_height};
  }
};

using TilePair = std::pair<int, int>;

struct TileCounts {
  std::vector<CountHistogram> singles;
  std::vector<TilePair> pairs;
  std::vector<JointCountHistogram> joints;
  std::uint64_t frames = 0;
  std::uint64_t dropped_events = 0;

  const JointCountHistogram& joint(TilePair pair) const {
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (pairs[i] == pair) return joints[i];
    fail(ErrorCode::invalid_argument, "tile pair not accumulated");
  }
};

/// Incremental tile counter. Two accumulators over disjoint frame sets merge
/// into the accumulator of their union; merge order does not matter.
class TileAccumulator {
 public:
  TileAccumulator(TileGrid grid, std::vector<TilePair> pairs) : grid_(grid) {
    grid_.validate();
    for (const auto& [a, b] : pairs)
      require(a != b && a >= 0 && b >= 0 && a < grid_.n_tiles() && b < grid_.n_tiles(), ErrorCode::invalid_argument,
              "tile pairs must reference distinct in-range tiles");
    counts_.singles.resize(static_cast<std::size_t>(grid_.n_tiles()));
    counts_.joints.resize(pairs.size());
    counts_.pairs = std::move(pairs);
    scratch_.resize(static_cast<std::size_t>(grid_.n_tiles()));
  }

  void add_frame(const FrameEvents& events) {
    std::fill(scratch_.begin(), scratch_.end(), 0);
    for (const Event& e : events) {
      if (auto t = grid_.tile_of(e.x, e.y))
        ++scratch_[static_cast<std::size_t>(*t)];
      else
        ++counts_.dropped_events;
    }
    for (std::size_t t = 0; t < scratch_.size(); ++t) counts_.singles[t].record(scratch_[t]);
    for (std::size_t p = 0; p < counts_.pairs.size(); ++p)
      counts_.joints[p].record(scratch_[static_cast<std::size_t>(counts_.pairs[p].first)],
                               scratch_[static_cast<std::size_t>(counts_.pairs[p].second)]);
    ++counts_.frames;
  }

  void merge(const TileAccumulator& other) {
    require(other.counts_.singles.size() == counts_.singles.size() && other.counts_.pairs == counts_.pairs,
            ErrorCode::invalid_argument, "cannot merge accumulators of different layouts");
    for (std::size_t t = 0; t < counts_.singles.size(); ++t) counts_.singles[t].merge(other.counts_.singles[t]);
    for (std::size_t p = 0; p < counts_.joints.size(); ++p) counts_.joints[p].merge(other.counts_.joints[p]);
    counts_.frames += other.counts_.frames;
    counts_.dropped_events += other.counts_.dropped_events;
  }

  const TileCounts& counts() const { return counts_; }
  TileCounts take() && { return std::move(counts_); }

 private:
  TileGrid grid_;
  TileCounts counts_;
  std::vector<std::size_t> scratch_;
};

inline TileCounts accumulate(const EventList& events, const TileGrid& grid, const std::vector<TilePair>& pairs,
                             unsigned threads = 1) {
  const std::size_t n_chunks = std::max<std::size_t>(1, resolve_threads(threads));
  std::vector<TileAccumulator> parts(n_chunks, TileAccumulator(grid, pairs));
  parallel_chunks(events.size(), threads, n_chunks, [&](std::size_t c, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) parts[c].add_frame(events[i]);
  });
  for (std::size_t c = 1; c < parts.size(); ++c) parts[0].merge(parts[c]);
  return std::move(parts[0]).take();
}

/// Pearson correlation of per-frame counts between the two tiles of a pair.
inline double crosstalk_check(const TileCounts& tc, TilePair pair) {
  const JointCountHistogram& j = tc.joint(pair);
  require(j.total_frames() >= 100, ErrorCode::insufficient_frames, "crosstalk check needs at least 100 frames");
  return pearson(joint_moments(j));
}

}  // namespace pnrcam
