#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnrcam/camera_sim.hpp"
#include "pnrcam/error.hpp"
#include "pnrcam/reconstruct.hpp"
#include "pnrcam/spot_detect.hpp"
#include "pnrcam/stats.hpp"
#include "pnrcam/tiling.hpp"
#include "pnrcam/tomography.hpp"

namespace pnrcam::io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a sibling temporary file and renames it into place.
inline void atomic_write(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::io, "write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

/// 64-bit FNV-1a digest as 16 hex digits.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_digest(const fs::path& path) { return fnv1a_hex(read_file(path)); }

inline json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::schema, path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { atomic_write(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Schema helpers

namespace detail {

template <class T>
T get(const json& j, const char* key, ErrorCode code = ErrorCode::schema) {
  require(j.is_object() && j.contains(key), code, std::string("missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(code, std::string("bad value for '") + key + "': " + e.what());
  }
}

template <class T>
void get_opt(const json& j, const char* key, T& out, ErrorCode code = ErrorCode::config) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(code, std::string("bad value for '") + key + "': " + e.what());
  }
}

inline void only_keys(const json& j, std::initializer_list<const char*> keys, const char* what) {
  require(j.is_object(), ErrorCode::config, std::string(what) + " must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, _] : j.items())
    require(allowed.count(k) > 0, ErrorCode::config, std::string("unknown key '") + k + "' in " + what);
}

inline void expect_kind(const json& j, const char* kind) {
  require(j.is_object(), ErrorCode::schema, "expected a JSON object");
  const auto k = get<std::string>(j, "kind");
  require(k == kind, ErrorCode::schema, "expected kind '" + std::string(kind) + "', got '" + k + "'");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Statistics types

inline json to_json(const PhotonStatistics& f) {
  return {{"kind", "photon_stats"}, {"n_max", f.n_max()}, {"data", std::vector<double>(f.probs().begin(), f.probs().end())}};
}

inline PhotonStatistics photon_stats_from_json(const json& j) {
  detail::expect_kind(j, "photon_stats");
  auto data = detail::get<std::vector<double>>(j, "data");
  require(static_cast<int>(data.size()) == detail::get<int>(j, "n_max") + 1, ErrorCode::schema, "n_max disagrees with data");
  try {
    return PhotonStatistics(std::move(data));
  } catch (const Error& e) {
    fail(ErrorCode::schema, e.what());
  }
}

inline json to_json(const CountHistogram& h) {
  return {{"kind", "count_hist"},
          {"n_max", h.k_max()},
          {"data", std::vector<std::uint64_t>(h.counts().begin(), h.counts().end())},
          {"total_frames", h.total_frames()}};
}

inline CountHistogram count_hist_from_json(const json& j) {
  detail::expect_kind(j, "count_hist");
  auto data = detail::get<std::vector<std::uint64_t>>(j, "data");
  require(static_cast<int>(data.size()) == detail::get<int>(j, "n_max") + 1, ErrorCode::schema, "n_max disagrees with data");
  const auto total = detail::get<std::uint64_t>(j, "total_frames");
  require(total > 0, ErrorCode::schema, "total_frames must be positive");
  try {
    return CountHistogram(std::move(data), total);
  } catch (const Error& e) {
    fail(ErrorCode::schema, e.what());
  }
}

inline json to_json(const JointStatistics& f) {
  const Eigen::MatrixXd& p = f.probs();
  std::vector<double> data;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index k = 0; k < p.cols(); ++k) data.push_back(p(i, k));
  return {{"kind", "joint_stats"}, {"n_max", {f.n_max1(), f.n_max2()}}, {"shape", {p.rows(), p.cols()}}, {"data", data}};
}

inline JointStatistics joint_stats_from_json(const json& j) {
  detail::expect_kind(j, "joint_stats");
  const auto shape = detail::get<std::vector<Eigen::Index>>(j, "shape");
  const auto data = detail::get<std::vector<double>>(j, "data");
  require(shape.size() == 2 && shape[0] >= 0 && shape[1] >= 0 &&
              static_cast<std::size_t>(shape[0] * shape[1]) == data.size(),
          ErrorCode::schema, "joint shape disagrees with data");
  Eigen::MatrixXd p(shape[0], shape[1]);
  for (Eigen::Index i = 0; i < shape[0]; ++i)
    for (Eigen::Index k = 0; k < shape[1]; ++k) p(i, k) = data[static_cast<std::size_t>(i * shape[1] + k)];
  try {
    return JointStatistics(std::move(p));
  } catch (const Error& e) {
    fail(ErrorCode::schema, e.what());
  }
}

inline json to_json(const JointCountHistogram& h) {
  return {{"kind", "joint_count_hist"},
          {"n_max", {static_cast<long>(h.rows()) - 1, static_cast<long>(h.cols()) - 1}},
          {"shape", {h.rows(), h.cols()}},
          {"data", std::vector<std::uint64_t>(h.data().begin(), h.data().end())},
          {"total_frames", h.total_frames()}};
}

inline JointCountHistogram joint_count_hist_from_json(const json& j) {
  detail::expect_kind(j, "joint_count_hist");
  const auto shape = detail::get<std::vector<std::size_t>>(j, "shape");
  auto data = detail::get<std::vector<std::uint64_t>>(j, "data");
  require(shape.size() == 2 && shape[0] * shape[1] == data.size(), ErrorCode::schema, "joint shape disagrees with data");
  const auto total = detail::get<std::uint64_t>(j, "total_frames");
  require(total > 0, ErrorCode::schema, "total_frames must be positive");
  try {
    return JointCountHistogram(shape[0], shape[1], std::move(data), total);
  } catch (const Error& e) {
    fail(ErrorCode::schema, e.what());
  }
}

// ---------------------------------------------------------------------------
// Response matrix and tile counts

inline json to_json(const ResponseMatrix& r) {
  std::vector<double> data;
  const Eigen::MatrixXd& p = r.pi();
  for (Eigen::Index k = 0; k < p.rows(); ++k)
    for (Eigen::Index n = 0; n < p.cols(); ++n) data.push_back(p(k, n));
  json j = {{"kind", "response_matrix"}, {"k_max", r.k_max()}, {"n_max", r.n_max()}, {"pi", data}};
  j["n_sat"] = r.n_sat ? json(*r.n_sat) : json(nullptr);
  j["fit"] = r.fit ? json{{"N", r.fit->N}, {"alpha", r.fit->alpha}, {"residual", r.fit->residual}} : json(nullptr);
  j["solver"] = {{"objective", r.info.objective}, {"iterations", r.info.iterations}, {"converged", r.info.converged}};
  return j;
}

inline ResponseMatrix response_from_json(const json& j) {
  require(j.is_object(), ErrorCode::schema, "response matrix must be an object");
  const int k_max = detail::get<int>(j, "k_max"), n_max = detail::get<int>(j, "n_max");
  const auto data = detail::get<std::vector<double>>(j, "pi");
  require(k_max >= 0 && n_max >= 0 && data.size() == static_cast<std::size_t>((k_max + 1) * (n_max + 1)), ErrorCode::schema,
          "pi size disagrees with k_max/n_max");
  Eigen::MatrixXd p(k_max + 1, n_max + 1);
  for (int k = 0; k <= k_max; ++k)
    for (int n = 0; n <= n_max; ++n) p(k, n) = data[static_cast<std::size_t>(k * (n_max + 1) + n)];
  std::optional<ResponseMatrix> r;
  try {
    r.emplace(std::move(p));
  } catch (const Error& e) {
    fail(ErrorCode::schema, e.what());
  }
  if (j.contains("n_sat") && !j["n_sat"].is_null()) r->n_sat = detail::get<int>(j, "n_sat");
  if (j.contains("fit") && !j["fit"].is_null()) {
    const json& f = j["fit"];
    OnOffFit fit{detail::get<double>(f, "N"), detail::get<double>(f, "alpha"), 0.0};
    detail::get_opt(f, "residual", fit.residual, ErrorCode::schema);
    r->fit = fit;
  }
  if (j.contains("solver")) {
    const json& s = j["solver"];
    detail::get_opt(s, "objective", r->info.objective, ErrorCode::schema);
    detail::get_opt(s, "iterations", r->info.iterations, ErrorCode::schema);
    detail::get_opt(s, "converged", r->info.converged, ErrorCode::schema);
  }
  return *std::move(r);
}

inline json to_json(const TileCounts& tc) {
  json tiles = json::object();
  for (std::size_t t = 0; t < tc.singles.size(); ++t) tiles[std::to_string(t)] = to_json(tc.singles[t]);
  json pairs = json::array();
  for (std::size_t p = 0; p < tc.pairs.size(); ++p)
    pairs.push_back({{"tiles", {tc.pairs[p].first, tc.pairs[p].second}}, {"hist", to_json(tc.joints[p])}});
  return {{"kind", "tile_counts"},
          {"frames", tc.frames},
          {"dropped_events", tc.dropped_events},
          {"tiles", tiles},
          {"pairs", pairs}};
}

inline TileCounts tile_counts_from_json(const json& j) {
  detail::expect_kind(j, "tile_counts");
  TileCounts tc;
  tc.frames = detail::get<std::uint64_t>(j, "frames");
  tc.dropped_events = detail::get<std::uint64_t>(j, "dropped_events");
  const json& tiles = j.at("tiles");
  require(tiles.is_object(), ErrorCode::schema, "'tiles' must be an object");
  tc.singles.resize(tiles.size());
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    const std::string key = std::to_string(t);
    require(tiles.contains(key), ErrorCode::schema, "tile indices must be 0..n-1");
    tc.singles[t] = count_hist_from_json(tiles[key]);
  }
  for (const json& p : detail::get<json>(j, "pairs")) {
    const auto ids = detail::get<std::vector<int>>(p, "tiles");
    require(ids.size() == 2, ErrorCode::schema, "pair needs two tile indices");
    tc.pairs.emplace_back(ids[0], ids[1]);
    tc.joints.push_back(joint_count_hist_from_json(p.at("hist")));
  }
  return tc;
}

// ---------------------------------------------------------------------------
// Configuration types; every struct field is an optional key.

inline json to_json(const Rect& r) { return {{"x", r.x}, {"y", r.y}, {"width", r.width}, {"height", r.height}}; }

inline Rect rect_from_json(const json& j) {
  detail::only_keys(j, {"x", "y", "width", "height"}, "rectangle");
  return {detail::get<double>(j, "x", ErrorCode::config), detail::get<double>(j, "y", ErrorCode::config),
          detail::get<double>(j, "width", ErrorCode::config), detail::get<double>(j, "height", ErrorCode::config)};
}

inline json to_json(const DetectorConfig& c) {
  return {{"quantum_efficiency", c.quantum_efficiency},
          {"sensor_width", c.sensor_width},
          {"sensor_height", c.sensor_height},
          {"spot_fwhm", c.spot_fwhm},
          {"spot_amplitude_mean", c.spot_amplitude_mean},
          {"spot_amplitude_spread", c.spot_amplitude_spread},
          {"noise_sigma", c.noise_sigma},
          {"bias_level", c.bias_level},
          {"dark_count_rate", c.dark_count_rate},
          {"rng_seed", c.rng_seed}};
}

inline DetectorConfig detector_from_json(const json& j) {
  detail::only_keys(j,
                    {"quantum_efficiency", "sensor_width", "sensor_height", "spot_fwhm", "spot_amplitude_mean",
                     "spot_amplitude_spread", "noise_sigma", "bias_level", "dark_count_rate", "rng_seed"},
                    "detector");
  DetectorConfig c;
  detail::get_opt(j, "quantum_efficiency", c.quantum_efficiency);
  detail::get_opt(j, "sensor_width", c.sensor_width);
  detail::get_opt(j, "sensor_height", c.sensor_height);
  detail::get_opt(j, "spot_fwhm", c.spot_fwhm);
  detail::get_opt(j, "spot_amplitude_mean", c.spot_amplitude_mean);
  detail::get_opt(j, "spot_amplitude_spread", c.spot_amplitude_spread);
  detail::get_opt(j, "noise_sigma", c.noise_sigma);
  detail::get_opt(j, "bias_level", c.bias_level);
  detail::get_opt(j, "dark_count_rate", c.dark_count_rate);
  detail::get_opt(j, "rng_seed", c.rng_seed);
  c.validate();
  return c;
}

inline json to_json(const SourceSpec& s) {
  json regions = json::array();
  for (const Rect& r : s.beam_regions) regions.push_back(to_json(r));
  json j = {{"kind", s.kind == SourceKind::coherent ? "coherent" : "mixture"}, {"beam_regions", regions}};
  if (s.kind == SourceKind::coherent) {
    j["means"] = s.means;
  } else {
    json branches = json::array();
    for (const auto& b : s.mixture_branches) branches.push_back({{"weight", b.weight}, {"means", b.means}});
    j["mixture_branches"] = branches;
  }
  return j;
}

inline SourceSpec source_from_json(const json& j) {
  detail::only_keys(j, {"kind", "means", "mixture_branches", "beam_region", "beam_regions"}, "source");
  SourceSpec s;
  const std::string kind = j.contains("kind") ? detail::get<std::string>(j, "kind", ErrorCode::config) : "coherent";
  require(kind == "coherent" || kind == "mixture", ErrorCode::config, "source kind must be coherent or mixture");
  s.kind = kind == "coherent" ? SourceKind::coherent : SourceKind::mixture;
  detail::get_opt(j, "means", s.means);
  if (j.contains("mixture_branches"))
    for (const json& b : j["mixture_branches"]) {
      detail::only_keys(b, {"weight", "means"}, "mixture branch");
      s.mixture_branches.push_back(
          {detail::get<double>(b, "weight", ErrorCode::config), detail::get<std::vector<double>>(b, "means", ErrorCode::config)});
    }
  if (j.contains("beam_region")) s.beam_regions.push_back(rect_from_json(j["beam_region"]));
  if (j.contains("beam_regions"))
    for (const json& r : j["beam_regions"]) s.beam_regions.push_back(rect_from_json(r));
  return s;
}

inline json to_json(const TileGrid& g) {
  return {{"origin", {g.origin_x, g.origin_y}}, {"tile_width", g.tile_width}, {"tile_height", g.tile_height},
          {"n_cols", g.n_cols},               {"n_rows", g.n_rows}};
}

inline TileGrid grid_from_json(const json& j) {
  detail::only_keys(j, {"origin", "tile_width", "tile_height", "n_cols", "n_rows"}, "grid");
  TileGrid g;
  if (j.contains("origin")) {
    const auto o = detail::get<std::vector<double>>(j, "origin", ErrorCode::config);
    require(o.size() == 2, ErrorCode::config, "grid origin must be [x, y]");
    g.origin_x = o[0];
    g.origin_y = o[1];
  }
  detail::get_opt(j, "tile_width", g.tile_width);
  detail::get_opt(j, "tile_height", g.tile_height);
  detail::get_opt(j, "n_cols", g.n_cols);
  detail::get_opt(j, "n_rows", g.n_rows);
  g.validate();
  return g;
}

inline json to_json(const DetectParams& p) {
  json j = {{"neighbor_radius", p.neighbor_radius}, {"threshold_sigmas", p.threshold_sigmas}};
  j["noise_sigma"] = p.noise_sigma ? json(*p.noise_sigma) : json(nullptr);
  return j;
}

inline DetectParams detect_from_json(const json& j) {
  detail::only_keys(j, {"neighbor_radius", "threshold_sigmas", "noise_sigma"}, "detect");
  DetectParams p;
  detail::get_opt(j, "neighbor_radius", p.neighbor_radius);
  detail::get_opt(j, "threshold_sigmas", p.threshold_sigmas);
  if (j.contains("noise_sigma") && !j["noise_sigma"].is_null()) p.noise_sigma = detail::get<double>(j, "noise_sigma", ErrorCode::config);
  p.validate();
  return p;
}

inline json to_json(const EventSimOptions& o) {
  return {{"merge_radius", o.merge_radius}, {"merge_model", o.model == MergeModel::cell_lattice ? "cell_lattice" : "single_linkage"}};
}

inline EventSimOptions events_from_json(const json& j) {
  detail::only_keys(j, {"merge_radius", "merge_model"}, "events");
  EventSimOptions o;
  detail::get_opt(j, "merge_radius", o.merge_radius);
  if (j.contains("merge_model")) {
    const auto m = detail::get<std::string>(j, "merge_model", ErrorCode::config);
    require(m == "cell_lattice" || m == "single_linkage", ErrorCode::config, "unknown merge_model '" + m + "'");
    o.model = m == "cell_lattice" ? MergeModel::cell_lattice : MergeModel::single_linkage;
  }
  require(o.merge_radius > 0.0, ErrorCode::config, "merge_radius must be > 0");
  return o;
}

inline json to_json(const TomographyOptions& o) {
  return {{"reg_weight", o.reg_weight}, {"max_iter", o.max_iter}, {"rel_tol", o.rel_tol}, {"window", o.window}};
}

inline TomographyOptions tomography_from_json(const json& j) {
  detail::only_keys(j, {"reg_weight", "max_iter", "rel_tol", "window"}, "tomography");
  TomographyOptions o;
  detail::get_opt(j, "reg_weight", o.reg_weight);
  detail::get_opt(j, "max_iter", o.max_iter);
  detail::get_opt(j, "rel_tol", o.rel_tol);
  detail::get_opt(j, "window", o.window);
  require(o.reg_weight >= 0.0 && o.max_iter >= 1 && o.window >= 1, ErrorCode::config, "invalid tomography options");
  return o;
}

inline const char* init_name(InitKind k) {
  switch (k) {
    case InitKind::thermal: return "thermal";
    case InitKind::poisson: return "poisson";
    case InitKind::uniform: return "uniform";
  }
  return "thermal";
}

inline InitKind init_from_name(const std::string& v) {
  if (v == "thermal") return InitKind::thermal;
  if (v == "poisson") return InitKind::poisson;
  if (v == "uniform") return InitKind::uniform;
  fail(ErrorCode::config, "init must be thermal, poisson or uniform");
}

inline json to_json(const ReconstructOptions& o) {
  return {{"max_iter", o.max_iter},
          {"ll_tol", o.ll_tol},
          {"window", o.window},
          {"init", init_name(o.init)},
          {"discrepancy_factor", o.discrepancy_factor},
          {"joint_discrepancy_factor", o.joint_discrepancy_factor},
          {"objective", o.objective == Objective::ml ? "ml" : "lsq"}};
}

inline ReconstructOptions reconstruct_from_json(const json& j) {
  detail::only_keys(j, {"max_iter", "ll_tol", "window", "init", "discrepancy_factor", "joint_discrepancy_factor", "objective"}, "reconstruct");
  ReconstructOptions o;
  detail::get_opt(j, "max_iter", o.max_iter);
  detail::get_opt(j, "ll_tol", o.ll_tol);
  detail::get_opt(j, "window", o.window);
  detail::get_opt(j, "discrepancy_factor", o.discrepancy_factor);
  detail::get_opt(j, "joint_discrepancy_factor", o.joint_discrepancy_factor);
  if (j.contains("init")) {
    o.init = init_from_name(detail::get<std::string>(j, "init", ErrorCode::config));
  }
  if (j.contains("objective")) {
    const auto v = detail::get<std::string>(j, "objective", ErrorCode::config);
    require(v == "ml" || v == "lsq", ErrorCode::config, "objective must be ml or lsq");
    o.objective = v == "ml" ? Objective::ml : Objective::lsq;
  }
  require(o.max_iter >= 1 && o.window >= 1 && o.discrepancy_factor >= 0.0 &&
              o.joint_discrepancy_factor >= 0.0,
          ErrorCode::config, "invalid reconstruct options");
  return o;
}

inline json to_json(const ReconstructionResult& r) {
  return {{"kind", "reconstruction"},
          {"statistics", to_json(r.statistics)},
          {"log_likelihood", r.log_likelihood},
          {"deviance", r.deviance},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"truncation_warning", r.truncation_warning}};
}

inline json to_json(const JointReconstructionResult& r) {
  return {{"kind", "joint_reconstruction"},
          {"statistics", to_json(r.statistics)},
          {"log_likelihood", r.log_likelihood},
          {"deviance", r.deviance},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"truncation_warning", r.truncation_warning}};
}

// ---------------------------------------------------------------------------
// Frames and events

/// Binary PGM, maxval 65535, big-endian samples.
inline std::string encode_pgm(const Frame& f) {
  std::string out = "P5\n" + std::to_string(f.width) + " " + std::to_string(f.height) + "\n65535\n";
  out.reserve(out.size() + f.pixels.size() * 2);
  for (std::uint16_t v : f.pixels) {
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xff));
  }
  return out;
}

inline Frame decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  require(token() == "P5", ErrorCode::schema, "not a binary PGM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    fail(ErrorCode::schema, "malformed PGM header");
  }
  require(w > 0 && h > 0 && maxval > 0 && maxval <= 65535, ErrorCode::schema, "unsupported PGM header");
  ++pos;  // single whitespace before the raster
  const std::size_t bpp = maxval > 255 ? 2 : 1;
  require(bytes.size() >= pos + static_cast<std::size_t>(w) * h * bpp, ErrorCode::schema, "truncated PGM raster");
  Frame f(w, h);
  for (std::size_t i = 0; i < f.pixels.size(); ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * bpp);
    f.pixels[i] = bpp == 2 ? static_cast<std::uint16_t>((p[0] << 8) | p[1]) : p[0];
  }
  return f;
}

inline std::string frame_filename(std::uint64_t index, int digits = 6) {
  std::ostringstream ss;
  ss << "frame_" << std::setw(digits) << std::setfill('0') << index << ".pgm";
  return ss.str();
}

inline void append_events_csv(std::string& out, std::uint64_t frame_id, const FrameEvents& events) {
  char buf[96];
  for (const Event& e : events) {
    std::snprintf(buf, sizeof buf, "%llu,%.6f,%.6f\n", static_cast<unsigned long long>(frame_id), e.x, e.y);
    out += buf;
  }
}

inline std::string encode_events_csv(const EventList& events, std::uint64_t first_frame = 0) {
  std::string out = "frame_id,x,y\n";
  for (std::size_t i = 0; i < events.size(); ++i) append_events_csv(out, first_frame + i, events[i]);
  return out;
}

/// Parses frame_id,x,y rows. Frames without events produce empty entries up
/// to `n_frames` (or the largest id seen when n_frames is 0).
inline EventList decode_events_csv(const std::string& text, std::size_t n_frames = 0) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorCode::schema, "empty events file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "frame_id,x,y", ErrorCode::schema, "events CSV header must be frame_id,x,y");
  EventList out(n_frames);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    unsigned long long id = 0;
    double x = 0, y = 0;
    require(std::sscanf(line.c_str(), "%llu,%lf,%lf", &id, &x, &y) == 3, ErrorCode::schema,
            "malformed events CSV line " + std::to_string(lineno));
    if (id >= out.size()) {
      require(n_frames == 0, ErrorCode::schema, "event frame_id beyond declared frame count");
      out.resize(id + 1);
    }
    out[id].push_back({x, y});
  }
  return out;
}

}  // namespace pnrcam::io
