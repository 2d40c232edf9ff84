#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "pnrcam/camera_sim.hpp"
#include "pnrcam/io.hpp"
#include "pnrcam/reconstruct.hpp"
#include "pnrcam/spot_detect.hpp"
#include "pnrcam/stats.hpp"
#include "pnrcam/tiling.hpp"
#include "pnrcam/tomography.hpp"

namespace pnrcam {

struct ProbeDesign {
  /// Explicit probe means in photoelectrons; generated from k_scale when empty.
  std::vector<double> means;
  /// Expected saturation event count used to place the default probes.
  double k_scale = 0.0;
  int count = 8;
  std::size_t frames = 10000;
  /// Tile calibrated by `calibrate --simulate`.
  int tile = 0;
};

struct PipelineConfig {
  DetectorConfig detector;
  SourceSpec source;
  TileGrid grid;
  std::vector<TilePair> pairs;
  DetectParams detect;
  EventSimOptions events;
  ProbeDesign probes;
  TomographyOptions tomography;
  ReconstructOptions reconstruct;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  std::size_t frames = 1000;
};

namespace io {

inline json to_json(const PipelineConfig& c) {
  json pairs = json::array();
  for (const auto& [a, b] : c.pairs) pairs.push_back({a, b});
  return {{"detector", to_json(c.detector)},
          {"source", to_json(c.source)},
          {"grid", to_json(c.grid)},
          {"pairs", pairs},
          {"detect", to_json(c.detect)},
          {"events", to_json(c.events)},
          {"probes",
           {{"means", c.probes.means},
            {"k_scale", c.probes.k_scale},
            {"count", c.probes.count},
            {"frames", c.probes.frames},
            {"tile", c.probes.tile}}},
          {"tomography", to_json(c.tomography)},
          {"reconstruct", to_json(c.reconstruct)},
          {"output_dir", c.output_dir},
          {"seed", c.seed},
          {"frames", c.frames}};
}

inline PipelineConfig pipeline_from_json(const json& j) {
  detail::only_keys(j,
                    {"detector", "source", "grid", "pairs", "detect", "events", "probes", "tomography", "reconstruct",
                     "output_dir", "seed", "frames"},
                    "config");
  PipelineConfig c;
  if (j.contains("detector")) c.detector = detector_from_json(j["detector"]);
  if (j.contains("source")) c.source = source_from_json(j["source"]);
  if (j.contains("grid")) c.grid = grid_from_json(j["grid"]);
  if (j.contains("pairs"))
    for (const auto& p : detail::get<std::vector<std::vector<int>>>(j, "pairs", ErrorCode::config)) {
      require(p.size() == 2, ErrorCode::config, "each pair must list two tile indices");
      c.pairs.emplace_back(p[0], p[1]);
    }
  if (j.contains("detect")) c.detect = detect_from_json(j["detect"]);
  if (j.contains("events")) c.events = events_from_json(j["events"]);
  if (j.contains("probes")) {
    const json& p = j["probes"];
    detail::only_keys(p, {"means", "k_scale", "count", "frames", "tile"}, "probes");
    detail::get_opt(p, "means", c.probes.means);
    detail::get_opt(p, "k_scale", c.probes.k_scale);
    detail::get_opt(p, "count", c.probes.count);
    detail::get_opt(p, "frames", c.probes.frames);
    detail::get_opt(p, "tile", c.probes.tile);
  }
  if (j.contains("tomography")) c.tomography = tomography_from_json(j["tomography"]);
  if (j.contains("reconstruct")) c.reconstruct = reconstruct_from_json(j["reconstruct"]);
  detail::get_opt(j, "output_dir", c.output_dir);
  detail::get_opt(j, "seed", c.seed);
  detail::get_opt(j, "frames", c.frames);
  return c;
}

}  // namespace io

/// One tile under coherent light at 9.3 photoelectrons. Through rendering and
/// spot detection the 40x34 px region behaves like about 12 on-off cells.
inline PipelineConfig paper_like_config(std::uint64_t seed = 1) {
  PipelineConfig c;
  c.seed = seed;
  c.detector.rng_seed = seed;
  const Rect region{12, 14, 40, 34};
  c.source = SourceSpec::coherent({9.3 / c.detector.quantum_efficiency}, {region});
  c.grid = {region.x, region.y, region.width, region.height, 1, 1};
  c.probes.k_scale = 12;
  return c;
}

/// Photoelectron statistics that beam region `region` receives from the source.
inline PhotonStatistics source_marginal(const SourceSpec& src, double eta, std::size_t region, int n_max) {
  std::vector<double> acc(static_cast<std::size_t>(n_max) + 1, 0.0);
  auto add = [&](double weight, const std::vector<double>& means) {
    require(region < means.size(), ErrorCode::invalid_argument, "source has no beam region " + std::to_string(region));
    const std::vector<double> p = pnrcam::detail::poisson_terms(eta * means[region], n_max);
    for (std::size_t n = 0; n < acc.size(); ++n) acc[n] += weight * p[n];
  };
  if (src.kind == SourceKind::coherent) {
    add(1.0, src.means);
  } else {
    for (const auto& b : src.mixture_branches) add(b.weight, b.means);
  }
  return PhotonStatistics::normalized(std::move(acc));
}

/// Joint photoelectron statistics of two beam regions. Regions are independent
/// within a branch; branches are shared.
inline JointStatistics source_joint(const SourceSpec& src, double eta, std::size_t r1, std::size_t r2, int n_max1,
                                    int n_max2) {
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n_max1 + 1, n_max2 + 1);
  auto add = [&](double weight, const std::vector<double>& means) {
    require(r1 < means.size() && r2 < means.size(), ErrorCode::invalid_argument, "source lacks a requested beam region");
    const std::vector<double> a = pnrcam::detail::poisson_terms(eta * means[r1], n_max1);
    const std::vector<double> b = pnrcam::detail::poisson_terms(eta * means[r2], n_max2);
    acc += weight * Eigen::Map<const Eigen::VectorXd>(a.data(), n_max1 + 1) *
           Eigen::Map<const Eigen::VectorXd>(b.data(), n_max2 + 1).transpose();
  };
  if (src.kind == SourceKind::coherent) {
    add(1.0, src.means);
  } else {
    for (const auto& b : src.mixture_branches) add(b.weight, b.means);
  }
  return JointStatistics::normalized(acc);
}

// ---------------------------------------------------------------------------
// Calibration by simulation

/// Simulates coherent probes on one beam region and returns their event histograms.
inline ProbeEnsemble simulate_probes(const DetectorConfig& detector, const Rect& region, const std::vector<double>& means,
                                     std::size_t frames, const EventSimOptions& events, unsigned threads = 1) {
  ProbeEnsemble ens;
  TileGrid grid{region.x, region.y, region.width, region.height, 1, 1};
  for (std::size_t j = 0; j < means.size(); ++j) {
    DetectorConfig cfg = detector;
    cfg.rng_seed = derive_seed(detector.rng_seed, 0x70726f6265ULL + j);
    const SourceSpec src = SourceSpec::coherent({means[j] / cfg.quantum_efficiency}, {region});
    const TileCounts tc = accumulate(simulate_events(cfg, src, frames, events, threads), grid, {}, threads);
    ens.probes.push_back({means[j], tc.singles[0]});
  }
  return ens;
}

/// Like simulate_probes but through pixel rendering and spot detection.
inline ProbeEnsemble simulate_probes_rendered(const DetectorConfig& detector, const Rect& region,
                                              const std::vector<double>& means, std::size_t frames,
                                              const DetectParams& detect, unsigned threads = 1) {
  ProbeEnsemble ens;
  TileGrid grid{region.x, region.y, region.width, region.height, 1, 1};
  constexpr std::size_t kChunk = 1024;
  for (std::size_t j = 0; j < means.size(); ++j) {
    DetectorConfig cfg = detector;
    cfg.rng_seed = derive_seed(detector.rng_seed, 0x70726f6265ULL + j);
    const SourceSpec src = SourceSpec::coherent({means[j] / cfg.quantum_efficiency}, {region});
    TileAccumulator acc(grid, {});
    for (std::size_t first = 0; first < frames; first += kChunk) {
      const std::size_t n = std::min(kChunk, frames - first);
      for (const DetectionResult& r : detect_frames(simulate_frames(cfg, src, n, threads, first), detect, threads))
        acc.add_frame(r.events);
    }
    ens.probes.push_back({means[j], std::move(acc).take().singles[0]});
  }
  return ens;
}

/// Tomography on a probe ensemble with n_max and k_max chosen from the data.
inline ResponseMatrix calibrate_from_probes(const ProbeEnsemble& probes, const TomographyOptions& opts) {
  const int n_max = default_n_max(probes.max_mean());
  const int k_max = choose_k_max(probes);
  return calibrate_tile(probes, n_max, k_max, opts).response;
}

// ---------------------------------------------------------------------------
// Scaled reproduction experiments

struct ReproduceOptions {
  std::uint64_t seed = 1;
  unsigned threads = 0;
  std::size_t frames = 100000;
  std::size_t probe_frames = 100000;
  /// Probes per calibrated tile; denser than the library default to tighten
  /// the response at intermediate intensities.
  int probe_count = 16;
};

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct ExperimentReport {
  std::string name;
  std::string csv;
  io::json summary;
  std::vector<Check> checks;

  bool pass() const {
    for (const auto& c : checks)
      if (!c.pass) return false;
    return true;
  }
};

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline io::json checks_json(const std::vector<Check>& checks) {
  io::json out = io::json::array();
  for (const auto& c : checks) out.push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  return out;
}

}  // namespace detail

/// Square lattice of merge cells: cols x rows cells of pitch `pitch` at (x, y).
inline Rect cell_block(double x, double y, int cols, int rows, double pitch = 3.0) {
  return {x, y, cols * pitch, rows * pitch};
}

inline DetectorConfig reproduce_detector(std::uint64_t seed, double dark_rate) {
  DetectorConfig cfg;
  cfg.quantum_efficiency = 0.2;
  cfg.sensor_width = 64;
  cfg.sensor_height = 64;
  cfg.dark_count_rate = dark_rate;
  cfg.rng_seed = seed;
  return cfg;
}

/// Mean-event saturation curve of a 12-cell tile and its on-off fit.
inline ExperimentReport reproduce_fig2(const ReproduceOptions& o) {
  const DetectorConfig cfg = reproduce_detector(derive_seed(o.seed, 2), 0.0);
  const Rect region = cell_block(0, 0, 4, 3);
  const int cells = lattice_cells(region, 3.0);
  const std::vector<double> lambdas = default_probe_means(cells, 16);
  TileGrid grid{region.x, region.y, region.width, region.height, 1, 1};

  std::vector<std::pair<double, double>> points;
  std::vector<Moments> stats;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    DetectorConfig c = cfg;
    c.rng_seed = derive_seed(cfg.rng_seed, i);
    const SourceSpec src = SourceSpec::coherent({lambdas[i] / cfg.quantum_efficiency}, {region});
    const TileCounts tc = accumulate(simulate_events(c, src, o.frames, {}, o.threads), grid, {}, o.threads);
    stats.push_back(moments(tc.singles[0]));
    points.emplace_back(lambdas[i] / cfg.quantum_efficiency, stats.back().mean);
  }
  const OnOffFit fit = fit_onoff_model(points);

  ExperimentReport rep;
  rep.name = "fig2";
  rep.csv = "mean_photons,mean_photoelectrons,mean_events,var_events,second_moment_events,model_mean,rel_dev\n";
  double worst = 0.0;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const double model = mean_events_model(fit.N, fit.alpha * points[i].first);
    const double dev = std::abs(stats[i].mean - model) / model;
    if (lambdas[i] <= 2.0 * cells) worst = std::max(worst, dev);
    rep.csv += detail::fmt(points[i].first) + "," + detail::fmt(lambdas[i]) + "," + detail::fmt(stats[i].mean) + "," +
               detail::fmt(stats[i].variance) + "," +
               detail::fmt(stats[i].variance + stats[i].mean * stats[i].mean) + "," + detail::fmt(model) + "," +
               detail::fmt(dev) + "\n";
  }
  rep.checks.push_back({"fitted N within 5% of cell count", std::abs(fit.N - cells) <= 0.05 * cells,
                        "N=" + detail::fmt(fit.N) + " cells=" + std::to_string(cells)});
  rep.checks.push_back({"mean events within 2% of model for <n> <= 2N", worst <= 0.02, "max rel dev=" + detail::fmt(worst)});
  rep.summary = {{"experiment", "fig2"},
                 {"cells", cells},
                 {"fit", {{"N", fit.N}, {"alpha", fit.alpha}, {"residual", fit.residual}}},
                 {"checks", detail::checks_json(rep.checks)}};
  return rep;
}

/// Coherent-state reconstruction on a calibrated 12-cell tile across intensities.
inline ExperimentReport reproduce_fig3(const ReproduceOptions& o) {
  const DetectorConfig cfg = reproduce_detector(derive_seed(o.seed, 3), 6e-6);
  const Rect region = cell_block(0, 0, 4, 3);
  const int cells = lattice_cells(region, 3.0);
  const ResponseMatrix pi = calibrate_from_probes(
      simulate_probes(cfg, region, default_probe_means(cells, o.probe_count), o.probe_frames, {}, o.threads), {});
  TileGrid grid{region.x, region.y, region.width, region.height, 1, 1};
  const std::vector<double> sweep{0.5, 1, 2, 4, 6, 8, 9.3, 10, 12, 15, 18};

  ExperimentReport rep;
  rep.name = "fig3";
  rep.csv = "mean_photoelectrons,n_over_N,mean_events,Q_F,Q_M,fidelity,iterations,converged\n";
  bool qf_negative = true, fid_ok = true;
  double q_m_ref = 0.0, q_f_ref = 0.0, f_ref = 0.0;
  io::json points = io::json::array();
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    DetectorConfig c = cfg;
    c.rng_seed = derive_seed(cfg.rng_seed, 100 + i);
    const SourceSpec src = SourceSpec::coherent({sweep[i] / cfg.quantum_efficiency}, {region});
    const TileCounts tc = accumulate(simulate_events(c, src, o.frames, {}, o.threads), grid, {}, o.threads);
    const CountHistogram& h = tc.singles[0];
    const ReconstructionResult rec = reconstruct_single(h, pi, {});
    const PhotonStatistics truth = PhotonStatistics::normalized(pnrcam::detail::poisson_terms(sweep[i], pi.n_max()));
    const double qf = mandel_q(h), qm = mandel_q(rec.statistics), f = fidelity(rec.statistics, truth);
    if (sweep[i] <= cells) {
      qf_negative = qf_negative && qf < 0.0;
      fid_ok = fid_ok && f > 0.99;
    }
    if (sweep[i] == 9.3) {
      q_m_ref = qm;
      q_f_ref = qf;
      f_ref = f;
    }
    rep.csv += detail::fmt(sweep[i]) + "," + detail::fmt(sweep[i] / cells) + "," + detail::fmt(moments(h).mean) + "," +
               detail::fmt(qf) + "," + detail::fmt(qm) + "," + detail::fmt(f) + "," + std::to_string(rec.iterations) +
               "," + (rec.converged ? "1" : "0") + "\n";
  }
  rep.checks.push_back({"fidelity > 0.99 at <n>=9.3", f_ref > 0.99, "F=" + detail::fmt(f_ref)});
  rep.checks.push_back({"Q_M within [-0.1, 0.1] at <n>=9.3", q_m_ref >= -0.1 && q_m_ref <= 0.1, "Q_M=" + detail::fmt(q_m_ref)});
  rep.checks.push_back({"raw Q_F <= -0.3 at <n>=9.3", q_f_ref <= -0.3, "Q_F=" + detail::fmt(q_f_ref)});
  rep.checks.push_back({"Q_F < 0 for every <n> <= N", qf_negative, ""});
  rep.checks.push_back({"fidelity > 0.99 for every <n> <= N", fid_ok, ""});
  rep.summary = {{"experiment", "fig3"},
                 {"cells", cells},
                 {"n_sat", pi.n_sat ? io::json(*pi.n_sat) : io::json(nullptr)},
                 {"checks", detail::checks_json(rep.checks)}};
  return rep;
}

/// Two-tile geometry used by the switched-mixture experiments.
inline MixtureExperiment reproduce_mixture_setup(std::uint64_t seed) {
  MixtureExperiment exp;
  exp.detector = reproduce_detector(seed, 6e-6);
  exp.regions = {cell_block(0, 0, 5, 1), cell_block(15, 0, 3, 2)};
  exp.grid = {0, 0, 15, 6, 2, 1};
  return exp;
}

struct MixtureCalibration {
  ResponseMatrix pi1;
  ResponseMatrix pi2;
};

inline MixtureCalibration calibrate_mixture_tiles(const MixtureExperiment& exp, std::size_t probe_frames, int probe_count,
                                                  unsigned threads) {
  auto one = [&](int t) {
    DetectorConfig cfg = exp.detector;
    cfg.rng_seed = derive_seed(exp.detector.rng_seed, 0x63616c ^ static_cast<std::uint64_t>(t));
    const Rect& r = exp.regions[static_cast<std::size_t>(t)];
    return calibrate_from_probes(
        simulate_probes(cfg, r, default_probe_means(lattice_cells(r, exp.events.merge_radius), probe_count), probe_frames, exp.events,
                        threads),
        {});
  };
  return {one(0), one(1)};
}

/// Switched-mixture headline point and sweep at a fixed base mean.
inline ExperimentReport reproduce_fig5(const ReproduceOptions& o) {
  MixtureExperiment exp = reproduce_mixture_setup(derive_seed(o.seed, 5));
  const MixtureCalibration cal = calibrate_mixture_tiles(exp, o.probe_frames, o.probe_count, o.threads);

  MixtureExperiment head = exp;
  head.detector.rng_seed = derive_seed(exp.detector.rng_seed, 0x68656164);
  const MixtureRow h = sweep_mixture_metrics(cal.pi1, cal.pi2, head, 2.0, {3.7}, o.frames, o.threads).front();
  const std::vector<double> sweep{0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.4, 5.6, 7.0};
  const std::vector<MixtureRow> rows = sweep_mixture_metrics(cal.pi1, cal.pi2, exp, 4.4, sweep, o.frames, o.threads);

  const int cells1 = lattice_cells(exp.regions[0], exp.events.merge_radius);
  const int cells2 = lattice_cells(exp.regions[1], exp.events.merge_radius);

  ExperimentReport rep;
  rep.name = "fig5";
  rep.csv = "scenario,n1,n1_switched,mean_over_N1,Q_F,Q_M,R_raw,R_rec,fidelity_joint,fidelity_marginal,iterations,converged\n";
  auto line = [&](const std::string& scenario, double n1, const MixtureRow& r) {
    rep.csv += scenario + "," + detail::fmt(n1) + "," + detail::fmt(r.n1_switched) + "," +
               detail::fmt(0.5 * (n1 + r.n1_switched) / cells1) + "," + detail::fmt(r.q_raw) + "," +
               detail::fmt(r.q_rec) + "," + detail::fmt(r.r_raw) + "," + detail::fmt(r.r_rec) + "," +
               detail::fmt(r.fidelity_joint) + "," + detail::fmt(r.fidelity_marginal) + "," +
               std::to_string(r.iterations) + "," + (r.converged ? "1" : "0") + "\n";
  };
  line("headline", 2.0, h);
  for (const auto& r : rows) line("sweep", 4.4, r);

  bool r_raw_sub = true, qf_super = true, classical = true, in_range_ok = true;
  double worst_in_range = 1.0;
  for (const auto& r : rows) {
    r_raw_sub = r_raw_sub && r.r_raw < 1.0;
    if (r.n1_switched < 1.5) qf_super = qf_super && r.q_raw > 0.0;
    classical = classical && r.q_rec >= -0.05 && r.r_rec >= 0.95;
    if (0.5 * (4.4 + r.n1_switched) <= cells1) {
      in_range_ok = in_range_ok && r.fidelity_joint > 0.99 && r.q_rec >= -0.05 && r.r_rec >= 0.95;
      worst_in_range = std::min(worst_in_range, r.fidelity_joint);
    }
  }
  rep.checks.push_back({"headline R_raw <= 0.9", h.r_raw <= 0.9, "R_raw=" + detail::fmt(h.r_raw)});
  rep.checks.push_back({"headline R_rec within 1 +/- 0.05", std::abs(h.r_rec - 1.0) <= 0.05, "R_rec=" + detail::fmt(h.r_rec)});
  rep.checks.push_back({"headline joint fidelity > 0.99", h.fidelity_joint > 0.99, "F=" + detail::fmt(h.fidelity_joint)});
  rep.checks.push_back({"sweep R_raw < 1 everywhere", r_raw_sub, ""});
  rep.checks.push_back({"sweep Q_F > 0 below 1.5", qf_super, ""});
  rep.checks.push_back({"sweep reconstructed metrics classical", classical, ""});
  rep.checks.push_back({"sweep joint fidelity > 0.99 and classical up to one photoelectron per cell", in_range_ok,
                        "min F=" + detail::fmt(worst_in_range)});
  rep.summary = {{"experiment", "fig5"},
                 {"cells", {cells1, cells2}},
                 {"checks", detail::checks_json(rep.checks)}};
  return rep;
}

}  // namespace pnrcam
