// pnrcam: simulate -> detect -> tile -> calibrate -> reconstruct -> metrics,
// plus the scaled reproduction experiments.

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pnrcam/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pnrcam;
using io::json;

namespace {

enum Exit { kOk = 0, kFailed = 1, kConfig = 2, kSchema = 3, kNotConverged = 4 };

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::config:
    case ErrorCode::invalid_argument:
    case ErrorCode::beam_out_of_bounds:
    case ErrorCode::noise_estimate_invalid:
    case ErrorCode::empty_grid:
    case ErrorCode::io:
      return kConfig;
    case ErrorCode::schema:
    case ErrorCode::dimension_mismatch:
      return kSchema;
    case ErrorCode::not_converged:
      return kNotConverged;
    default:
      return kFailed;
  }
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  unsigned threads = 0;
  std::optional<std::size_t> frames;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "pipeline JSON config");
  app->add_option("--seed", c.seed, "root seed (overrides config)");
  app->add_option("--out", c.out, "output directory (overrides config)");
  app->add_option("--threads", c.threads, "worker threads, 0 = all cores");
  app->add_option("--frames", c.frames, "frame count (overrides config)");
}

// Resolved configuration: flags win over the file, the file wins over defaults.
struct Context {
  PipelineConfig cfg;
  std::uint64_t seed = 0;
  fs::path out;
  unsigned threads = 0;
  json config_digest;
};

Context resolve(const Common& c) {
  Context ctx;
  if (c.config.empty()) {
    ctx.cfg = paper_like_config();
    ctx.seed = ctx.cfg.seed;
  } else {
    json j;
    try {
      j = io::read_json(c.config);
    } catch (const Error& e) {
      fail(e.code() == ErrorCode::schema ? ErrorCode::config : e.code(), e.what());
    }
    ctx.cfg = io::pipeline_from_json(j);
    ctx.seed = j.contains("seed") ? ctx.cfg.seed : ctx.cfg.detector.rng_seed;
    ctx.config_digest = {{"path", c.config}, {"digest", io::file_digest(c.config)}};
  }
  if (c.seed) ctx.seed = *c.seed;
  ctx.cfg.seed = ctx.seed;
  ctx.cfg.detector.rng_seed = ctx.seed;
  if (c.frames) ctx.cfg.frames = *c.frames;
  if (!c.out.empty()) ctx.cfg.output_dir = c.out;
  ctx.out = ctx.cfg.output_dir;
  ctx.threads = c.threads;
  require(ctx.cfg.frames >= 1, ErrorCode::config, "frame count must be >= 1");
  ctx.cfg.detector.validate();
  return ctx;
}

// Run manifest: config, root seed, input and output digests.
class Manifest {
 public:
  Manifest(std::string stage, const Context& ctx) : out_(ctx.out) {
    j_ = {{"kind", "manifest"},
          {"stage", std::move(stage)},
          {"seed", ctx.seed},
          {"config", io::to_json(ctx.cfg)},
          {"inputs", json::array()},
          {"outputs", json::array()}};
    if (!ctx.config_digest.is_null()) j_["inputs"].push_back(ctx.config_digest);
  }
  void input(const fs::path& p) { j_["inputs"].push_back({{"path", p.string()}, {"digest", io::file_digest(p)}}); }
  void output(const fs::path& rel, const std::string& bytes) {
    io::atomic_write(out_ / rel, bytes);
    j_["outputs"].push_back({{"path", rel.generic_string()}, {"digest", io::fnv1a_hex(bytes)}});
  }
  void output_json(const fs::path& rel, const json& j) { output(rel, j.dump(2) + "\n"); }
  json& operator[](const char* key) { return j_[key]; }
  void write(const std::string& name = "manifest.json") { io::write_json(out_ / name, j_); }

 private:
  fs::path out_;
  json j_;
};

std::optional<json> sibling_manifest(const fs::path& file) {
  const fs::path m = file.parent_path() / "manifest.json";
  if (!fs::exists(m)) return std::nullopt;
  return io::read_json(m);
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Common& c, bool events_only) {
  Context ctx = resolve(c);
  const PipelineConfig& cfg = ctx.cfg;
  cfg.source.validate(cfg.detector);
  Manifest m("simulate", ctx);
  m["frames"] = cfg.frames;
  constexpr std::size_t kChunk = 512;
  if (events_only) {
    std::string csv = "frame_id,x,y\n";
    for (std::size_t first = 0; first < cfg.frames; first += kChunk) {
      const std::size_t n = std::min(kChunk, cfg.frames - first);
      const EventList ev = simulate_events(cfg.detector, cfg.source, n, cfg.events, ctx.threads, first);
      for (std::size_t i = 0; i < n; ++i) io::append_events_csv(csv, first + i, ev[i]);
    }
    m.output("events.csv", csv);
  } else {
    std::string truth = "frame_id,x,y\n";
    for (std::size_t first = 0; first < cfg.frames; first += kChunk) {
      const std::size_t n = std::min(kChunk, cfg.frames - first);
      std::vector<FrameTruth> truths;
      const std::vector<Frame> frames = simulate_frames(cfg.detector, cfg.source, n, ctx.threads, first, &truths);
      for (std::size_t i = 0; i < n; ++i) {
        m.output(fs::path("frames") / io::frame_filename(first + i), io::encode_pgm(frames[i]));
        io::append_events_csv(truth, first + i, truths[i].photoelectrons);
      }
    }
    m.output("truth_spots.csv", truth);
  }
  m.write();
  std::cout << "wrote " << cfg.frames << " frames to " << ctx.out.string() << "\n";
  return kOk;
}

int cmd_detect(const Common& c, const std::string& input) {
  Context ctx = resolve(c);
  const fs::path in_dir = input;
  const fs::path manifest_path = in_dir / "manifest.json";
  const json in_manifest = io::read_json(manifest_path);
  std::vector<fs::path> files;
  for (const json& o : io::detail::get<json>(in_manifest, "outputs")) {
    const auto p = io::detail::get<std::string>(o, "path");
    if (p.rfind("frames/", 0) == 0) files.push_back(in_dir / p);
  }
  require(!files.empty(), ErrorCode::config, "no frames listed in " + manifest_path.string());
  std::sort(files.begin(), files.end());

  Manifest m("detect", ctx);
  m.input(manifest_path);
  m["frames"] = files.size();
  std::string csv = "frame_id,x,y\n";
  json per_frame = json::array();
  std::size_t fallbacks = 0, degenerate = 0, spots = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t first = 0; first < files.size(); first += kChunk) {
    const std::size_t n = std::min(kChunk, files.size() - first);
    std::vector<Frame> frames;
    frames.reserve(n);
    for (std::size_t i = 0; i < n; ++i) frames.push_back(io::decode_pgm(io::read_file(files[first + i])));
    const std::vector<DetectionResult> res = detect_frames(frames, ctx.cfg.detect, ctx.threads);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = res[i];
      io::append_events_csv(csv, first + i, r.events);
      per_frame.push_back({{"frame_id", first + i},
                           {"spots", r.events.size()},
                           {"noise_sigma", r.diagnostics.noise_sigma},
                           {"fallbacks", r.diagnostics.fallbacks},
                           {"degenerate", r.diagnostics.degenerate}});
      fallbacks += r.diagnostics.fallbacks;
      degenerate += r.diagnostics.degenerate;
      spots += r.events.size();
    }
  }
  m.output("events.csv", csv);
  m.output_json("detect_diagnostics.json", {{"kind", "detect_diagnostics"},
                                            {"params", io::to_json(ctx.cfg.detect)},
                                            {"total_spots", spots},
                                            {"total_fallbacks", fallbacks},
                                            {"total_degenerate", degenerate},
                                            {"frames", per_frame}});
  m.write();
  std::cout << "detected " << spots << " events in " << files.size() << " frames\n";
  return kOk;
}

int cmd_tile(const Common& c, const std::string& events_path) {
  Context ctx = resolve(c);
  std::size_t n_frames = 0;
  if (c.frames) {
    n_frames = *c.frames;
  } else if (auto up = sibling_manifest(events_path); up && up->contains("frames")) {
    n_frames = io::detail::get<std::size_t>(*up, "frames");
  } else {
    fail(ErrorCode::config, "frame count unknown: pass --frames or keep the producer's manifest.json beside the events file");
  }
  const EventList events = io::decode_events_csv(io::read_file(events_path), n_frames);
  const TileCounts tc = accumulate(events, ctx.cfg.grid, ctx.cfg.pairs, ctx.threads);

  Manifest m("tile", ctx);
  m.input(events_path);
  m["frames"] = n_frames;
  json xt = json::array();
  if (tc.frames >= 100)
    for (const auto& p : tc.pairs) xt.push_back({{"tiles", {p.first, p.second}}, {"pearson", crosstalk_check(tc, p)}});
  m["crosstalk"] = xt;
  m.output_json("tile_counts.json", io::to_json(tc));
  m.write();
  std::cout << "tiled " << n_frames << " frames into " << tc.singles.size() << " tiles (" << tc.dropped_events
            << " events outside the grid)\n";
  return kOk;
}

ProbeEnsemble read_probe_manifest(const fs::path& path) {
  const json j = io::read_json(path);
  io::detail::expect_kind(j, "probe_manifest");
  ProbeEnsemble ens;
  for (const json& p : io::detail::get<json>(j, "probes")) {
    const double mean = io::detail::get<double>(p, "mean");
    const fs::path hist = path.parent_path() / io::detail::get<std::string>(p, "histogram");
    ens.probes.push_back({mean, io::count_hist_from_json(io::read_json(hist))});
  }
  return ens;
}

int cmd_calibrate(const Common& c, const std::string& probes_path, bool simulate, bool render) {
  Context ctx = resolve(c);
  const PipelineConfig& cfg = ctx.cfg;
  Manifest m("calibrate", ctx);
  ProbeEnsemble ens;
  if (simulate) {
    const Rect region = cfg.grid.tile_rect(cfg.probes.tile);
    std::vector<double> means = cfg.probes.means;
    if (means.empty()) {
      const double scale = cfg.probes.k_scale > 0 ? cfg.probes.k_scale : lattice_cells(region, cfg.events.merge_radius);
      means = default_probe_means(scale, cfg.probes.count);
    }
    const std::size_t frames = c.frames ? *c.frames : cfg.probes.frames;
    ens = render ? simulate_probes_rendered(cfg.detector, region, means, frames, cfg.detect, ctx.threads)
                 : simulate_probes(cfg.detector, region, means, frames, cfg.events, ctx.threads);
    json list = json::array();
    for (std::size_t j = 0; j < ens.probes.size(); ++j) {
      char name[32];
      std::snprintf(name, sizeof name, "probe_%02zu.json", j);
      m.output_json(fs::path("probes") / name, io::to_json(ens.probes[j].histogram));
      list.push_back({{"mean", ens.probes[j].mean}, {"histogram", name}});
    }
    m.output_json("probes/probes.json", {{"kind", "probe_manifest"}, {"frames", frames}, {"probes", list}});
  } else {
    require(!probes_path.empty(), ErrorCode::config, "calibrate needs --probes FILE or --simulate");
    m.input(probes_path);
    ens = read_probe_manifest(probes_path);
  }
  const ResponseMatrix r = calibrate_from_probes(ens, cfg.tomography);
  m.output_json("response.json", io::to_json(r));
  m.write();
  std::cout << "response matrix k_max=" << r.k_max() << " n_max=" << r.n_max()
            << " n_sat=" << (r.n_sat ? std::to_string(*r.n_sat) : "none");
  if (r.fit) std::cout << " N=" << r.fit->N;
  std::cout << "\n";
  return r.info.converged ? kOk : kNotConverged;
}

struct CountsInput {
  std::optional<TileCounts> tiles;
  std::optional<CountHistogram> single;
  std::optional<JointCountHistogram> joint;
};

CountsInput read_counts(const fs::path& path) {
  const json j = io::read_json(path);
  const std::string kind = j.is_object() && j.contains("kind") && j["kind"].is_string() ? j["kind"].get<std::string>() : "";
  CountsInput in;
  if (kind == "tile_counts") in.tiles = io::tile_counts_from_json(j);
  else if (kind == "count_hist") in.single = io::count_hist_from_json(j);
  else if (kind == "joint_count_hist") in.joint = io::joint_count_hist_from_json(j);
  else fail(ErrorCode::schema, path.string() + ": expected tile_counts, count_hist or joint_count_hist");
  return in;
}

CountHistogram pick_single(const CountsInput& in, int tile) {
  if (in.single) return *in.single;
  require(in.tiles.has_value(), ErrorCode::config, "single-tile reconstruction needs a count_hist or tile_counts input");
  require(tile >= 0 && static_cast<std::size_t>(tile) < in.tiles->singles.size(), ErrorCode::config,
          "tile index out of range");
  return in.tiles->singles[static_cast<std::size_t>(tile)];
}

JointCountHistogram pick_joint(const CountsInput& in, const std::vector<int>& pair) {
  if (in.joint) return *in.joint;
  require(in.tiles.has_value(), ErrorCode::config, "joint reconstruction needs a joint_count_hist or tile_counts input");
  return in.tiles->joint({pair[0], pair[1]});
}

json moments_json(const Moments& mo) { return {{"mean", mo.mean}, {"variance", mo.variance}}; }

int cmd_reconstruct(const Common& c, const std::string& counts_path, const std::string& response_path,
                    const std::string& response2_path, int tile, const std::vector<int>& pair, int bootstrap) {
  Context ctx = resolve(c);
  const CountsInput in = read_counts(counts_path);
  const ResponseMatrix r1 = io::response_from_json(io::read_json(response_path));
  Manifest m("reconstruct", ctx);
  m.input(counts_path);
  m.input(response_path);
  const ReconstructOptions& opts = ctx.cfg.reconstruct;
  bool converged = true;
  if (pair.empty() && !in.joint) {
    const CountHistogram h = pick_single(in, tile);
    const ReconstructionResult res = reconstruct_single(h, r1, opts);
    converged = res.converged;
    m.output_json("reconstruction.json", io::to_json(res));
    if (bootstrap > 0) {
      json reps = json::array();
      for (int b = 0; b < bootstrap; ++b) {
        Engine rng = make_engine(derive_seed(ctx.seed, 0x626f6f74), static_cast<std::uint64_t>(b));
        const ReconstructionResult rb = reconstruct_single(bootstrap_resample(h, rng), r1, opts);
        const Moments mo = moments(rb.statistics);
        reps.push_back({{"moments", moments_json(mo)}, {"Q", mo.mean > 0 ? json(mandel_q(rb.statistics)) : json(nullptr)}});
      }
      m.output_json("bootstrap.json", {{"kind", "bootstrap"}, {"replicates", reps}});
    }
  } else {
    require(!response2_path.empty(), ErrorCode::config, "joint reconstruction needs --response2");
    require(in.joint || pair.size() == 2, ErrorCode::config, "--pair takes two tile indices");
    const ResponseMatrix r2 = io::response_from_json(io::read_json(response2_path));
    m.input(response2_path);
    const JointCountHistogram h = pick_joint(in, pair);
    const JointReconstructionResult res = reconstruct_joint(h, r1, r2, opts);
    converged = res.converged;
    m.output_json("reconstruction.json", io::to_json(res));
    if (bootstrap > 0) {
      json reps = json::array();
      for (int b = 0; b < bootstrap; ++b) {
        Engine rng = make_engine(derive_seed(ctx.seed, 0x626f6f74), static_cast<std::uint64_t>(b));
        const JointReconstructionResult rb = reconstruct_joint(bootstrap_resample(h, rng), r1, r2, opts);
        reps.push_back({{"R", fano_r(rb.statistics)}});
      }
      m.output_json("bootstrap.json", {{"kind", "bootstrap"}, {"replicates", reps}});
    }
  }
  m.write();
  std::cout << (converged ? "reconstruction converged\n" : "reconstruction hit the iteration cap\n");
  return converged ? kOk : kNotConverged;
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

int cmd_metrics(const Common& c, const std::string& counts_path, const std::string& rec_path, int tile,
                const std::vector<int>& pair, const std::vector<int>& regions, const std::string& scenario) {
  Context ctx = resolve(c);
  const CountsInput in = read_counts(counts_path);
  const json rec = io::read_json(rec_path);
  const std::string kind = io::detail::get<std::string>(rec, "kind");
  const bool joint = kind == "joint_reconstruction";
  require(joint || kind == "reconstruction", ErrorCode::schema, rec_path + ": not a reconstruction result");
  const int iterations = io::detail::get<int>(rec, "iterations");
  const bool converged = io::detail::get<bool>(rec, "converged");
  const bool has_source = !ctx.cfg.source.beam_regions.empty();
  const double eta = ctx.cfg.detector.quantum_efficiency;

  std::string row = scenario + ",";
  if (joint) {
    const JointStatistics f = io::joint_stats_from_json(rec.at("statistics"));
    const JointCountHistogram h = pick_joint(in, pair.empty() ? std::vector<int>{0, 1} : pair);
    row += num(mandel_q(h.marginal1())) + "," + num(mandel_q(f.marginal1())) + "," + num(fano_r(h)) + "," +
           num(fano_r(f)) + ",";
    if (has_source) {
      const std::size_t a = regions.size() > 0 ? static_cast<std::size_t>(regions[0]) : 0;
      const std::size_t b = regions.size() > 1 ? static_cast<std::size_t>(regions[1]) : 1;
      row += num(fidelity(f, source_joint(ctx.cfg.source, eta, a, b, f.n_max1(), f.n_max2())));
    }
  } else {
    const PhotonStatistics f = io::photon_stats_from_json(rec.at("statistics"));
    const CountHistogram h = pick_single(in, tile);
    row += num(mandel_q(h)) + "," + num(mandel_q(f)) + ",,,";
    if (has_source) {
      const std::size_t a = regions.empty() ? static_cast<std::size_t>(tile) : static_cast<std::size_t>(regions[0]);
      row += num(fidelity(f, source_marginal(ctx.cfg.source, eta, a, f.n_max())));
    }
  }
  row += "," + std::to_string(iterations) + "," + (converged ? "1" : "0") + "\n";

  Manifest m("metrics", ctx);
  m.input(counts_path);
  m.input(rec_path);
  const std::string csv = "scenario,Q_F,Q_M,R_raw,R_rec,fidelity,iterations,converged\n" + row;
  m.output("metrics.csv", csv);
  m.write("metrics_manifest.json");
  std::cout << csv;
  return kOk;
}

int cmd_reproduce(const Common& c, const std::string& figure, std::optional<std::size_t> probe_frames) {
  ReproduceOptions o;
  if (c.seed) o.seed = *c.seed;
  if (c.frames) o.frames = o.probe_frames = *c.frames;
  require(o.frames >= 1, ErrorCode::config, "frame count must be >= 1");
  if (probe_frames) o.probe_frames = *probe_frames;
  o.threads = c.threads;
  ExperimentReport rep;
  if (figure == "fig2") rep = reproduce_fig2(o);
  else if (figure == "fig3") rep = reproduce_fig3(o);
  else if (figure == "fig5") rep = reproduce_fig5(o);
  else fail(ErrorCode::config, "unknown figure '" + figure + "' (expected fig2, fig3 or fig5)");

  const fs::path out = c.out.empty() ? fs::path("out") : fs::path(c.out);
  rep.summary["seed"] = o.seed;
  rep.summary["frames"] = o.frames;
  rep.summary["probe_frames"] = o.probe_frames;
  rep.summary["pass"] = rep.pass();
  io::atomic_write(out / (figure + ".csv"), rep.csv);
  io::write_json(out / (figure + "_summary.json"), rep.summary);
  for (const auto& chk : rep.checks)
    std::cout << (chk.pass ? "PASS " : "FAIL ") << figure << ": " << chk.name << (chk.detail.empty() ? "" : " (")
              << chk.detail << (chk.detail.empty() ? "" : ")") << "\n";
  return rep.pass() ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Photon-number-resolving camera toolkit"};
  app.require_subcommand(1);

  Common common;
  bool events_only = false;
  auto* sim = app.add_subcommand("simulate", "render frames or event lists from the configured source");
  add_common(sim, common);
  sim->add_flag("--events-only", events_only, "skip pixel rendering and write events.csv");

  std::string input;
  auto* det = app.add_subcommand("detect", "extract photo-events from simulated frames");
  add_common(det, common);
  det->add_option("--input", input, "directory holding a simulate manifest")->required();

  std::string events_path;
  auto* tile = app.add_subcommand("tile", "accumulate per-tile and joint histograms");
  add_common(tile, common);
  tile->add_option("--events", events_path, "events CSV")->required();

  std::string probes_path;
  bool simulate_probes_flag = false, render_probes = false;
  auto* cal = app.add_subcommand("calibrate", "detector tomography of one tile");
  add_common(cal, common);
  auto* probes_opt = cal->add_option("--probes", probes_path, "probe manifest JSON");
  auto* sim_flag =
      cal->add_flag("--simulate", simulate_probes_flag, "simulate coherent probes on the configured tile")->excludes(probes_opt);
  cal->add_flag("--render", render_probes, "render and detect probe frames instead of the event-level path")->needs(sim_flag);

  std::string counts_path, response_path, response2_path, rec_path, scenario = "run";
  int tile_index = 0, bootstrap = 0;
  std::vector<int> pair, regions;
  auto* rec = app.add_subcommand("reconstruct", "recover photon statistics from event histograms");
  add_common(rec, common);
  rec->add_option("--counts", counts_path, "tile_counts, count_hist or joint_count_hist JSON")->required();
  rec->add_option("--response", response_path, "response matrix of the (first) tile")->required();
  rec->add_option("--response2", response2_path, "response matrix of the second tile");
  rec->add_option("--tile", tile_index, "tile index for single-mode reconstruction");
  rec->add_option("--pair", pair, "two tile indices for joint reconstruction")->expected(2);
  rec->add_option("--bootstrap", bootstrap, "frame-resampled replicates to write");

  auto* met = app.add_subcommand("metrics", "raw and reconstructed metrics as CSV");
  add_common(met, common);
  met->add_option("--counts", counts_path, "histogram input used for the reconstruction")->required();
  met->add_option("--reconstruction", rec_path, "reconstruction JSON")->required();
  met->add_option("--tile", tile_index, "tile index");
  met->add_option("--pair", pair, "tile pair")->expected(2);
  met->add_option("--region", regions, "source beam regions feeding the tile(s), for fidelity")->expected(1, 2);
  met->add_option("--scenario", scenario, "scenario label");

  std::string figure;
  std::optional<std::size_t> probe_frames;
  auto* rep = app.add_subcommand("reproduce", "scaled synthetic versions of the published experiments");
  add_common(rep, common);
  rep->add_option("figure", figure, "fig2, fig3 or fig5")->required();
  rep->add_option("--probe-frames", probe_frames, "frames per calibration probe (defaults to --frames)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*sim) return cmd_simulate(common, events_only);
    if (*det) return cmd_detect(common, input);
    if (*tile) return cmd_tile(common, events_path);
    if (*cal) return cmd_calibrate(common, probes_path, simulate_probes_flag, render_probes);
    if (*rec) return cmd_reconstruct(common, counts_path, response_path, response2_path, tile_index, pair, bootstrap);
    if (*met) return cmd_metrics(common, counts_path, rec_path, tile_index, pair, regions, scenario);
    if (*rep) return cmd_reproduce(common, figure, probe_frames);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const io::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kSchema;
  }
  return kFailed;
}
