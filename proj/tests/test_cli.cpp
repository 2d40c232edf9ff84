#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>

#include "pnrcam/io.hpp"
#include "pnrcam/pipeline.hpp"

using namespace pnrcam;
using io::json;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "pnrcam_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(PNRCAM_CLI) + " " + args + " >" + (kRoot / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string last_log() { return io::read_file(kRoot / "last.log"); }

fs::path fresh(const std::string& name) {
  const fs::path d = kRoot / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Twelve lattice cells on the event-level path, coherent light at 9.3 photoelectrons.
PipelineConfig events_config() {
  PipelineConfig c;
  c.seed = 21;
  const Rect region = cell_block(6, 6, 4, 3);
  c.source = SourceSpec::coherent({9.3 / c.detector.quantum_efficiency}, {region});
  c.grid = {region.x, region.y, region.width, region.height, 1, 1};
  c.probes.k_scale = 12;
  c.probes.frames = 20000;
  c.frames = 20000;
  return c;
}

fs::path write_config(const fs::path& dir, const PipelineConfig& c) {
  const fs::path p = dir / "config.json";
  io::write_json(p, io::to_json(c));
  return p;
}

// Parsed CSV rows keyed by header name.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  std::istringstream in(io::read_file(p));
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  std::stringstream hs(line);
  for (std::string f; std::getline(hs, f, ',');) header.push_back(f);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    std::stringstream ls(line);
    std::map<std::string, std::string> row;
    std::size_t i = 0;
    for (std::string f; std::getline(ls, f, ',') && i < header.size(); ++i) row[header[i]] = f;
    rows.push_back(row);
  }
  return rows;
}

double num(const std::map<std::string, std::string>& row, const std::string& key) { return std::stod(row.at(key)); }

// Re-parses every JSON under `dir` and re-validates the artifact kinds the library knows.
void check_json_tree(const fs::path& dir) {
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.path().extension() != ".json") continue;
    INFO(e.path().string());
    const json j = io::read_json(e.path());
    const std::string kind = j.is_object() && j.contains("kind") && j["kind"].is_string() ? j["kind"].get<std::string>() : "";
    if (kind == "count_hist") CHECK_NOTHROW(io::count_hist_from_json(j));
    if (kind == "tile_counts") CHECK_NOTHROW(io::tile_counts_from_json(j));
    if (kind == "reconstruction") CHECK_NOTHROW(io::photon_stats_from_json(j.at("statistics")));
    if (kind == "joint_reconstruction") CHECK_NOTHROW(io::joint_stats_from_json(j.at("statistics")));
    if (kind == "manifest") CHECK_NOTHROW(io::pipeline_from_json(j.at("config")));
    if (e.path().filename() == "response.json") CHECK_NOTHROW(io::response_from_json(j));
  }
}

}  // namespace

TEST_CASE("simulate rejects a zero frame count") {
  const fs::path d = fresh("zero");
  CHECK(run("simulate --events-only --frames 0 --out " + q(d)) == 2);
  CHECK(run("simulate --frames 0 --out " + q(d)) == 2);
  CHECK(run("simulate --bogus-flag") == 2);
  CHECK(run("reproduce fig9 --out " + q(d)) == 2);
}

TEST_CASE("event simulation is byte-identical for a fixed seed") {
  const fs::path a = fresh("det_a"), b = fresh("det_b"), c = fresh("det_c"), d = fresh("det_d");
  REQUIRE(run("simulate --events-only --seed 7 --frames 3000 --threads 1 --out " + q(a)) == 0);
  REQUIRE(run("simulate --events-only --seed 7 --frames 3000 --threads 1 --out " + q(b)) == 0);
  REQUIRE(run("simulate --events-only --seed 7 --frames 3000 --threads 4 --out " + q(c)) == 0);
  REQUIRE(run("simulate --events-only --seed 8 --frames 3000 --threads 1 --out " + q(d)) == 0);
  const std::string ea = io::read_file(a / "events.csv");
  CHECK(ea == io::read_file(b / "events.csv"));
  CHECK(ea == io::read_file(c / "events.csv"));
  CHECK(ea != io::read_file(d / "events.csv"));
  CHECK(io::read_json(a / "manifest.json")["seed"] == 7);
}

TEST_CASE("default simulate manifest matches the golden snapshot") {
  const fs::path d = fresh("golden");
  REQUIRE(run("simulate --frames 4 --out " + q(d)) == 0);
  json m = io::read_json(d / "manifest.json");
  m["config"].erase("output_dir");
  REQUIRE(m["outputs"].size() == 5);
  CHECK(m["outputs"][0]["path"] == "frames/frame_000000.pgm");
  CHECK(m["outputs"][4]["path"] == "truth_spots.csv");
  for (const json& o : m["outputs"]) CHECK(io::file_digest(d / o["path"].get<std::string>()) == o["digest"]);

  const fs::path golden = fs::path(PNRCAM_GOLDEN) / "simulate_manifest.json";
  if (std::getenv("PNRCAM_UPDATE_GOLDEN")) io::write_json(golden, m);
  REQUIRE(fs::exists(golden));
  CHECK(io::read_json(golden) == m);
}

TEST_CASE("pixel path: simulate, detect, tile") {
  const fs::path d = fresh("pixels");
  REQUIRE(run("simulate --frames 40 --seed 3 --out " + q(d / "sim")) == 0);
  REQUIRE(run("detect --input " + q(d / "sim") + " --out " + q(d / "det")) == 0);
  const EventList events = io::decode_events_csv(io::read_file(d / "det" / "events.csv"), 40);
  std::size_t n = 0;
  for (const auto& f : events) n += f.size();
  CHECK(n > 40 * 3);
  REQUIRE(run("tile --events " + q(d / "det" / "events.csv") + " --out " + q(d / "tile")) == 0);
  const TileCounts tc = io::tile_counts_from_json(io::read_json(d / "tile" / "tile_counts.json"));
  CHECK(tc.frames == 40);
  const json diag = io::read_json(d / "det" / "detect_diagnostics.json");
  CHECK(diag["frames"].size() == 40);
  check_json_tree(d);
}

TEST_CASE("calibrate on the bundled probe set finds a plateau") {
  const fs::path d = fresh("calibrate");
  const int rc = run("calibrate --probes " + q(fs::path(PNRCAM_DATA) / "probes" / "probes.json") + " --out " + q(d));
  INFO(last_log());
  REQUIRE(rc == 0);
  const ResponseMatrix r = io::response_from_json(io::read_json(d / "response.json"));
  REQUIRE(r.n_sat.has_value());
  CHECK(*r.n_sat < r.n_max());
  CHECK(r.fit.has_value());
  const json m = io::read_json(d / "manifest.json");
  CHECK(m["inputs"][0]["digest"] == io::file_digest(fs::path(PNRCAM_DATA) / "probes" / "probes.json"));
}

TEST_CASE("reconstruct with an identity response returns the normalized histogram") {
  const fs::path d = fresh("identity");
  const CountHistogram h({50, 120, 200, 90, 40});
  io::write_json(d / "hist.json", io::to_json(h));
  io::write_json(d / "identity.json", io::to_json(ResponseMatrix::identity(4, 4)));
  REQUIRE(run("reconstruct --counts " + q(d / "hist.json") + " --response " + q(d / "identity.json") + " --out " + q(d)) == 0);
  const json rec = io::read_json(d / "reconstruction.json");
  const PhotonStatistics f = io::photon_stats_from_json(rec["statistics"]);
  const auto expected = h.normalized();
  for (std::size_t k = 0; k < expected.size(); ++k) CHECK(f[k] == Catch::Approx(expected[k]).margin(1e-12));
}

TEST_CASE("event-level pipeline end to end, with stage isolation") {
  const fs::path d = fresh("pipeline");
  const fs::path cfg = write_config(d, events_config());
  const std::string c = " --config " + q(cfg);
  REQUIRE(run("simulate --events-only" + c + " --out " + q(d / "sim")) == 0);
  REQUIRE(run("tile" + c + " --events " + q(d / "sim" / "events.csv") + " --out " + q(d / "tile")) == 0);
  REQUIRE(run("calibrate --simulate" + c + " --out " + q(d / "cal")) == 0);
  const std::string rec_args = "reconstruct" + c + " --counts " + q(d / "tile" / "tile_counts.json") + " --response " +
                               q(d / "cal" / "response.json") + " --out " + q(d / "rec");
  REQUIRE(run(rec_args) == 0);
  const std::string met_args = "metrics" + c + " --counts " + q(d / "tile" / "tile_counts.json") + " --reconstruction " +
                               q(d / "rec" / "reconstruction.json") + " --scenario fig3 --out " + q(d / "met");
  REQUIRE(run(met_args) == 0);

  const auto rows = read_csv(d / "met" / "metrics.csv");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].at("scenario") == "fig3");
  CHECK(num(rows[0], "Q_F") < 0.0);
  CHECK(std::abs(num(rows[0], "Q_M")) <= 0.1);
  CHECK(num(rows[0], "fidelity") > 0.99);

  // Delete intermediates and rerun only the downstream stages.
  const std::string tile_bytes = io::read_file(d / "tile" / "tile_counts.json");
  const std::string rec_bytes = io::read_file(d / "rec" / "reconstruction.json");
  const std::string met_bytes = io::read_file(d / "met" / "metrics.csv");
  fs::remove_all(d / "tile");
  fs::remove_all(d / "rec");
  fs::remove_all(d / "met");
  REQUIRE(run("tile" + c + " --events " + q(d / "sim" / "events.csv") + " --out " + q(d / "tile")) == 0);
  REQUIRE(run(rec_args) == 0);
  REQUIRE(run(met_args) == 0);
  CHECK(io::read_file(d / "tile" / "tile_counts.json") == tile_bytes);
  CHECK(io::read_file(d / "rec" / "reconstruction.json") == rec_bytes);
  CHECK(io::read_file(d / "met" / "metrics.csv") == met_bytes);

  // Every stage manifest records the root seed and the config digest.
  for (const char* stage : {"sim", "tile", "cal", "rec"}) {
    const json m = io::read_json(d / stage / "manifest.json");
    CHECK(m["seed"] == 21);
    CHECK(m["inputs"][0]["digest"] == io::file_digest(cfg));
  }
  check_json_tree(d);
}

TEST_CASE("bootstrap replicates are written and deterministic") {
  const fs::path d = fresh("bootstrap");
  io::write_json(d / "hist.json", io::to_json(CountHistogram({300, 500, 150, 50})));
  io::write_json(d / "r.json", io::to_json(ResponseMatrix(occupancy_matrix(3, 3, 20))));
  const std::string args = "reconstruct --seed 4 --bootstrap 3 --counts " + q(d / "hist.json") + " --response " + q(d / "r.json");
  REQUIRE(run(args + " --out " + q(d / "a")) == 0);
  REQUIRE(run(args + " --out " + q(d / "b")) == 0);
  const json a = io::read_json(d / "a" / "bootstrap.json");
  CHECK(a["replicates"].size() == 3);
  CHECK(a == io::read_json(d / "b" / "bootstrap.json"));
}

TEST_CASE("schema violations exit 3") {
  const fs::path d = fresh("schema");
  io::write_json(d / "r.json", io::to_json(ResponseMatrix::identity(3, 3)));
  json bad = io::to_json(CountHistogram({1, 2}));
  bad["total_frames"] = 99;
  io::write_json(d / "bad.json", bad);
  CHECK(run("reconstruct --counts " + q(d / "bad.json") + " --response " + q(d / "r.json") + " --out " + q(d)) == 3);
  io::write_json(d / "wrong_kind.json", io::to_json(PhotonStatistics({0.5, 0.5})));
  CHECK(run("reconstruct --counts " + q(d / "wrong_kind.json") + " --response " + q(d / "r.json") + " --out " + q(d)) == 3);
  io::write_json(d / "hist.json", io::to_json(CountHistogram({1, 2, 3, 4, 5, 6})));
  CHECK(run("reconstruct --counts " + q(d / "hist.json") + " --response " + q(d / "r.json") + " --out " + q(d)) == 3);
  io::atomic_write(d / "events.csv", "id,x,y\n");
  CHECK(run("tile --frames 3 --events " + q(d / "events.csv") + " --out " + q(d)) == 3);
}

TEST_CASE("configuration errors exit 2") {
  const fs::path d = fresh("config");
  io::write_json(d / "cfg.json", {{"detector", {{"quantum_efficiency", 0.2}, {"gain", 3}}}});
  CHECK(run("simulate --events-only --config " + q(d / "cfg.json") + " --out " + q(d)) == 2);
  io::atomic_write(d / "broken.json", "{");
  CHECK(run("simulate --events-only --config " + q(d / "broken.json") + " --out " + q(d)) == 2);
  CHECK(run("simulate --events-only --config " + q(d / "missing.json") + " --out " + q(d)) == 2);
}

TEST_CASE("solver non-convergence exits 4 and still writes the result") {
  const fs::path d = fresh("noconv");
  PipelineConfig c;
  c.reconstruct.max_iter = 2;
  const fs::path cfg = write_config(d, c);
  io::write_json(d / "hist.json", io::to_json(CountHistogram({100, 300, 400, 200})));
  io::write_json(d / "r.json", io::to_json(ResponseMatrix(occupancy_matrix(3, 3, 20))));
  CHECK(run("reconstruct --config " + q(cfg) + " --counts " + q(d / "hist.json") + " --response " + q(d / "r.json") +
            " --out " + q(d / "out")) == 4);
  const json rec = io::read_json(d / "out" / "reconstruction.json");
  CHECK(rec["converged"] == false);
}

TEST_CASE("reproduce writes plot-ready tables") {
  const fs::path d = fresh("reproduce");
  const std::string common = " --frames 20000 --seed 3 --out " + q(d);

  SECTION("fig2 reports both moment curves and the fitted cell count") {
    run("reproduce fig2" + common);
    const auto rows = read_csv(d / "fig2.csv");
    REQUIRE(rows.size() >= 8);
    CHECK(rows[0].count("mean_events") == 1);
    CHECK(rows[0].count("second_moment_events") == 1);
    const json s = io::read_json(d / "fig2_summary.json");
    CHECK(s.at("fit").contains("N"));
    CHECK(last_log().find("fitted N") != std::string::npos);
  }
  SECTION("fig3 sweep keeps fidelity above 0.99") {
    CHECK(run("reproduce fig3" + common) == 0);
    const auto rows = read_csv(d / "fig3.csv");
    REQUIRE(rows.size() >= 5);
    for (const auto& r : rows) {
      INFO("<n> = " << r.at("mean_photoelectrons"));
      CHECK(num(r, "Q_F") < 0.0);
      if (num(r, "n_over_N") <= 1.0) CHECK(num(r, "fidelity") > 0.99);
    }
  }
  SECTION("fig5 shows super-Poissonian raw marginals with sub-Poissonian raw correlations") {
    run("reproduce fig5" + common);
    const auto rows = read_csv(d / "fig5.csv");
    int low = 0;
    for (const auto& r : rows) {
      if (r.at("scenario") != "sweep" || num(r, "n1_switched") >= 1.5) continue;
      ++low;
      CHECK(num(r, "Q_F") > 0.0);
      CHECK(num(r, "R_raw") < 1.0);
    }
    CHECK(low >= 2);
    const std::string first = io::read_file(d / "fig5.csv");
    run("reproduce fig5 --threads 1" + common);
    CHECK(io::read_file(d / "fig5.csv") == first);
  }
  check_json_tree(d);
}
