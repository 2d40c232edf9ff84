// Calibrate a 12-cell tile with simulated coherent probes, then reconstruct
// the photon statistics of a coherent beam from its saturated event counts.

#include <cstdio>

#include "pnrcam/pipeline.hpp"

int main() {
  using namespace pnrcam;

  DetectorConfig detector;
  detector.rng_seed = 7;
  const Rect tile = cell_block(0, 0, 4, 3);

  const ProbeEnsemble probes = simulate_probes(detector, tile, default_probe_means(12, 16), 50000, {});
  const ResponseMatrix pi = calibrate_from_probes(probes, {});
  std::printf("calibrated: k_max=%d n_max=%d N=%.2f\n", pi.k_max(), pi.n_max(), pi.fit ? pi.fit->N : 0.0);

  const double mean_photoelectrons = 9.3;
  detector.rng_seed = 8;
  const SourceSpec beam = SourceSpec::coherent({mean_photoelectrons / detector.quantum_efficiency}, {tile});
  const TileGrid grid{tile.x, tile.y, tile.width, tile.height, 1, 1};
  const CountHistogram counts = accumulate(simulate_events(detector, beam, 100000, {}), grid, {}).singles[0];

  const ReconstructionResult rec = reconstruct_single(counts, pi);
  const PhotonStatistics truth = source_marginal(beam, detector.quantum_efficiency, 0, pi.n_max());
  std::printf("raw events:    <k>=%.3f  Q=%.3f\n", moments(counts).mean, mandel_q(counts));
  std::printf("reconstructed: <n>=%.3f  Q=%.3f  fidelity=%.4f  (%d iterations)\n", moments(rec.statistics).mean,
              mandel_q(rec.statistics), fidelity(rec.statistics, truth), rec.iterations);
}
