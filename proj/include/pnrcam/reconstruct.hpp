#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "pnrcam/camera_sim.hpp"
#include "pnrcam/error.hpp"
#include "pnrcam/parallel.hpp"
#include "pnrcam/random.hpp"
#include "pnrcam/stats.hpp"
#include "pnrcam/tiling.hpp"
#include "pnrcam/tomography.hpp"

namespace pnrcam {

enum class InitKind {
  /// Bose-Einstein distribution whose predicted event mean matches the data.
  thermal,
  /// Poisson distribution whose predicted event mean matches the data.
  poisson,
  uniform,
};

enum class Objective { ml, lsq };

enum class StopReason { converged, discrepancy, iteration_cap };

struct ReconstructOptions {
  int max_iter = 100000;
  /// Per-frame log-likelihood gain per iteration below which the run has converged.
  double ll_tol = 1e-10;
  int window = 50;
  InitKind init = InitKind::thermal;
  /// Return the first iterate whose likelihood-ratio statistic against the
  /// maximum is at most factor * (number of nonzero bins); 0 returns the maximum.
  double discrepancy_factor = 1.0;
  /// Same rule for two-tile histograms, whose bin count grows with both supports.
  double joint_discrepancy_factor = 0.1;
  Objective objective = Objective::ml;
  bool record_history = false;
};

/// Mass at the truncation edge above which a result is flagged.
inline constexpr double kTruncationWarning = 1e-3;

struct ReconstructionResult {
  PhotonStatistics statistics{std::vector<double>{1.0, 0.0}};
  /// Multinomial log-likelihood sum_k counts_k log (pi f)_k.
  double log_likelihood = 0.0;
  double deviance = 0.0;
  int iterations = 0;
  bool converged = false;
  StopReason stop = StopReason::iteration_cap;
  bool truncation_warning = false;
  /// Per-frame log-likelihood after each iteration, when requested.
  std::vector<double> history;
};

struct JointReconstructionResult {
  JointStatistics statistics{Eigen::MatrixXd::Identity(2, 2) * 0.5};
  double log_likelihood = 0.0;
  double deviance = 0.0;
  int iterations = 0;
  bool converged = false;
  StopReason stop = StopReason::iteration_cap;
  bool truncation_warning = false;
  std::vector<double> history;
};

namespace detail {

struct SingleKernel {
  const Eigen::MatrixXd& pi;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& f) const { return pi * f; }
  Eigen::MatrixXd adjoint(const Eigen::MatrixXd& r) const { return pi.transpose() * r; }
  double norm_sq() const {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(pi.transpose() * pi, Eigen::EigenvaluesOnly);
    return es.eigenvalues().maxCoeff();
  }
};

// Separable kernel pi1 (x) pi2 applied as pi1 f pi2^T.
struct JointKernel {
  const Eigen::MatrixXd& a;
  const Eigen::MatrixXd& b;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& f) const { return a * f * b.transpose(); }
  Eigen::MatrixXd adjoint(const Eigen::MatrixXd& r) const { return a.transpose() * r * b; }
  double norm_sq() const {
    return SingleKernel{a}.norm_sq() * SingleKernel{b}.norm_sq();
  }
};

struct FitOutcome {
  Eigen::MatrixXd f;
  double ll = 0.0;
  double deviance = 0.0;
  int iterations = 0;
  StopReason stop = StopReason::iteration_cap;
  std::vector<double> history;
};

// Per-frame log-likelihood and deviance of prediction q against normalized counts c.
inline std::pair<double, double> likelihood(const Eigen::MatrixXd& c, const Eigen::MatrixXd& q) {
  double ll = 0.0, dev = 0.0;
  for (Eigen::Index j = 0; j < c.cols(); ++j)
    for (Eigen::Index i = 0; i < c.rows(); ++i) {
      const double ci = c(i, j);
      if (ci <= 0.0) continue;
      const double qi = q(i, j);
      if (!(qi > 0.0)) return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
      ll += ci * std::log(qi);
      dev += ci * std::log(ci / qi);
    }
  return {ll, 2.0 * dev};
}

inline void check_support(const Eigen::MatrixXd& c, const Eigen::MatrixXd& q) {
  for (Eigen::Index j = 0; j < c.cols(); ++j)
    for (Eigen::Index i = 0; i < c.rows(); ++i)
      if (c(i, j) > 0.0 && !(q(i, j) > 0.0))
        fail(ErrorCode::model_mismatch, "observed counts at k=" + std::to_string(i) +
                                            (c.cols() > 1 ? "," + std::to_string(j) : std::string()) +
                                            " have zero model probability");
}

// Multiplicative EM. With stop_ll set, halts at the first iterate whose
// likelihood-ratio statistic against stop_ll drops to `target`.
template <class Kernel>
FitOutcome em_pass(const Kernel& kernel, const Eigen::MatrixXd& c, double frames, Eigen::MatrixXd f,
                   const ReconstructOptions& opts, std::optional<double> stop_ll, double target) {
  FitOutcome out;
  Eigen::MatrixXd q = kernel.forward(f);
  check_support(c, q);
  auto [ll, dev] = likelihood(c, q);
  std::vector<double> trace{ll};
  if (opts.record_history) out.history.push_back(ll);
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    if (stop_ll && 2.0 * frames * (*stop_ll - ll) <= target) {
      out.stop = StopReason::discrepancy;
      break;
    }
    Eigen::MatrixXd ratio = Eigen::MatrixXd::Zero(c.rows(), c.cols());
    for (Eigen::Index j = 0; j < c.cols(); ++j)
      for (Eigen::Index i = 0; i < c.rows(); ++i)
        if (c(i, j) > 0.0) ratio(i, j) = c(i, j) / q(i, j);
    f = f.cwiseProduct(kernel.adjoint(ratio));
    f /= f.sum();
    q = kernel.forward(f);
    std::tie(ll, dev) = likelihood(c, q);
    trace.push_back(ll);
    if (opts.record_history) out.history.push_back(ll);
    if (!stop_ll && static_cast<int>(trace.size()) > opts.window) {
      const double gain = ll - trace[trace.size() - 1 - static_cast<std::size_t>(opts.window)];
      if (gain < opts.ll_tol * opts.window) {
        out.stop = StopReason::converged;
        ++it;
        break;
      }
    }
  }
  out.f = std::move(f);
  out.ll = ll;
  out.deviance = frames * dev;
  out.iterations = it;
  return out;
}

template <class Kernel>
FitOutcome run_em(const Kernel& kernel, const Eigen::MatrixXd& c, double frames, const Eigen::MatrixXd& f0,
                  const ReconstructOptions& opts, double factor) {
  FitOutcome ml = em_pass(kernel, c, frames, f0, opts, std::nullopt, 0.0);
  if (factor <= 0.0) return ml;
  const double target = factor * static_cast<double>((c.array() > 0.0).count());
  FitOutcome early = em_pass(kernel, c, frames, f0, opts, ml.ll, target);
  if (ml.stop == StopReason::iteration_cap) early.stop = StopReason::iteration_cap;
  return early;
}

// Least-squares fit ||K f - c||^2 over the simplex by accelerated projected gradient.
template <class Kernel>
FitOutcome run_lsq(const Kernel& kernel, const Eigen::MatrixXd& c, double frames, Eigen::MatrixXd f,
                   const ReconstructOptions& opts) {
  FitOutcome out;
  auto objective = [&](const Eigen::MatrixXd& x) { return (kernel.forward(x) - c).squaredNorm(); };
  auto project = [](Eigen::MatrixXd& x) {
    Eigen::Map<Eigen::VectorXd> v(x.data(), x.size());
    project_simplex(v);
  };
  const double step = 1.0 / (2.0 * kernel.norm_sq());
  Eigen::MatrixXd y = f;
  double fx = objective(f), t = 1.0;
  std::vector<double> trace{fx};
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    Eigen::MatrixXd next = y - step * 2.0 * kernel.adjoint(kernel.forward(y) - c);
    project(next);
    double fn = objective(next);
    if (fn > fx) {
      t = 1.0;
      next = f - step * 2.0 * kernel.adjoint(kernel.forward(f) - c);
      project(next);
      fn = objective(next);
      if (fn > fx) {
        next = f;
        fn = fx;
      }
    }
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = next + ((t - 1.0) / tn) * (next - f);
    f = std::move(next);
    fx = fn;
    t = tn;
    trace.push_back(fx);
    if (opts.record_history) out.history.push_back(fx);
    if (static_cast<int>(trace.size()) > opts.window) {
      const double old = trace[trace.size() - 1 - static_cast<std::size_t>(opts.window)];
      if (old - fx <= 1e-9 * std::max(fx, 1e-300) + 1e-30) {
        out.stop = StopReason::converged;
        ++it;
        break;
      }
    }
  }
  f = f.cwiseMax(0.0);
  f /= f.sum();
  const auto [ll, dev] = likelihood(c, kernel.forward(f));
  out.f = std::move(f);
  out.ll = ll;
  out.deviance = frames * dev;
  out.iterations = it;
  return out;
}

// Predicted event mean of a Poisson(lambda) input through pi.
inline double predicted_event_mean(const Eigen::MatrixXd& pi, double lambda) {
  const int n_max = static_cast<int>(pi.cols()) - 1;
  std::vector<double> p = poisson_terms(lambda, n_max);
  double total = 0.0;
  for (double v : p) total += v;
  Eigen::Map<const Eigen::VectorXd> f(p.data(), static_cast<Eigen::Index>(p.size()));
  const Eigen::VectorXd q = pi * f / total;
  double mean = 0.0;
  for (Eigen::Index k = 0; k < q.size(); ++k) mean += static_cast<double>(k) * q(k);
  return mean;
}

// Photoelectron mean whose Poisson prediction reproduces the observed event mean.
inline double matched_input_mean(const Eigen::MatrixXd& pi, double observed_event_mean) {
  const double hi_limit = 0.6 * static_cast<double>(pi.cols() - 1);
  if (observed_event_mean <= 0.0) return 1e-9;
  if (predicted_event_mean(pi, hi_limit) < observed_event_mean) return hi_limit;
  double lo = 0.0, hi = hi_limit;
  for (int i = 0; i < 200 && hi - lo > 1e-12 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (predicted_event_mean(pi, mid) < observed_event_mean ? lo : hi) = mid;
  }
  return std::max(0.5 * (lo + hi), 1e-9);
}

inline Eigen::VectorXd initial_guess(const Eigen::MatrixXd& pi, const std::vector<double>& cbar, InitKind kind) {
  const auto n = pi.cols();
  if (kind == InitKind::uniform) return Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  double mean = 0.0;
  for (std::size_t k = 0; k < cbar.size(); ++k) mean += static_cast<double>(k) * cbar[k];
  const double lambda = matched_input_mean(pi, mean);
  const PhotonStatistics g = kind == InitKind::thermal
                                 ? thermal_pmf(lambda, static_cast<int>(n) - 1)
                                 : PhotonStatistics::normalized(poisson_terms(lambda, static_cast<int>(n) - 1));
  return Eigen::Map<const Eigen::VectorXd>(g.probs().data(), n);
}

}  // namespace detail

/// Reconstructs f from a normalized histogram and the number of frames behind it.
inline ReconstructionResult reconstruct_single(const std::vector<double>& cbar, double frames, const ResponseMatrix& r,
                                               const ReconstructOptions& opts = {}) {
  require(frames > 0.0, ErrorCode::invalid_argument, "frame count must be positive");
  std::size_t last = cbar.size();
  while (last > 0 && cbar[last - 1] == 0.0) --last;
  require(last <= static_cast<std::size_t>(r.k_max()) + 1, ErrorCode::dimension_mismatch,
          "histogram has counts above the response matrix k_max=" + std::to_string(r.k_max()));
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(r.k_max() + 1, 1);
  for (std::size_t k = 0; k < last; ++k) c(static_cast<Eigen::Index>(k), 0) = cbar[k];
  const std::vector<double> cvec(c.data(), c.data() + c.size());
  Eigen::MatrixXd f0 = detail::initial_guess(r.pi(), cvec, opts.init);

  const detail::SingleKernel kernel{r.pi()};
  detail::FitOutcome fit = opts.objective == Objective::ml ? detail::run_em(kernel, c, frames, std::move(f0), opts, opts.discrepancy_factor)
                                                            : detail::run_lsq(kernel, c, frames, std::move(f0), opts);
  ReconstructionResult res;
  res.statistics = PhotonStatistics::normalized(std::vector<double>(fit.f.data(), fit.f.data() + fit.f.size()));
  res.log_likelihood = frames * fit.ll;
  res.deviance = fit.deviance;
  res.iterations = fit.iterations;
  res.stop = fit.stop;
  res.converged = fit.stop != StopReason::iteration_cap;
  res.truncation_warning = res.statistics[static_cast<std::size_t>(res.statistics.n_max())] > kTruncationWarning;
  res.history = std::move(fit.history);
  return res;
}

inline ReconstructionResult reconstruct_single(const CountHistogram& h, const ResponseMatrix& r,
                                               const ReconstructOptions& opts = {}) {
  return reconstruct_single(h.normalized(), static_cast<double>(h.total_frames()), r, opts);
}

inline JointReconstructionResult reconstruct_joint(const JointCountHistogram& h, const ResponseMatrix& r1,
                                                   const ResponseMatrix& r2, const ReconstructOptions& opts = {}) {
  require(h.total_frames() > 0, ErrorCode::invalid_argument, "empty joint histogram");
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j)
      require(h(i, j) == 0 || (i <= static_cast<std::size_t>(r1.k_max()) && j <= static_cast<std::size_t>(r2.k_max())),
              ErrorCode::dimension_mismatch, "joint histogram has counts above a response matrix k_max");
  const double frames = static_cast<double>(h.total_frames());
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(r1.k_max() + 1, r2.k_max() + 1);
  const Eigen::MatrixXd hn = h.normalized();
  const auto rows = std::min<Eigen::Index>(hn.rows(), c.rows()), cols = std::min<Eigen::Index>(hn.cols(), c.cols());
  c.topLeftCorner(rows, cols) = hn.topLeftCorner(rows, cols);

  const Eigen::VectorXd m1 = c.rowwise().sum(), m2 = c.colwise().sum().transpose();
  const Eigen::VectorXd g1 = detail::initial_guess(r1.pi(), std::vector<double>(m1.data(), m1.data() + m1.size()), opts.init);
  const Eigen::VectorXd g2 = detail::initial_guess(r2.pi(), std::vector<double>(m2.data(), m2.data() + m2.size()), opts.init);
  Eigen::MatrixXd f0 = g1 * g2.transpose();

  const detail::JointKernel kernel{r1.pi(), r2.pi()};
  detail::FitOutcome fit = opts.objective == Objective::ml ? detail::run_em(kernel, c, frames, std::move(f0), opts, opts.joint_discrepancy_factor)
                                                            : detail::run_lsq(kernel, c, frames, std::move(f0), opts);
  JointReconstructionResult res;
  res.statistics = JointStatistics::normalized(fit.f);
  res.log_likelihood = frames * fit.ll;
  res.deviance = fit.deviance;
  res.iterations = fit.iterations;
  res.stop = fit.stop;
  res.converged = fit.stop != StopReason::iteration_cap;
  const Eigen::MatrixXd& f = res.statistics.probs();
  res.truncation_warning = f.row(f.rows() - 1).sum() > kTruncationWarning || f.col(f.cols() - 1).sum() > kTruncationWarning;
  res.history = std::move(fit.history);
  return res;
}

/// Resamples frames with replacement from a histogram.
inline CountHistogram bootstrap_resample(const CountHistogram& h, Engine& rng) {
  require(h.total_frames() > 0, ErrorCode::invalid_argument, "cannot resample an empty histogram");
  std::vector<double> w(h.counts().begin(), h.counts().end());
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  CountHistogram out;
  for (std::uint64_t i = 0; i < h.total_frames(); ++i) out.record(pick(rng));
  return out;
}

inline JointCountHistogram bootstrap_resample(const JointCountHistogram& h, Engine& rng) {
  require(h.total_frames() > 0, ErrorCode::invalid_argument, "cannot resample an empty histogram");
  const auto data = h.data();
  std::discrete_distribution<std::size_t> pick(data.begin(), data.end());
  JointCountHistogram out;
  for (std::uint64_t i = 0; i < h.total_frames(); ++i) {
    const std::size_t cell = pick(rng);
    out.record(cell / h.cols(), cell % h.cols());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Switched-mixture sweep

/// Two-tile geometry and solver settings for a simulated switched-mixture run.
struct MixtureExperiment {
  DetectorConfig detector;
  /// Beam region per tile, in tile order.
  std::vector<Rect> regions;
  TileGrid grid;
  TilePair pair{0, 1};
  EventSimOptions events;
  ReconstructOptions solver;
};

struct MixtureRow {
  double n1_switched = 0.0;
  double q_raw = 0.0;
  double q_rec = 0.0;
  double r_raw = 0.0;
  double r_rec = 0.0;
  double fidelity_joint = 0.0;
  double fidelity_marginal = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Equiprobable mixture of product-Poisson pairs (a, a) and (b, b), truncated to the given supports.
inline JointStatistics switched_mixture_truth(double a, double b, int n_max1, int n_max2) {
  auto pois = [](double mean, int n_max) {
    std::vector<double> p = detail::poisson_terms(mean, n_max);
    return PhotonStatistics::normalized(std::move(p));
  };
  const auto pa1 = pois(a, n_max1), pb1 = pois(b, n_max1), pa2 = pois(a, n_max2), pb2 = pois(b, n_max2);
  Eigen::Map<const Eigen::VectorXd> va1(pa1.probs().data(), n_max1 + 1), vb1(pb1.probs().data(), n_max1 + 1);
  Eigen::Map<const Eigen::VectorXd> va2(pa2.probs().data(), n_max2 + 1), vb2(pb2.probs().data(), n_max2 + 1);
  return JointStatistics::normalized(0.5 * va1 * va2.transpose() + 0.5 * vb1 * vb2.transpose());
}

/// Runs simulate -> tile -> reconstruct for each switched mean at a fixed
/// base mean. Both tiles switch together between n1_fixed and the sweep value
/// (photoelectron units).
inline std::vector<MixtureRow> sweep_mixture_metrics(const ResponseMatrix& pi1, const ResponseMatrix& pi2,
                                                     const MixtureExperiment& exp, double n1_fixed,
                                                     const std::vector<double>& sweep, std::size_t frames,
                                                     unsigned threads = 1) {
  require(exp.regions.size() == 2, ErrorCode::config, "mixture experiment needs two beam regions");
  require(n1_fixed >= 0.0, ErrorCode::invalid_argument, "fixed mean must be >= 0");
  for (double v : sweep) require(v >= 0.0, ErrorCode::invalid_argument, "sweep values must be >= 0");
  std::vector<MixtureRow> rows(sweep.size());
  const double eta = exp.detector.quantum_efficiency;
  // Points run one after another; each point parallelizes over frames.
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    const double b = sweep[i];
    DetectorConfig cfg = exp.detector;
    cfg.rng_seed = derive_seed(exp.detector.rng_seed, i);
    const SourceSpec src = SourceSpec::mixture(
        {{0.5, {n1_fixed / eta, n1_fixed / eta}}, {0.5, {b / eta, b / eta}}}, exp.regions);
    const EventList events = simulate_events(cfg, src, frames, exp.events, threads);
    const TileCounts tc = accumulate(events, exp.grid, {exp.pair}, threads);
    const JointCountHistogram& joint = tc.joint(exp.pair);
    const JointReconstructionResult rec = reconstruct_joint(joint, pi1, pi2, exp.solver);
    const JointStatistics truth = switched_mixture_truth(n1_fixed, b, pi1.n_max(), pi2.n_max());

    MixtureRow& row = rows[i];
    row.n1_switched = b;
    row.q_raw = mandel_q(joint.marginal1());
    row.q_rec = mandel_q(rec.statistics.marginal1());
    row.r_raw = fano_r(joint);
    row.r_rec = fano_r(rec.statistics);
    row.fidelity_joint = fidelity(rec.statistics, truth);
    row.fidelity_marginal = fidelity(rec.statistics.marginal1(), truth.marginal1());
    row.iterations = rec.iterations;
    row.converged = rec.converged;
  }
  return rows;
}

}  // namespace pnrcam
