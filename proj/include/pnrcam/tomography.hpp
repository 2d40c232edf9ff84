#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/LevenbergMarquardt>

#include "pnrcam/error.hpp"
#include "pnrcam/stats.hpp"

namespace pnrcam {

/// Tile characterization by the on-off model <k> = N (1 - exp(-alpha <m> / N)).
struct OnOffFit {
  double N = 0.0;
  double alpha = 0.0;
  /// Root-mean-square residual in events.
  double residual = 0.0;
};

struct SolveInfo {
  double objective = 0.0;
  int iterations = 0;
  bool converged = true;
};

/// Conditional probabilities pi(k, n) of k photo-events given n photoelectrons.
class ResponseMatrix {
 public:
  explicit ResponseMatrix(Eigen::MatrixXd pi, double column_tol = 1e-8) : pi_(std::move(pi)) {
    require(pi_.rows() >= 1 && pi_.cols() >= 1, ErrorCode::invalid_argument, "response matrix is empty");
    for (Eigen::Index n = 0; n < pi_.cols(); ++n) {
      for (Eigen::Index k = 0; k < pi_.rows(); ++k)
        require(std::isfinite(pi_(k, n)) && pi_(k, n) >= 0.0 && pi_(k, n) <= 1.0, ErrorCode::invalid_argument,
                "response entry out of [0,1] at k=" + std::to_string(k) + ", n=" + std::to_string(n));
      require(std::abs(pi_.col(n).sum() - 1.0) <= column_tol, ErrorCode::invalid_argument,
              "response column " + std::to_string(n) + " does not sum to one");
    }
  }

  /// Ideal photon-number-resolving response; counts above k_max pile up in the last row.
  static ResponseMatrix identity(int k_max, int n_max) {
    Eigen::MatrixXd pi = Eigen::MatrixXd::Zero(k_max + 1, n_max + 1);
    for (int n = 0; n <= n_max; ++n) pi(std::min(n, k_max), n) = 1.0;
    return ResponseMatrix(std::move(pi));
  }

  const Eigen::MatrixXd& pi() const { return pi_; }
  int k_max() const { return static_cast<int>(pi_.rows()) - 1; }
  int n_max() const { return static_cast<int>(pi_.cols()) - 1; }

  std::optional<int> n_sat;
  std::optional<OnOffFit> fit;
  SolveInfo info;

 private:
  Eigen::MatrixXd pi_;
};

struct Probe {
  /// Mean photoelectron number of the coherent probe.
  double mean = 0.0;
  CountHistogram histogram;
};

struct ProbeEnsemble {
  std::vector<Probe> probes;

  void validate() const {
    require(probes.size() >= 2, ErrorCode::invalid_argument, "tomography needs at least two probes");
    for (std::size_t i = 0; i < probes.size(); ++i) {
      require(probes[i].mean >= 0.0 && std::isfinite(probes[i].mean), ErrorCode::invalid_argument,
              "probe means must be finite and >= 0");
      require(probes[i].histogram.total_frames() > 0, ErrorCode::invalid_argument, "probe histogram is empty");
      for (std::size_t j = 0; j < i; ++j)
        require(probes[i].mean != probes[j].mean, ErrorCode::invalid_argument, "probe means must be distinct");
    }
  }

  double max_mean() const {
    double m = 0.0;
    for (const auto& p : probes) m = std::max(m, p.mean);
    return m;
  }
};

// ---------------------------------------------------------------------------
// On-off model fit

namespace detail {

// Parameters are (log N, log alpha) so both stay positive.
struct OnOffFunctor : Eigen::DenseFunctor<double> {
  const std::vector<std::pair<double, double>>* pts;

  explicit OnOffFunctor(const std::vector<std::pair<double, double>>& p)
      : Eigen::DenseFunctor<double>(2, static_cast<int>(p.size())), pts(&p) {}

  int operator()(const InputType& x, ValueType& f) const {
    const double N = std::exp(x(0)), a = std::exp(x(1));
    for (std::size_t i = 0; i < pts->size(); ++i) {
      const auto [m, k] = (*pts)[i];
      f(static_cast<Eigen::Index>(i)) = N * -std::expm1(-a * m / N) - k;
    }
    return 0;
  }

  int df(const InputType& x, JacobianType& j) const {
    const double N = std::exp(x(0)), a = std::exp(x(1));
    for (std::size_t i = 0; i < pts->size(); ++i) {
      const double m = (*pts)[i].first;
      const double u = a * m / N;
      const double e = std::exp(-u);
      const auto r = static_cast<Eigen::Index>(i);
      j(r, 0) = N * (1.0 - e) - a * m * e;  // d/dlogN
      j(r, 1) = a * m * e;                  // d/dlogalpha
    }
    return 0;
  }
};

}  // namespace detail

/// Least-squares fit of (N, alpha) to (<m>, <k>) points.
inline OnOffFit fit_onoff_model(std::vector<std::pair<double, double>> points, int max_evaluations = 2000) {
  require(points.size() >= 3, ErrorCode::invalid_argument, "on-off fit needs at least three points");
  double m_lo = std::numeric_limits<double>::infinity(), m_hi = 0.0, k_hi = 0.0;
  for (const auto& [m, k] : points) {
    require(m > 0.0 && k >= 0.0 && std::isfinite(m) && std::isfinite(k), ErrorCode::invalid_argument,
            "on-off fit points must have <m> > 0 and <k> >= 0");
    m_lo = std::min(m_lo, m);
    m_hi = std::max(m_hi, m);
    k_hi = std::max(k_hi, k);
  }
  require(m_hi >= 10.0 * m_lo, ErrorCode::invalid_argument, "on-off fit points must span a factor of 10 in <m>");
  require(k_hi > 0.0, ErrorCode::invalid_argument, "on-off fit needs nonzero event means");

  std::sort(points.begin(), points.end());
  const auto& first = points.front();
  const double alpha0 = first.second > 0.0 ? first.second / first.first : k_hi / m_hi;
  Eigen::VectorXd x(2);
  x << std::log(1.2 * k_hi), std::log(alpha0);

  detail::OnOffFunctor functor(points);
  Eigen::LevenbergMarquardt<detail::OnOffFunctor> lm(functor);
  lm.setMaxfev(max_evaluations);
  lm.setFtol(1e-15);
  lm.setXtol(1e-15);
  const auto status = lm.minimize(x);
  using namespace Eigen::LevenbergMarquardtSpace;
  const double N = std::exp(x(0)), alpha = std::exp(x(1));
  require(status != ImproperInputParameters && status != TooManyFunctionEvaluation, ErrorCode::fit_diverged,
          "on-off fit did not converge");
  require(std::isfinite(N) && std::isfinite(alpha) && N <= 20.0 * k_hi, ErrorCode::fit_diverged,
          "on-off fit ran away (N unidentifiable without saturation)");

  Eigen::VectorXd f(static_cast<Eigen::Index>(points.size()));
  functor(x, f);
  return {N, alpha, std::sqrt(f.squaredNorm() / static_cast<double>(points.size()))};
}

// ---------------------------------------------------------------------------
// Detector tomography

struct TomographyOptions {
  double reg_weight = 1e-4;
  int max_iter = 100000;
  double rel_tol = 1e-9;
  int window = 50;
  /// Record the objective after every iteration.
  bool record_history = false;
};

struct TomographyResult {
  ResponseMatrix response;
  std::vector<double> history;
};

/// Euclidean projection of v onto the probability simplex.
inline void project_simplex(Eigen::Ref<Eigen::VectorXd> v) {
  const Eigen::Index n = v.size();
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    cum += u[static_cast<std::size_t>(i)];
    const double t = (cum - 1.0) / static_cast<double>(i + 1);
    if (u[static_cast<std::size_t>(i)] - t > 0.0) theta = t;
  }
  for (Eigen::Index i = 0; i < n; ++i) v(i) = std::max(v(i) - theta, 0.0);
}

namespace detail {

struct TomographyProblem {
  Eigen::MatrixXd F;  // (n_max+1) x J probe pmfs
  Eigen::MatrixXd C;  // (k_max+1) x J normalized histograms
  double reg = 0.0;

  // ||pi F - C||^2 + reg * sum_n ||pi_{n+1} - pi_n||^2
  double objective(const Eigen::MatrixXd& pi) const {
    const double fit = (pi * F - C).squaredNorm();
    if (reg == 0.0 || pi.cols() < 2) return fit;
    const auto n = pi.cols();
    return fit + reg * (pi.rightCols(n - 1) - pi.leftCols(n - 1)).squaredNorm();
  }

  Eigen::MatrixXd gradient(const Eigen::MatrixXd& pi) const {
    Eigen::MatrixXd g = 2.0 * (pi * F - C) * F.transpose();
    if (reg != 0.0 && pi.cols() >= 2) {
      const auto n = pi.cols();
      Eigen::MatrixXd d = pi.rightCols(n - 1) - pi.leftCols(n - 1);
      g.leftCols(n - 1) -= 2.0 * reg * d;
      g.rightCols(n - 1) += 2.0 * reg * d;
    }
    return g;
  }

  double lipschitz() const {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(F.transpose() * F, Eigen::EigenvaluesOnly);
    return 2.0 * (es.eigenvalues().maxCoeff() + 4.0 * reg);
  }
};

inline void project_columns(Eigen::MatrixXd& pi) {
  for (Eigen::Index n = 0; n < pi.cols(); ++n) project_simplex(pi.col(n));
}

}  // namespace detail

/// Constrained least-squares detector tomography: accelerated projected
/// gradient over column-stochastic matrices with a monotone restart.
inline TomographyResult tomography_solve(const ProbeEnsemble& probes, int n_max, int k_max,
                                         const TomographyOptions& opts = {}) {
  probes.validate();
  require(n_max >= 1 && k_max >= 1, ErrorCode::invalid_argument, "n_max and k_max must be >= 1");
  require(opts.reg_weight >= 0.0, ErrorCode::invalid_argument, "reg_weight must be >= 0");
  require(probes.max_mean() >= k_max, ErrorCode::invalid_argument,
          "probe set must reach saturation (largest mean >= k_max)");
  const auto J = static_cast<Eigen::Index>(probes.probes.size());

  detail::TomographyProblem prob;
  prob.reg = opts.reg_weight;
  prob.F.resize(n_max + 1, J);
  prob.C.resize(k_max + 1, J);
  for (Eigen::Index j = 0; j < J; ++j) {
    const Probe& p = probes.probes[static_cast<std::size_t>(j)];
    require(p.histogram.k_observed_max() <= k_max, ErrorCode::dimension_mismatch,
            "probe histogram has counts above k_max=" + std::to_string(k_max));
    const PhotonStatistics f = poisson_pmf(p.mean, n_max);
    const std::vector<double> c = p.histogram.normalized(static_cast<std::size_t>(k_max) + 1);
    for (int n = 0; n <= n_max; ++n) prob.F(n, j) = f[static_cast<std::size_t>(n)];
    for (int k = 0; k <= k_max; ++k) prob.C(k, j) = c[static_cast<std::size_t>(k)];
  }

  const double step = 1.0 / prob.lipschitz();
  Eigen::MatrixXd x = ResponseMatrix::identity(k_max, n_max).pi();
  Eigen::MatrixXd y = x;
  double fx = prob.objective(x);
  double t = 1.0;
  std::vector<double> trace{fx};
  std::vector<double> history;
  if (opts.record_history) history.push_back(fx);

  SolveInfo info;
  info.converged = false;
  int it = 0;
  for (; it < opts.max_iter; ++it) {
    Eigen::MatrixXd next = y - step * prob.gradient(y);
    detail::project_columns(next);
    double fn = prob.objective(next);
    if (fn > fx) {
      t = 1.0;
      next = x - step * prob.gradient(x);
      detail::project_columns(next);
      fn = prob.objective(next);
      if (fn > fx) {  // rounding-level noise at the optimum
        next = x;
        fn = fx;
      }
    }
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = next + ((t - 1.0) / tn) * (next - x);
    x = std::move(next);
    fx = fn;
    t = tn;
    trace.push_back(fx);
    if (opts.record_history) history.push_back(fx);
    if (static_cast<int>(trace.size()) > opts.window) {
      const double old = trace[trace.size() - 1 - static_cast<std::size_t>(opts.window)];
      if (old - fx <= opts.rel_tol * std::max(fx, 1e-300) + 1e-30) {
        info.converged = true;
        ++it;
        break;
      }
    }
  }
  info.iterations = it;
  info.objective = fx;
  // Clean projection round-off so the column invariant holds exactly.
  for (Eigen::Index n = 0; n < x.cols(); ++n) x.col(n) /= x.col(n).sum();
  TomographyResult result{ResponseMatrix(std::move(x)), std::move(history)};
  result.response.info = info;
  return result;
}

/// One more than the largest k seen by any probe, plus a margin of two rows.
inline int choose_k_max(const ProbeEnsemble& probes) {
  int observed = 0;
  for (const auto& p : probes.probes) observed = std::max(observed, p.histogram.k_observed_max());
  return observed + 1 + 2;
}

/// Geometrically spaced probe means from 0.25 to 4 * k_scale.
inline std::vector<double> default_probe_means(double k_scale, int count = 8) {
  require(count >= 2 && k_scale > 0.0, ErrorCode::invalid_argument, "invalid probe design");
  const double lo = 0.25, hi = 4.0 * k_scale;
  std::vector<double> means(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) means[static_cast<std::size_t>(i)] = lo * std::pow(hi / lo, double(i) / (count - 1));
  return means;
}

/// Smallest n whose column lies within `tol` total variation of every later column.
inline int saturation_index(const ResponseMatrix& r, double tol) {
  const Eigen::MatrixXd& pi = r.pi();
  const int n_max = r.n_max();
  auto tv = [&](int a, int b) { return 0.5 * (pi.col(a) - pi.col(b)).cwiseAbs().sum(); };
  int candidate = -1;
  for (int n = 0; n < n_max && candidate < 0; ++n) {
    bool ok = true;
    for (int m = n + 1; m <= n_max && ok; ++m) ok = tv(n, m) <= tol;
    if (ok) candidate = n;
  }
  require(candidate >= 0, ErrorCode::no_plateau, "no saturation plateau within n_max");
  return candidate;
}

/// Tomography plus the on-off fit and plateau measurement stored on the result.
inline TomographyResult calibrate_tile(const ProbeEnsemble& probes, int n_max, int k_max,
                                       const TomographyOptions& opts = {}, double plateau_tol = 0.05) {
  TomographyResult res = tomography_solve(probes, n_max, k_max, opts);
  std::vector<std::pair<double, double>> pts;
  for (const auto& p : probes.probes)
    if (p.mean > 0.0) pts.emplace_back(p.mean, moments(p.histogram).mean);
  try {
    res.response.fit = fit_onoff_model(pts);
  } catch (const Error&) {
    res.response.fit.reset();
  }
  try {
    res.response.n_sat = saturation_index(res.response, plateau_tol);
  } catch (const Error&) {
    res.response.n_sat.reset();
  }
  return res;
}

}  // namespace pnrcam
