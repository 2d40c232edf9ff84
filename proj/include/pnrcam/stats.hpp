#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pnrcam/error.hpp"

namespace pnrcam {

/// Absolute tolerance on the unit-sum invariant of probability vectors.
inline constexpr double kNormTolerance = 1e-9;
/// Largest Poisson tail mass accepted when truncating at n_max.
inline constexpr double kPoissonTailTolerance = 1e-9;

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

struct JointMoments {
  double mean1 = 0.0;
  double mean2 = 0.0;
  double var1 = 0.0;
  double var2 = 0.0;
  double cov = 0.0;
};

namespace detail {

inline void validate_probabilities(std::span<const double> p, const char* what) {
  double sum = 0.0;
  for (double v : p) {
    require(std::isfinite(v) && v >= 0.0, ErrorCode::invalid_argument,
            std::string(what) + " has a negative or non-finite entry");
    sum += v;
  }
  require(std::abs(sum - 1.0) <= kNormTolerance, ErrorCode::invalid_argument,
          std::string(what) + " does not sum to one (sum=" + std::to_string(sum) + ")");
}

// Two-pass central moments of the distribution proportional to `w`.
template <class Weights>
Moments weighted_moments(const Weights& w) {
  double total = 0.0;
  double first = 0.0;
  std::size_t n = 0;
  for (auto v : w) {
    total += static_cast<double>(v);
    first += static_cast<double>(n) * static_cast<double>(v);
    ++n;
  }
  require(total > 0.0, ErrorCode::invalid_argument, "distribution has zero total weight");
  const double mean = first / total;
  double second = 0.0;
  n = 0;
  for (auto v : w) {
    const double d = static_cast<double>(n) - mean;
    second += d * d * static_cast<double>(v);
    ++n;
  }
  return {mean, second / total};
}

inline JointMoments joint_moments_of(const Eigen::MatrixXd& w) {
  const double total = w.sum();
  require(total > 0.0, ErrorCode::invalid_argument, "joint distribution has zero total weight");
  JointMoments m;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      m.mean1 += static_cast<double>(i) * w(i, j);
      m.mean2 += static_cast<double>(j) * w(i, j);
    }
  m.mean1 /= total;
  m.mean2 /= total;
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      const double d1 = static_cast<double>(i) - m.mean1;
      const double d2 = static_cast<double>(j) - m.mean2;
      m.var1 += d1 * d1 * w(i, j);
      m.var2 += d2 * d2 * w(i, j);
      m.cov += d1 * d2 * w(i, j);
    }
  m.var1 /= total;
  m.var2 /= total;
  m.cov /= total;
  return m;
}

}  // namespace detail

/// Probability vector f_n over photon (or photoelectron) number n = 0..n_max.
class PhotonStatistics {
 public:
  explicit PhotonStatistics(std::vector<double> probs) : probs_(std::move(probs)) {
    require(probs_.size() >= 2, ErrorCode::invalid_argument, "PhotonStatistics needs n_max >= 1");
    detail::validate_probabilities(probs_, "PhotonStatistics");
  }

  /// Rescales non-negative weights to unit sum; pads to n_max = 1 if needed.
  static PhotonStatistics normalized(std::vector<double> weights) {
    if (weights.size() < 2) weights.resize(2, 0.0);
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    require(total > 0.0 && std::isfinite(total), ErrorCode::invalid_argument,
            "cannot normalize weights with non-positive total");
    for (double& v : weights) v = std::max(0.0, v) / total;
    return PhotonStatistics(std::move(weights));
  }

  static PhotonStatistics delta(int n, int n_max) {
    require(n >= 0 && n <= n_max && n_max >= 1, ErrorCode::invalid_argument, "delta index out of range");
    std::vector<double> p(static_cast<std::size_t>(n_max) + 1, 0.0);
    p[static_cast<std::size_t>(n)] = 1.0;
    return PhotonStatistics(std::move(p));
  }

  int n_max() const { return static_cast<int>(probs_.size()) - 1; }
  std::size_t size() const { return probs_.size(); }
  std::span<const double> probs() const { return probs_; }
  double operator[](std::size_t n) const { return n < probs_.size() ? probs_[n] : 0.0; }

  /// Same distribution on a longer support (zeros appended).
  PhotonStatistics padded(int n_max) const {
    require(n_max >= this->n_max(), ErrorCode::invalid_argument, "padding cannot truncate");
    std::vector<double> p = probs_;
    p.resize(static_cast<std::size_t>(n_max) + 1, 0.0);
    return PhotonStatistics(std::move(p));
  }

  bool operator==(const PhotonStatistics&) const = default;

 private:
  std::vector<double> probs_;
};

/// Joint distribution f_{n1,n2}; rows index n1, columns n2.
class JointStatistics {
 public:
  explicit JointStatistics(Eigen::MatrixXd probs) : probs_(std::move(probs)) {
    require(probs_.rows() >= 2 && probs_.cols() >= 2, ErrorCode::invalid_argument,
            "JointStatistics needs n_max >= 1 on both axes");
    detail::validate_probabilities(std::span<const double>(probs_.data(), static_cast<std::size_t>(probs_.size())),
                                   "JointStatistics");
  }

  static JointStatistics normalized(Eigen::MatrixXd weights) {
    const double total = weights.sum();
    require(total > 0.0 && std::isfinite(total), ErrorCode::invalid_argument,
            "cannot normalize joint weights with non-positive total");
    weights = weights.cwiseMax(0.0) / total;
    return JointStatistics(std::move(weights));
  }

  static JointStatistics product(const PhotonStatistics& a, const PhotonStatistics& b) {
    Eigen::Map<const Eigen::VectorXd> va(a.probs().data(), static_cast<Eigen::Index>(a.size()));
    Eigen::Map<const Eigen::VectorXd> vb(b.probs().data(), static_cast<Eigen::Index>(b.size()));
    return normalized(va * vb.transpose());
  }

  const Eigen::MatrixXd& probs() const { return probs_; }
  int n_max1() const { return static_cast<int>(probs_.rows()) - 1; }
  int n_max2() const { return static_cast<int>(probs_.cols()) - 1; }

  PhotonStatistics marginal1() const {
    Eigen::VectorXd m = probs_.rowwise().sum();
    return PhotonStatistics::normalized(std::vector<double>(m.data(), m.data() + m.size()));
  }
  PhotonStatistics marginal2() const {
    Eigen::VectorXd m = probs_.colwise().sum().transpose();
    return PhotonStatistics::normalized(std::vector<double>(m.data(), m.data() + m.size()));
  }

 private:
  Eigen::MatrixXd probs_;
};

/// Raw photo-event counts c_k accumulated over frames. The count vector grows
/// on demand; it is never clipped.
class CountHistogram {
 public:
  CountHistogram() = default;

  explicit CountHistogram(std::vector<std::uint64_t> counts)
      : counts_(std::move(counts)), total_(std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0})) {}

  CountHistogram(std::vector<std::uint64_t> counts, std::uint64_t total_frames) : CountHistogram(std::move(counts)) {
    require(total_ == total_frames, ErrorCode::invalid_argument,
            "histogram counts sum to " + std::to_string(total_) + ", expected " + std::to_string(total_frames));
  }

  void record(std::size_t k, std::uint64_t times = 1) {
    if (k >= counts_.size()) counts_.resize(k + 1, 0);
    counts_[k] += times;
    total_ += times;
  }

  void merge(const CountHistogram& other) {
    if (other.counts_.size() > counts_.size()) counts_.resize(other.counts_.size(), 0);
    for (std::size_t k = 0; k < other.counts_.size(); ++k) counts_[k] += other.counts_[k];
    total_ += other.total_;
  }

  std::uint64_t total_frames() const { return total_; }
  /// Largest k with storage; -1 for an empty histogram.
  int k_max() const { return static_cast<int>(counts_.size()) - 1; }
  /// Largest k with a nonzero count; -1 if there is none.
  int k_observed_max() const {
    for (std::size_t k = counts_.size(); k-- > 0;)
      if (counts_[k] != 0) return static_cast<int>(k);
    return -1;
  }
  std::span<const std::uint64_t> counts() const { return counts_; }
  std::uint64_t operator[](std::size_t k) const { return k < counts_.size() ? counts_[k] : 0; }

  std::vector<double> normalized(std::size_t min_size = 0) const {
    require(total_ > 0, ErrorCode::invalid_argument, "empty histogram cannot be normalized");
    std::vector<double> p(std::max(counts_.size(), min_size), 0.0);
    for (std::size_t k = 0; k < counts_.size(); ++k) p[k] = static_cast<double>(counts_[k]) / static_cast<double>(total_);
    return p;
  }

  PhotonStatistics to_statistics() const { return PhotonStatistics::normalized(normalized(2)); }

  bool operator==(const CountHistogram& o) const {
    if (total_ != o.total_) return false;
    const std::size_t n = std::max(counts_.size(), o.counts_.size());
    for (std::size_t k = 0; k < n; ++k)
      if ((*this)[k] != o[k]) return false;
    return true;
  }

 private:
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

/// Joint counts c_{k1,k2}; grows on demand in both directions.
class JointCountHistogram {
 public:
  JointCountHistogram() = default;

  /// Row-major counts with explicit shape.
  JointCountHistogram(std::size_t rows, std::size_t cols, std::vector<std::uint64_t> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorCode::invalid_argument, "joint histogram shape mismatch");
    total_ = std::accumulate(data_.begin(), data_.end(), std::uint64_t{0});
  }

  JointCountHistogram(std::size_t rows, std::size_t cols, std::vector<std::uint64_t> data, std::uint64_t total_frames)
      : JointCountHistogram(rows, cols, std::move(data)) {
    require(total_ == total_frames, ErrorCode::invalid_argument, "joint histogram counts do not sum to total_frames");
  }

  void record(std::size_t k1, std::size_t k2, std::uint64_t times = 1) {
    if (k1 >= rows_ || k2 >= cols_) reshape(std::max(rows_, k1 + 1), std::max(cols_, k2 + 1));
    data_[k1 * cols_ + k2] += times;
    total_ += times;
  }

  void merge(const JointCountHistogram& other) {
    if (other.rows_ > rows_ || other.cols_ > cols_) reshape(std::max(rows_, other.rows_), std::max(cols_, other.cols_));
    for (std::size_t i = 0; i < other.rows_; ++i)
      for (std::size_t j = 0; j < other.cols_; ++j) data_[i * cols_ + j] += other.data_[i * other.cols_ + j];
    total_ += other.total_;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::uint64_t total_frames() const { return total_; }
  std::span<const std::uint64_t> data() const { return data_; }
  std::uint64_t operator()(std::size_t k1, std::size_t k2) const {
    return (k1 < rows_ && k2 < cols_) ? data_[k1 * cols_ + k2] : 0;
  }

  CountHistogram marginal1() const {
    std::vector<std::uint64_t> m(rows_, 0);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) m[i] += data_[i * cols_ + j];
    return CountHistogram(std::move(m));
  }
  CountHistogram marginal2() const {
    std::vector<std::uint64_t> m(cols_, 0);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) m[j] += data_[i * cols_ + j];
    return CountHistogram(std::move(m));
  }

  Eigen::MatrixXd normalized(std::size_t min_rows = 0, std::size_t min_cols = 0) const {
    require(total_ > 0, ErrorCode::invalid_argument, "empty joint histogram cannot be normalized");
    Eigen::MatrixXd p = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(std::max(rows_, min_rows)),
                                              static_cast<Eigen::Index>(std::max(cols_, min_cols)));
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j)
        p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
            static_cast<double>(data_[i * cols_ + j]) / static_cast<double>(total_);
    return p;
  }

  JointStatistics to_statistics() const { return JointStatistics::normalized(normalized(2, 2)); }

  bool operator==(const JointCountHistogram& o) const {
    if (total_ != o.total_) return false;
    const std::size_t r = std::max(rows_, o.rows_), c = std::max(cols_, o.cols_);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        if ((*this)(i, j) != o(i, j)) return false;
    return true;
  }

 private:
  void reshape(std::size_t rows, std::size_t cols) {
    std::vector<std::uint64_t> next(rows * cols, 0);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) next[i * cols + j] = data_[i * cols_ + j];
    data_ = std::move(next);
    rows_ = rows;
    cols_ = cols;
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint64_t> data_;
  std::uint64_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Poisson distribution

namespace detail {

// Poisson pmf on 0..upper, computed in log space.
inline std::vector<double> poisson_terms(double mean, int upper) {
  std::vector<double> p(static_cast<std::size_t>(upper) + 1, 0.0);
  if (mean == 0.0) {
    p[0] = 1.0;
    return p;
  }
  const double log_mean = std::log(mean);
  for (int n = 0; n <= upper; ++n) p[static_cast<std::size_t>(n)] = std::exp(-mean + n * log_mean - std::lgamma(n + 1.0));
  return p;
}

inline int poisson_scan_limit(double mean) {
  return static_cast<int>(std::ceil(mean + 40.0 * std::sqrt(mean) + 60.0));
}

}  // namespace detail

/// Mass of Poisson(mean) strictly above n_max.
inline double poisson_tail(double mean, int n_max) {
  require(mean >= 0.0 && std::isfinite(mean), ErrorCode::invalid_argument, "Poisson mean must be finite and >= 0");
  if (mean == 0.0) return 0.0;
  const int upper = std::max(n_max + 1, detail::poisson_scan_limit(mean));
  const auto p = detail::poisson_terms(mean, upper);
  double tail = 0.0;
  for (int n = upper; n > n_max; --n) tail += p[static_cast<std::size_t>(n)];
  return tail;
}

/// Smallest n_max >= 1 whose truncated Poisson tail is below the tolerance.
inline int default_n_max(double mean, double tail_tolerance = kPoissonTailTolerance) {
  require(mean >= 0.0 && std::isfinite(mean), ErrorCode::invalid_argument, "Poisson mean must be finite and >= 0");
  if (mean == 0.0) return 1;
  const int upper = detail::poisson_scan_limit(mean);
  const auto p = detail::poisson_terms(mean, upper);
  double tail = 0.0;
  int n_max = upper;
  for (int n = upper; n >= 1; --n) {
    tail += p[static_cast<std::size_t>(n)];
    if (tail >= tail_tolerance) break;
    n_max = n - 1;
  }
  return std::max(1, n_max);
}

/// Truncated, renormalized Poisson distribution. Throws TailTooHeavy if the
/// discarded mass reaches the tolerance.
inline PhotonStatistics poisson_pmf(double mean, int n_max) {
  require(n_max >= 1, ErrorCode::invalid_argument, "n_max must be >= 1");
  const double tail = poisson_tail(mean, n_max);
  require(tail < kPoissonTailTolerance, ErrorCode::tail_too_heavy,
          "Poisson(" + std::to_string(mean) + ") tail mass " + std::to_string(tail) + " at n_max=" + std::to_string(n_max));
  return PhotonStatistics::normalized(detail::poisson_terms(mean, n_max));
}

/// Bose-Einstein (thermal) distribution with the given mean, truncated.
inline PhotonStatistics thermal_pmf(double mean, int n_max) {
  require(mean >= 0.0 && n_max >= 1, ErrorCode::invalid_argument, "invalid thermal parameters");
  std::vector<double> p(static_cast<std::size_t>(n_max) + 1, 0.0);
  const double ratio = mean / (1.0 + mean);
  double term = 1.0 / (1.0 + mean);
  for (auto& v : p) {
    v = term;
    term *= ratio;
  }
  return PhotonStatistics::normalized(std::move(p));
}

// ---------------------------------------------------------------------------
// Metrics

inline Moments moments(std::span<const double> weights) { return detail::weighted_moments(weights); }
inline Moments moments(const PhotonStatistics& f) { return detail::weighted_moments(f.probs()); }
inline Moments moments(const CountHistogram& h) { return detail::weighted_moments(h.counts()); }

inline JointMoments joint_moments(const Eigen::MatrixXd& w) { return detail::joint_moments_of(w); }
inline JointMoments joint_moments(const JointStatistics& f) { return detail::joint_moments_of(f.probs()); }
inline JointMoments joint_moments(const JointCountHistogram& h) { return detail::joint_moments_of(h.normalized()); }

namespace detail {
inline double mandel_from(const Moments& m) {
  require(m.mean > 0.0, ErrorCode::zero_mean, "Mandel Q undefined for zero mean");
  return m.variance / m.mean - 1.0;
}
inline double fano_from(const JointMoments& m) {
  const double denom = m.mean1 + m.mean2;
  require(denom > 0.0, ErrorCode::zero_mean, "Fano factor undefined for zero summed mean");
  return (m.var1 + m.var2 - 2.0 * m.cov) / denom;
}
}  // namespace detail

/// Mandel parameter Q = variance / mean - 1.
inline double mandel_q(const PhotonStatistics& f) { return detail::mandel_from(moments(f)); }
inline double mandel_q(const CountHistogram& h) { return detail::mandel_from(moments(h)); }
inline double mandel_q(std::span<const double> w) { return detail::mandel_from(moments(w)); }

/// Noise-reduction factor R = Var(n1 - n2) / (<n1> + <n2>).
inline double fano_r(const JointStatistics& f) { return detail::fano_from(joint_moments(f)); }
inline double fano_r(const JointCountHistogram& h) { return detail::fano_from(joint_moments(h)); }
inline double fano_r(const Eigen::MatrixXd& w) { return detail::fano_from(joint_moments(w)); }

/// Pearson correlation between the two axes of a joint distribution.
inline double pearson(const JointMoments& m) {
  require(m.var1 > 0.0 && m.var2 > 0.0, ErrorCode::invalid_argument, "correlation undefined for zero variance");
  return m.cov / std::sqrt(m.var1 * m.var2);
}

/// Classical (Bhattacharyya) fidelity (sum_n sqrt(f_n g_n))^2.
inline double fidelity(const PhotonStatistics& f, const PhotonStatistics& g) {
  require(f.size() == g.size(), ErrorCode::dimension_mismatch,
          "fidelity needs equal n_max (" + std::to_string(f.n_max()) + " vs " + std::to_string(g.n_max()) + ")");
  double bc = 0.0;
  for (std::size_t n = 0; n < f.size(); ++n) bc += std::sqrt(f[n] * g[n]);
  return std::clamp(bc * bc, 0.0, 1.0);
}

inline double fidelity(const JointStatistics& f, const JointStatistics& g) {
  require(f.probs().rows() == g.probs().rows() && f.probs().cols() == g.probs().cols(), ErrorCode::dimension_mismatch,
          "joint fidelity needs equal shapes");
  const double bc = (f.probs().array() * g.probs().array()).sqrt().sum();
  return std::clamp(bc * bc, 0.0, 1.0);
}

/// Total-variation distance between two probability columns of equal length.
inline double total_variation(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::dimension_mismatch, "total variation needs equal lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

}  // namespace pnrcam
