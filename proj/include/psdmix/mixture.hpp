#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "psdmix/error.hpp"
#include "psdmix/psd.hpp"
#include "psdmix/random.hpp"

namespace psdmix {

using LatticePoint = std::vector<int>;

/// n x d table of nonnegative counts, row-major.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::size_t d) : d_(d) {}
  Dataset(std::size_t n, std::size_t d, std::vector<int> values)
      : n_(n), d_(d), values_(std::move(values)) {
    if (values_.size() != n_ * d_) throw DomainError("dataset size does not match n*d");
    for (int v : values_) {
      if (v < 0) throw DomainError("dataset entries must be nonnegative");
    }
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t d() const noexcept { return d_; }
  bool empty() const noexcept { return n_ == 0; }
  std::span<const int> row(std::size_t i) const { return {values_.data() + i * d_, d_}; }
  int at(std::size_t i, std::size_t j) const { return values_[i * d_ + j]; }
  const std::vector<int>& values() const noexcept { return values_; }

  void add_row(std::span<const int> row) {
    if (row.size() != d_) throw DomainError("row dimension mismatch");
    for (int v : row) {
      if (v < 0) throw DomainError("dataset entries must be nonnegative");
    }
    values_.insert(values_.end(), row.begin(), row.end());
    ++n_;
  }

  int column_max(std::size_t j) const {
    int m = 0;
    for (std::size_t i = 0; i < n_; ++i) m = std::max(m, at(i, j));
    return m;
  }
  double column_mean(std::size_t j) const {
    double s = 0.0;
    for (std::size_t i = 0; i < n_; ++i) s += at(i, j);
    return n_ == 0 ? 0.0 : s / static_cast<double>(n_);
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out(d_);
    out.values_.reserve(rows.size() * d_);
    for (std::size_t i : rows) out.add_row(row(i));
    return out;
  }

  static Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.d_ != b.d_) throw DomainError("dataset dimension mismatch");
    Dataset out(a.d_);
    out.values_ = a.values_;
    out.values_.insert(out.values_.end(), b.values_.begin(), b.values_.end());
    out.n_ = a.n_ + b.n_;
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  std::size_t n_ = 0;
  std::size_t d_ = 0;
  std::vector<int> values_;
};

/// Discrete mixing distribution: m support points in [0, R)^d with weights.
class MixingDistribution {
 public:
  MixingDistribution() = default;
  MixingDistribution(std::size_t d, std::vector<double> support, std::vector<double> weights)
      : d_(d), support_(std::move(support)), weights_(std::move(weights)) {
    if (d_ == 0) throw DomainError("mixing distribution dimension must be >= 1");
    if (weights_.empty()) throw DomainError("mixing distribution needs at least one point");
    if (support_.size() != weights_.size() * d_) {
      throw DomainError("support size does not match weights * d");
    }
    for (double w : weights_) {
      if (!(w >= 0.0)) throw DomainError("mixing weights must be nonnegative");
    }
  }

  static MixingDistribution point_mass(std::vector<double> theta) {
    const std::size_t d = theta.size();
    return MixingDistribution(d, std::move(theta), {1.0});
  }

  std::size_t dim() const noexcept { return d_; }
  std::size_t size() const noexcept { return weights_.size(); }
  std::span<const double> point(std::size_t l) const { return {support_.data() + l * d_, d_}; }
  double weight(std::size_t l) const { return weights_[l]; }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const std::vector<double>& support() const noexcept { return support_; }

  double total_weight() const { return std::accumulate(weights_.begin(), weights_.end(), 0.0); }

  void normalize() {
    const double s = total_weight();
    if (!(s > 0.0)) throw DomainError("mixing weights sum to zero");
    for (double& w : weights_) w /= s;
  }

  double max_coordinate() const {
    double m = 0.0;
    for (double x : support_) m = std::max(m, x);
    return m;
  }

  /// Throws unless weights sum to 1 (1e-12) and coordinates lie in [0, R).
  void validate(const PsdFamily& family) const {
    if (std::abs(total_weight() - 1.0) > 1e-12) throw DomainError("mixing weights must sum to 1");
    for (double x : support_) family.check_theta(x);
  }

  friend bool operator==(const MixingDistribution&, const MixingDistribution&) = default;

 private:
  std::size_t d_ = 0;
  std::vector<double> support_;
  std::vector<double> weights_;
};

namespace detail {

/// Neumaier-compensated running sum.
struct CompensatedSum {
  double sum = 0.0;
  double c = 0.0;
  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) {
      c += (sum - t) + x;
    } else {
      c += (x - t) + sum;
    }
    sum = t;
  }
  double value() const { return sum + c; }
};

inline double log_sum_exp(std::span<const double> xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline std::size_t checked_box_size(int K, std::size_t d, std::size_t cap) {
  std::size_t size = 1;
  const std::size_t side = static_cast<std::size_t>(K) + 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (size > cap / side) throw ResourceError("lattice box exceeds the enumeration cap");
    size *= side;
  }
  return size;
}

/// Visits every point of {0..K}^d in row-major order (last coordinate fastest).
template <class Fn>
void for_each_box_point(int K, std::size_t d, Fn&& fn) {
  std::vector<int> k(d, 0);
  while (true) {
    fn(std::span<const int>(k));
    std::size_t j = d;
    while (j > 0) {
      --j;
      if (k[j] < K) {
        ++k[j];
        break;
      }
      k[j] = 0;
      if (j == 0) return;
    }
    if (d == 0) return;
  }
}

}  // namespace detail

/// Maximum number of lattice points a dense box tabulation may allocate.
inline constexpr std::size_t kMaxTabulatedBox = 50'000'000;

/// pi(k) = sum_l p_l prod_j f_{theta_lj}(k_j).
class MixturePmf {
 public:
  MixturePmf(PsdFamily family, MixingDistribution mixing)
      : family_(family), mixing_(std::move(mixing)) {
    for (double x : mixing_.support()) family_.check_theta(x);
  }

  const PsdFamily& family() const noexcept { return family_; }
  const MixingDistribution& mixing() const noexcept { return mixing_; }
  std::size_t dim() const noexcept { return mixing_.dim(); }

  /// log f_{theta_l}(k) for component l.
  double component_log_mass(std::size_t l, std::span<const int> k) const {
    const auto theta = mixing_.point(l);
    double s = 0.0;
    for (std::size_t j = 0; j < theta.size(); ++j) s += log_pmf(family_, theta[j], k[j]);
    return s;
  }

  double log_mass(std::span<const int> k) const {
    if (k.size() != dim()) throw DomainError("lattice point dimension mismatch");
    std::vector<double> terms(mixing_.size());
    for (std::size_t l = 0; l < mixing_.size(); ++l) {
      const double w = mixing_.weight(l);
      terms[l] = w > 0.0 ? std::log(w) + component_log_mass(l, k)
                         : -std::numeric_limits<double>::infinity();
    }
    return detail::log_sum_exp(terms);
  }

  double mass(std::span<const int> k) const { return std::exp(log_mass(k)); }

  /// Mass outside the box {0..K}^d, i.e. P(max_j X_j > K).
  double tail_mass(int K) const {
    detail::CompensatedSum acc;
    for (std::size_t l = 0; l < mixing_.size(); ++l) {
      const auto theta = mixing_.point(l);
      double log_inside = 0.0;
      for (double t : theta) log_inside += std::log1p(-survival(family_, t, K));
      acc.add(mixing_.weight(l) * -std::expm1(log_inside));
    }
    return std::clamp(acc.value(), 0.0, 1.0);
  }

  double box_mass(int K) const {
    detail::CompensatedSum acc;
    for (std::size_t l = 0; l < mixing_.size(); ++l) {
      double inside = mixing_.weight(l);
      for (double t : mixing_.point(l)) inside *= cdf(family_, t, K);
      acc.add(inside);
    }
    return std::clamp(acc.value(), 0.0, 1.0);
  }

  /// Dense row-major table of pi over {0..K}^d.
  std::vector<double> tabulate(int K) const {
    const std::size_t d = dim();
    const std::size_t size = detail::checked_box_size(K, d, kMaxTabulatedBox);
    const std::size_t side = static_cast<std::size_t>(K) + 1;
    std::vector<double> out(size, 0.0);
    std::vector<double> marginal(side);
    std::vector<double> prod, next;
    for (std::size_t l = 0; l < mixing_.size(); ++l) {
      if (mixing_.weight(l) == 0.0) continue;
      prod.assign(1, mixing_.weight(l));
      for (std::size_t j = 0; j < d; ++j) {
        const double theta = mixing_.point(l)[j];
        for (std::size_t k = 0; k < side; ++k) {
          marginal[k] = pmf(family_, theta, static_cast<std::int64_t>(k));
        }
        next.resize(prod.size() * side);
        for (std::size_t a = 0; a < prod.size(); ++a) {
          for (std::size_t k = 0; k < side; ++k) next[a * side + k] = prod[a] * marginal[k];
        }
        prod.swap(next);
      }
      for (std::size_t i = 0; i < size; ++i) out[i] += prod[i];
    }
    return out;
  }

 private:
  PsdFamily family_;
  MixingDistribution mixing_;
};

inline double mixture_pmf(const MixturePmf& model, std::span<const int> k) {
  return model.mass(k);
}

inline double box_mass(const MixturePmf& model, int K) {
  if (K < 0) throw DomainError("box level must be >= 0");
  return model.box_mass(K);
}

/// Index of the first row with zero model probability, if any.
inline std::optional<std::size_t> zero_probability_row(const MixturePmf& model,
                                                       const Dataset& data) {
  for (std::size_t i = 0; i < data.n(); ++i) {
    if (model.log_mass(data.row(i)) == -std::numeric_limits<double>::infinity()) return i;
  }
  return std::nullopt;
}

/// Sum_i log pi(X_i); -infinity if some row has zero probability
/// (see zero_probability_row for which one).
inline double log_likelihood(const MixturePmf& model, const Dataset& data) {
  if (data.d() != model.dim()) throw DomainError("dataset dimension does not match model");
  detail::CompensatedSum acc;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const double lp = model.log_mass(data.row(i));
    if (lp == -std::numeric_limits<double>::infinity()) return lp;
    acc.add(lp);
  }
  return acc.value();
}

/// Draws the component by weight, then each coordinate independently.
inline std::size_t sample_component(const MixingDistribution& mixing, Rng& rng) {
  const double u = uniform01(rng) * mixing.total_weight();
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t l = 0; l < mixing.size(); ++l) {
    if (mixing.weight(l) <= 0.0) continue;
    acc += mixing.weight(l);
    last = l;
    if (u < acc) return l;
  }
  return last;
}

inline Dataset sample(const MixturePmf& model, std::size_t n, Rng& rng) {
  const std::size_t d = model.dim();
  std::vector<int> values(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto theta = model.mixing().point(sample_component(model.mixing(), rng));
    for (std::size_t j = 0; j < d; ++j) {
      values[i * d + j] = static_cast<int>(sample_psd(model.family(), theta[j], rng));
    }
  }
  return Dataset(n, d, std::move(values));
}

namespace detail {

/// Smallest K >= 0 with tail_mass(K) <= threshold.
template <class Pmf>
int smallest_box_with_tail(const Pmf& pmf, double threshold) {
  constexpr int kCap = 1'000'000;
  // Exponential bracket then bisection: tail_mass is nonincreasing in K.
  if (pmf.tail_mass(0) <= threshold) return 0;
  int hi = 1;
  while (pmf.tail_mass(hi) > threshold) {
    if (hi >= kCap) throw ResourceError("tail truncation search exceeded 1e6");
    hi = std::min(kCap, hi * 2);
  }
  int lo = hi / 2;  // tail(lo) > threshold
  while (hi - lo > 1) {
    const int mid = lo + (hi - lo) / 2;
    if (pmf.tail_mass(mid) <= threshold) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

}  // namespace detail

/// Smallest K with P(max_j X_j > K) <= (log(nd))^{2+d} / n.
inline int tail_index_Kn(const MixturePmf& model, std::size_t n, std::size_t d) {
  const double nd = static_cast<double>(n) * static_cast<double>(d);
  if (!(nd >= 3.0)) throw DomainError("tail index needs n*d >= 3");
  const double threshold = std::pow(std::log(nd), 2.0 + static_cast<double>(d)) / static_cast<double>(n);
  if (threshold >= 1.0) return 0;
  return detail::smallest_box_with_tail(model, threshold);
}

/// pi(K, ..., K).
inline double tau_n_corner(const MixturePmf& model, int Kn) {
  return model.mass(LatticePoint(model.dim(), Kn));
}

inline constexpr std::size_t kMaxTauEnumeration = 100'000'000;

/// min of pi over {0..Kn}^d.
inline double tau_n(const MixturePmf& model, int Kn) {
  if (Kn < 0) throw DomainError("Kn must be >= 0");
  const std::size_t d = model.dim();
  std::size_t box = 0;
  try {
    box = detail::checked_box_size(Kn, d, kMaxTauEnumeration);
  } catch (const ResourceError&) {
    box = 0;
  }
  if (box > 0 && box <= kMaxTabulatedBox) {
    const auto table = model.tabulate(Kn);
    return *std::min_element(table.begin(), table.end());
  }
  if (box > 0) {
    double best = std::numeric_limits<double>::infinity();
    detail::for_each_box_point(Kn, d, [&](std::span<const int> k) {
      best = std::min(best, model.mass(k));
    });
    return best;
  }
  // Every component marginal nonincreasing on {0..Kn} makes pi coordinatewise
  // nonincreasing, so the minimum sits at the far corner.
  for (std::size_t l = 0; l < model.mixing().size(); ++l) {
    for (double t : model.mixing().point(l)) {
      if (model.family().mode(t) > 0) {
        throw ResourceError("tau_n box too large and corner monotonicity not guaranteed");
      }
    }
  }
  return tau_n_corner(model, Kn);
}

struct TailBoundCheck {
  double lhs;
  double rhs;
  bool holds;
};

/// Compares P(max_j X_j > K) with A d t0^K for K >= max(U, W).
inline TailBoundCheck tail_bound_check(const MixturePmf& model, const TheoryConstants& constants,
                                       int K) {
  if (K < std::max(constants.U, constants.W)) throw DomainError("K must be >= max(U, W)");
  if (model.mixing().max_coordinate() > constants.theta_tilde) {
    throw DomainError("model support exceeds theta_tilde");
  }
  TailBoundCheck out{};
  out.lhs = model.tail_mass(K);
  out.rhs = constants.A * static_cast<double>(model.dim()) * std::pow(constants.t0, K);
  out.holds = out.lhs <= out.rhs;
  return out;
}

}  // namespace psdmix
