#pragma once

// Empirical and hybrid pmf estimators, and lattice distances between pmfs
// truncated to a finite box with a reported truncation bound.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "psdmix/error.hpp"
#include "psdmix/mixture.hpp"

namespace psdmix {

/// Relative frequencies of the observed lattice points.
class EmpiricalPmf {
 public:
  explicit EmpiricalPmf(const Dataset& data) : n_(data.n()), d_(data.d()) {
    if (data.empty()) throw DomainError("dataset is empty");
    for (std::size_t i = 0; i < data.n(); ++i) {
      const auto r = data.row(i);
      ++counts_[LatticePoint(r.begin(), r.end())];
      max_obs_ = std::max(max_obs_, *std::max_element(r.begin(), r.end()));
    }
  }

  std::size_t n() const noexcept { return n_; }
  std::size_t dim() const noexcept { return d_; }
  int max_observation() const noexcept { return max_obs_; }
  const std::map<LatticePoint, std::size_t>& counts() const noexcept { return counts_; }

  double mass(std::span<const int> k) const {
    if (k.size() != d_) throw DomainError("lattice point dimension mismatch");
    const auto it = counts_.find(LatticePoint(k.begin(), k.end()));
    return it == counts_.end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(n_);
  }

  /// Number of observations with max_j k_j > K.
  std::size_t count_outside(int K) const {
    std::size_t c = 0;
    for (const auto& [k, cnt] : counts_) {
      if (*std::max_element(k.begin(), k.end()) > K) c += cnt;
    }
    return c;
  }

  double tail_mass(int K) const {
    return static_cast<double>(count_outside(K)) / static_cast<double>(n_);
  }

  std::vector<double> tabulate(int K) const {
    const std::size_t size = detail::checked_box_size(K, d_, kMaxTabulatedBox);
    std::vector<double> out(size, 0.0);
    const std::size_t side = static_cast<std::size_t>(K) + 1;
    for (const auto& [k, cnt] : counts_) {
      if (*std::max_element(k.begin(), k.end()) > K) continue;
      std::size_t idx = 0;
      for (int kj : k) idx = idx * side + static_cast<std::size_t>(kj);
      out[idx] = static_cast<double>(cnt) / static_cast<double>(n_);
    }
    return out;
  }

 private:
  std::size_t n_;
  std::size_t d_;
  int max_obs_ = 0;
  std::map<LatticePoint, std::size_t> counts_;
};

inline EmpiricalPmf empirical(const Dataset& data) { return EmpiricalPmf(data); }

/// Smallest K with P_fitted(max_j X_j > K) <= 1 / (log(nd))^{2+d}.
inline int k_tilde(const MixturePmf& fitted, std::size_t n, std::size_t d) {
  const double nd = static_cast<double>(n) * static_cast<double>(d);
  if (!(nd >= 3.0)) throw DomainError("k_tilde needs n*d >= 3");
  const double threshold = std::pow(std::log(nd), -(2.0 + static_cast<double>(d)));
  return detail::smallest_box_with_tail(fitted, threshold);
}

/// Empirical pmf on {0..K~}^d, fitted mixture outside, renormalized by s~.
class HybridPmf {
 public:
  HybridPmf(EmpiricalPmf emp, MixturePmf fitted, int k_tilde)
      : empirical_(std::move(emp)), fitted_(std::move(fitted)), k_tilde_(k_tilde) {
    if (empirical_.dim() != fitted_.dim()) throw DomainError("dimension mismatch");
    if (k_tilde_ < 0) throw DomainError("k_tilde must be >= 0");
    inside_ = 1.0 - empirical_.tail_mass(k_tilde_);
    outside_ = fitted_.tail_mass(k_tilde_);
    s_tilde_ = inside_ + outside_;
    if (!(s_tilde_ > 0.0)) throw DomainError("hybrid normalizer is zero");
  }

  const EmpiricalPmf& empirical() const noexcept { return empirical_; }
  const MixturePmf& fitted() const noexcept { return fitted_; }
  int k_tilde() const noexcept { return k_tilde_; }
  double s_tilde() const noexcept { return s_tilde_; }
  std::size_t dim() const noexcept { return fitted_.dim(); }

  double mass(std::span<const int> k) const {
    const int mx = *std::max_element(k.begin(), k.end());
    return (mx <= k_tilde_ ? empirical_.mass(k) : fitted_.mass(k)) / s_tilde_;
  }

  double tail_mass(int K) const {
    if (K >= k_tilde_) return fitted_.tail_mass(K) / s_tilde_;
    const double between = static_cast<double>(empirical_.count_outside(K) - empirical_.count_outside(k_tilde_)) /
                           static_cast<double>(empirical_.n());
    return std::min(1.0, (between + outside_) / s_tilde_);
  }

  std::vector<double> tabulate(int K) const {
    std::vector<double> out = fitted_.tabulate(K);
    const std::size_t side = static_cast<std::size_t>(K) + 1;
    const int inner = std::min(K, k_tilde_);
    std::size_t idx = 0;
    std::size_t pos = 0;
    detail::for_each_box_point(K, dim(), [&](std::span<const int> k) {
      if (*std::max_element(k.begin(), k.end()) <= inner) out[pos] = 0.0;
      ++pos;
    });
    for (const auto& [k, cnt] : empirical_.counts()) {
      if (*std::max_element(k.begin(), k.end()) > inner) continue;
      idx = 0;
      for (int kj : k) idx = idx * side + static_cast<std::size_t>(kj);
      out[idx] = static_cast<double>(cnt) / static_cast<double>(empirical_.n());
    }
    for (double& v : out) v /= s_tilde_;
    return out;
  }

 private:
  EmpiricalPmf empirical_;
  MixturePmf fitted_;
  int k_tilde_;
  double inside_ = 0.0;
  double outside_ = 0.0;
  double s_tilde_ = 1.0;
};

inline HybridPmf hybrid(const EmpiricalPmf& emp, const MixturePmf& fitted, std::size_t n, std::size_t d) {
  return HybridPmf(emp, fitted, k_tilde(fitted, n, d));
}

inline double hybrid_eval(const HybridPmf& h, std::span<const int> k) { return h.mass(k); }

enum class Metric { Hellinger, L1, L2, Linf };

inline std::string metric_name(Metric m) {
  switch (m) {
    case Metric::Hellinger: return "hellinger";
    case Metric::L1: return "l1";
    case Metric::L2: return "l2";
    case Metric::Linf: return "linf";
  }
  return "?";
}

inline Metric parse_metric(std::string_view s) {
  if (s == "hellinger") return Metric::Hellinger;
  if (s == "l1") return Metric::L1;
  if (s == "l2") return Metric::L2;
  if (s == "linf") return Metric::Linf;
  throw DomainError("unknown metric '" + std::string(s) + "'");
}

struct DistanceResult {
  double value;
  double truncation_bound;  ///< dominates |value - exact distance|
};

inline constexpr std::size_t kMaxDistanceBox = 10'000'000;

/// Smallest K with both tails <= eps_tail.
template <class P, class Q>
int truncation_level(const P& p, const Q& q, double eps_tail) {
  return std::max(detail::smallest_box_with_tail(p, eps_tail), detail::smallest_box_with_tail(q, eps_tail));
}

namespace detail {

/// Largest K <= K_star whose box fits the distance cap.
inline int capped_box_level(int K_star, std::size_t d) {
  int K = K_star;
  while (K > 0) {
    try {
      checked_box_size(K, d, kMaxDistanceBox);
      return K;
    } catch (const ResourceError&) {
      K = std::min(K - 1, static_cast<int>(std::pow(static_cast<double>(kMaxDistanceBox), 1.0 / static_cast<double>(d))) - 1);
    }
  }
  return 0;
}

/// sum_k f_a(k) f_b(k) for one coordinate.
inline double pair_collision(const PsdFamily& family, double a, double b) {
  constexpr std::int64_t kMaxTerms = 10'000'000;
  const double x = a * b;
  switch (family.kind()) {
    case FamilyKind::Geometric:
      return (1.0 - a) * (1.0 - b) / (1.0 - x);
    case FamilyKind::Poisson: {
      if (x == 0.0) return std::exp(-(a + b));
      CompensatedSum acc;
      const double log_x = std::log(x);
      for (std::int64_t k = 0; k < kMaxTerms; ++k) {
        const double kk = static_cast<double>(k);
        const double t = std::exp(kk * log_x - 2.0 * std::lgamma(kk + 1.0) - a - b);
        acc.add(t);
        if (kk * kk > x && t <= 1e-18 * acc.value()) return acc.value();
      }
      break;
    }
    case FamilyKind::NegativeBinomial: {
      const double v = family.v();
      const double log_scale = v * (std::log1p(-a) + std::log1p(-b));
      if (x == 0.0) return std::exp(log_scale);
      // 2F1(v, v; 1; x), Euler-transformed near x = 1 where it converges faster.
      const bool euler = x > 0.5;
      const double shift = euler ? 1.0 - v : v;
      CompensatedSum acc;
      double t = 1.0;
      for (std::int64_t k = 0; k < kMaxTerms; ++k) {
        acc.add(t);
        const double kk = static_cast<double>(k);
        const double r = (kk + shift) / (kk + 1.0);
        t *= r * r * x;
        if (t == 0.0 || (std::abs(r * r * x) < 1.0 && std::abs(t) <= 1e-18 * std::abs(acc.value()))) {
          const double log_extra = euler ? (1.0 - 2.0 * v) * std::log1p(-x) : 0.0;
          return std::exp(log_scale + log_extra) * acc.value();
        }
      }
      break;
    }
  }
  throw ResourceError("collision series did not converge");
}

inline double collision_mass(const MixturePmf& p) {
  const auto& q = p.mixing();
  CompensatedSum acc;
  for (std::size_t l = 0; l < q.size(); ++l) {
    for (std::size_t r = l; r < q.size(); ++r) {
      double prod = q.weight(l) * q.weight(r) * (l == r ? 1.0 : 2.0);
      for (std::size_t j = 0; j < q.dim(); ++j) prod *= pair_collision(p.family(), q.point(l)[j], q.point(r)[j]);
      acc.add(prod);
    }
  }
  return acc.value();
}

inline double collision_mass(const EmpiricalPmf& p) {
  CompensatedSum acc;
  const double n = static_cast<double>(p.n());
  for (const auto& [k, cnt] : p.counts()) acc.add((static_cast<double>(cnt) / n) * (static_cast<double>(cnt) / n));
  return acc.value();
}

inline double collision_mass(const HybridPmf& p) {
  CompensatedSum inside;
  const double n = static_cast<double>(p.empirical().n());
  for (const auto& [k, cnt] : p.empirical().counts()) {
    if (*std::max_element(k.begin(), k.end()) <= p.k_tilde()) {
      inside.add((static_cast<double>(cnt) / n) * (static_cast<double>(cnt) / n));
    }
  }
  CompensatedSum box;
  for (double v : p.fitted().tabulate(p.k_tilde())) box.add(v * v);
  const double outside = std::max(0.0, collision_mass(p.fitted()) - box.value());
  return (inside.value() + outside) / (p.s_tilde() * p.s_tilde());
}

/// Largest p(k) over lattice points with zero empirical count, given that the
/// answer is only needed when it exceeds `floor`. Returns {value, bound}.
template <class P>
std::pair<double, double> max_off_support(const P& p, const EmpiricalPmf& q, double floor) {
  if constexpr (std::is_same_v<P, EmpiricalPmf>) {
    double mx = 0.0;
    for (const auto& [k, cnt] : p.counts()) {
      if (q.counts().find(k) == q.counts().end()) mx = std::max(mx, p.mass(k));
    }
    return {mx, 0.0};
  } else {
    const int K = capped_box_level(smallest_box_with_tail(p, floor), p.dim());
    const auto table = p.tabulate(K);
    const std::size_t side = static_cast<std::size_t>(K) + 1;
    std::vector<char> observed(table.size(), 0);
    for (const auto& [k, cnt] : q.counts()) {
      if (*std::max_element(k.begin(), k.end()) > K) continue;
      std::size_t idx = 0;
      for (int kj : k) idx = idx * side + static_cast<std::size_t>(kj);
      observed[idx] = 1;
    }
    double mx = 0.0;
    for (std::size_t i = 0; i < table.size(); ++i) {
      if (!observed[i]) mx = std::max(mx, table[i]);
    }
    const double tail = p.tail_mass(K);
    return {mx, tail <= std::max(mx, floor) ? 0.0 : tail};
  }
}

/// Exact distances against an empirical pmf: sums over its finite support plus
/// closed-form complements (total mass, collision mass) for the rest.
template <class P>
std::vector<DistanceResult> distances_to_empirical(const P& p, const EmpiricalPmf& q,
                                                   const std::vector<Metric>& metrics, double eps_tail) {
  CompensatedSum on_mass, h2, l1, l2, p_sq;
  double linf = 0.0;
  for (const auto& [k, cnt] : q.counts()) {
    const double pk = p.mass(k);
    const double qk = static_cast<double>(cnt) / static_cast<double>(q.n());
    const double diff = std::sqrt(pk) - std::sqrt(qk);
    on_mass.add(pk);
    h2.add(0.5 * diff * diff);
    l1.add(std::abs(pk - qk));
    l2.add((pk - qk) * (pk - qk));
    p_sq.add(pk * pk);
    linf = std::max(linf, std::abs(pk - qk));
  }
  const double off_mass = std::max(0.0, 1.0 - on_mass.value());
  std::vector<DistanceResult> out;
  for (Metric m : metrics) {
    switch (m) {
      case Metric::Hellinger:
        out.push_back({std::sqrt(std::clamp(h2.value() + 0.5 * off_mass, 0.0, 1.0)), 0.0});
        break;
      case Metric::L1:
        out.push_back({l1.value() + off_mass, 0.0});
        break;
      case Metric::L2: {
        const double off_sq = std::max(0.0, collision_mass(p) - p_sq.value());
        out.push_back({std::sqrt(l2.value() + off_sq), 0.0});
        break;
      }
      case Metric::Linf: {
        const auto [off, bound] = max_off_support(p, q, std::max(linf, eps_tail));
        out.push_back({std::max(linf, off), bound});
        break;
      }
    }
  }
  return out;
}

inline DistanceResult distance_from_tables(const std::vector<double>& a, const std::vector<double>& b,
                                           double tp, double tq, Metric metric, double eps_tail) {
  CompensatedSum acc;
  switch (metric) {
    case Metric::Hellinger: {
      // 1/2 sum (sqrt p - sqrt q)^2 avoids cancellation for nearby pmfs.
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = std::sqrt(a[i]) - std::sqrt(b[i]);
        acc.add(0.5 * diff * diff);
      }
      // Off-box: 1/2 (tp + tq) - sum_tail sqrt(pq), the last term in [0, sqrt(tp tq)].
      const double cross = std::sqrt(tp * tq);
      const double h2 = std::clamp(acc.value() + 0.5 * (tp + tq) - 0.5 * cross, 0.0, 1.0);
      return {std::sqrt(h2), std::sqrt(2.0 * std::max({eps_tail, tp, tq}))};
    }
    case Metric::L1: {
      for (std::size_t i = 0; i < a.size(); ++i) acc.add(std::abs(a[i] - b[i]));
      return {acc.value() + 0.5 * (std::abs(tp - tq) + tp + tq), tp + tq};
    }
    case Metric::L2: {
      for (std::size_t i = 0; i < a.size(); ++i) acc.add((a[i] - b[i]) * (a[i] - b[i]));
      return {std::sqrt(acc.value()), std::max(tp, tq)};
    }
    case Metric::Linf: {
      double mx = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a[i] - b[i]));
      return {mx, std::max(tp, tq)};
    }
  }
  throw DomainError("unknown metric");
}

}  // namespace detail

/// Several metrics at once. Against an empirical pmf the sums run over its
/// support and are exact; otherwise both pmfs are tabulated on the smallest box
/// with tails <= eps_tail (shrunk to the box cap if needed, with the bound
/// widened accordingly).
template <class P, class Q>
std::vector<DistanceResult> distances(const P& p, const Q& q, const std::vector<Metric>& metrics,
                                      double eps_tail = 1e-12) {
  if (!(eps_tail > 0.0)) throw DomainError("eps_tail must be positive");
  if (p.dim() != q.dim()) throw DomainError("dimension mismatch");
  if constexpr (std::is_same_v<Q, EmpiricalPmf>) {
    return detail::distances_to_empirical(p, q, metrics, eps_tail);
  } else if constexpr (std::is_same_v<P, EmpiricalPmf>) {
    return detail::distances_to_empirical(q, p, metrics, eps_tail);
  } else {
    const int K = detail::capped_box_level(truncation_level(p, q, eps_tail), p.dim());
    const auto a = p.tabulate(K);
    const auto b = q.tabulate(K);
    const double tp = p.tail_mass(K);
    const double tq = q.tail_mass(K);
    std::vector<DistanceResult> out;
    for (Metric m : metrics) out.push_back(detail::distance_from_tables(a, b, tp, tq, m, eps_tail));
    return out;
  }
}

/// Hellinger is reported as h, with h^2 = 1 - sum sqrt(p q).
template <class P, class Q>
DistanceResult distance(const P& p, const Q& q, Metric metric, double eps_tail = 1e-12) {
  return distances(p, q, std::vector<Metric>{metric}, eps_tail).front();
}

/// Box sum plus closed-form tail, for normalization checks.
template <class P>
double total_mass(const P& p, int K) {
  detail::CompensatedSum acc;
  for (double v : p.tabulate(K)) acc.add(v);
  acc.add(p.tail_mass(K));
  return acc.value();
}

}  // namespace psdmix
