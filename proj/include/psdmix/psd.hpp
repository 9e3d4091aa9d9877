#pragma once

// Power-series families f_theta(k) = b_k theta^k / b(theta) on k = 0, 1, 2, ...
//
//   Poisson            b_k = 1/k!             b(theta) = e^theta        R = inf
//   Geometric          b_k = 1                b(theta) = 1/(1-theta)    R = 1
//   Negative binomial  b_k = C(k+v-1, k)      b(theta) = (1-theta)^-v   R = 1

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>

#include "psdmix/error.hpp"
#include "psdmix/random.hpp"

namespace psdmix {

enum class FamilyKind { Poisson, Geometric, NegativeBinomial };

class PsdFamily {
 public:
  static PsdFamily poisson() { return PsdFamily(FamilyKind::Poisson, 0.0); }
  static PsdFamily geometric() { return PsdFamily(FamilyKind::Geometric, 0.0); }
  static PsdFamily negative_binomial(double v) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw DomainError("negative binomial stopping parameter must be positive");
    }
    return PsdFamily(FamilyKind::NegativeBinomial, v);
  }

  /// Builds a family from its serialized tag (`poisson`, `geometric`, `negbin`).
  static PsdFamily from_tag(std::string_view tag, std::optional<double> v = std::nullopt) {
    if (tag == "poisson") return poisson();
    if (tag == "geometric") return geometric();
    if (tag == "negbin") return negative_binomial(v.value_or(2.0));
    throw DomainError("unknown family tag '" + std::string(tag) + "'");
  }

  FamilyKind kind() const noexcept { return kind_; }
  /// Stopping parameter; meaningful only for the negative binomial.
  double v() const noexcept { return v_; }
  double radius() const noexcept {
    return kind_ == FamilyKind::Poisson ? std::numeric_limits<double>::infinity() : 1.0;
  }
  bool finite_radius() const noexcept { return kind_ != FamilyKind::Poisson; }

  std::string tag() const {
    switch (kind_) {
      case FamilyKind::Poisson: return "poisson";
      case FamilyKind::Geometric: return "geometric";
      case FamilyKind::NegativeBinomial: return "negbin";
    }
    return "";
  }

  /// log b_k, evaluated in extended precision; the lgamma terms cancel heavily.
  long double log_coefficient_ext(std::int64_t k) const {
    const long double kk = static_cast<long double>(k);
    switch (kind_) {
      case FamilyKind::Poisson: return -std::lgamma(kk + 1.0L);
      case FamilyKind::Geometric: return 0.0L;
      case FamilyKind::NegativeBinomial: {
        const long double v = v_;
        return std::lgamma(kk + v) - std::lgamma(v) - std::lgamma(kk + 1.0L);
      }
    }
    return 0.0L;
  }

  double log_coefficient(std::int64_t k) const { return static_cast<double>(log_coefficient_ext(k)); }

  /// b_{k+1} / b_k
  double coefficient_ratio(std::int64_t k) const {
    const double kk = static_cast<double>(k);
    switch (kind_) {
      case FamilyKind::Poisson: return 1.0 / (kk + 1.0);
      case FamilyKind::Geometric: return 1.0;
      case FamilyKind::NegativeBinomial: return (kk + v_) / (kk + 1.0);
    }
    return 0.0;
  }

  /// lim b_{k+1}/b_k = 1/R
  double coefficient_ratio_limit() const noexcept {
    return kind_ == FamilyKind::Poisson ? 0.0 : 1.0;
  }

  /// log b(theta)
  double log_normalizer(double theta) const {
    switch (kind_) {
      case FamilyKind::Poisson: return theta;
      case FamilyKind::Geometric: return -std::log1p(-theta);
      case FamilyKind::NegativeBinomial: return -v_ * std::log1p(-theta);
    }
    return 0.0;
  }

  /// b'(theta) / b(theta)
  double normalizer_log_derivative(double theta) const {
    switch (kind_) {
      case FamilyKind::Poisson: return 1.0;
      case FamilyKind::Geometric: return 1.0 / (1.0 - theta);
      case FamilyKind::NegativeBinomial: return v_ / (1.0 - theta);
    }
    return 0.0;
  }

  double mean(double theta) const { return theta * normalizer_log_derivative(theta); }

  /// Inverse of mean(): the parameter whose distribution has mean m >= 0.
  double theta_from_mean(double m) const {
    switch (kind_) {
      case FamilyKind::Poisson: return m;
      case FamilyKind::Geometric: return m / (1.0 + m);
      case FamilyKind::NegativeBinomial: return m / (m + v_);
    }
    return 0.0;
  }

  /// Largest k maximizing f_theta(k).
  std::int64_t mode(double theta) const {
    switch (kind_) {
      case FamilyKind::Poisson: return static_cast<std::int64_t>(std::floor(theta));
      case FamilyKind::Geometric: return 0;
      case FamilyKind::NegativeBinomial:
        return v_ <= 1.0 ? 0
                         : static_cast<std::int64_t>(std::floor((v_ - 1.0) * theta / (1.0 - theta)));
    }
    return 0;
  }

  void check_theta(double theta) const {
    if (!(theta >= 0.0) || !(theta < radius())) {
      throw DomainError("theta=" + std::to_string(theta) + " outside [0, R) for family " + tag());
    }
  }

  friend bool operator==(const PsdFamily& a, const PsdFamily& b) {
    return a.kind_ == b.kind_ && a.v_ == b.v_;
  }

 private:
  PsdFamily(FamilyKind kind, double v) : kind_(kind), v_(v) {}

  FamilyKind kind_;
  double v_;
};

/// k * log(theta) with the convention 0 * log 0 = 0.
inline double xlogy(double k, double log_theta) {
  return k == 0.0 ? 0.0 : k * log_theta;
}

/// log f_theta(k). Returns -infinity for theta = 0 and k > 0.
inline double log_pmf(const PsdFamily& family, double theta, std::int64_t k) {
  family.check_theta(theta);
  if (k < 0) throw DomainError("negative count");
  if (theta == 0.0) return k == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
  const long double t = theta;
  const long double log_b = family.kind() == FamilyKind::Poisson ? t
                            : family.kind() == FamilyKind::Geometric
                                ? -std::log1p(-t)
                                : -static_cast<long double>(family.v()) * std::log1p(-t);
  return static_cast<double>(family.log_coefficient_ext(k) + static_cast<long double>(k) * std::log(t) - log_b);
}

inline double pmf(const PsdFamily& family, double theta, std::int64_t k) {
  return std::exp(log_pmf(family, theta, k));
}

namespace detail {

// Terms are summed with the ratio recurrence f(k+1) = f(k) * theta * b_{k+1}/b_k.
// Past the mode they decrease, so a term below 1e-16 of the running mass ends the sum.
inline bool negligible_tail(const PsdFamily& family, double theta, std::int64_t k, double term,
                            double acc) {
  return k > family.mode(theta) && term < 1e-16 * acc;
}

}  // namespace detail

/// P(X <= K).
inline double cdf(const PsdFamily& family, double theta, std::int64_t K) {
  family.check_theta(theta);
  if (K < 0) return 0.0;
  if (theta == 0.0) return 1.0;
  if (family.kind() == FamilyKind::Geometric) {
    return -std::expm1(static_cast<double>(K + 1) * std::log(theta));
  }
  double term = pmf(family, theta, 0);
  double acc = term;
  for (std::int64_t k = 0; k < K; ++k) {
    term *= theta * family.coefficient_ratio(k);
    acc += term;
    if (detail::negligible_tail(family, theta, k + 1, term, acc)) break;
  }
  return std::min(acc, 1.0);
}

/// P(X > K), summed directly so it keeps relative accuracy far in the tail.
inline double survival(const PsdFamily& family, double theta, std::int64_t K) {
  family.check_theta(theta);
  if (K < 0) return 1.0;
  if (theta == 0.0) return 0.0;
  if (family.kind() == FamilyKind::Geometric) {
    return std::exp(static_cast<double>(K + 1) * std::log(theta));
  }
  if (K + 1 <= family.mode(theta)) return std::max(0.0, 1.0 - cdf(family, theta, K));
  double term = pmf(family, theta, K + 1);
  double acc = term;
  for (std::int64_t k = K + 1; term > 0.0; ++k) {
    term *= theta * family.coefficient_ratio(k);
    acc += term;
    if (term < 1e-17 * acc) break;
  }
  return std::min(acc, 1.0);
}

/// Generalized inverse min{k : F(k) >= u}, by sequential search from k = 0.
inline std::int64_t quantile(const PsdFamily& family, double theta, double u) {
  family.check_theta(theta);
  if (!(u >= 0.0) || !(u < 1.0)) throw DomainError("quantile level must lie in [0, 1)");
  if (theta == 0.0) return 0;
  double term = pmf(family, theta, 0);
  double acc = term;
  std::int64_t k = 0;
  while (acc < u) {
    term *= theta * family.coefficient_ratio(k);
    ++k;
    acc += term;
    // Rounding can leave the accumulated mass just short of u near 1.
    if (detail::negligible_tail(family, theta, k, term, acc)) break;
  }
  return k;
}

/// One draw from f_theta. Inversion for moderate means; libstdc++'s
/// rejection sampler beyond a Poisson mean of 30.
inline std::int64_t sample_psd(const PsdFamily& family, double theta, Rng& rng) {
  if (family.kind() == FamilyKind::Poisson && theta > 30.0) {
    std::poisson_distribution<std::int64_t> dist(theta);
    return dist(rng);
  }
  return quantile(family, theta, uniform01(rng));
}

/// theta -> f_theta(k) normalized into a density: Gamma(a, rate 1) or Beta(a, b).
struct DualDensity {
  enum class Kind { Gamma, Beta };
  Kind kind;
  double a;
  double b;  // rate 1 for Gamma

  double log_density(double theta) const {
    if (kind == Kind::Gamma) {
      if (theta < 0.0) return -std::numeric_limits<double>::infinity();
      return xlogy(a - 1.0, std::log(theta)) - theta - std::lgamma(a);
    }
    if (theta < 0.0 || theta > 1.0) return -std::numeric_limits<double>::infinity();
    return xlogy(a - 1.0, std::log(theta)) + xlogy(b - 1.0, std::log1p(-theta)) -
           (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
  }
  double density(double theta) const { return std::exp(log_density(theta)); }

  double mode() const {
    if (kind == Kind::Gamma) return a - 1.0;
    return (a - 1.0) / (a + b - 2.0);
  }

  double sample(Rng& rng) const {
    return kind == Kind::Gamma ? gamma_variate(rng, a) : beta_variate(rng, a, b);
  }
};

struct DualDensityResult {
  DualDensity density;
  double log_c;  ///< f_theta(k) = exp(log_c) * density(theta)
  double c() const { return std::exp(log_c); }
};

inline DualDensityResult dual_density(const PsdFamily& family, std::int64_t k) {
  if (k < 0) throw DomainError("negative count");
  const double kk = static_cast<double>(k);
  switch (family.kind()) {
    case FamilyKind::Poisson:
      return {{DualDensity::Kind::Gamma, kk + 1.0, 1.0}, 0.0};
    case FamilyKind::Geometric:
      return {{DualDensity::Kind::Beta, kk + 1.0, 2.0}, -std::log((kk + 1.0) * (kk + 2.0))};
    case FamilyKind::NegativeBinomial: {
      const double v = family.v();
      const double log_beta = std::lgamma(kk + 1.0) + std::lgamma(v + 1.0) - std::lgamma(kk + v + 2.0);
      return {{DualDensity::Kind::Beta, kk + 1.0, v + 1.0}, family.log_coefficient(k) + log_beta};
    }
  }
  return {{DualDensity::Kind::Gamma, 1.0, 1.0}, 0.0};
}

/// Constants governing tail decay of the mixture under compact support.
struct TheoryConstants {
  double support_bound;  ///< q0 * R for finite R, M otherwise
  double q0;             ///< support_bound / R (finite R only)
  double delta0;
  double eta0;
  int d;
  double t0;
  double theta_tilde;
  std::int64_t U;
  std::int64_t W;
  std::int64_t V;
  double A;
  std::uint64_t N;  ///< saturates at uint64 max
};

inline TheoryConstants theory_constants(const PsdFamily& family, double support_bound,
                                        double delta0, double eta0, int d) {
  if (d < 1) throw DomainError("dimension must be >= 1");
  if (!(support_bound > 0.0) || !(support_bound < family.radius())) {
    throw DomainError("support bound must lie in (0, R)");
  }
  if (!(delta0 > 0.0) || !(delta0 < support_bound)) {
    throw DomainError("delta0 must lie in (0, support bound)");
  }
  if (!(eta0 > 0.0) || !(eta0 < 1.0)) throw DomainError("eta0 must lie in (0, 1)");

  TheoryConstants c{};
  c.support_bound = support_bound;
  c.delta0 = delta0;
  c.eta0 = eta0;
  c.d = d;
  if (family.finite_radius()) {
    c.q0 = support_bound / family.radius();
    c.t0 = (c.q0 + 1.0) / 2.0;
    c.theta_tilde = c.q0 * family.radius();
  } else {
    c.q0 = std::numeric_limits<double>::quiet_NaN();
    c.t0 = 0.5;
    c.theta_tilde = support_bound;
  }

  // b'/b is nondecreasing on (0, theta~) for all three families, so its
  // supremum is the value at theta~.
  c.U = static_cast<std::int64_t>(
            std::floor(c.theta_tilde * family.normalizer_log_derivative(c.theta_tilde))) +
        1;

  // The coefficient ratio is monotone in k, so max_{k>=w} ratio(k) is the
  // larger of ratio(w) and the limit.
  const double bound = c.t0 / c.theta_tilde;
  const double limit = family.coefficient_ratio_limit();
  constexpr std::int64_t kScanCap = 1'000'000;
  c.W = -1;
  for (std::int64_t w = 3; w <= kScanCap; ++w) {
    if (std::max(family.coefficient_ratio(w), limit) <= bound) {
      c.W = w;
      break;
    }
  }
  if (c.W < 0) throw ResourceError("W scan exceeded 1e6 without meeting the ratio bound");

  // V: smallest V >= 1 with b_k/b_0 >= k^-k for all k >= V (scanned to 1e4;
  // log b_k + k log k grows without bound for these families).
  const double log_b0 = family.log_coefficient(0);
  c.V = 1;
  for (std::int64_t k = 1; k <= 10'000; ++k) {
    const double kk = static_cast<double>(k);
    if (family.log_coefficient(k) - log_b0 < -kk * std::log(kk)) c.V = k + 1;
  }

  c.A = pmf(family, c.theta_tilde, c.W) /
        ((1.0 - c.t0) * std::pow(c.t0, static_cast<double>(c.W - 1)));

  const double dd = static_cast<double>(d);
  const double b_delta_term =
      std::exp(family.log_normalizer(delta0) - log_b0) / std::pow(eta0, 1.0 / dd);
  const double inner = std::max({static_cast<double>(c.U), static_cast<double>(c.V),
                                 static_cast<double>(c.W), b_delta_term,
                                 1.0 / std::pow(delta0, 1.0 / dd)});
  const double log_first = -std::log(dd) + std::log(1.0 / std::sqrt(c.t0)) * inner;
  const double log_second =
      -(static_cast<double>(c.W - 1) * std::log(c.t0) + std::log1p(-c.t0));
  const double log_n = std::max(log_first, log_second);
  if (log_n >= std::log(18446744073709551615.0)) {
    c.N = std::numeric_limits<std::uint64_t>::max();
  } else {
    c.N = static_cast<std::uint64_t>(std::floor(std::exp(log_n))) + 1;
  }
  return c;
}

}  // namespace psdmix
