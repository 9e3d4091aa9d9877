#pragma once

// Scenario mixing distributions and dependent-count generators used as
// alternatives for the conditional-independence test.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "psdmix/error.hpp"
#include "psdmix/mixture.hpp"
#include "psdmix/psd.hpp"
#include "psdmix/random.hpp"

namespace psdmix {

struct ScenarioConfig {
  char label = 'a';  ///< one of a..e
  PsdFamily family = PsdFamily::poisson();
  std::size_t d = 2;  ///< 2 or 4; d=4 replicates the 2-d coordinates as (x, y, x, y)
};

namespace detail {

inline std::vector<double> uniform_grid(double lo, double hi, int count) {
  std::vector<double> g(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (count - 1);
  return g;
}

}  // namespace detail

/// Two-dimensional coordinates are used as success probabilities for the
/// finite-radius families and as means for Poisson.
inline MixingDistribution scenario_mixing(const ScenarioConfig& config) {
  if (config.d != 2 && config.d != 4) throw DomainError("scenario dimension must be 2 or 4");
  std::vector<std::pair<double, double>> pts;
  std::vector<double> w;
  auto add = [&](double x, double y, double mass) {
    pts.emplace_back(x, y);
    w.push_back(mass);
  };
  const auto axis11 = detail::uniform_grid(0.6, 0.9, 11);
  const auto axis101 = detail::uniform_grid(0.6, 0.9, 101);
  switch (config.label) {
    case 'a':
      add(0.7, 0.7, 1.0 / 3.0);
      add(0.9, 0.9, 2.0 / 3.0);
      break;
    case 'b':
      add(0.6, 0.6, 0.1);
      add(0.7, 0.7, 0.2);
      add(0.8, 0.8, 0.3);
      add(0.9, 0.9, 0.4);
      break;
    case 'c':
      for (double x : axis11) {
        for (double y : axis11) add(x, y, 1.0 / 121.0);
      }
      break;
    case 'd':
      add(1.0, 1.0, 1.0 / 3.0);
      for (double x : axis11) {
        for (double y : axis11) add(x, y, 2.0 / 3.0 / 121.0);
      }
      break;
    case 'e':
      for (double y : axis101) add(0.7, y, 1.0 / 3.0 / 101.0);
      for (double y : axis101) add(0.9, y, 2.0 / 3.0 / 101.0);
      break;
    default:
      throw DomainError(std::string("unknown scenario label '") + config.label + "'");
  }
  std::vector<double> support;
  for (const auto& [x, y] : pts) {
    support.push_back(x);
    support.push_back(y);
    if (config.d == 4) {
      support.push_back(x);
      support.push_back(y);
    }
  }
  MixingDistribution q(config.d, std::move(support), std::move(w));
  q.normalize();
  q.validate(config.family);
  return q;
}

inline MixturePmf scenario_model(const ScenarioConfig& config) {
  return MixturePmf(config.family, scenario_mixing(config));
}

inline Dataset sample_common_shock_poisson(double lambda, double beta, std::size_t n, Rng& rng) {
  if (!(lambda > 0.0)) throw DomainError("lambda must be positive");
  if (!(beta >= 0.0 && beta < 1.0)) throw DomainError("beta must lie in [0, 1)");
  const auto poi = PsdFamily::poisson();
  std::vector<int> values(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto z = beta > 0.0 ? sample_psd(poi, beta * lambda, rng) : 0;
    values[2 * i] = static_cast<int>(sample_psd(poi, (1.0 - beta) * lambda, rng) + z);
    values[2 * i + 1] = static_cast<int>(sample_psd(poi, (1.0 - beta) * lambda, rng) + z);
  }
  return Dataset(n, 2, std::move(values));
}

/// Components with means (2,2) and (4,4), proportions 2/3 and 1/3, each a
/// common-shock bivariate Poisson with the same beta.
inline Dataset sample_dependent_poisson_mixture(double beta, std::size_t n, Rng& rng) {
  if (!(beta >= 0.0 && beta < 1.0)) throw DomainError("beta must lie in [0, 1)");
  Dataset out(2);
  for (std::size_t i = 0; i < n; ++i) {
    const double lambda = uniform01(rng) < 2.0 / 3.0 ? 2.0 : 4.0;
    const auto row = sample_common_shock_poisson(lambda, beta, 1, rng);
    out.add_row(row.row(0));
  }
  return out;
}

/// Solves w (1 - log(w) / lambda) = v2 on (0, 1] by bisection.
inline double solve_w(double v2, double lambda) {
  if (!(v2 > 0.0) || v2 > 1.0) throw DomainError("v2 must lie in (0, 1]");
  if (!(lambda >= 1.0)) throw DomainError("lambda must be >= 1");
  // g(1) = 1 exactly; for lambda = 1 g is flat at 1 and bisection would drift.
  if (v2 == 1.0) return 1.0;
  auto g = [lambda](double w) { return w * (1.0 - std::log(w) / lambda); };
  double lo = 1e-15, hi = 1.0;
  if (g(lo) >= v2) return lo;
  for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (g(mid) < v2) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::abs(g(lo) - v2) < std::abs(g(hi) - v2) ? lo : hi;
}

/// One draw from the Gumbel copula with parameter lambda >= 1.
inline std::pair<double, double> sample_gumbel_pair(double lambda, Rng& rng) {
  if (!(lambda >= 1.0)) throw DomainError("lambda must be >= 1");
  const double v1 = uniform_open(rng);
  const double v2 = uniform_open(rng);
  const double w = solve_w(v2, lambda);
  const double lw = std::log(w);
  const double u1 = std::exp(std::pow(v1, 1.0 / lambda) * lw);
  const double u2 = std::exp(std::pow(1.0 - v1, 1.0 / lambda) * lw);
  return {u1, u2};
}

/// Geometric mixture at (0.7, 0.7) and (0.9, 0.9) with masses 1/3 and 2/3,
/// coordinates coupled through a Gumbel copula.
inline Dataset sample_dependent_geometric_mixture(double lambda, std::size_t n, Rng& rng) {
  if (!(lambda >= 1.0)) throw DomainError("lambda must be >= 1");
  const auto geo = PsdFamily::geometric();
  std::vector<int> values(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double theta = uniform01(rng) < 1.0 / 3.0 ? 0.7 : 0.9;
    const auto [u1, u2] = sample_gumbel_pair(lambda, rng);
    values[2 * i] = static_cast<int>(quantile(geo, theta, std::min(u1, std::nextafter(1.0, 0.0))));
    values[2 * i + 1] = static_cast<int>(quantile(geo, theta, std::min(u2, std::nextafter(1.0, 0.0))));
  }
  return Dataset(n, 2, std::move(values));
}

}  // namespace psdmix
