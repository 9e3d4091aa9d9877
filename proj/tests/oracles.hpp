#pragma once

// Reference computations written independently of the library: direct
// long-double formulas, brute-force enumeration and plain fixed-grid EM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "psdmix/mixture.hpp"

namespace oracle {

using psdmix::Dataset;
using psdmix::FamilyKind;
using psdmix::PsdFamily;

inline long double pmf(const PsdFamily& f, long double theta, long long k) {
  const long double kk = static_cast<long double>(k);
  switch (f.kind()) {
    case FamilyKind::Poisson:
      if (theta == 0.0L) return k == 0 ? 1.0L : 0.0L;
      return std::exp(-theta + kk * std::log(theta) - std::lgamma(kk + 1.0L));
    case FamilyKind::Geometric:
      return (1.0L - theta) * std::pow(theta, kk);
    case FamilyKind::NegativeBinomial: {
      const long double v = f.v();
      if (theta == 0.0L) return k == 0 ? 1.0L : 0.0L;
      return std::exp(v * std::log1p(-theta) + std::lgamma(kk + v) - std::lgamma(v) - std::lgamma(kk + 1.0L) +
                      kk * std::log(theta));
    }
  }
  return 0.0L;
}

inline long double mixture_pmf(const PsdFamily& f, const std::vector<std::vector<double>>& pts,
                               const std::vector<double>& w, const std::vector<int>& k) {
  long double total = 0.0L;
  for (std::size_t l = 0; l < pts.size(); ++l) {
    long double prod = w[l];
    for (std::size_t j = 0; j < k.size(); ++j) prod *= pmf(f, pts[l][j], k[j]);
    total += prod;
  }
  return total;
}

inline long double loglik(const PsdFamily& f, const std::vector<std::vector<double>>& pts,
                          const std::vector<double>& w, const Dataset& data) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto r = data.row(i);
    s += std::log(mixture_pmf(f, pts, w, std::vector<int>(r.begin(), r.end())));
  }
  return s;
}

/// Fixed-grid NPMLE by EM on the weights, squared-extrapolation accelerated
/// with a monotonicity fallback, stopped when the gain per step is < tol or,
/// if gap_tol > 0, once the certified gap max_g gradient is <= gap_tol.
struct GridEmResult {
  double loglik;
  double upper_bound;  ///< loglik + max_g gradient, >= the grid optimum by concavity
  int iterations;
};

inline GridEmResult grid_em(const PsdFamily& f, const Dataset& data, const std::vector<std::vector<double>>& grid,
                            double tol = 1e-10, int max_iters = 200000, double gap_tol = 0.0) {
  std::map<std::vector<int>, double> counts;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto r = data.row(i);
    counts[std::vector<int>(r.begin(), r.end())] += 1.0;
  }
  std::vector<std::vector<int>> rows;
  std::vector<double> c;
  for (const auto& [k, cnt] : counts) {
    rows.push_back(k);
    c.push_back(cnt);
  }
  const std::size_t u = rows.size(), G = grid.size();
  std::vector<double> F(u * G);
  for (std::size_t i = 0; i < u; ++i) {
    for (std::size_t g = 0; g < G; ++g) {
      long double prod = 1.0L;
      for (std::size_t j = 0; j < rows[i].size(); ++j) prod *= pmf(f, grid[g][j], rows[i][j]);
      F[i * G + g] = static_cast<double>(prod);
    }
  }
  const double n = static_cast<double>(data.n());
  auto ll = [&](const std::vector<double>& w) {
    long double s = 0.0L;
    for (std::size_t i = 0; i < u; ++i) {
      long double pi = 0.0L;
      for (std::size_t g = 0; g < G; ++g) pi += static_cast<long double>(F[i * G + g]) * w[g];
      s += c[i] * std::log(pi);
    }
    return static_cast<double>(s);
  };
  auto em_step = [&](const std::vector<double>& w) {
    std::vector<double> next(G, 0.0);
    for (std::size_t i = 0; i < u; ++i) {
      double pi = 0.0;
      for (std::size_t g = 0; g < G; ++g) pi += F[i * G + g] * w[g];
      const double scale = c[i] / (n * pi);
      for (std::size_t g = 0; g < G; ++g) next[g] += F[i * G + g] * scale;
    }
    for (std::size_t g = 0; g < G; ++g) next[g] *= w[g];
    return next;
  };
  auto max_gradient = [&](const std::vector<double>& w) {
    std::vector<double> d(G, -n);
    for (std::size_t i = 0; i < u; ++i) {
      double pi = 0.0;
      for (std::size_t g = 0; g < G; ++g) pi += F[i * G + g] * w[g];
      for (std::size_t g = 0; g < G; ++g) d[g] += c[i] * F[i * G + g] / pi;
    }
    return *std::max_element(d.begin(), d.end());
  };
  std::vector<double> w(G, 1.0 / static_cast<double>(G));
  double cur = ll(w);
  int it = 0;
  for (; it < max_iters; ++it) {
    if (gap_tol > 0.0 && it % 50 == 49 && max_gradient(w) <= gap_tol) break;
    const auto w1 = em_step(w);
    const auto w2 = em_step(w1);
    double rr = 0.0, vv = 0.0;
    for (std::size_t g = 0; g < G; ++g) {
      const double r = w1[g] - w[g];
      const double v = w2[g] - 2.0 * w1[g] + w[g];
      rr += r * r;
      vv += v * v;
    }
    std::vector<double> cand = w2;
    if (vv > 0.0) {
      const double alpha = -std::sqrt(rr / vv);
      double total = 0.0;
      for (std::size_t g = 0; g < G; ++g) {
        const double r = w1[g] - w[g];
        const double v = w2[g] - 2.0 * w1[g] + w[g];
        cand[g] = std::max(0.0, w[g] - 2.0 * alpha * r + alpha * alpha * v);
        total += cand[g];
      }
      for (double& x : cand) x /= total;
      cand = em_step(cand);
    }
    double next = ll(cand);
    if (!(next >= ll(w2))) {
      cand = w2;
      next = ll(w2);
    }
    const double gain = next - cur;
    w = std::move(cand);
    cur = next;
    if (gain < tol) break;
  }
  return {cur, cur + std::max(0.0, max_gradient(w)), it};
}

/// max_g [sum_i dL/dQ toward delta_g] at a given mixture. By concavity of the
/// log-likelihood in the mixing distribution, every distribution supported on
/// `grid` has log-likelihood <= loglik(pts, w) + this value.
inline double grid_dominance_gap(const PsdFamily& f, const Dataset& data, const std::vector<std::vector<double>>& pts,
                                 const std::vector<double>& w, const std::vector<std::vector<double>>& grid) {
  std::map<std::vector<int>, double> counts;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto r = data.row(i);
    counts[std::vector<int>(r.begin(), r.end())] += 1.0;
  }
  std::vector<long double> d(grid.size(), -static_cast<long double>(data.n()));
  for (const auto& [k, cnt] : counts) {
    const long double pi = mixture_pmf(f, pts, w, k);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      long double prod = 1.0L;
      for (std::size_t j = 0; j < k.size(); ++j) prod *= pmf(f, grid[g][j], k[j]);
      d[g] += cnt * prod / pi;
    }
  }
  return static_cast<double>(*std::max_element(d.begin(), d.end()));
}

inline double grid_dominance_gap(const psdmix::MixturePmf& model, const Dataset& data,
                                 const std::vector<std::vector<double>>& grid) {
  const auto& q = model.mixing();
  std::vector<std::vector<double>> pts;
  for (std::size_t l = 0; l < q.size(); ++l) pts.emplace_back(q.point(l).begin(), q.point(l).end());
  return grid_dominance_gap(model.family(), data, pts, q.weights(), grid);
}

/// d-dimensional product grid with spacing `step` over [lo, hi].
inline std::vector<std::vector<double>> product_grid(double lo, double hi, double step, std::size_t d) {
  std::vector<double> axis;
  for (int i = 0;; ++i) {
    const double x = lo + step * i;
    if (x > hi + 1e-12) break;
    axis.push_back(std::min(x, hi));
  }
  std::vector<std::vector<double>> out{{}};
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<std::vector<double>> next;
    for (const auto& p : out) {
      for (double x : axis) {
        auto q = p;
        q.push_back(x);
        next.push_back(q);
      }
    }
    out.swap(next);
  }
  return out;
}

/// Halton points in [0,1)^d.
inline std::vector<std::vector<double>> halton(std::size_t count, std::size_t d) {
  static const int primes[] = {2, 3, 5, 7, 11, 13, 17, 19};
  std::vector<std::vector<double>> out(count, std::vector<double>(d));
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double f = 1.0, r = 0.0;
      std::size_t idx = i + 1;
      const int b = primes[j];
      while (idx > 0) {
        f /= b;
        r += f * static_cast<double>(idx % static_cast<std::size_t>(b));
        idx /= static_cast<std::size_t>(b);
      }
      out[i][j] = r;
    }
  }
  return out;
}

/// Kolmogorov-Smirnov statistic of a sample against a continuous cdf.
inline double ks_statistic(std::vector<double> xs, const std::function<double(double)>& cdf) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double F = cdf(xs[i]);
    d = std::max({d, F - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - F});
  }
  return d;
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
inline double ks_critical_1pct(std::size_t n) { return 1.628 / std::sqrt(static_cast<double>(n)); }

/// Kendall tau-a of paired continuous samples: sort by x, count discordant
/// pairs as inversions of y by merge sort.
inline double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ys(n), tmp(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];
  long double inversions = 0.0L;
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n), hi = std::min(lo + 2 * width, n);
      std::size_t a = lo, b = mid, out = lo;
      while (a < mid && b < hi) {
        if (ys[b] < ys[a]) {
          inversions += static_cast<long double>(mid - a);
          tmp[out++] = ys[b++];
        } else {
          tmp[out++] = ys[a++];
        }
      }
      while (a < mid) tmp[out++] = ys[a++];
      while (b < hi) tmp[out++] = ys[b++];
    }
    ys.swap(tmp);
  }
  const long double pairs = 0.5L * static_cast<long double>(n) * static_cast<long double>(n - 1);
  return static_cast<double>(1.0L - 2.0L * inversions / pairs);
}

/// Upper regularized incomplete gamma Q(a, x), series below a + 1 and
/// continued fraction above.
inline double gamma_q(double a, double x) {
  if (x <= 0.0) return 1.0;
  const double log_front = -x + a * std::log(x) - std::lgamma(a);
  if (x < a + 1.0) {
    double term = 1.0 / a, sum = term;
    for (int n = 1; n < 100000 && std::abs(term) > 1e-17 * std::abs(sum); ++n) {
      term *= x / (a + n);
      sum += term;
    }
    return 1.0 - std::exp(log_front) * sum;
  }
  const double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int i = 1; i < 100000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-16) break;
  }
  return std::exp(log_front) * h;
}

/// Pearson chi-square p-value of counts on {0..K}^2 plus one overflow cell.
inline double chi_square_p(const Dataset& data, int K, const std::function<long double(int, int)>& pmf2) {
  const std::size_t side = static_cast<std::size_t>(K) + 1;
  std::vector<double> observed(side * side + 1, 0.0);
  for (std::size_t i = 0; i < data.n(); ++i) {
    const int a = data.at(i, 0), b = data.at(i, 1);
    if (a <= K && b <= K) {
      observed[static_cast<std::size_t>(a) * side + static_cast<std::size_t>(b)] += 1.0;
    } else {
      observed.back() += 1.0;
    }
  }
  const double n = static_cast<double>(data.n());
  long double inside = 0.0L, stat = 0.0L;
  for (int a = 0; a <= K; ++a) {
    for (int b = 0; b <= K; ++b) {
      const long double p = pmf2(a, b);
      inside += p;
      const long double e = n * p;
      const long double o = observed[static_cast<std::size_t>(a) * side + static_cast<std::size_t>(b)];
      stat += (o - e) * (o - e) / e;
    }
  }
  const long double e = n * (1.0L - inside);
  stat += (observed.back() - e) * (observed.back() - e) / e;
  return gamma_q(0.5 * static_cast<double>(side * side), 0.5 * static_cast<double>(stat));
}

inline double regularized_beta_1_2(double x) { return 1.0 - (1.0 - x) * (1.0 - x); }

}  // namespace oracle
