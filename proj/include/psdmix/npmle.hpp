#pragma once

// Nonparametric maximum likelihood for conditionally independent PSD
// mixtures: constrained-Newton weight updates (simplex-constrained least
// squares plus line search), support expansion from a random grid drawn from
// the gradient function turned into a mixture of dual densities and refined
// by modal EM, pruning, and a short EM polish.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "psdmix/error.hpp"
#include "psdmix/mixture.hpp"
#include "psdmix/psd.hpp"
#include "psdmix/random.hpp"

namespace psdmix {

struct FitOptions {
  double grad_tol = 1e-6;
  int max_outer_iters = 200;
  int grid_size = 20;
  int modal_em_iters = 100;
  double prune_tol = 1e-10;
  std::optional<double> merge_radius;  ///< default 1e-6 * (1 + max support coordinate)
  int em_polish_iters = 2;
  std::uint64_t seed = 0;
  std::optional<std::vector<double>> candidate_cap;  ///< Poisson only, per coordinate

  void validate() const {
    if (!(grad_tol > 0.0) || !(prune_tol > 0.0)) throw DomainError("tolerances must be positive");
    if (merge_radius && !(*merge_radius > 0.0)) throw DomainError("merge radius must be positive");
    if (grid_size < 1) throw DomainError("grid size must be >= 1");
    if (max_outer_iters < 1 || modal_em_iters < 0 || em_polish_iters < 0) {
      throw DomainError("iteration counts must be nonnegative");
    }
  }
};

struct TraceEntry {
  double loglik;
  std::size_t support_size;
};

struct FitResult {
  MixturePmf model;
  double loglik;
  double sup_gradient_normalized;
  int outer_iters;
  bool converged;
  std::vector<TraceEntry> trace;
};

namespace detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Finite-radius parameters are kept at most this close to R = 1.
inline constexpr double kThetaCeiling = 1.0 - 1e-10;

/// Distinct rows with multiplicities, sorted lexicographically; coordinate
/// arrays stored column-major for the inner loops.
struct CompressedData {
  std::size_t d = 0;
  std::size_t u = 0;
  double n = 0.0;
  std::vector<int> rows;         // u x d
  std::vector<double> counts;    // u
  std::vector<double> k;         // d x u
  std::vector<double> log_b;     // d x u, log b_{k_ij}
  std::vector<std::size_t> row_of;  // original row -> distinct row
  std::vector<int> col_max;

  std::span<const int> row(std::size_t i) const { return {rows.data() + i * d, d}; }
  const double* kcol(std::size_t j) const { return k.data() + j * u; }
  const double* bcol(std::size_t j) const { return log_b.data() + j * u; }
};

inline CompressedData compress(const Dataset& data, const PsdFamily& family) {
  if (data.empty()) throw DomainError("dataset is empty");
  CompressedData c;
  c.d = data.d();
  c.n = static_cast<double>(data.n());
  std::map<std::vector<int>, std::size_t> index;
  std::vector<std::vector<int>> keys;
  std::vector<std::size_t> first(data.n());
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto r = data.row(i);
    std::vector<int> key(r.begin(), r.end());
    index.emplace(std::move(key), 0);
  }
  std::size_t next = 0;
  for (auto& [key, idx] : index) {
    idx = next++;
    c.rows.insert(c.rows.end(), key.begin(), key.end());
  }
  c.u = next;
  c.counts.assign(c.u, 0.0);
  c.row_of.resize(data.n());
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto r = data.row(i);
    const std::size_t idx = index.at(std::vector<int>(r.begin(), r.end()));
    c.row_of[i] = idx;
    c.counts[idx] += 1.0;
  }
  c.k.resize(c.d * c.u);
  c.log_b.resize(c.d * c.u);
  c.col_max.assign(c.d, 0);
  for (std::size_t j = 0; j < c.d; ++j) {
    for (std::size_t i = 0; i < c.u; ++i) {
      const int kij = c.rows[i * c.d + j];
      c.k[j * c.u + i] = kij;
      c.log_b[j * c.u + i] = family.log_coefficient(kij);
      c.col_max[j] = std::max(c.col_max[j], kij);
    }
  }
  return c;
}

/// out_i = log f_theta(k_i) for every distinct row.
inline void log_component(const CompressedData& c, const PsdFamily& family,
                          std::span<const double> theta, double* out) {
  std::fill(out, out + c.u, 0.0);
  for (std::size_t j = 0; j < c.d; ++j) {
    const double t = theta[j];
    const double* kc = c.kcol(j);
    if (t == 0.0) {
      for (std::size_t i = 0; i < c.u; ++i) {
        if (kc[i] != 0.0) out[i] = kNegInf;
      }
      continue;
    }
    const double* bc = c.bcol(j);
    const double lt = std::log(t);
    const double lb = family.log_normalizer(t);
    for (std::size_t i = 0; i < c.u; ++i) out[i] += bc[i] + kc[i] * lt - lb;
  }
}

/// Support, weights and cached log component densities over distinct rows.
struct State {
  std::size_t d = 0;
  std::vector<double> support;  // m x d
  std::vector<double> weights;  // m
  std::vector<double> log_f;    // m x u
  std::vector<double> log_pi;   // u
  double loglik = kNegInf;

  std::size_t size() const { return weights.size(); }
  std::span<const double> point(std::size_t l) const { return {support.data() + l * d, d}; }
};

inline void refresh_log_pi(const CompressedData& c, State& s) {
  const std::size_t m = s.size();
  s.log_pi.assign(c.u, kNegInf);
  std::vector<double> lw(m);
  for (std::size_t l = 0; l < m; ++l) lw[l] = s.weights[l] > 0.0 ? std::log(s.weights[l]) : kNegInf;
  CompensatedSum ll;
  for (std::size_t i = 0; i < c.u; ++i) {
    double mx = kNegInf;
    for (std::size_t l = 0; l < m; ++l) mx = std::max(mx, lw[l] + s.log_f[l * c.u + i]);
    if (mx == kNegInf) {
      s.log_pi[i] = kNegInf;
      continue;
    }
    double acc = 0.0;
    for (std::size_t l = 0; l < m; ++l) {
      if (lw[l] != kNegInf) acc += std::exp(lw[l] + s.log_f[l * c.u + i] - mx);
    }
    s.log_pi[i] = mx + std::log(acc);
    ll.add(c.counts[i] * s.log_pi[i]);
  }
  s.loglik = kNegInf;
  for (double lp : s.log_pi) {
    if (lp == kNegInf) return;
  }
  s.loglik = ll.value();
}

inline void refresh(const CompressedData& c, const PsdFamily& family, State& s) {
  s.log_f.resize(s.size() * c.u);
  for (std::size_t l = 0; l < s.size(); ++l) log_component(c, family, s.point(l), &s.log_f[l * c.u]);
  refresh_log_pi(c, s);
}

inline State make_state(const CompressedData& c, const PsdFamily& family,
                        const MixingDistribution& mixing) {
  State s;
  s.d = mixing.dim();
  s.support = mixing.support();
  s.weights = mixing.weights();
  refresh(c, family, s);
  return s;
}

inline MixingDistribution to_mixing(const State& s) {
  return MixingDistribution(s.d, s.support, s.weights);
}

inline void require_nondegenerate(const State& s) {
  for (std::size_t i = 0; i < s.log_pi.size(); ++i) {
    if (s.log_pi[i] == kNegInf) throw DegenerateModelError("model gives zero probability", i);
  }
}

/// d(theta; Q) = sum_i c_i f_theta(k_i) / pi(k_i) - n
inline double gradient_at(const CompressedData& c, const PsdFamily& family, const State& s,
                          std::span<const double> theta, std::vector<double>& buf) {
  buf.resize(c.u);
  log_component(c, family, theta, buf.data());
  CompensatedSum acc;
  for (std::size_t i = 0; i < c.u; ++i) {
    if (buf[i] != kNegInf) acc.add(c.counts[i] * std::exp(buf[i] - s.log_pi[i]));
  }
  return acc.value() - c.n;
}

struct ModalEmCore {
  double log_value;  // log sum_i exp(log_coef_i + log f_theta(k_i)) at the endpoint
  int iterations;
  bool degenerate;
};

/// exp(log_coef_i + sum_j log b_{k_ij} - shift), shift the maximum exponent.
/// Responsibilities are then a_i prod_j theta_j^{k_ij} up to a common factor.
inline std::vector<double> scaled_coefficients(const CompressedData& c, std::span<const double> log_coef) {
  std::vector<double> a(c.u);
  double mx = kNegInf;
  for (std::size_t i = 0; i < c.u; ++i) {
    double e = log_coef[i];
    for (std::size_t j = 0; j < c.d; ++j) e += c.bcol(j)[i];
    a[i] = e;
    mx = std::max(mx, e);
  }
  for (double& x : a) x = x == kNegInf ? 0.0 : std::exp(x - mx);
  return a;
}

/// Modal EM on h(theta) = sum_i exp(log_coef_i) f_theta(k_i), a positive
/// multiple of a mixture of product dual densities. theta is updated in place.
/// `cap` bounds each coordinate (Poisson candidate box; ceiling below R).
/// E-steps use power tables over `scaled` and fall back to log space on underflow.
inline ModalEmCore modal_em_core(const CompressedData& c, const PsdFamily& family,
                                 std::span<const double> log_coef, std::span<const double> scaled,
                                 std::span<double> theta, int iters, std::span<const double> cap,
                                 std::vector<double>& buf) {
  buf.resize(c.u);
  std::vector<std::vector<double>> powers(c.d);
  for (std::size_t j = 0; j < c.d; ++j) powers[j].resize(static_cast<std::size_t>(c.col_max[j]) + 1);
  std::vector<double> moment(c.d);
  // Responsibility-weighted means of k_j without materializing responsibilities.
  auto fast_moments = [&]() {
    for (std::size_t j = 0; j < c.d; ++j) {
      auto& pw = powers[j];
      pw[0] = 1.0;
      for (std::size_t k = 1; k < pw.size(); ++k) pw[k] = pw[k - 1] * theta[j];
    }
    double total = 0.0;
    std::fill(moment.begin(), moment.end(), 0.0);
    if (c.d == 2) {
      const double* p0 = powers[0].data();
      const double* p1 = powers[1].data();
      double m0 = 0.0, m1 = 0.0;
      for (std::size_t i = 0; i < c.u; ++i) {
        const int k0 = c.rows[2 * i], k1 = c.rows[2 * i + 1];
        const double v = scaled[i] * p0[k0] * p1[k1];
        total += v;
        m0 += v * k0;
        m1 += v * k1;
      }
      moment[0] = m0;
      moment[1] = m1;
    } else {
      for (std::size_t i = 0; i < c.u; ++i) {
        double v = scaled[i];
        const int* r = &c.rows[i * c.d];
        for (std::size_t j = 0; j < c.d; ++j) v *= powers[j][static_cast<std::size_t>(r[j])];
        total += v;
        for (std::size_t j = 0; j < c.d; ++j) moment[j] += v * r[j];
      }
    }
    if (!(total > 1e-280) || !std::isfinite(total)) return false;
    for (double& m : moment) m /= total;
    return true;
  };
  const double shape_extra = family.kind() == FamilyKind::NegativeBinomial ? family.v() : 1.0;
  auto evaluate = [&](double& log_value) {
    log_component(c, family, theta, buf.data());
    double mx = kNegInf;
    for (std::size_t i = 0; i < c.u; ++i) {
      buf[i] += log_coef[i];
      mx = std::max(mx, buf[i]);
    }
    if (mx == kNegInf || std::isnan(mx)) {
      log_value = kNegInf;
      return false;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < c.u; ++i) {
      buf[i] = std::exp(buf[i] - mx);
      total += buf[i];
    }
    for (std::size_t i = 0; i < c.u; ++i) buf[i] /= total;
    log_value = mx + std::log(total);
    return true;
  };

  ModalEmCore out{kNegInf, 0, false};
  std::vector<double> next(theta.size());
  for (int it = 0; it < iters; ++it) {
    if (!(scaled.size() == c.u && fast_moments())) {
      if (!evaluate(out.log_value)) {
        out.degenerate = true;
        return out;
      }
      for (std::size_t j = 0; j < c.d; ++j) {
        const double* kc = c.kcol(j);
        double m = 0.0;
        for (std::size_t i = 0; i < c.u; ++i) m += buf[i] * kc[i];
        moment[j] = m;
      }
    }
    double change = 0.0;
    for (std::size_t j = 0; j < c.d; ++j) {
      const double m = moment[j];
      double t = family.kind() == FamilyKind::Poisson ? m : m / (m + shape_extra);
      t = std::min(t, cap[j]);
      change = std::max(change, std::abs(t - theta[j]));
      next[j] = t;
    }
    std::copy(next.begin(), next.end(), theta.begin());
    out.iterations = it + 1;
    if (change <= 1e-10) break;
  }
  if (!evaluate(out.log_value)) out.degenerate = true;
  return out;
}

inline std::vector<double> default_caps(const CompressedData& c, const PsdFamily& family,
                                        const std::optional<std::vector<double>>& user_cap) {
  std::vector<double> cap(c.d);
  for (std::size_t j = 0; j < c.d; ++j) {
    if (family.kind() == FamilyKind::Poisson) {
      const double mx = c.col_max[j];
      cap[j] = (user_cap && j < user_cap->size()) ? (*user_cap)[j] : mx + 5.0 * std::sqrt(mx + 1.0);
    } else {
      cap[j] = kThetaCeiling;
    }
  }
  return cap;
}

/// Draws from the normalized gradient mixture: row i with probability
/// proportional to exp(log_coef_i) prod_j c_{k_ij}, then theta_j from the
/// coordinate-j dual density of that row.
inline std::vector<std::vector<double>> candidate_draws(const CompressedData& c,
                                                        const PsdFamily& family,
                                                        std::span<const double> log_coef,
                                                        Rng& rng, int grid_size,
                                                        std::span<const double> cap) {
  std::vector<std::vector<double>> out;
  if (grid_size <= 0) return out;
  std::vector<double> logsel(c.u);
  double mx = kNegInf;
  for (std::size_t i = 0; i < c.u; ++i) {
    double s = log_coef[i];
    for (std::size_t j = 0; j < c.d; ++j) s += dual_density(family, c.rows[i * c.d + j]).log_c;
    logsel[i] = s;
    mx = std::max(mx, s);
  }
  std::vector<double> cum(c.u);
  double total = 0.0;
  for (std::size_t i = 0; i < c.u; ++i) {
    total += logsel[i] == kNegInf ? 0.0 : std::exp(logsel[i] - mx);
    cum[i] = total;
  }
  out.reserve(static_cast<std::size_t>(grid_size));
  for (int g = 0; g < grid_size; ++g) {
    const double u = uniform01(rng) * total;
    const std::size_t i = static_cast<std::size_t>(
        std::min<std::ptrdiff_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin(),
                                 static_cast<std::ptrdiff_t>(c.u) - 1));
    std::vector<double> theta(c.d);
    for (std::size_t j = 0; j < c.d; ++j) {
      const auto dual = dual_density(family, c.rows[i * c.d + j]).density;
      theta[j] = std::clamp(dual.sample(rng), 0.0, cap[j]);
    }
    out.push_back(std::move(theta));
  }
  return out;
}

/// min ||A x - b||^2 subject to x >= 0, sum x = 1. Primal active-set method
/// (Lawson-Hanson with the equality constraint eliminated on the passive set).
inline std::vector<double> simplex_least_squares(const Eigen::MatrixXd& A, const Eigen::VectorXd& b) {
  const Eigen::Index m = A.cols();
  if (m == 0) throw DomainError("least squares needs at least one column");
  std::vector<double> x(static_cast<std::size_t>(m), 0.0);
  if (m == 1) {
    x[0] = 1.0;
    return x;
  }

  auto objective = [&](const std::vector<double>& v) {
    return (A * Eigen::Map<const Eigen::VectorXd>(v.data(), m) - b).squaredNorm();
  };

  // Best vertex as the starting point.
  Eigen::Index start = 0;
  double best_vertex = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < m; ++j) {
    const double f = (A.col(j) - b).squaredNorm();
    if (f < best_vertex) {
      best_vertex = f;
      start = j;
    }
  }
  std::vector<char> passive(static_cast<std::size_t>(m), 0);
  passive[static_cast<std::size_t>(start)] = 1;
  x[static_cast<std::size_t>(start)] = 1.0;

  auto solve_passive = [&](std::vector<double>& z) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (passive[static_cast<std::size_t>(j)]) idx.push_back(j);
    }
    std::fill(z.begin(), z.end(), 0.0);
    if (idx.size() == 1) {
      z[static_cast<std::size_t>(idx[0])] = 1.0;
      return;
    }
    const Eigen::Index q = static_cast<Eigen::Index>(idx.size());
    const Eigen::Index last = idx.back();
    Eigen::MatrixXd B(A.rows(), q - 1);
    for (Eigen::Index a = 0; a + 1 < q; ++a) B.col(a) = A.col(idx[static_cast<std::size_t>(a)]) - A.col(last);
    const Eigen::VectorXd r = b - A.col(last);
    const Eigen::VectorXd y = B.colPivHouseholderQr().solve(r);
    double s = 0.0;
    for (Eigen::Index a = 0; a + 1 < q; ++a) {
      z[static_cast<std::size_t>(idx[static_cast<std::size_t>(a)])] = y(a);
      s += y(a);
    }
    z[static_cast<std::size_t>(last)] = 1.0 - s;
  };

  const int max_outer = static_cast<int>(10 * m);
  std::vector<double> z(static_cast<std::size_t>(m));
  const double scale = std::max(1.0, A.cwiseAbs().maxCoeff() * std::max(1.0, b.cwiseAbs().maxCoeff()));
  for (int outer = 0; outer < max_outer; ++outer) {
    const Eigen::VectorXd w = A.transpose() * (b - A * Eigen::Map<const Eigen::VectorXd>(x.data(), m));
    double mu = 0.0;
    int np = 0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (passive[static_cast<std::size_t>(j)]) {
        mu += w(j);
        ++np;
      }
    }
    mu /= np;
    Eigen::Index t = -1;
    double best = 1e-11 * scale * static_cast<double>(A.rows());
    for (Eigen::Index j = 0; j < m; ++j) {
      if (!passive[static_cast<std::size_t>(j)] && w(j) - mu > best) {
        best = w(j) - mu;
        t = j;
      }
    }
    if (t < 0) return x;
    passive[static_cast<std::size_t>(t)] = 1;
    for (Eigen::Index inner = 0; inner <= m; ++inner) {
      solve_passive(z);
      if (inner == 0 && !(z[static_cast<std::size_t>(t)] > 0.0)) {
        // The entering column cannot improve: stationary up to rounding.
        passive[static_cast<std::size_t>(t)] = 0;
        return x;
      }
      bool feasible = true;
      double alpha = 1.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        if (passive[jj] && z[jj] <= 0.0) {
          feasible = false;
          const double denom = x[jj] - z[jj];
          if (denom > 0.0) alpha = std::min(alpha, x[jj] / denom);
        }
      }
      if (feasible) {
        x = z;
        break;
      }
      for (Eigen::Index j = 0; j < m; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        x[jj] += alpha * (z[jj] - x[jj]);
        if (passive[jj] && x[jj] <= 1e-15) {
          passive[jj] = 0;
          x[jj] = 0.0;
        }
      }
      const double s = std::accumulate(x.begin(), x.end(), 0.0);
      for (double& v : x) v /= s;
    }
  }
  (void)objective;
  throw ConvergenceError("simplex least squares exceeded 10*m iterations", x);
}

/// log-likelihood along the segment p_old + s (p_new - p_old) from shifted exponentials.
struct SegmentLikelihood {
  const CompressedData& c;
  std::size_t m;
  std::vector<double> row_max;
  std::vector<double> e;  // m x u, exp(log_f - row_max)

  SegmentLikelihood(const CompressedData& data, const State& s) : c(data), m(s.size()) {
    row_max.assign(c.u, kNegInf);
    for (std::size_t l = 0; l < m; ++l) {
      for (std::size_t i = 0; i < c.u; ++i) row_max[i] = std::max(row_max[i], s.log_f[l * c.u + i]);
    }
    e.resize(m * c.u);
    for (std::size_t l = 0; l < m; ++l) {
      for (std::size_t i = 0; i < c.u; ++i) {
        const double lf = s.log_f[l * c.u + i];
        e[l * c.u + i] = lf == kNegInf ? 0.0 : std::exp(lf - row_max[i]);
      }
    }
  }

  double operator()(std::span<const double> p) const {
    CompensatedSum acc;
    for (std::size_t i = 0; i < c.u; ++i) {
      double v = 0.0;
      for (std::size_t l = 0; l < m; ++l) v += p[l] * e[l * c.u + i];
      if (!(v > 0.0)) return kNegInf;
      acc.add(c.counts[i] * (row_max[i] + std::log(v)));
    }
    return acc.value();
  }
};

struct LineSearchCore {
  std::vector<double> weights;
  double step;  // 0 when p_old is kept
  double loglik;
};

inline LineSearchCore line_search_core(const SegmentLikelihood& lik, std::span<const double> p_old,
                                       std::span<const double> p_new) {
  const double base = lik(p_old);
  std::vector<double> trial(p_old.size());
  double s = 1.0;
  for (int halvings = 0; halvings <= 30; ++halvings, s *= 0.5) {
    for (std::size_t l = 0; l < trial.size(); ++l) trial[l] = p_old[l] + s * (p_new[l] - p_old[l]);
    const double v = lik(trial);
    if (v > base) return {trial, s, v};
  }
  return {std::vector<double>(p_old.begin(), p_old.end()), 0.0, base};
}

inline double default_merge_radius(const std::vector<double>& support) {
  double mx = 0.0;
  for (double x : support) mx = std::max(mx, x);
  return 1e-6 * (1.0 + mx);
}

/// Drops weights below prune_tol (keeping the heaviest point if all are),
/// coalesces points within merge_radius in sup norm, renormalizes.
inline void prune_merge_arrays(std::size_t d, std::vector<double>& support,
                               std::vector<double>& weights, double prune_tol,
                               double merge_radius) {
  const std::size_t m = weights.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
  std::vector<double> out_support, out_weights;
  for (std::size_t pos = 0; pos < m; ++pos) {
    const std::size_t l = order[pos];
    if (weights[l] < prune_tol && !(pos == 0)) continue;
    const double* p = &support[l * d];
    bool merged = false;
    for (std::size_t q = 0; q < out_weights.size(); ++q) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) dist = std::max(dist, std::abs(out_support[q * d + j] - p[j]));
      if (dist <= merge_radius) {
        const double w = out_weights[q] + weights[l];
        if (w > 0.0) {
          for (std::size_t j = 0; j < d; ++j) {
            out_support[q * d + j] = (out_weights[q] * out_support[q * d + j] + weights[l] * p[j]) / w;
          }
        }
        out_weights[q] = w;
        merged = true;
        break;
      }
    }
    if (!merged) {
      out_support.insert(out_support.end(), p, p + d);
      out_weights.push_back(weights[l]);
    }
  }
  double total = std::accumulate(out_weights.begin(), out_weights.end(), 0.0);
  if (!(total > 0.0)) {
    std::fill(out_weights.begin(), out_weights.end(), 1.0);
    total = static_cast<double>(out_weights.size());
  }
  for (double& w : out_weights) w /= total;
  support.swap(out_support);
  weights.swap(out_weights);
}

/// Standard EM steps on weights and locations.
inline void em_polish_state(const CompressedData& c, const PsdFamily& family, State& s, int iters) {
  const std::size_t m = s.size();
  std::vector<double> resp(c.u);
  for (int it = 0; it < iters; ++it) {
    std::vector<double> new_w(m, 0.0);
    std::vector<double> new_support = s.support;
    for (std::size_t l = 0; l < m; ++l) {
      if (s.weights[l] <= 0.0) continue;
      const double lw = std::log(s.weights[l]);
      double total = 0.0;
      for (std::size_t i = 0; i < c.u; ++i) {
        const double lf = s.log_f[l * c.u + i];
        resp[i] = lf == kNegInf ? 0.0 : c.counts[i] * std::exp(lw + lf - s.log_pi[i]);
        total += resp[i];
      }
      new_w[l] = total / c.n;
      if (!(total > 0.0)) continue;
      for (std::size_t j = 0; j < c.d; ++j) {
        const double* kc = c.kcol(j);
        double acc = 0.0;
        for (std::size_t i = 0; i < c.u; ++i) acc += resp[i] * kc[i];
        double t = family.theta_from_mean(acc / total);
        if (family.finite_radius()) t = std::min(t, kThetaCeiling);
        new_support[l * c.d + j] = t;
      }
    }
    const double sw = std::accumulate(new_w.begin(), new_w.end(), 0.0);
    for (double& w : new_w) w /= sw;
    s.weights = std::move(new_w);
    s.support = std::move(new_support);
    refresh(c, family, s);
  }
}

/// Row-weighted least-squares system sqrt(c_i) S_il, target 2 sqrt(c_i).
inline void weighted_system(const CompressedData& c, const State& s, Eigen::MatrixXd& A,
                            Eigen::VectorXd& b) {
  const std::size_t m = s.size();
  A.resize(static_cast<Eigen::Index>(c.u), static_cast<Eigen::Index>(m));
  b.resize(static_cast<Eigen::Index>(c.u));
  for (std::size_t i = 0; i < c.u; ++i) {
    const double sw = std::sqrt(c.counts[i]);
    b(static_cast<Eigen::Index>(i)) = 2.0 * sw;
    for (std::size_t l = 0; l < m; ++l) {
      const double lf = s.log_f[l * c.u + i];
      A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)) =
          lf == kNegInf ? 0.0 : sw * std::exp(lf - s.log_pi[i]);
    }
  }
}

}  // namespace detail

/// S_il = f_{theta_l}(k_i) / pi(k_i), one row per observation.
inline Eigen::MatrixXd response_matrix(const MixturePmf& model, const Dataset& data) {
  const auto c = detail::compress(data, model.family());
  const auto s = detail::make_state(c, model.family(), model.mixing());
  for (std::size_t i = 0; i < data.n(); ++i) {
    if (s.log_pi[c.row_of[i]] == detail::kNegInf) {
      throw DegenerateModelError("model gives zero probability", i);
    }
  }
  Eigen::MatrixXd S(static_cast<Eigen::Index>(data.n()), static_cast<Eigen::Index>(s.size()));
  for (std::size_t i = 0; i < data.n(); ++i) {
    const std::size_t r = c.row_of[i];
    for (std::size_t l = 0; l < s.size(); ++l) {
      const double lf = s.log_f[l * c.u + r];
      S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)) =
          lf == detail::kNegInf ? 0.0 : std::exp(lf - s.log_pi[r]);
    }
  }
  return S;
}

/// Directional derivative of the log-likelihood at Q toward delta_theta.
inline double gradient(const MixturePmf& model, const Dataset& data, std::span<const double> theta) {
  if (theta.size() != model.dim()) throw DomainError("theta dimension mismatch");
  for (double t : theta) model.family().check_theta(t);
  const auto c = detail::compress(data, model.family());
  const auto s = detail::make_state(c, model.family(), model.mixing());
  detail::require_nondegenerate(s);
  std::vector<double> buf;
  return detail::gradient_at(c, model.family(), s, theta, buf);
}

/// max over `points` of gradient / n, evaluated on up to `threads` workers.
inline double gradient_sup(const MixturePmf& model, const Dataset& data,
                           const std::vector<std::vector<double>>& points, unsigned threads = 1) {
  const auto c = detail::compress(data, model.family());
  const auto s = detail::make_state(c, model.family(), model.mixing());
  detail::require_nondegenerate(s);
  threads = std::max(1u, threads);
  std::vector<double> partial(threads, -std::numeric_limits<double>::infinity());
  auto work = [&](unsigned t) {
    std::vector<double> buf;
    for (std::size_t p = t; p < points.size(); p += threads) {
      partial[t] = std::max(partial[t], detail::gradient_at(c, model.family(), s, points[p], buf));
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  return *std::max_element(partial.begin(), partial.end()) / c.n;
}

/// Weight update: min ||S p' - 2|| over the probability simplex. Returns p
/// itself if the solution does not improve the objective at p.
inline std::vector<double> nnls_update(const Eigen::MatrixXd& S, std::span<const double> p) {
  if (static_cast<std::size_t>(S.cols()) != p.size()) throw DomainError("weight length mismatch");
  const Eigen::VectorXd target = Eigen::VectorXd::Constant(S.rows(), 2.0);
  const auto x = detail::simplex_least_squares(S, target);
  const Eigen::Map<const Eigen::VectorXd> pv(p.data(), static_cast<Eigen::Index>(p.size()));
  const Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  if ((S * xv - target).squaredNorm() > (S * pv - target).squaredNorm() + 1e-10) {
    return std::vector<double>(p.begin(), p.end());
  }
  return x;
}

struct LineSearchResult {
  std::vector<double> weights;
  double step;  ///< accepted s in {1, 1/2, ..., 2^-30}; 0 means p_old was kept
};

inline LineSearchResult line_search(const MixturePmf& model, const Dataset& data,
                                    std::span<const double> p_old, std::span<const double> p_new) {
  if (p_old.size() != model.mixing().size() || p_new.size() != p_old.size()) {
    throw DomainError("weight length mismatch");
  }
  const auto c = detail::compress(data, model.family());
  const auto s = detail::make_state(c, model.family(), model.mixing());
  const detail::SegmentLikelihood lik(c, s);
  auto r = detail::line_search_core(lik, p_old, p_new);
  return {std::move(r.weights), r.step};
}

/// Random grid drawn from the gradient function of `model` on `data`, viewed
/// as a finite mixture of dual densities in theta.
inline std::vector<std::vector<double>> candidate_points(
    const MixturePmf& model, const Dataset& data, Rng& rng, int grid_size,
    const std::optional<std::vector<double>>& candidate_cap = std::nullopt) {
  const auto c = detail::compress(data, model.family());
  const auto s = detail::make_state(c, model.family(), model.mixing());
  detail::require_nondegenerate(s);
  std::vector<double> log_coef(c.u);
  for (std::size_t i = 0; i < c.u; ++i) log_coef[i] = std::log(c.counts[i]) - s.log_pi[i];
  const auto cap = detail::default_caps(c, model.family(), candidate_cap);
  return detail::candidate_draws(c, model.family(), log_coef, rng, grid_size, cap);
}

/// Row-selection probabilities of the gradient-as-mixture, one per observation.
inline std::vector<double> candidate_selection_weights(const MixturePmf& model, const Dataset& data) {
  std::vector<double> logs(data.n());
  for (std::size_t i = 0; i < data.n(); ++i) {
    double s = -model.log_mass(data.row(i));
    for (int k : data.row(i)) s += dual_density(model.family(), k).log_c;
    logs[i] = s;
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  std::vector<double> w(data.n());
  double total = 0.0;
  for (std::size_t i = 0; i < data.n(); ++i) total += (w[i] = std::exp(logs[i] - mx));
  for (double& x : w) x /= total;
  return w;
}

/// Finite mixture over theta: sum_i weight_i prod_j g_{k_ij}(theta_j).
class DualMixture {
 public:
  DualMixture(PsdFamily family, Dataset rows, std::vector<double> weights)
      : family_(family), rows_(std::move(rows)), weights_(std::move(weights)) {
    if (weights_.size() != rows_.n()) throw DomainError("one weight per observation required");
  }
  const PsdFamily& family() const noexcept { return family_; }
  const Dataset& rows() const noexcept { return rows_; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  double density(std::span<const double> theta) const {
    double total = 0.0;
    for (std::size_t i = 0; i < rows_.n(); ++i) {
      double lg = 0.0;
      for (std::size_t j = 0; j < rows_.d(); ++j) {
        lg += dual_density(family_, rows_.at(i, j)).density.log_density(theta[j]);
      }
      total += weights_[i] * std::exp(lg);
    }
    return total;
  }

 private:
  PsdFamily family_;
  Dataset rows_;
  std::vector<double> weights_;
};

struct ModalEmResult {
  std::vector<double> point;
  int iterations;
  bool degenerate;  ///< start had zero density; `point` is the start
};

inline ModalEmResult modal_em(const DualMixture& duals, std::span<const double> start, int iters) {
  const auto& fam = duals.family();
  const Dataset& rows = duals.rows();
  if (start.size() != rows.d()) throw DomainError("start dimension mismatch");
  detail::CompressedData c;
  c.d = rows.d();
  c.u = rows.n();
  c.n = 1.0;
  c.rows = rows.values();
  c.counts.assign(c.u, 1.0);
  c.k.resize(c.d * c.u);
  c.log_b.resize(c.d * c.u);
  std::vector<double> log_coef(c.u);
  for (std::size_t i = 0; i < c.u; ++i) {
    // weight_i g_i = weight_i f / prod_j c_{k_ij}
    double lc = duals.weights()[i] > 0.0 ? std::log(duals.weights()[i]) : detail::kNegInf;
    for (std::size_t j = 0; j < c.d; ++j) {
      const int k = rows.at(i, j);
      c.k[j * c.u + i] = k;
      c.log_b[j * c.u + i] = fam.log_coefficient(k);
      lc -= dual_density(fam, k).log_c;
    }
    log_coef[i] = lc;
  }
  std::vector<double> cap(c.d, fam.finite_radius() ? detail::kThetaCeiling
                                                    : std::numeric_limits<double>::infinity());
  std::vector<double> theta(start.begin(), start.end());
  std::vector<double> buf;
  for (std::size_t j = 0; j < c.d; ++j) c.col_max.push_back(rows.column_max(j));
  const auto scaled = detail::scaled_coefficients(c, log_coef);
  const auto r = detail::modal_em_core(c, fam, log_coef, scaled, theta, iters, cap, buf);
  if (r.degenerate) return {std::vector<double>(start.begin(), start.end()), r.iterations, true};
  return {theta, r.iterations, false};
}

/// Keeps, for each current support point, the positive-gradient mode with the
/// largest gradient among modes nearest to it (Euclidean); survivors closer
/// than merge_radius (sup norm) are deduplicated.
inline std::vector<std::vector<double>> select_candidates(
    const std::vector<std::vector<double>>& modes, std::span<const double> gradients,
    const std::vector<std::vector<double>>& current_support, double merge_radius = 0.0) {
  if (modes.size() != gradients.size()) throw DomainError("modes and gradients must align");
  const std::size_t m = current_support.size();
  std::vector<std::ptrdiff_t> best(std::max<std::size_t>(m, 1), -1);
  for (std::size_t a = 0; a < modes.size(); ++a) {
    if (!(gradients[a] > 0.0)) continue;
    std::size_t cell = 0;
    double nearest = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < m; ++l) {
      double dist = 0.0;
      for (std::size_t j = 0; j < modes[a].size(); ++j) {
        const double diff = modes[a][j] - current_support[l][j];
        dist += diff * diff;
      }
      if (dist < nearest) {
        nearest = dist;
        cell = l;
      }
    }
    if (best[cell] < 0 || gradients[a] > gradients[static_cast<std::size_t>(best[cell])]) {
      best[cell] = static_cast<std::ptrdiff_t>(a);
    }
  }
  std::vector<std::size_t> chosen;
  for (auto b : best) {
    if (b >= 0) chosen.push_back(static_cast<std::size_t>(b));
  }
  std::stable_sort(chosen.begin(), chosen.end(),
                   [&](std::size_t a, std::size_t b) { return gradients[a] > gradients[b]; });
  std::vector<std::vector<double>> out;
  for (std::size_t a : chosen) {
    bool dup = false;
    for (const auto& o : out) {
      double dist = 0.0;
      for (std::size_t j = 0; j < o.size(); ++j) dist = std::max(dist, std::abs(o[j] - modes[a][j]));
      if (dist <= merge_radius) {
        dup = true;
        break;
      }
    }
    if (!dup) out.push_back(modes[a]);
  }
  return out;
}

inline MixingDistribution prune_and_merge(const MixingDistribution& mixing, double prune_tol,
                                          double merge_radius) {
  std::vector<double> support = mixing.support();
  std::vector<double> weights = mixing.weights();
  detail::prune_merge_arrays(mixing.dim(), support, weights, prune_tol, merge_radius);
  return MixingDistribution(mixing.dim(), std::move(support), std::move(weights));
}

inline MixturePmf em_polish(const MixturePmf& model, const Dataset& data, int iters) {
  if (iters <= 0) return model;
  const auto c = detail::compress(data, model.family());
  auto s = detail::make_state(c, model.family(), model.mixing());
  detail::require_nondegenerate(s);
  detail::em_polish_state(c, model.family(), s, iters);
  return MixturePmf(model.family(), detail::to_mixing(s));
}

namespace detail {

inline State initial_state(const CompressedData& c, const PsdFamily& family, Rng& rng) {
  State s;
  s.d = c.d;
  std::vector<std::size_t> idx(c.u);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t take = std::min<std::size_t>(10, c.u);
  for (std::size_t a = 0; a < take; ++a) {
    const std::size_t r = a + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(c.u - a));
    std::swap(idx[a], idx[std::min(r, c.u - 1)]);
  }
  auto moment = [&](double mean) {
    double t = family.theta_from_mean(mean);
    return family.finite_radius() ? std::min(t, kThetaCeiling) : t;
  };
  for (std::size_t a = 0; a < take; ++a) {
    for (std::size_t j = 0; j < c.d; ++j) s.support.push_back(moment(c.rows[idx[a] * c.d + j]));
  }
  // The column-mean point has positive mass on every observed row.
  for (std::size_t j = 0; j < c.d; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < c.u; ++i) acc += c.counts[i] * c.rows[i * c.d + j];
    s.support.push_back(moment(acc / c.n));
  }
  s.weights.assign(take + 1, 1.0 / static_cast<double>(take + 1));
  prune_merge_arrays(c.d, s.support, s.weights, 0.0, default_merge_radius(s.support));
  refresh(c, family, s);
  return s;
}

}  // namespace detail

inline FitResult fit(const Dataset& data, const PsdFamily& family, const FitOptions& options) {
  options.validate();
  if (data.empty()) throw DomainError("dataset is empty");
  const auto c = detail::compress(data, family);
  Rng rng = make_rng(options.seed, 0x6669742d6e706d6cULL);
  const auto cap = detail::default_caps(c, family, options.candidate_cap);

  detail::State s = detail::initial_state(c, family, rng);
  detail::require_nondegenerate(s);

  std::vector<TraceEntry> trace{{s.loglik, s.size()}};
  std::vector<double> buf, log_coef(c.u);
  std::vector<std::vector<double>> modes;
  std::vector<double> mode_grad;

  // Fills modes/mode_grad from a fresh random grid plus the current support;
  // returns (max gradient, max |gradient at support|), both divided by n.
  auto diagnose = [&]() {
    for (std::size_t i = 0; i < c.u; ++i) log_coef[i] = std::log(c.counts[i]) - s.log_pi[i];
    modes = detail::candidate_draws(c, family, log_coef, rng, options.grid_size, cap);
    const auto scaled = detail::scaled_coefficients(c, log_coef);
    for (std::size_t l = 0; l < s.size(); ++l) {
      modes.emplace_back(s.point(l).begin(), s.point(l).end());
    }
    // Midpoints to nearest neighbours catch positive ridges between close atoms.
    for (std::size_t l = 0; l < s.size(); ++l) {
      std::size_t nearest = l;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < s.size(); ++r) {
        if (r == l) continue;
        double dist = 0.0;
        for (std::size_t j = 0; j < c.d; ++j) dist += (s.point(l)[j] - s.point(r)[j]) * (s.point(l)[j] - s.point(r)[j]);
        if (dist < best) {
          best = dist;
          nearest = r;
        }
      }
      if (nearest == l) continue;
      std::vector<double> mid(c.d);
      for (std::size_t j = 0; j < c.d; ++j) mid[j] = 0.5 * (s.point(l)[j] + s.point(nearest)[j]);
      modes.push_back(std::move(mid));
    }
    mode_grad.assign(modes.size(), -c.n);
    double sup = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < modes.size(); ++a) {
      const auto r = detail::modal_em_core(c, family, log_coef, scaled, modes[a],
                                           options.modal_em_iters, cap, buf);
      if (!r.degenerate) {
        mode_grad[a] = std::exp(r.log_value) - c.n;
        sup = std::max(sup, mode_grad[a]);
      }
    }
    double sup_abs = 0.0;
    for (std::size_t l = 0; l < s.size(); ++l) {
      const double g = detail::gradient_at(c, family, s, s.point(l), buf);
      sup = std::max(sup, g);
      sup_abs = std::max(sup_abs, std::abs(g));
    }
    return std::pair<double, double>{sup / c.n, sup_abs / c.n};
  };

  // Second look before declaring convergence: modal EM from the best points of a
  // coarse lattice over the data hull and from each atom projected onto the
  // theta_j = 0 faces. Appends to modes/mode_grad; returns max gradient / n.
  auto confirm = [&]() {
    const std::size_t per_axis =
        std::max<std::size_t>(2, static_cast<std::size_t>(std::pow(1024.0, 1.0 / static_cast<double>(c.d))));
    std::vector<double> hi(c.d);
    for (std::size_t j = 0; j < c.d; ++j) {
      hi[j] = std::min(family.theta_from_mean(c.col_max[j]), cap[j]);
    }
    std::vector<std::vector<double>> starts;
    std::vector<std::pair<double, std::size_t>> ranked;
    std::vector<std::size_t> digit(c.d, 0);
    std::vector<double> theta(c.d);
    while (true) {
      for (std::size_t j = 0; j < c.d; ++j) {
        theta[j] = hi[j] * static_cast<double>(digit[j]) / static_cast<double>(per_axis - 1);
      }
      ranked.emplace_back(detail::gradient_at(c, family, s, theta, buf), starts.size());
      starts.push_back(theta);
      std::size_t j = 0;
      while (j < c.d && ++digit[j] == per_axis) digit[j++] = 0;
      if (j == c.d) break;
    }
    const std::size_t keep = std::min<std::size_t>(8, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::vector<double>> seeds;
    for (std::size_t a = 0; a < keep; ++a) seeds.push_back(starts[ranked[a].second]);
    for (std::size_t l = 0; l < s.size(); ++l) {
      for (std::size_t j = 0; j < c.d; ++j) {
        if (s.point(l)[j] == 0.0) continue;
        std::vector<double> face(s.point(l).begin(), s.point(l).end());
        face[j] = 0.0;
        seeds.push_back(std::move(face));
      }
    }
    const auto scaled = detail::scaled_coefficients(c, log_coef);
    double sup = -std::numeric_limits<double>::infinity();
    for (auto& start : seeds) {
      const auto r = detail::modal_em_core(c, family, log_coef, scaled, start, options.modal_em_iters, cap, buf);
      if (r.degenerate) continue;
      const double g = std::exp(r.log_value) - c.n;
      sup = std::max(sup, g);
      modes.push_back(std::move(start));
      mode_grad.push_back(g);
    }
    return sup / c.n;
  };

  bool converged = false;
  double sup_grad = std::numeric_limits<double>::infinity();
  int iter = 0;
  bool diagnosed_current = false;
  for (iter = 1; iter <= options.max_outer_iters; ++iter) {
    const auto [sup, sup_abs] = diagnose();
    diagnosed_current = true;
    sup_grad = sup;
    if (sup <= options.grad_tol && sup_abs <= options.grad_tol) {
      const double second = confirm();
      if (second <= options.grad_tol) {
        converged = true;
        break;
      }
      sup_grad = second;
    }

    detail::State before = s;
    std::vector<std::vector<double>> current;
    for (std::size_t l = 0; l < s.size(); ++l) current.emplace_back(s.point(l).begin(), s.point(l).end());
    const double radius = options.merge_radius.value_or(detail::default_merge_radius(s.support));
    const auto fresh = select_candidates(modes, mode_grad, current, radius);
    for (const auto& p : fresh) {
      s.support.insert(s.support.end(), p.begin(), p.end());
      s.weights.push_back(0.0);
    }
    detail::refresh(c, family, s);

    auto reweight = [&]() {
      Eigen::MatrixXd A;
      Eigen::VectorXd b;
      detail::weighted_system(c, s, A, b);
      std::vector<double> proposal;
      try {
        proposal = detail::simplex_least_squares(A, b);
      } catch (const ConvergenceError& e) {
        proposal = e.best();
      }
      const detail::SegmentLikelihood lik(c, s);
      auto ls = detail::line_search_core(lik, s.weights, proposal);
      s.weights = std::move(ls.weights);
      detail::prune_merge_arrays(c.d, s.support, s.weights, options.prune_tol,
                                 options.merge_radius.value_or(detail::default_merge_radius(s.support)));
      detail::refresh(c, family, s);
    };
    reweight();
    if (options.em_polish_iters > 0) {
      detail::em_polish_state(c, family, s, options.em_polish_iters);
      // EM moves weights off the least-squares optimum; re-solve on the polished support.
      reweight();
    }

    if (!(s.loglik >= before.loglik)) {
      s = std::move(before);
    } else {
      diagnosed_current = false;
    }
    trace.push_back({s.loglik, s.size()});

    if (trace.size() > 5 &&
        trace.back().loglik - trace[trace.size() - 6].loglik < 1e-10 * c.n) {
      ++iter;
      break;
    }
  }
  int outer = std::min(iter, options.max_outer_iters);
  if (!converged && !diagnosed_current) {
    const auto [sup, sup_abs] = diagnose();
    sup_grad = sup;
    converged = sup <= options.grad_tol && sup_abs <= options.grad_tol;
    if (converged) {
      sup_grad = std::max(sup_grad, confirm());
      converged = sup_grad <= options.grad_tol;
    }
  }

  MixturePmf model(family, detail::to_mixing(s));
  return FitResult{std::move(model), s.loglik, sup_grad, outer, converged, std::move(trace)};
}

}  // namespace psdmix
