#pragma once

// Seeded simulation harness: scaled estimation errors across n, bootstrap
// test power across dependence levels, and 2-fold cross-validation.
// Every replicate draws from its own derived stream, so tables do not depend
// on thread count or scheduling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psdmix/ci_test.hpp"
#include "psdmix/estimators.hpp"
#include "psdmix/npmle.hpp"
#include "psdmix/parallel.hpp"
#include "psdmix/synthetic.hpp"

namespace psdmix {

enum class Estimator { Empirical, Hybrid, Mle };

inline std::string estimator_name(Estimator e) {
  switch (e) {
    case Estimator::Empirical: return "empirical";
    case Estimator::Hybrid: return "hybrid";
    case Estimator::Mle: return "mle";
  }
  return "?";
}

struct RateRunSpec {
  char label = 'a';
  PsdFamily family = PsdFamily::poisson();
  std::size_t d = 2;
  std::vector<std::size_t> n_grid{100, 1000, 10000};
  int replications = 20;
  std::vector<Metric> metrics{Metric::Hellinger, Metric::L1, Metric::L2};
  std::uint64_t seed = 0;
  unsigned threads = 1;
  double eps_tail = 1e-12;
  FitOptions fit_options;

  void validate() const {
    if (n_grid.empty()) throw DomainError("n grid is empty");
    for (std::size_t a = 1; a < n_grid.size(); ++a) {
      if (n_grid[a] <= n_grid[a - 1]) throw DomainError("n grid must be strictly increasing");
    }
    if (n_grid.front() < 2) throw DomainError("n must be >= 2");
    if (replications < 1) throw DomainError("replications must be >= 1");
    if (metrics.empty()) throw DomainError("no metrics");
    fit_options.validate();
  }
};

enum class DependenceKind { Poisson, Geometric };

struct PowerRunSpec {
  DependenceKind kind = DependenceKind::Poisson;
  std::vector<double> levels{0.0, 0.8};  ///< beta for Poisson, lambda for Geometric
  int M = 100;
  int B = 199;
  double alpha = 0.05;
  std::size_t n = 1000;
  std::vector<Metric> metrics{Metric::Hellinger, Metric::L1, Metric::L2};
  std::uint64_t seed = 0;
  unsigned threads = 1;
  FitOptions fit_options;

  void validate() const {
    if (levels.empty()) throw DomainError("no dependence levels");
    for (double x : levels) {
      if (kind == DependenceKind::Poisson && !(x >= 0.0 && x < 1.0)) throw DomainError("beta must lie in [0, 1)");
      if (kind == DependenceKind::Geometric && !(x >= 1.0)) throw DomainError("lambda must be >= 1");
    }
    if (M < 1 || B < 1) throw DomainError("M and B must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
    if (n < 2) throw DomainError("n must be >= 2");
    fit_options.validate();
  }
};

inline nlohmann::json to_json(const RateRunSpec& s) {
  std::vector<std::string> metrics;
  for (Metric m : s.metrics) metrics.push_back(metric_name(m));
  return {{"kind", "rate"},          {"config", std::string(1, s.label)}, {"family", s.family.tag()},
          {"v", s.family.v()},       {"d", s.d},                          {"n_grid", s.n_grid},
          {"replications", s.replications}, {"metrics", metrics},         {"seed", s.seed},
          {"eps_tail", s.eps_tail}};
}

inline nlohmann::json to_json(const PowerRunSpec& s) {
  std::vector<std::string> metrics;
  for (Metric m : s.metrics) metrics.push_back(metric_name(m));
  return {{"kind", "power"}, {"alternative", s.kind == DependenceKind::Poisson ? "poisson" : "geometric"},
          {"levels", s.levels}, {"M", s.M}, {"B", s.B}, {"alpha", s.alpha}, {"n", s.n},
          {"metrics", metrics}, {"seed", s.seed}};
}

/// FNV-1a over the compact JSON dump of a spec.
inline std::uint64_t spec_hash(const nlohmann::json& spec) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : spec.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

struct MeanSe {
  double mean;
  double se;
};

inline MeanSe mean_se(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  CompensatedSum s;
  for (double x : xs) s.add(x);
  const double mean = s.value() / n;
  if (xs.size() < 2) return {mean, 0.0};
  CompensatedSum q;
  for (double x : xs) q.add((x - mean) * (x - mean));
  return {mean, std::sqrt(q.value() / (n - 1.0) / n)};
}

}  // namespace detail

struct RateRow {
  Estimator estimator;
  Metric metric;
  std::size_t n;
  double mean;  ///< mean of sqrt(n) * distance to the truth
  double se;
  int replications;
  int failures;  ///< non-converged fits among the replications
  std::uint64_t seed;
  std::uint64_t spec_hash;
};

/// Per-replicate raw values, for callers that need more than means.
struct RateRaw {
  std::size_t n;
  int replicate;
  bool converged;
  std::vector<double> empirical, hybrid, mle;  ///< unscaled, one per metric
};

inline std::vector<RateRaw> run_rate_replicates(const RateRunSpec& spec) {
  spec.validate();
  const MixturePmf truth = scenario_model({spec.label, spec.family, spec.d});
  const std::size_t R = static_cast<std::size_t>(spec.replications);
  std::vector<RateRaw> raw(spec.n_grid.size() * R);
  parallel_for(raw.size(), spec.threads, [&](std::size_t task) {
    const std::size_t a = task / R;
    const std::size_t r = task % R;
    const std::size_t n = spec.n_grid[a];
    Rng rng = make_rng(derive_seed(spec.seed, a, r));
    const Dataset data = sample(truth, n, rng);
    FitOptions fo = spec.fit_options;
    fo.seed = derive_seed(spec.seed, a, r + 0x10000);
    const auto fitted = fit(data, spec.family, fo);
    const EmpiricalPmf emp(data);
    const HybridPmf hyb = hybrid(emp, fitted.model, n, spec.d);
    RateRaw out{n, static_cast<int>(r), fitted.converged, {}, {}, {}};
    for (const auto& x : distances(emp, truth, spec.metrics, spec.eps_tail)) out.empirical.push_back(x.value);
    for (const auto& x : distances(hyb, truth, spec.metrics, spec.eps_tail)) out.hybrid.push_back(x.value);
    for (const auto& x : distances(fitted.model, truth, spec.metrics, spec.eps_tail)) out.mle.push_back(x.value);
    raw[task] = std::move(out);
  });
  return raw;
}

inline std::vector<RateRow> run_rate_experiment(const RateRunSpec& spec) {
  const auto raw = run_rate_replicates(spec);
  const std::uint64_t hash = spec_hash(to_json(spec));
  const std::size_t R = static_cast<std::size_t>(spec.replications);
  std::vector<RateRow> rows;
  for (std::size_t a = 0; a < spec.n_grid.size(); ++a) {
    const double scale = std::sqrt(static_cast<double>(spec.n_grid[a]));
    int failures = 0;
    for (std::size_t r = 0; r < R; ++r) failures += raw[a * R + r].converged ? 0 : 1;
    for (Estimator e : {Estimator::Empirical, Estimator::Hybrid, Estimator::Mle}) {
      for (std::size_t m = 0; m < spec.metrics.size(); ++m) {
        std::vector<double> xs;
        for (std::size_t r = 0; r < R; ++r) {
          const auto& x = raw[a * R + r];
          const auto& v = e == Estimator::Empirical ? x.empirical : e == Estimator::Hybrid ? x.hybrid : x.mle;
          xs.push_back(scale * v[m]);
        }
        const auto ms = detail::mean_se(xs);
        rows.push_back({e, spec.metrics[m], spec.n_grid[a], ms.mean, ms.se, spec.replications, failures,
                        spec.seed, hash});
      }
    }
  }
  return rows;
}

struct PowerRow {
  double level;
  Metric metric;
  double rate;  ///< rejection frequency over M replicates
  double se;
  int M;
  int nonconverged;  ///< bootstrap refits flagged across all replicates
  std::uint64_t seed;
  std::uint64_t spec_hash;
};

inline Dataset sample_alternative(DependenceKind kind, double level, std::size_t n, Rng& rng) {
  return kind == DependenceKind::Poisson ? sample_dependent_poisson_mixture(level, n, rng)
                                         : sample_dependent_geometric_mixture(level, n, rng);
}

inline std::vector<PowerRow> run_power_experiment(const PowerRunSpec& spec) {
  spec.validate();
  const std::uint64_t hash = spec_hash(to_json(spec));
  const PsdFamily family =
      spec.kind == DependenceKind::Poisson ? PsdFamily::poisson() : PsdFamily::geometric();
  const std::size_t M = static_cast<std::size_t>(spec.M);
  const std::size_t L = spec.levels.size();
  std::vector<std::vector<char>> reject(L * M);
  std::vector<int> flagged(L * M, 0);
  parallel_for(L * M, spec.threads, [&](std::size_t task) {
    const std::size_t a = task / M;
    const std::size_t r = task % M;
    Rng rng = make_rng(derive_seed(spec.seed, a, r));
    const Dataset data = sample_alternative(spec.kind, spec.levels[a], spec.n, rng);
    TestOptions to;
    to.B = spec.B;
    to.alpha = spec.alpha;
    to.metrics = spec.metrics;
    to.seed = derive_seed(spec.seed, a, r + 0x10000);
    to.fit_options = spec.fit_options;
    to.threads = 1;
    const auto res = ci_test(data, family, to);
    std::vector<char> rj;
    for (const auto& m : res.metrics) rj.push_back(m.reject ? 1 : 0);
    reject[task] = std::move(rj);
    flagged[task] = static_cast<int>(res.nonconverged_count);
  });
  std::vector<PowerRow> rows;
  for (std::size_t a = 0; a < L; ++a) {
    int nonconv = 0;
    for (std::size_t r = 0; r < M; ++r) nonconv += flagged[a * M + r];
    for (std::size_t m = 0; m < spec.metrics.size(); ++m) {
      double hits = 0.0;
      for (std::size_t r = 0; r < M; ++r) hits += reject[a * M + r][m];
      const double rate = hits / static_cast<double>(M);
      rows.push_back({spec.levels[a], spec.metrics[m], rate,
                      std::sqrt(rate * (1.0 - rate) / static_cast<double>(M)), spec.M, nonconv, spec.seed, hash});
    }
  }
  return rows;
}

struct CvRow {
  Estimator estimator;
  Metric metric;
  double mean;  ///< unscaled mean distance to the held-out empirical pmf
  double se;
  int repeats;
  std::uint64_t seed;
  std::uint64_t spec_hash;
};

inline std::vector<CvRow> run_cv_experiment(const Dataset& data, const PsdFamily& family, int repeats,
                                            std::uint64_t seed, const FitOptions& fit_options = {},
                                            unsigned threads = 1, double eps_tail = 1e-12) {
  if (data.n() < 4) throw DomainError("cross-validation needs n >= 4");
  if (repeats < 1) throw DomainError("repeats must be >= 1");
  const std::vector<Metric> metrics{Metric::Hellinger, Metric::L2, Metric::L1};
  const nlohmann::json spec{{"kind", "cv"}, {"family", family.tag()}, {"v", family.v()}, {"n", data.n()},
                            {"d", data.d()}, {"repeats", repeats}, {"seed", seed}};
  const std::uint64_t hash = spec_hash(spec);
  const auto R = static_cast<std::size_t>(repeats);
  std::vector<std::vector<double>> vals(R);  // estimator-major, then metric
  parallel_for(R, threads, [&](std::size_t r) {
    Rng rng = make_rng(derive_seed(seed, r));
    std::vector<std::size_t> idx(data.n());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      const auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1));
      std::swap(idx[i], idx[std::min(k, i)]);
    }
    const std::size_t half = data.n() / 2;
    const std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(half));
    const std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
    const Dataset fold_a = data.subset(a);
    const Dataset fold_b = data.subset(b);
    FitOptions fo = fit_options;
    fo.seed = derive_seed(seed, r, 1);
    const auto fitted = fit(fold_a, family, fo);
    const EmpiricalPmf emp_a(fold_a), emp_b(fold_b);
    const HybridPmf hyb = hybrid(emp_a, fitted.model, fold_a.n(), data.d());
    std::vector<double> out;
    for (const auto& x : distances(emp_a, emp_b, metrics, eps_tail)) out.push_back(x.value);
    for (const auto& x : distances(hyb, emp_b, metrics, eps_tail)) out.push_back(x.value);
    for (const auto& x : distances(fitted.model, emp_b, metrics, eps_tail)) out.push_back(x.value);
    vals[r] = std::move(out);
  });
  std::vector<CvRow> rows;
  const Estimator order[] = {Estimator::Empirical, Estimator::Hybrid, Estimator::Mle};
  for (std::size_t e = 0; e < 3; ++e) {
    for (std::size_t m = 0; m < metrics.size(); ++m) {
      std::vector<double> xs;
      for (std::size_t r = 0; r < R; ++r) xs.push_back(vals[r][e * metrics.size() + m]);
      const auto ms = detail::mean_se(xs);
      rows.push_back({order[e], metrics[m], ms.mean, ms.se, repeats, seed, hash});
    }
  }
  return rows;
}

inline void write_csv(std::ostream& out, const std::vector<RateRow>& rows) {
  out << "estimator,metric,n,value,stderr,replications,failures,seed,spec_hash\n";
  for (const auto& r : rows) {
    out << estimator_name(r.estimator) << ',' << metric_name(r.metric) << ',' << r.n << ','
        << nlohmann::json(r.mean).dump() << ',' << nlohmann::json(r.se).dump() << ',' << r.replications << ','
        << r.failures << ',' << r.seed << ',' << r.spec_hash << '\n';
  }
}

inline void write_csv(std::ostream& out, const std::vector<PowerRow>& rows) {
  out << "dependence,metric,value,stderr,M,nonconverged,seed,spec_hash\n";
  for (const auto& r : rows) {
    out << nlohmann::json(r.level).dump() << ',' << metric_name(r.metric) << ',' << nlohmann::json(r.rate).dump()
        << ',' << nlohmann::json(r.se).dump() << ',' << r.M << ',' << r.nonconverged << ',' << r.seed << ','
        << r.spec_hash << '\n';
  }
}

inline void write_csv(std::ostream& out, const std::vector<CvRow>& rows) {
  out << "estimator,metric,value,stderr,repeats,seed,spec_hash\n";
  for (const auto& r : rows) {
    out << estimator_name(r.estimator) << ',' << metric_name(r.metric) << ',' << nlohmann::json(r.mean).dump()
        << ',' << nlohmann::json(r.se).dump() << ',' << r.repeats << ',' << r.seed << ',' << r.spec_hash << '\n';
  }
}

}  // namespace psdmix
