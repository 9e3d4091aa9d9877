#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "psdmix/npmle.hpp"
#include "psdmix/synthetic.hpp"

using namespace psdmix;

namespace {

const std::vector<PsdFamily>& families() {
  static const std::vector<PsdFamily> f{PsdFamily::poisson(), PsdFamily::geometric(),
                                        PsdFamily::negative_binomial(2.0)};
  return f;
}

Dataset draw(char label, const PsdFamily& f, std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return sample(scenario_model({label, f, 2}), n, rng);
}

FitOptions seeded(std::uint64_t seed) {
  FitOptions o;
  o.seed = seed;
  return o;
}

double objective(const Eigen::MatrixXd& S, const std::vector<double>& p) {
  const Eigen::Map<const Eigen::VectorXd> x(p.data(), static_cast<Eigen::Index>(p.size()));
  return (S * x - Eigen::VectorXd::Constant(S.rows(), 2.0)).squaredNorm();
}

std::vector<std::vector<double>> oracle_grid(const PsdFamily& f, double step) {
  return f.finite_radius() ? oracle::product_grid(0.0, 0.99, step, 2) : oracle::product_grid(0.0, 6.0, step, 2);
}

}  // namespace

TEST(ResponseMatrix, SingleComponentIsAllOnes) {
  const MixturePmf m(PsdFamily::poisson(), MixingDistribution::point_mass({1.0, 2.0}));
  const auto S = response_matrix(m, Dataset(3, 2, {0, 1, 4, 2, 1, 1}));
  for (Eigen::Index i = 0; i < S.rows(); ++i) EXPECT_NEAR(S(i, 0), 1.0, 1e-14);
}

TEST(ResponseMatrix, DuplicatePointsGiveIdenticalColumns) {
  const MixturePmf m(PsdFamily::geometric(), MixingDistribution(1, {0.3, 0.3, 0.8}, {0.25, 0.25, 0.5}));
  const auto S = response_matrix(m, Dataset(4, 1, {0, 1, 3, 9}));
  for (Eigen::Index i = 0; i < S.rows(); ++i) EXPECT_DOUBLE_EQ(S(i, 0), S(i, 1));
}

TEST(ResponseMatrix, MatchesElementwiseOracleAndRowIdentity) {
  const auto m = scenario_model({'a', PsdFamily::poisson(), 2});
  const Dataset data(5, 2, {0, 0, 1, 2, 3, 0, 0, 4, 2, 2});
  const auto S = response_matrix(m, data);
  const auto& q = m.mixing();
  std::vector<std::vector<double>> pts{{0.7, 0.7}, {0.9, 0.9}};
  for (std::size_t i = 0; i < data.n(); ++i) {
    const std::vector<int> k(data.row(i).begin(), data.row(i).end());
    const long double pi = oracle::mixture_pmf(m.family(), pts, q.weights(), k);
    double combo = 0.0;
    for (std::size_t l = 0; l < 2; ++l) {
      const long double f = oracle::pmf(m.family(), pts[l][0], k[0]) * oracle::pmf(m.family(), pts[l][1], k[1]);
      EXPECT_NEAR(S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l)), static_cast<double>(f / pi), 1e-12);
      combo += q.weight(l) * S(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(l));
    }
    EXPECT_NEAR(combo, 1.0, 1e-10);
  }
}

TEST(ResponseMatrix, ZeroProbabilityRowIsNamed) {
  const MixturePmf m(PsdFamily::poisson(), MixingDistribution::point_mass({0.0}));
  try {
    response_matrix(m, Dataset(3, 1, {0, 0, 2}));
    FAIL() << "expected DegenerateModelError";
  } catch (const DegenerateModelError& e) {
    EXPECT_EQ(e.row(), 2u);
  }
}

TEST(Gradient, VanishesAtSingleObservationOptimum) {
  const Dataset one(1, 2, {3, 1});
  const MixturePmf pm(PsdFamily::poisson(), MixingDistribution::point_mass({3.0, 1.0}));
  EXPECT_NEAR(gradient(pm, one, std::vector<double>{3.0, 1.0}), 0.0, 1e-14);
  const MixturePmf gm(PsdFamily::geometric(), MixingDistribution::point_mass({0.75, 0.5}));
  EXPECT_NEAR(gradient(gm, one, std::vector<double>{0.75, 0.5}), 0.0, 1e-14);
}

TEST(Gradient, WeightedAverageOverSupportIsZero) {
  for (const auto& f : families()) {
    const auto m = scenario_model({'b', f, 2});
    const auto data = draw('a', f, 300, 5);
    double total = 0.0;
    for (std::size_t l = 0; l < m.mixing().size(); ++l) total += m.mixing().weight(l) * gradient(m, data, m.mixing().point(l));
    EXPECT_NEAR(total / 300.0, 0.0, 1e-12) << f.tag();
  }
}

TEST(Gradient, MatchesDirectFormula) {
  const auto f = PsdFamily::negative_binomial(2.0);
  const auto m = scenario_model({'a', f, 2});
  const auto data = draw('b', f, 50, 8);
  const std::vector<double> theta{0.55, 0.8};
  long double want = -50.0L;
  const std::vector<std::vector<double>> pts{{0.7, 0.7}, {0.9, 0.9}};
  for (std::size_t i = 0; i < data.n(); ++i) {
    const std::vector<int> k(data.row(i).begin(), data.row(i).end());
    want += oracle::pmf(f, theta[0], k[0]) * oracle::pmf(f, theta[1], k[1]) /
            oracle::mixture_pmf(f, pts, m.mixing().weights(), k);
  }
  EXPECT_NEAR(gradient(m, data, theta), static_cast<double>(want), 1e-10);
}

TEST(NnlsUpdate, SingleColumn) {
  Eigen::MatrixXd S(3, 1);
  S << 1.0, 2.0, 0.5;
  const auto p = nnls_update(S, std::vector<double>{1.0});
  ASSERT_EQ(p.size(), 1u);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
}

TEST(NnlsUpdate, TwinColumnsReachOptimalObjective) {
  Eigen::MatrixXd S(3, 3);
  S << 1.0, 1.0, 3.0, 2.0, 2.0, 0.5, 1.5, 1.5, 1.0;
  const auto p = nnls_update(S, std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3});
  double best = 1e300;
  for (int i = 0; i <= 1000; ++i) {
    const double a = i / 1000.0;
    best = std::min(best, objective(S, {a, 0.0, 1.0 - a}));
  }
  EXPECT_LE(objective(S, p), best + 1e-10);
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
}

TEST(NnlsUpdate, BeatsSimplexGridAndSatisfiesKkt) {
  Rng rng = make_rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd S(4, 3);
    for (Eigen::Index i = 0; i < 4; ++i) {
      for (Eigen::Index l = 0; l < 3; ++l) S(i, l) = 3.0 * uniform01(rng);
    }
    const auto p = nnls_update(S, std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3});
    double grid_best = 1e300;
    for (int a = 0; a <= 1000; ++a) {
      for (int b = 0; a + b <= 1000; ++b) {
        grid_best = std::min(grid_best, objective(S, {a / 1000.0, b / 1000.0, (1000 - a - b) / 1000.0}));
      }
    }
    const double obj = objective(S, p);
    EXPECT_LE(obj, grid_best + 1e-8) << "trial " << trial;
    double sum = 0.0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-10);
    // KKT on the simplex: equal gradients on the support, no smaller gradient off it.
    const Eigen::Map<const Eigen::VectorXd> x(p.data(), 3);
    const Eigen::VectorXd g = 2.0 * S.transpose() * (S * x - Eigen::VectorXd::Constant(4, 2.0));
    double lambda = 1e300;
    for (int l = 0; l < 3; ++l) {
      if (p[l] > 1e-12) lambda = std::min(lambda, g(l));
    }
    for (int l = 0; l < 3; ++l) {
      if (p[l] > 1e-12) EXPECT_NEAR(g(l), lambda, 1e-8 * std::max(1.0, std::abs(lambda)));
      else EXPECT_GE(g(l), lambda - 1e-8 * std::max(1.0, std::abs(lambda)));
    }
  }
}

TEST(LineSearch, FullStepAndNoOp) {
  const auto f = PsdFamily::poisson();
  const MixturePmf m(f, MixingDistribution(1, {1.0, 4.0}, {0.5, 0.5}));
  Rng rng = make_rng(1);
  const auto data = sample(MixturePmf(f, MixingDistribution(1, {1.0, 4.0}, {0.8, 0.2})), 500, rng);
  const auto full = line_search(m, data, std::vector<double>{0.5, 0.5}, std::vector<double>{0.7, 0.3});
  EXPECT_DOUBLE_EQ(full.step, 1.0);
  EXPECT_DOUBLE_EQ(full.weights[0], 0.7);
  const auto same = line_search(m, data, std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5});
  EXPECT_DOUBLE_EQ(same.weights[0], 0.5);
  EXPECT_DOUBLE_EQ(same.weights[1], 0.5);
}

TEST(LineSearch, OvershootHalves) {
  const auto f = PsdFamily::poisson();
  Rng rng = make_rng(2);
  const auto data = sample(MixturePmf(f, MixingDistribution(1, {1.0, 4.0}, {0.6, 0.4})), 2000, rng);
  auto ll = [&](double w) { return log_likelihood(MixturePmf(f, MixingDistribution(1, {1.0, 4.0}, {w, 1.0 - w})), data); };
  // Optimum of the concave one-dimensional profile by golden section.
  double lo = 0.01, hi = 0.99;
  for (int i = 0; i < 200; ++i) {
    const double a = lo + 0.382 * (hi - lo), b = lo + 0.618 * (hi - lo);
    if (ll(a) < ll(b)) lo = a;
    else hi = b;
  }
  const double w_star = 0.5 * (lo + hi);
  const double delta = 0.1;
  const double w_old = w_star + delta;
  const double w_new = w_old - 2.2 * delta;
  ASSERT_LT(ll(w_new), ll(w_old));
  ASSERT_GT(ll(w_old - 1.1 * delta), ll(w_old));
  const MixturePmf m(f, MixingDistribution(1, {1.0, 4.0}, {w_old, 1.0 - w_old}));
  const auto r = line_search(m, data, std::vector<double>{w_old, 1.0 - w_old}, std::vector<double>{w_new, 1.0 - w_new});
  EXPECT_DOUBLE_EQ(r.step, 0.5);
  EXPECT_GE(ll(r.weights[0]), ll(w_old));
}

TEST(CandidatePoints, IdenticalGeometricZerosHaveBetaMarginals) {
  const auto f = PsdFamily::geometric();
  const MixturePmf m(f, MixingDistribution::point_mass({0.5, 0.5}));
  const Dataset data(3, 2, {0, 0, 0, 0, 0, 0});
  Rng rng = make_rng(17);
  const auto pts = candidate_points(m, data, rng, 100000);
  ASSERT_EQ(pts.size(), 100000u);
  for (std::size_t j = 0; j < 2; ++j) {
    std::vector<double> xs;
    for (const auto& p : pts) xs.push_back(p[j]);
    EXPECT_LT(oracle::ks_statistic(xs, oracle::regularized_beta_1_2), oracle::ks_critical_1pct(xs.size()));
  }
  Rng r2 = make_rng(1);
  EXPECT_TRUE(candidate_points(m, data, r2, 0).empty());
}

TEST(CandidatePoints, SelectionWeightsByHand) {
  const auto f = PsdFamily::geometric();
  const MixturePmf m(f, MixingDistribution::point_mass({0.5}));
  const auto w = candidate_selection_weights(m, Dataset(2, 1, {0, 3}));
  // c_0 / pi(0) = (1/2) / (1/2) = 1; c_3 / pi(3) = (1/20) / (1/16) = 0.8.
  EXPECT_NEAR(w[0], 1.0 / 1.8, 1e-14);
  EXPECT_NEAR(w[1], 0.8 / 1.8, 1e-14);
}

TEST(CandidatePoints, PoissonCapClips) {
  const MixturePmf m(PsdFamily::poisson(), MixingDistribution::point_mass({5.0}));
  Rng rng = make_rng(3);
  const auto pts = candidate_points(m, Dataset(1, 1, {10}), rng, 2000, std::vector<double>{8.0});
  for (const auto& p : pts) EXPECT_LE(p[0], 8.0);
}

TEST(ModalEm, SingleObservationModes) {
  const DualMixture poi(PsdFamily::poisson(), Dataset(1, 1, {3}), {1.0});
  EXPECT_NEAR(modal_em(poi, std::vector<double>{0.5}, 200).point[0], 3.0, 1e-8);
  const DualMixture geo(PsdFamily::geometric(), Dataset(1, 1, {3}), {1.0});
  EXPECT_NEAR(modal_em(geo, std::vector<double>{0.2}, 200).point[0], 0.75, 1e-8);
}

TEST(ModalEm, TwoObservationGridArgmax) {
  const DualMixture duals(PsdFamily::geometric(), Dataset(2, 1, {2, 6}), {0.4, 0.6});
  const auto r = modal_em(duals, std::vector<double>{0.5}, 5000);
  ASSERT_FALSE(r.degenerate);
  double best = -1.0, arg = 0.0;
  for (int i = 1; i < 100000; ++i) {
    const double t = i * 1e-5;
    const double v = duals.density(std::vector<double>{t});
    if (v > best) {
      best = v;
      arg = t;
    }
  }
  EXPECT_NEAR(r.point[0], arg, 1e-4);
}

TEST(ModalEm, AscentIsMonotone) {
  const DualMixture duals(PsdFamily::negative_binomial(2.0), Dataset(3, 2, {0, 4, 5, 1, 2, 2}), {0.2, 0.5, 0.3});
  std::vector<double> theta{0.3, 0.3};
  double prev = duals.density(theta);
  for (int it = 0; it < 50; ++it) {
    theta = modal_em(duals, theta, 1).point;
    const double v = duals.density(theta);
    EXPECT_GE(v, prev * (1.0 - 1e-12));
    prev = v;
  }
}

TEST(ModalEm, StartOutsideSupportIsFlagged) {
  const DualMixture duals(PsdFamily::geometric(), Dataset(1, 1, {2}), {1.0});
  const auto r = modal_em(duals, std::vector<double>{0.0}, 10);
  EXPECT_TRUE(r.degenerate);
  EXPECT_DOUBLE_EQ(r.point[0], 0.0);
}

TEST(SelectCandidates, Rules) {
  const std::vector<std::vector<double>> one{{1.0, 1.0}};
  const std::vector<std::vector<double>> modes{{1.1, 1.0}, {0.9, 1.0}, {1.0, 1.2}};
  EXPECT_TRUE(select_candidates(modes, std::vector<double>{-1.0, 0.0, -3.0}, one).empty());
  const auto best = select_candidates(modes, std::vector<double>{5.0, 2.0, -1.0}, one);
  ASSERT_EQ(best.size(), 1u);
  EXPECT_EQ(best[0], modes[0]);

  const std::vector<std::vector<double>> two{{0.0, 0.0}, {5.0, 5.0}};
  const std::vector<std::vector<double>> spread{{0.1, 0.0}, {0.2, 0.1}, {4.9, 5.0}, {5.2, 5.1}};
  const auto per_cell = select_candidates(spread, std::vector<double>{1.0, 3.0, 2.0, 0.5}, two);
  ASSERT_EQ(per_cell.size(), 2u);
  EXPECT_EQ(per_cell[0], spread[1]);
  EXPECT_EQ(per_cell[1], spread[2]);
}

TEST(PruneAndMerge, Rules) {
  const auto single = prune_and_merge(MixingDistribution(1, {0.2, 0.7}, {1.0, 0.0}), 1e-10, 1e-6);
  ASSERT_EQ(single.size(), 1u);
  EXPECT_DOUBLE_EQ(single.point(0)[0], 0.2);

  const auto merged = prune_and_merge(MixingDistribution(1, {0.5, 0.5 + 1e-7}, {0.5, 0.5}), 1e-10, 1e-6);
  ASSERT_EQ(merged.size(), 1u);
  EXPECT_NEAR(merged.point(0)[0], 0.5 + 5e-8, 1e-15);
  EXPECT_DOUBLE_EQ(merged.weight(0), 1.0);

  const auto keep = prune_and_merge(MixingDistribution(1, {0.1, 0.9}, {0.45, 0.55}), 0.6, 1e-6);
  ASSERT_EQ(keep.size(), 1u);
  EXPECT_DOUBLE_EQ(keep.point(0)[0], 0.9);
  EXPECT_DOUBLE_EQ(keep.weight(0), 1.0);
}

TEST(PruneAndMerge, TinyWeightBarelyMovesThePmf) {
  const auto f = PsdFamily::poisson();
  const MixingDistribution q(2, {0.7, 0.7, 0.9, 0.9, 3.0, 0.1}, {1.0 / 3.0, 2.0 / 3.0 - 1e-12, 1e-12});
  const MixturePmf before(f, q);
  const MixturePmf after(f, prune_and_merge(q, 1e-10, 1e-6));
  EXPECT_EQ(after.mixing().size(), 2u);
  double worst = 0.0;
  for (int a = 0; a <= 10; ++a) {
    for (int b = 0; b <= 10; ++b) worst = std::max(worst, std::abs(before.mass(LatticePoint{a, b}) - after.mass(LatticePoint{a, b})));
  }
  EXPECT_LT(worst, 1e-11);
}

TEST(EmPolish, SingleComponentMovesToMean) {
  const auto data = draw('a', PsdFamily::poisson(), 400, 4);
  const MixturePmf m(PsdFamily::poisson(), MixingDistribution::point_mass({2.0, 0.3}));
  const auto out = em_polish(m, data, 1);
  EXPECT_NEAR(out.mixing().point(0)[0], data.column_mean(0), 1e-12);
  EXPECT_NEAR(out.mixing().point(0)[1], data.column_mean(1), 1e-12);
  const auto g = em_polish(MixturePmf(PsdFamily::geometric(), MixingDistribution::point_mass({0.2, 0.2})), data, 1);
  const double mbar = data.column_mean(0);
  EXPECT_NEAR(g.mixing().point(0)[0], mbar / (1.0 + mbar), 1e-12);
  const auto now = em_polish(m, data, 0);
  EXPECT_EQ(now.mixing(), m.mixing());
}

TEST(EmPolish, LoglikNondecreasing) {
  for (const auto& f : families()) {
    const auto data = draw('a', f, 500, 6);
    MixturePmf m(f, MixingDistribution(2, {0.3, 0.4, 0.5, 0.8, 0.85, 0.6}, {0.3, 0.3, 0.4}));
    double prev = log_likelihood(m, data);
    for (int it = 0; it < 20; ++it) {
      m = em_polish(m, data, 1);
      const double cur = log_likelihood(m, data);
      EXPECT_GE(cur, prev - 1e-9) << f.tag() << " step " << it;
      prev = cur;
    }
  }
}

TEST(Fit, IdenticalRowsGiveSingleAtom) {
  const Dataset data(25, 2, std::vector<int>(50, 0));
  std::vector<int> v;
  for (int i = 0; i < 25; ++i) {
    v.push_back(3);
    v.push_back(1);
  }
  const Dataset rows(25, 2, v);
  for (const auto& f : families()) {
    const auto r = fit(rows, f, seeded(1));
    EXPECT_TRUE(r.converged) << f.tag();
    ASSERT_EQ(r.model.mixing().size(), 1u) << f.tag();
    const auto p = r.model.mixing().point(0);
    EXPECT_NEAR(p[0], f.theta_from_mean(3.0), 1e-6) << f.tag();
    EXPECT_NEAR(p[1], f.theta_from_mean(1.0), 1e-6) << f.tag();
    const double want = 25.0 * (log_pmf(f, f.theta_from_mean(3.0), 3) + log_pmf(f, f.theta_from_mean(1.0), 1));
    EXPECT_NEAR(r.loglik, want, 1e-8) << f.tag();
  }
  const auto zero = fit(data, PsdFamily::poisson(), seeded(1));
  EXPECT_TRUE(zero.converged);
  EXPECT_NEAR(zero.loglik, 0.0, 1e-12);
}

TEST(Fit, SingleObservationSaturates) {
  for (const auto& f : families()) {
    const auto r = fit(Dataset(1, 3, {2, 0, 5}), f, seeded(3));
    EXPECT_TRUE(r.converged);
    const double want = log_pmf(f, f.theta_from_mean(2.0), 2) + log_pmf(f, 0.0, 0) + log_pmf(f, f.theta_from_mean(5.0), 5);
    EXPECT_NEAR(r.loglik, want, 1e-9) << f.tag();
  }
}

TEST(Fit, ConfigAPoissonBeatsGridOracle) {
  const auto data = draw('a', PsdFamily::poisson(), 2000, 12);
  const auto r = fit(data, PsdFamily::poisson(), seeded(12));
  EXPECT_TRUE(r.converged);
  EXPECT_LE(r.sup_gradient_normalized, 1e-4);
  const auto grid = oracle::product_grid(0.0, 6.0, 0.05, 2);
  EXPECT_LE(oracle::grid_dominance_gap(r.model, data, grid), 1e-6 * 2000.0);
  const auto oracle_fit = oracle::grid_em(PsdFamily::poisson(), data, grid, 1e-10, 200);
  EXPECT_GE(r.loglik, oracle_fit.loglik - 1e-6 * 2000.0);
  EXPECT_NEAR(r.loglik, log_likelihood(r.model, data), 1e-8);
}

TEST(Fit, OracleDominanceOnSmallDatasets) {
  for (const auto& f : families()) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto data = draw('b', f, 80, 100 + seed);
      const auto r = fit(data, f, seeded(seed));
      const auto grid = oracle_grid(f, f.finite_radius() ? 0.01 : 0.05);
      EXPECT_LE(oracle::grid_dominance_gap(r.model, data, grid), 1e-6 * 80.0) << f.tag() << " seed " << seed;
      const auto orc = oracle::grid_em(f, data, grid, 1e-10, 200);
      EXPECT_GE(r.loglik, orc.loglik - 1e-6 * 80.0) << f.tag() << " seed " << seed;
    }
  }
}

TEST(Fit, TraceMonotoneWeightsValidAndFirstOrderConditions) {
  for (const auto& f : families()) {
    const auto data = draw('b', f, 600, 21);
    FitOptions o = seeded(21);
    const auto r = fit(data, f, o);
    ASSERT_TRUE(r.converged) << f.tag();
    for (std::size_t t = 1; t < r.trace.size(); ++t) EXPECT_GE(r.trace[t].loglik, r.trace[t - 1].loglik - 1e-9);
    double sum = 0.0;
    for (double w : r.model.mixing().weights()) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-10);
    const auto cap = f.finite_radius() ? 1.0 : 1.5 * (data.column_max(0) + 5.0 * std::sqrt(data.column_max(0) + 1.0));
    auto pts = oracle::halton(10000, 2);
    for (auto& p : pts) {
      for (double& x : p) x *= cap;
    }
    EXPECT_LE(gradient_sup(r.model, data, pts), o.grad_tol) << f.tag();
    for (std::size_t l = 0; l < r.model.mixing().size(); ++l) {
      if (r.model.mixing().weight(l) > 10.0 * o.prune_tol) {
        EXPECT_LE(std::abs(gradient(r.model, data, r.model.mixing().point(l))) / 600.0, 10.0 * o.grad_tol);
      }
    }
  }
}

TEST(Fit, DeterministicUnderSeed) {
  const auto data = draw('c', PsdFamily::geometric(), 500, 31);
  const auto a = fit(data, PsdFamily::geometric(), seeded(77));
  const auto b = fit(data, PsdFamily::geometric(), seeded(77));
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t t = 0; t < a.trace.size(); ++t) {
    EXPECT_EQ(a.trace[t].loglik, b.trace[t].loglik);
    EXPECT_EQ(a.trace[t].support_size, b.trace[t].support_size);
  }
  EXPECT_EQ(a.model.mixing(), b.model.mixing());
}

TEST(Fit, IterationCapReportsNonConvergence) {
  const auto data = draw('c', PsdFamily::poisson(), 3000, 41);
  FitOptions o = seeded(41);
  o.max_outer_iters = 1;
  o.grad_tol = 1e-12;
  const auto r = fit(data, PsdFamily::poisson(), o);
  EXPECT_FALSE(r.converged);
  EXPECT_GE(r.loglik, r.trace.front().loglik);
  EXPECT_EQ(r.outer_iters, 1);
}

TEST(Fit, RejectsInvalidInput) {
  EXPECT_THROW(fit(Dataset(2), PsdFamily::poisson(), seeded(1)), DomainError);
  FitOptions bad = seeded(1);
  bad.grad_tol = 0.0;
  EXPECT_THROW(fit(Dataset(1, 1, {1}), PsdFamily::poisson(), bad), DomainError);
}
