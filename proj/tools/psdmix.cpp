// psdmix: fit, evaluate, test, simulate, bench and ingest count data under
// conditionally independent PSD mixtures.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "psdmix/ci_test.hpp"
#include "psdmix/estimators.hpp"
#include "psdmix/experiments.hpp"
#include "psdmix/io.hpp"
#include "psdmix/npmle.hpp"
#include "psdmix/synthetic.hpp"

using namespace psdmix;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitNonConverged = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t resolve_seed(const std::string& text) {
  if (text.empty()) throw UsageError("--seed is required (use --seed auto to pick one)");
  if (text == "auto") {
    std::random_device rd;
    const std::uint64_t s = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    std::cerr << "seed: " << s << '\n';
    return s;
  }
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(text, &pos);
    if (pos != text.size()) throw UsageError("bad --seed '" + text + "'");
    return v;
  } catch (const std::logic_error&) {
    throw UsageError("bad --seed '" + text + "'");
  }
}

Dataset load_csv(const std::string& path) {
  if (path == "-") return read_csv(std::cin);
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  return read_csv(in);
}

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("'" + path + "': " + e.what());
  }
}

/// Writes to `path`, or stdout when empty or "-".
template <class Fn>
void emit(const std::string& path, Fn&& fn) {
  if (path.empty() || path == "-") {
    fn(std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream out(path);
  if (!out) throw InputError("cannot write '" + path + "'");
  fn(out);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<Metric> parse_metrics(const std::string& s) {
  std::vector<Metric> out;
  for (const auto& m : split_list(s)) out.push_back(parse_metric(m));
  if (out.empty()) throw UsageError("no metrics given");
  return out;
}

template <class T>
std::vector<T> parse_numbers(const std::string& s) {
  std::vector<T> out;
  for (const auto& x : split_list(s)) {
    std::istringstream is(x);
    T v{};
    if (!(is >> v) || !is.eof()) throw UsageError("bad number '" + x + "'");
    out.push_back(v);
  }
  return out;
}

struct FamilyFlags {
  std::string family = "poisson";
  double v = 2.0;
  PsdFamily get() const { return PsdFamily::from_tag(family, v); }
};

void add_family(CLI::App* cmd, FamilyFlags& f) {
  cmd->add_option("--family", f.family, "poisson | geometric | negbin")->check(CLI::IsMember({"poisson", "geometric", "negbin"}));
  cmd->add_option("--negbin-v", f.v, "negative binomial shape v");
}

void add_fit_flags(CLI::App* cmd, FitOptions& o) {
  cmd->add_option("--grad-tol", o.grad_tol, "normalized gradient tolerance");
  cmd->add_option("--max-iters", o.max_outer_iters, "outer iteration cap");
  cmd->add_option("--grid-size", o.grid_size, "random candidates per iteration");
  cmd->add_option("--modal-em-iters", o.modal_em_iters, "modal EM iterations per candidate");
  cmd->add_option("--em-polish-iters", o.em_polish_iters, "EM polish steps per iteration");
  cmd->add_option("--prune-tol", o.prune_tol, "weight pruning threshold");
}

void print_test_table(std::ostream& os, const TestResult& r) {
  os << "metric      observed      p_value  reject  min          q1           median       q3           max\n";
  for (const auto& m : r.metrics) {
    char line[256];
    std::snprintf(line, sizeof line, "%-10s  %.6e  %.4f   %-6s  %.5e  %.5e  %.5e  %.5e  %.5e\n",
                  metric_name(m.metric).c_str(), m.observed, m.p_value, m.reject ? "yes" : "no", m.summary.min,
                  m.summary.q1, m.summary.median, m.summary.q3, m.summary.max);
    os << line;
  }
  if (r.nonconverged_count > 0) os << "non-converged bootstrap refits: " << r.nonconverged_count << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonparametric MLE and conditional-independence testing for multivariate count mixtures"};
  app.require_subcommand(0, 1);
  bool version = false;
  app.add_flag("--version", version, "print version and schema identifiers");

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "fit the NPMLE of the mixing distribution");
  std::string fit_in, fit_out, fit_seed;
  FamilyFlags fit_fam;
  FitOptions fit_opts;
  fit_cmd->add_option("input", fit_in, "CSV dataset ('-' for stdin)")->required();
  fit_cmd->add_option("-o,--out", fit_out, "output JSON (default stdout)");
  fit_cmd->add_option("--seed", fit_seed, "RNG seed or 'auto'");
  add_family(fit_cmd, fit_fam);
  add_fit_flags(fit_cmd, fit_opts);

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a fitted model on a dataset");
  std::string eval_model, eval_in, eval_out;
  double eval_eps = 1e-12;
  eval_cmd->add_option("--model", eval_model, "model or fit JSON")->required();
  eval_cmd->add_option("input", eval_in, "CSV dataset")->required();
  eval_cmd->add_option("-o,--out", eval_out, "output JSON (default stdout)");
  eval_cmd->add_option("--eps-tail", eval_eps, "distance truncation tail mass");

  // test
  auto* test_cmd = app.add_subcommand("test", "bootstrap test of conditional independence");
  std::string test_in, test_out, test_seed, test_metrics = "hellinger,l1,l2";
  FamilyFlags test_fam;
  TestOptions test_opts;
  bool test_no_boot = false;
  test_cmd->add_option("input", test_in, "CSV dataset")->required();
  test_cmd->add_option("-o,--out", test_out, "output JSON (default: none)");
  test_cmd->add_option("--seed", test_seed, "RNG seed or 'auto'");
  test_cmd->add_option("--B", test_opts.B, "bootstrap replicates");
  test_cmd->add_option("--alpha", test_opts.alpha, "test level");
  test_cmd->add_option("--metrics", test_metrics, "comma list of hellinger,l1,l2,linf");
  test_cmd->add_option("--threads", test_opts.threads, "worker threads");
  test_cmd->add_flag("--no-boot", test_no_boot, "omit bootstrap vectors from JSON");
  add_family(test_cmd, test_fam);
  add_fit_flags(test_cmd, test_opts.fit_options);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "draw a synthetic dataset");
  std::string sim_scenario, sim_out, sim_seed;
  double sim_beta = -1.0, sim_lambda = -1.0;
  std::size_t sim_n = 1000, sim_d = 2;
  FamilyFlags sim_fam;
  auto* opt_scn = sim_cmd->add_option("--scenario", sim_scenario, "mixing configuration a..e")
                      ->check(CLI::IsMember({"a", "b", "c", "d", "e"}));
  auto* opt_pd = sim_cmd->add_option("--poisson-dep", sim_beta, "common-shock Poisson mixture with this beta");
  auto* opt_gd = sim_cmd->add_option("--geometric-dep", sim_lambda, "Gumbel-coupled geometric mixture with this lambda");
  opt_scn->excludes(opt_pd)->excludes(opt_gd);
  opt_pd->excludes(opt_gd);
  sim_cmd->add_option("--n", sim_n, "rows");
  sim_cmd->add_option("--d", sim_d, "dimension for --scenario (2 or 4)");
  sim_cmd->add_option("-o,--out", sim_out, "output CSV (default stdout)");
  sim_cmd->add_option("--seed", sim_seed, "RNG seed or 'auto'");
  add_family(sim_cmd, sim_fam);

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "desk-scale experiment tables");
  bench_cmd->require_subcommand(1);
  bench_cmd->fallthrough();
  std::string bench_out, bench_manifest, bench_seed;
  unsigned bench_threads = 1;
  for (auto* c : {bench_cmd}) {
    c->add_option("-o,--out", bench_out, "output CSV (default stdout)");
    c->add_option("--manifest", bench_manifest, "write the run spec as JSON");
    c->add_option("--seed", bench_seed, "RNG seed or 'auto'");
    c->add_option("--threads", bench_threads, "worker threads");
  }
  auto* rate_cmd = bench_cmd->add_subcommand("rate", "scaled errors of empirical, hybrid and MLE");
  std::string rate_config = "a", rate_ngrid = "100,1000,10000", rate_metrics = "hellinger,l1,l2";
  std::size_t rate_d = 2;
  int rate_reps = 20;
  FamilyFlags rate_fam;
  rate_cmd->add_option("--config", rate_config, "mixing configuration a..e")->check(CLI::IsMember({"a", "b", "c", "d", "e"}));
  rate_cmd->add_option("--d", rate_d, "dimension (2 or 4)");
  rate_cmd->add_option("--n-grid", rate_ngrid, "comma list of sample sizes");
  rate_cmd->add_option("--reps", rate_reps, "replications per n");
  rate_cmd->add_option("--metrics", rate_metrics, "comma list of metrics");
  add_family(rate_cmd, rate_fam);
  auto* power_cmd = bench_cmd->add_subcommand("power", "rejection rates of the bootstrap test");
  std::string power_kind = "poisson", power_levels;
  PowerRunSpec power_spec;
  power_cmd->add_option("--kind", power_kind, "poisson (beta levels) | geometric (lambda levels)")
      ->check(CLI::IsMember({"poisson", "geometric"}));
  power_cmd->add_option("--levels", power_levels, "comma list of dependence levels");
  power_cmd->add_option("--M", power_spec.M, "replicates per level");
  power_cmd->add_option("--B", power_spec.B, "bootstrap replicates per test");
  power_cmd->add_option("--alpha", power_spec.alpha, "test level");
  power_cmd->add_option("--n", power_spec.n, "rows per dataset");
  auto* cv_cmd = bench_cmd->add_subcommand("cv", "2-fold cross-validation on a dataset");
  std::string cv_in;
  int cv_repeats = 100;
  FamilyFlags cv_fam;
  cv_cmd->add_option("input", cv_in, "CSV dataset")->required();
  cv_cmd->add_option("--repeats", cv_repeats, "random splits");
  add_family(cv_cmd, cv_fam);

  // ingest
  auto* ingest_cmd = app.add_subcommand("ingest", "select integer columns from a wide CSV");
  std::string ingest_in, ingest_out, ingest_cols;
  ingest_cmd->add_option("input", ingest_in, "wide CSV with header")->required();
  ingest_cmd->add_option("--columns", ingest_cols, "comma list of column names")->required();
  ingest_cmd->add_option("-o,--out", ingest_out, "output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  }

  try {
    if (version) {
      std::cout << "psdmix 1.0.0 (" << kMixingSchema << ", " << kFitSchema << ", " << kTestSchema << ")\n";
      return kExitOk;
    }
    if (*fit_cmd) {
      fit_opts.seed = resolve_seed(fit_seed);
      const Dataset data = load_csv(fit_in);
      const auto result = fit(data, fit_fam.get(), fit_opts);
      emit(fit_out, [&](std::ostream& os) { os << to_json(result, fit_opts).dump(2) << '\n'; });
      return result.converged ? kExitOk : kExitNonConverged;
    }
    if (*eval_cmd) {
      json doc = load_json(eval_model);
      if (doc.contains("model")) doc = doc.at("model");
      const MixturePmf model = mixture_from_json(doc);
      const Dataset data = load_csv(eval_in);
      if (data.d() != model.dim()) throw InputError("dataset dimension does not match the model");
      const EmpiricalPmf emp(data);
      json out;
      out["n"] = data.n();
      out["loglik"] = log_likelihood(model, data);
      if (data.n() * data.d() >= 3) out["k_tilde"] = k_tilde(model, data.n(), data.d());
      json dist;
      const std::vector<Metric> all{Metric::Hellinger, Metric::L1, Metric::L2, Metric::Linf};
      const auto ds = distances(model, emp, all, eval_eps);
      for (std::size_t a = 0; a < all.size(); ++a) {
        dist[metric_name(all[a])] = {{"value", ds[a].value}, {"truncation_bound", ds[a].truncation_bound}};
      }
      out["distance_to_empirical"] = dist;
      emit(eval_out, [&](std::ostream& os) { os << out.dump(2) << '\n'; });
      return kExitOk;
    }
    if (*test_cmd) {
      test_opts.seed = resolve_seed(test_seed);
      test_opts.metrics = parse_metrics(test_metrics);
      const Dataset data = load_csv(test_in);
      const auto result = ci_test(data, test_fam.get(), test_opts);
      print_test_table(std::cout, result);
      if (!test_out.empty()) {
        emit(test_out, [&](std::ostream& os) { os << to_json(result, test_opts, !test_no_boot).dump(2) << '\n'; });
      }
      return result.fit.converged ? kExitOk : kExitNonConverged;
    }
    if (*sim_cmd) {
      const std::uint64_t seed = resolve_seed(sim_seed);
      Rng rng = make_rng(seed);
      Dataset data;
      if (!sim_scenario.empty()) {
        const MixturePmf model = scenario_model({sim_scenario[0], sim_fam.get(), sim_d});
        data = sample(model, sim_n, rng);
      } else if (*opt_pd) {
        data = sample_dependent_poisson_mixture(sim_beta, sim_n, rng);
      } else if (*opt_gd) {
        data = sample_dependent_geometric_mixture(sim_lambda, sim_n, rng);
      } else {
        throw UsageError("one of --scenario, --poisson-dep, --geometric-dep is required");
      }
      emit(sim_out, [&](std::ostream& os) { write_csv(os, data); });
      return kExitOk;
    }
    if (*bench_cmd) {
      const std::uint64_t seed = resolve_seed(bench_seed);
      json manifest;
      if (*rate_cmd) {
        RateRunSpec spec;
        spec.label = rate_config[0];
        spec.family = rate_fam.get();
        spec.d = rate_d;
        spec.n_grid = parse_numbers<std::size_t>(rate_ngrid);
        spec.replications = rate_reps;
        spec.metrics = parse_metrics(rate_metrics);
        spec.seed = seed;
        spec.threads = bench_threads;
        manifest = to_json(spec);
        const auto rows = run_rate_experiment(spec);
        emit(bench_out, [&](std::ostream& os) { write_csv(os, rows); });
      } else if (*power_cmd) {
        power_spec.kind = power_kind == "poisson" ? DependenceKind::Poisson : DependenceKind::Geometric;
        power_spec.levels = power_levels.empty()
                                ? (power_spec.kind == DependenceKind::Poisson ? std::vector<double>{0.0, 0.2, 0.5, 0.8}
                                                                              : std::vector<double>{1.0, 1.5, 2.0})
                                : parse_numbers<double>(power_levels);
        power_spec.seed = seed;
        power_spec.threads = bench_threads;
        manifest = to_json(power_spec);
        const auto rows = run_power_experiment(power_spec);
        emit(bench_out, [&](std::ostream& os) { write_csv(os, rows); });
      } else if (*cv_cmd) {
        const Dataset data = load_csv(cv_in);
        manifest = {{"kind", "cv"}, {"input", cv_in}, {"repeats", cv_repeats}, {"seed", seed},
                    {"family", cv_fam.get().tag()}};
        const auto rows = run_cv_experiment(data, cv_fam.get(), cv_repeats, seed, {}, bench_threads);
        emit(bench_out, [&](std::ostream& os) { write_csv(os, rows); });
      }
      if (!bench_manifest.empty()) {
        manifest["spec_hash"] = spec_hash(manifest);
        emit(bench_manifest, [&](std::ostream& os) { os << manifest.dump(2) << '\n'; });
      }
      return kExitOk;
    }
    if (*ingest_cmd) {
      std::ifstream in(ingest_in);
      if (!in) throw InputError("cannot open '" + ingest_in + "'");
      const auto cols = split_list(ingest_cols);
      const Dataset data = select_columns(in, cols);
      emit(ingest_out, [&](std::ostream& os) { write_csv(os, data, cols); });
      return kExitOk;
    }
    std::cout << app.help();
    return kExitOk;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  }
}
