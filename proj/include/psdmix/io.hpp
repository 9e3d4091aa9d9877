#pragma once

// CSV datasets and JSON documents for models, fits and test results.

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "psdmix/ci_test.hpp"
#include "psdmix/error.hpp"
#include "psdmix/mixture.hpp"
#include "psdmix/npmle.hpp"

namespace psdmix {

using json = nlohmann::json;

inline constexpr const char* kMixingSchema = "psdmix.mixing/1";
inline constexpr const char* kFitSchema = "psdmix.fit/1";
inline constexpr const char* kTestSchema = "psdmix.test/1";

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline bool parse_int(const std::string& cell, long long& out) {
  const std::string t = trim(cell);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size();
}

inline bool is_numeric_row(const std::vector<std::string>& cells) {
  for (const auto& c : cells) {
    const std::string t = trim(c);
    if (t.empty()) return false;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) return false;
  }
  return true;
}

}  // namespace detail

/// n x d nonnegative integer table; a non-numeric first line is a header.
inline Dataset read_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::size_t d = 0;
  std::vector<int> values;
  std::size_t n = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty() || detail::trim(line) == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (first) {
      first = false;
      d = cells.size();
      if (!detail::is_numeric_row(cells)) continue;
    }
    if (cells.size() != d) {
      throw InputError("line " + std::to_string(line_no) + ": expected " + std::to_string(d) +
                       " columns, found " + std::to_string(cells.size()));
    }
    for (std::size_t j = 0; j < cells.size(); ++j) {
      long long v = 0;
      if (!detail::parse_int(cells[j], v)) {
        throw InputError("line " + std::to_string(line_no) + ", column " + std::to_string(j + 1) +
                         ": not an integer: '" + cells[j] + "'");
      }
      if (v < 0) {
        throw InputError("line " + std::to_string(line_no) + ", column " + std::to_string(j + 1) +
                         ": negative count");
      }
      if (v > std::numeric_limits<int>::max()) {
        throw InputError("line " + std::to_string(line_no) + ", column " + std::to_string(j + 1) +
                         ": count too large");
      }
      values.push_back(static_cast<int>(v));
    }
    ++n;
  }
  if (n == 0) throw InputError("no data rows");
  return Dataset(n, d, std::move(values));
}

inline void write_csv(std::ostream& out, const Dataset& data, const std::vector<std::string>& header = {}) {
  if (!header.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
    out << '\n';
  }
  for (std::size_t i = 0; i < data.n(); ++i) {
    for (std::size_t j = 0; j < data.d(); ++j) out << (j ? "," : "") << data.at(i, j);
    out << '\n';
  }
}

/// Selects named columns (in the given order) from a CSV with a header line.
inline Dataset select_columns(std::istream& in, const std::vector<std::string>& columns) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty input");
  const auto header = detail::split_csv_line(line);
  std::vector<std::size_t> idx;
  for (const auto& name : columns) {
    std::size_t found = header.size();
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (detail::trim(header[j]) == name) found = j;
    }
    if (found == header.size()) throw InputError("missing column '" + name + "'");
    idx.push_back(found);
  }
  Dataset out(columns.size());
  std::size_t line_no = 1;
  std::vector<int> row(columns.size());
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    for (std::size_t a = 0; a < idx.size(); ++a) {
      long long v = 0;
      if (idx[a] >= cells.size() || !detail::parse_int(cells[idx[a]], v) || v < 0 ||
          v > std::numeric_limits<int>::max()) {
        throw InputError("line " + std::to_string(line_no) + ", column '" + columns[a] +
                         "': not a nonnegative integer");
      }
      row[a] = static_cast<int>(v);
    }
    out.add_row(row);
  }
  return out;
}

inline json to_json(const MixturePmf& model) {
  const auto& q = model.mixing();
  json j;
  j["schema"] = kMixingSchema;
  j["family"] = model.family().tag();
  if (model.family().kind() == FamilyKind::NegativeBinomial) j["v"] = model.family().v();
  j["d"] = q.dim();
  json support = json::array();
  for (std::size_t l = 0; l < q.size(); ++l) {
    const auto p = q.point(l);
    support.push_back(std::vector<double>(p.begin(), p.end()));
  }
  j["support"] = support;
  j["weights"] = q.weights();
  return j;
}

inline MixturePmf mixture_from_json(const json& j) {
  try {
    std::optional<double> v;
    if (j.contains("v")) v = j.at("v").get<double>();
    const auto family = PsdFamily::from_tag(j.at("family").get<std::string>(), v);
    const auto d = j.at("d").get<std::size_t>();
    std::vector<double> support;
    for (const auto& p : j.at("support")) {
      if (p.size() != d) throw InputError("support point has wrong dimension");
      for (const auto& x : p) support.push_back(x.get<double>());
    }
    auto weights = j.at("weights").get<std::vector<double>>();
    MixingDistribution q(d, std::move(support), std::move(weights));
    q.validate(family);
    return MixturePmf(family, std::move(q));
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed model JSON: ") + e.what());
  } catch (const DomainError& e) {
    throw InputError(std::string("invalid model: ") + e.what());
  }
}

inline json to_json(const FitOptions& o) {
  json j;
  j["grad_tol"] = o.grad_tol;
  j["max_outer_iters"] = o.max_outer_iters;
  j["grid_size"] = o.grid_size;
  j["modal_em_iters"] = o.modal_em_iters;
  j["prune_tol"] = o.prune_tol;
  j["merge_radius"] = o.merge_radius ? json(*o.merge_radius) : json(nullptr);
  j["em_polish_iters"] = o.em_polish_iters;
  j["candidate_cap"] = o.candidate_cap ? json(*o.candidate_cap) : json(nullptr);
  return j;
}

inline json to_json(const FitResult& r, const FitOptions& o) {
  json j;
  j["schema"] = kFitSchema;
  j["model"] = to_json(r.model);
  j["loglik"] = r.loglik;
  j["sup_gradient_normalized"] = r.sup_gradient_normalized;
  j["iterations"] = r.outer_iters;
  j["converged"] = r.converged;
  j["seed"] = o.seed;
  j["options"] = to_json(o);
  json trace = json::array();
  for (const auto& t : r.trace) trace.push_back({{"loglik", t.loglik}, {"support_size", t.support_size}});
  j["trace"] = trace;
  return j;
}

inline json to_json(const TestResult& r, const TestOptions& o, bool include_boot = true) {
  json j;
  j["schema"] = kTestSchema;
  j["seed"] = o.seed;
  j["B"] = o.B;
  j["alpha"] = o.alpha;
  j["fit"] = to_json(r.fit, detail::with_seed(o.fit_options, derive_seed(o.seed, 0)));
  j["nonconverged_replicates"] = r.nonconverged_count;
  json metrics = json::object();
  for (const auto& m : r.metrics) {
    json e;
    e["observed"] = m.observed;
    e["critical"] = m.critical;
    e["p_value"] = m.p_value;
    e["reject"] = m.reject;
    e["summary"] = {{"min", m.summary.min}, {"q1", m.summary.q1}, {"median", m.summary.median},
                    {"q3", m.summary.q3}, {"max", m.summary.max}};
    if (include_boot) e["boot"] = m.boot;
    metrics[metric_name(m.metric)] = e;
  }
  j["metrics"] = metrics;
  return j;
}

}  // namespace psdmix
