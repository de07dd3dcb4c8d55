#pragma once

// JSON emission and parsing of EstimateResult, IdentificationReport and
// VerifyReport. Objects are written with sorted keys and shortest round-trip
// number formatting, so write -> read -> write is byte-stable. Non-finite
// numbers are written as null and read back as NaN.

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "revpf/estimator.hpp"
#include "revpf/identlab.hpp"
#include "revpf/io.hpp"
#include "revpf/simulator.hpp"

namespace revpf {

using json = nlohmann::json;

namespace detail {

inline json num(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline double num_from(const json& j) {
  if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
  return j.get<double>();
}

inline json nums(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

inline std::vector<double> nums_from(const json& j) {
  std::vector<double> v;
  for (const auto& x : j) v.push_back(num_from(x));
  return v;
}

inline json matrix(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) row.push_back(num(m(i, k)));
    a.push_back(std::move(row));
  }
  return a;
}

inline Eigen::MatrixXd matrix_from(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j.at(static_cast<std::size_t>(i));
    if (static_cast<Eigen::Index>(row.size()) != cols) throw FormatError("ragged matrix in JSON document");
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = num_from(row.at(static_cast<std::size_t>(k)));
  }
  return m;
}

inline json matrices(const std::vector<std::vector<double>>& v) {
  json a = json::array();
  for (const auto& x : v) a.push_back(nums(x));
  return a;
}

inline std::vector<std::vector<double>> matrices_from(const json& j) {
  std::vector<std::vector<double>> v;
  for (const auto& x : j) v.push_back(nums_from(x));
  return v;
}

inline json num_map(const std::map<std::string, double>& m) {
  json o = json::object();
  for (const auto& [k, v] : m) o[k] = num(v);
  return o;
}

inline std::map<std::string, double> num_map_from(const json& j) {
  std::map<std::string, double> m;
  for (const auto& [k, v] : j.items()) m[k] = num_from(v);
  return m;
}

// Wraps parser and accessor exceptions as FormatError.
template <class Fn>
auto parse_document(const std::string& what, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw FormatError(what + ": " + e.what());
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(what + ": " + e.what());
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EstimateResult

inline json to_json(const LocalRun& r) {
  return {{"restart", r.restart},
          {"stage", r.stage},
          {"start", detail::nums(r.start)},
          {"estimate", detail::nums(r.estimate)},
          {"objective", detail::num(r.objective)},
          {"converged", r.converged},
          {"iterations", r.iterations},
          {"message", r.message}};
}

inline LocalRun local_run_from_json(const json& j) {
  LocalRun r;
  r.restart = j.at("restart").get<int>();
  r.stage = j.at("stage").get<int>();
  r.start = detail::nums_from(j.at("start"));
  r.estimate = detail::nums_from(j.at("estimate"));
  r.objective = detail::num_from(j.at("objective"));
  r.converged = j.at("converged").get<bool>();
  r.iterations = j.at("iterations").get<int>();
  r.message = j.at("message").get<std::string>();
  return r;
}

inline json to_json(const EstimateResult& r) {
  json runs = json::array(), minima = json::array();
  for (const auto& x : r.runs) runs.push_back(to_json(x));
  for (const auto& x : r.minima) minima.push_back(to_json(x));
  return {{"kind", "estimate_result"},
          {"mode", name_of(r.mode)},
          {"technology", name_of(r.kind)},
          {"weighting", name_of(r.weighting)},
          {"param_names", r.param_names},
          {"estimate", detail::nums(r.estimate)},
          {"objective", detail::num(r.objective)},
          {"moments", detail::nums(r.moments)},
          {"moment_covariance", detail::matrix(r.moment_covariance)},
          {"weight", detail::matrix(r.weight)},
          {"g_coefficients", detail::nums(r.g_coefficients)},
          {"runs", runs},
          {"minima", minima},
          {"non_identified_axes", r.non_identified_axes},
          {"identified_functionals", detail::num_map(r.identified_functionals)},
          {"n_obs", r.n_obs},
          {"n_pairs", r.n_pairs},
          {"first_stage_degree", r.first_stage_degree},
          {"calE", detail::num(r.calE)},
          {"instruments", r.instruments},
          {"warnings", r.warnings},
          {"provenance", r.provenance},
          {"converged", r.converged}};
}

inline EstimateResult estimate_result_from_json(const json& j) {
  return detail::parse_document("estimate result", [&] {
    if (j.at("kind").get<std::string>() != "estimate_result") throw FormatError("not an estimate result document");
    EstimateResult r;
    r.mode = parse_mode(j.at("mode").get<std::string>());
    r.kind = parse_tech_kind(j.at("technology").get<std::string>());
    r.weighting = parse_weighting(j.at("weighting").get<std::string>());
    r.param_names = j.at("param_names").get<std::vector<std::string>>();
    r.estimate = detail::nums_from(j.at("estimate"));
    r.objective = detail::num_from(j.at("objective"));
    r.moments = detail::nums_from(j.at("moments"));
    r.moment_covariance = detail::matrix_from(j.at("moment_covariance"));
    r.weight = detail::matrix_from(j.at("weight"));
    r.g_coefficients = detail::nums_from(j.at("g_coefficients"));
    for (const auto& x : j.at("runs")) r.runs.push_back(local_run_from_json(x));
    for (const auto& x : j.at("minima")) r.minima.push_back(local_run_from_json(x));
    r.non_identified_axes = j.at("non_identified_axes").get<std::vector<std::string>>();
    r.identified_functionals = detail::num_map_from(j.at("identified_functionals"));
    r.n_obs = j.at("n_obs").get<std::size_t>();
    r.n_pairs = j.at("n_pairs").get<std::size_t>();
    r.first_stage_degree = j.at("first_stage_degree").get<int>();
    r.calE = detail::num_from(j.at("calE"));
    r.instruments = j.at("instruments").get<std::vector<std::string>>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
    r.converged = j.at("converged").get<bool>();
    return r;
  });
}

// ---------------------------------------------------------------------------
// IdentificationReport

inline json to_json(const RankResult& r) {
  return {{"fd_step", detail::num(r.fd_step)},
          {"singular_values", detail::nums(r.singular_values)},
          {"threshold", detail::num(r.threshold)},
          {"rank", r.rank},
          {"deficiency", r.deficiency},
          {"null_directions", detail::matrices(r.null_directions)},
          {"projected_deficiency", r.projected_deficiency},
          {"projected_null_directions", detail::matrices(r.projected_null_directions)},
          {"alignment", detail::num_map(r.alignment)},
          {"projected_alignment", detail::num_map(r.projected_alignment)}};
}

inline RankResult rank_result_from_json(const json& j) {
  RankResult r;
  r.fd_step = detail::num_from(j.at("fd_step"));
  r.singular_values = detail::nums_from(j.at("singular_values"));
  r.threshold = detail::num_from(j.at("threshold"));
  r.rank = j.at("rank").get<std::size_t>();
  r.deficiency = j.at("deficiency").get<std::size_t>();
  r.null_directions = detail::matrices_from(j.at("null_directions"));
  r.projected_deficiency = j.at("projected_deficiency").get<std::size_t>();
  r.projected_null_directions = detail::matrices_from(j.at("projected_null_directions"));
  r.alignment = detail::num_map_from(j.at("alignment"));
  r.projected_alignment = detail::num_map_from(j.at("projected_alignment"));
  return r;
}

inline json to_json(const IdentificationReport& r) {
  json thresholds{{"equivalence", detail::num(r.thresholds.equivalence)},
                  {"rank_relative", detail::num(r.thresholds.rank_relative)},
                  {"rank_absolute", detail::num(r.thresholds.rank_absolute)},
                  {"alignment", detail::num(r.thresholds.alignment)}};
  json equivalence = json::array();
  for (const auto& e : r.equivalence)
    equivalence.push_back({{"label", e.label},
                           {"theta_a", detail::nums(e.theta_a)},
                           {"theta_b", detail::nums(e.theta_b)},
                           {"gap", detail::num(e.gap)},
                           {"equivalent", e.equivalent}});
  json profiles = json::array();
  for (const auto& p : r.profiles)
    profiles.push_back({{"param", p.param},
                        {"grid", detail::nums(p.grid)},
                        {"objective", detail::nums(p.objective)},
                        {"flatness", detail::num(p.flatness)},
                        {"argmin", p.argmin}});
  json revenue_rank = json::array(), quantity_rank = json::array();
  for (const auto& x : r.revenue_rank) revenue_rank.push_back(to_json(x));
  for (const auto& x : r.quantity_rank) quantity_rank.push_back(to_json(x));
  json omega{{"mode", name_of(r.omega.mode)},
             {"skipped", r.omega.skipped},
             {"note", r.omega.note},
             {"n", r.omega.n},
             {"correlation", detail::num(r.omega.correlation)},
             {"threshold", detail::num(r.omega.threshold)},
             {"passed", r.omega.passed},
             {"residual_variance", detail::num(r.omega.residual_variance)}};
  json verdicts = json::object();
  for (const auto& [k, v] : r.verdicts) verdicts[k] = name_of(v);
  return {{"kind", "identification_report"},
          {"technology", name_of(r.kind)},
          {"param_names", r.param_names},
          {"theta", detail::nums(r.theta)},
          {"calE", detail::num(r.calE)},
          {"thresholds", thresholds},
          {"equivalence", equivalence},
          {"profiles", profiles},
          {"revenue_rank", revenue_rank},
          {"quantity_rank", quantity_rank},
          {"rank_stable", r.rank_stable},
          {"revenue_estimate", detail::nums(r.revenue_estimate)},
          {"revenue_objective", detail::num(r.revenue_objective)},
          {"omega", omega},
          {"verdicts", verdicts},
          {"notes", r.notes},
          {"provenance", r.provenance}};
}

inline IdentificationReport identification_report_from_json(const json& j) {
  return detail::parse_document("identification report", [&] {
    if (j.at("kind").get<std::string>() != "identification_report")
      throw FormatError("not an identification report document");
    IdentificationReport r;
    r.kind = parse_tech_kind(j.at("technology").get<std::string>());
    r.param_names = j.at("param_names").get<std::vector<std::string>>();
    r.theta = detail::nums_from(j.at("theta"));
    r.calE = detail::num_from(j.at("calE"));
    const auto& th = j.at("thresholds");
    r.thresholds.equivalence = detail::num_from(th.at("equivalence"));
    r.thresholds.rank_relative = detail::num_from(th.at("rank_relative"));
    r.thresholds.rank_absolute = detail::num_from(th.at("rank_absolute"));
    r.thresholds.alignment = detail::num_from(th.at("alignment"));
    for (const auto& e : j.at("equivalence"))
      r.equivalence.push_back({e.at("label").get<std::string>(), detail::nums_from(e.at("theta_a")),
                               detail::nums_from(e.at("theta_b")), detail::num_from(e.at("gap")),
                               e.at("equivalent").get<bool>()});
    for (const auto& p : j.at("profiles"))
      r.profiles.push_back({p.at("param").get<std::string>(), detail::nums_from(p.at("grid")),
                            detail::nums_from(p.at("objective")), detail::num_from(p.at("flatness")),
                            p.at("argmin").get<std::size_t>()});
    for (const auto& x : j.at("revenue_rank")) r.revenue_rank.push_back(rank_result_from_json(x));
    for (const auto& x : j.at("quantity_rank")) r.quantity_rank.push_back(rank_result_from_json(x));
    r.rank_stable = j.at("rank_stable").get<bool>();
    r.revenue_estimate = detail::nums_from(j.at("revenue_estimate"));
    r.revenue_objective = detail::num_from(j.at("revenue_objective"));
    const auto& om = j.at("omega");
    r.omega.mode = parse_mode(om.at("mode").get<std::string>());
    r.omega.skipped = om.at("skipped").get<bool>();
    r.omega.note = om.at("note").get<std::string>();
    r.omega.n = om.at("n").get<std::size_t>();
    r.omega.correlation = detail::num_from(om.at("correlation"));
    r.omega.threshold = detail::num_from(om.at("threshold"));
    r.omega.passed = om.at("passed").get<bool>();
    r.omega.residual_variance = detail::num_from(om.at("residual_variance"));
    for (const auto& [k, v] : j.at("verdicts").items()) r.verdicts[k] = parse_verdict(v.get<std::string>());
    r.notes = j.at("notes").get<std::vector<std::string>>();
    r.provenance = j.at("provenance").get<std::map<std::string, std::string>>();
    return r;
  });
}

// ---------------------------------------------------------------------------
// VerifyReport

inline json to_json(const VerifyReport& r) {
  json checks = json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name},
                      {"tolerance", detail::num(c.tolerance)},
                      {"violations", c.violations},
                      {"max_error", detail::num(c.max_error)},
                      {"skipped", c.skipped},
                      {"note", c.note}});
  return {{"kind", "verify_report"},
          {"rows", r.rows},
          {"checks", checks},
          {"flagged_rows", r.flagged_rows},
          {"violations", r.violations()},
          {"passed", r.ok()}};
}

inline VerifyReport verify_report_from_json(const json& j) {
  return detail::parse_document("verify report", [&] {
    if (j.at("kind").get<std::string>() != "verify_report") throw FormatError("not a verify report document");
    VerifyReport r;
    r.rows = j.at("rows").get<std::size_t>();
    for (const auto& c : j.at("checks")) {
      PanelCheck p;
      p.name = c.at("name").get<std::string>();
      p.tolerance = detail::num_from(c.at("tolerance"));
      p.violations = c.at("violations").get<std::size_t>();
      p.max_error = detail::num_from(c.at("max_error"));
      p.skipped = c.at("skipped").get<bool>();
      p.note = c.at("note").get<std::string>();
      r.checks.push_back(std::move(p));
    }
    r.flagged_rows = j.at("flagged_rows").get<std::vector<std::size_t>>();
    return r;
  });
}

// ---------------------------------------------------------------------------
// Files

inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

inline json parse_json(std::string_view text, const std::string& source = "<json>") {
  return detail::parse_document(source, [&] { return json::parse(text); });
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  auto out = detail::open_output(path);
  out << dump_json(j);
  detail::finish_output(out, path);
}

inline json read_json_file(const std::filesystem::path& path) {
  return parse_json(read_text_file(path), path.string());
}

}  // namespace revpf
