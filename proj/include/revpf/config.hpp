#pragma once

// Run configuration: INI text with one section per model block.
//
//   [simulate]     seed, N, T, burn_in
//   [technology]   kind = cd | ces; cd: beta_K, beta_L, beta_M; ces: sigma, beta_L, beta_M, v
//   [demand]       eta, scale, eta_dispersion
//   [productivity] rho, c0, sigma_xi
//   [capital]      kappa0, kappa_k, kappa_w, sigma_k
//   [price_L], [price_M], [price_K]   mean, rho, sd, fe_sd
//   [shocks]       sigma_eps
//   [estimate]     mode, first_stage_degree, g_degree, instruments, revenue_input, calE,
//                  weighting, restarts, seed, max_iterations, start
//   [diagnose]     fd_steps, equivalence, rank_relative, rank_absolute, alignment,
//                  estimate_for_omega, scan, grid
//   [input]        panel
//   [output]       dir
//
// Unknown sections or keys are rejected so that typos do not silently fall
// back to defaults.

#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "revpf/estimator.hpp"
#include "revpf/identlab.hpp"
#include "revpf/io.hpp"
#include "revpf/simulator.hpp"

namespace revpf {

struct RunConfig {
  SimConfig sim;
  bool seed_given = false;

  Mode mode = Mode::Quantity;
  int first_stage_degree = 3;
  MomentSpec moments = [] {
    MomentSpec m;
    m.instruments = extended_instruments();
    return m;
  }();
  GmmOptions gmm;

  std::vector<double> fd_steps{1e-4, 1e-5, 1e-6};
  IdentThresholds thresholds;
  bool estimate_for_omega = true;
  std::vector<std::string> scan;  // empty: every parameter
  std::string grid;               // lo:hi:n, empty: reference +/- 0.2

  std::string panel;  // optional input panel
  std::string output_dir = ".";
};

namespace detail {

inline const std::map<std::string, std::set<std::string>>& config_schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"simulate", {"seed", "N", "T", "burn_in"}},
      {"technology", {"kind", "beta_K", "beta_L", "beta_M", "sigma", "v"}},
      {"demand", {"eta", "scale", "eta_dispersion"}},
      {"productivity", {"rho", "c0", "sigma_xi"}},
      {"capital", {"kappa0", "kappa_k", "kappa_w", "sigma_k"}},
      {"price_L", {"mean", "rho", "sd", "fe_sd"}},
      {"price_M", {"mean", "rho", "sd", "fe_sd"}},
      {"price_K", {"mean", "rho", "sd", "fe_sd"}},
      {"shocks", {"sigma_eps"}},
      {"estimate",
       {"mode", "first_stage_degree", "g_degree", "instruments", "revenue_input", "calE", "weighting", "restarts", "seed",
        "max_iterations", "start"}},
      {"diagnose",
       {"fd_steps", "equivalence", "rank_relative", "rank_absolute", "alignment", "estimate_for_omega", "scan", "grid"}},
      {"input", {"panel"}},
      {"output", {"dir"}},
  };
  return s;
}

class ConfigReader {
 public:
  ConfigReader(const boost::property_tree::ptree& tree, std::string source) : tree_(tree), source_(std::move(source)) {}

  std::optional<std::string> text(const std::string& section, const std::string& key) const {
    const auto sec = tree_.get_child_optional(boost::property_tree::ptree::path_type(section, '\0'));
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(boost::property_tree::ptree::path_type(key, '\0'));
    if (!v) return std::nullopt;
    return std::string(trim(*v));
  }

  template <class T>
  void number(const std::string& section, const std::string& key, T& out) const {
    if (const auto s = text(section, key))
      if (!parse_number(*s, out)) throw error(section, key, "'" + *s + "' is not a valid number");
  }

  void flag(const std::string& section, const std::string& key, bool& out) const {
    if (const auto s = text(section, key)) {
      if (*s == "true" || *s == "yes" || *s == "1") out = true;
      else if (*s == "false" || *s == "no" || *s == "0") out = false;
      else throw error(section, key, "'" + *s + "' is not a boolean");
    }
  }

  std::vector<double> numbers(const std::string& section, const std::string& key, std::vector<double> fallback) const {
    const auto s = text(section, key);
    if (!s) return fallback;
    std::vector<double> out;
    if (s->empty()) return out;
    for (auto item : split_fields(*s)) {
      double x = 0;
      if (!parse_number(item, x)) throw error(section, key, "'" + std::string(item) + "' is not a valid number");
      out.push_back(x);
    }
    return out;
  }

  FormatError error(const std::string& section, const std::string& key, const std::string& what) const {
    return FormatError(source_ + ": [" + section + "] " + key + ": " + what);
  }

  // Re-raise a library error with the offending key attached.
  template <class Fn>
  auto with_context(const std::string& section, const std::string& key, Fn&& fn) const {
    try {
      return fn();
    } catch (const Error& e) {
      throw error(section, key, e.what());
    }
  }

 private:
  const boost::property_tree::ptree& tree_;
  std::string source_;
};

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + format_double(v[i]);
  return s;
}

inline std::string join_strings(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + v[i];
  return s;
}

}  // namespace detail

inline RunConfig parse_config(std::istream& in, const std::string& source = "<config>") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw FormatError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  const auto& schema = detail::config_schema();
  for (const auto& [section, body] : tree) {
    const auto it = schema.find(section);
    if (it == schema.end()) {
      if (body.empty()) throw FormatError(source + ": key '" + section + "' outside any section");
      throw FormatError(source + ": unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body)
      if (!it->second.count(key)) throw FormatError(source + ": [" + section + "] unknown key '" + key + "'");
  }

  const detail::ConfigReader r(tree, source);
  RunConfig c;
  auto& sim = c.sim;

  if (r.text("simulate", "seed")) {
    r.number("simulate", "seed", sim.seed);
    c.seed_given = true;
  }
  r.number("simulate", "N", sim.N);
  r.number("simulate", "T", sim.T);
  r.number("simulate", "burn_in", sim.burn_in);

  const TechKind kind = r.with_context("technology", "kind", [&] {
    return parse_tech_kind(r.text("technology", "kind").value_or("cd"));
  });
  if (kind == TechKind::CobbDouglas) {
    for (const char* k : {"sigma", "v"})
      if (r.text("technology", k)) throw r.error("technology", k, "not a Cobb-Douglas parameter");
    CDParams p{0.25, 0.3, 0.4};
    r.number("technology", "beta_K", p.beta_K);
    r.number("technology", "beta_L", p.beta_L);
    r.number("technology", "beta_M", p.beta_M);
    sim.tech = r.with_context("technology", "kind", [&] { return Technology::cobb_douglas(p); });
  } else {
    if (r.text("technology", "beta_K"))
      throw r.error("technology", "beta_K", "not a CES parameter (the capital weight is 1 - beta_L - beta_M)");
    CESParams p{0.3, 0.4, 0.5, 0.9};
    r.number("technology", "beta_L", p.beta_L);
    r.number("technology", "beta_M", p.beta_M);
    r.number("technology", "sigma", p.sigma);
    r.number("technology", "v", p.v);
    sim.tech = r.with_context("technology", "kind", [&] { return Technology::ces(p); });
  }

  r.number("demand", "eta", sim.demand.eta);
  r.number("demand", "scale", sim.demand.scale);
  r.number("demand", "eta_dispersion", sim.demand.eta_dispersion);
  r.number("productivity", "rho", sim.prod.rho);
  r.number("productivity", "c0", sim.prod.c0);
  r.number("productivity", "sigma_xi", sim.prod.sigma_xi);
  r.number("capital", "kappa0", sim.capital.kappa0);
  r.number("capital", "kappa_k", sim.capital.kappa_k);
  r.number("capital", "kappa_w", sim.capital.kappa_w);
  r.number("capital", "sigma_k", sim.capital.sigma_k);
  for (auto [section, series] : {std::pair{"price_L", &sim.prices.L}, std::pair{"price_M", &sim.prices.M},
                                 std::pair{"price_K", &sim.prices.K}}) {
    r.number(section, "mean", series->mean);
    r.number(section, "rho", series->rho);
    r.number(section, "sd", series->sd);
    r.number(section, "fe_sd", series->fe_sd);
  }
  r.number("shocks", "sigma_eps", sim.shocks.sigma_eps);
  r.with_context("simulate", "*", [&] {
    check_config(sim);
    return 0;
  });

  if (const auto s = r.text("estimate", "mode")) c.mode = r.with_context("estimate", "mode", [&] { return parse_mode(*s); });
  r.number("estimate", "first_stage_degree", c.first_stage_degree);
  r.number("estimate", "g_degree", c.moments.g_degree);
  if (c.first_stage_degree < 1) throw r.error("estimate", "first_stage_degree", "must be >= 1");
  if (c.moments.g_degree < 1) throw r.error("estimate", "g_degree", "must be >= 1");
  if (const auto s = r.text("estimate", "instruments"))
    c.moments.instruments = r.with_context("estimate", "instruments", [&] { return parse_instruments(*s); });
  if (const auto s = r.text("estimate", "revenue_input"))
    c.moments.revenue_input = r.with_context("estimate", "revenue_input", [&] { return parse_flexible_input(*s); });
  if (const auto s = r.text("estimate", "calE"); s && *s != "auto") {
    double e = 0;
    r.number("estimate", "calE", e);
    if (!(e > 0.0) || !std::isfinite(e)) throw r.error("estimate", "calE", "must be > 0 or 'auto'");
    c.moments.calE = e;
  }
  if (const auto s = r.text("estimate", "weighting"))
    c.gmm.weighting = r.with_context("estimate", "weighting", [&] { return parse_weighting(*s); });
  r.number("estimate", "restarts", c.gmm.restarts);
  r.number("estimate", "seed", c.gmm.seed);
  r.number("estimate", "max_iterations", c.gmm.max_iterations);
  if (c.gmm.restarts < 1) throw r.error("estimate", "restarts", "must be >= 1");
  if (c.gmm.max_iterations < 1) throw r.error("estimate", "max_iterations", "must be >= 1");
  c.gmm.start = r.numbers("estimate", "start", {});
  if (!c.gmm.start.empty() && c.gmm.start.size() != Technology::param_names(kind).size())
    throw r.error("estimate", "start", "needs one value per parameter");

  c.fd_steps = r.numbers("diagnose", "fd_steps", c.fd_steps);
  if (c.fd_steps.empty()) throw r.error("diagnose", "fd_steps", "needs at least one step");
  for (double h : c.fd_steps)
    if (!(h > 0.0)) throw r.error("diagnose", "fd_steps", "steps must be > 0");
  r.number("diagnose", "equivalence", c.thresholds.equivalence);
  r.number("diagnose", "rank_relative", c.thresholds.rank_relative);
  r.number("diagnose", "rank_absolute", c.thresholds.rank_absolute);
  r.number("diagnose", "alignment", c.thresholds.alignment);
  r.flag("diagnose", "estimate_for_omega", c.estimate_for_omega);
  if (const auto s = r.text("diagnose", "scan"); s && !s->empty()) {
    const auto& names = Technology::param_names(kind);
    for (auto item : detail::split_fields(*s)) {
      if (std::find(names.begin(), names.end(), item) == names.end())
        throw r.error("diagnose", "scan", "unknown parameter '" + std::string(item) + "'");
      c.scan.emplace_back(item);
    }
  }
  if (const auto s = r.text("diagnose", "grid"); s && !s->empty()) {
    r.with_context("diagnose", "grid", [&] { return parse_grid(*s); });
    c.grid = *s;
  }

  if (const auto s = r.text("input", "panel"); s && !s->empty()) {
    if (!std::filesystem::exists(*s)) throw IoError(source + ": [input] panel: file not found: " + *s);
    c.panel = *s;
  }
  if (const auto s = r.text("output", "dir"); s && !s->empty()) c.output_dir = *s;
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  return parse_config(in, path.string());
}

// Canonical text of every effective setting. Hashing this (not the raw file)
// makes the provenance insensitive to comments and key order.
inline std::string to_ini(const RunConfig& c) {
  using detail::format_double;
  std::ostringstream o;
  const auto& s = c.sim;
  o << "[simulate]\n";
  if (c.seed_given) o << "seed = " << s.seed << '\n';
  o << "N = " << s.N << "\nT = " << s.T << "\nburn_in = " << s.burn_in << "\n\n";
  o << "[technology]\nkind = " << name_of(s.tech.kind()) << '\n';
  const auto names = Technology::param_names(s.tech.kind());
  const auto theta = s.tech.to_vector();
  for (std::size_t j = 0; j < names.size(); ++j) o << names[j] << " = " << format_double(theta[j]) << '\n';
  o << "\n[demand]\neta = " << format_double(s.demand.eta) << "\nscale = " << format_double(s.demand.scale)
    << "\neta_dispersion = " << format_double(s.demand.eta_dispersion) << "\n\n";
  o << "[productivity]\nrho = " << format_double(s.prod.rho) << "\nc0 = " << format_double(s.prod.c0)
    << "\nsigma_xi = " << format_double(s.prod.sigma_xi) << "\n\n";
  o << "[capital]\nkappa0 = " << format_double(s.capital.kappa0) << "\nkappa_k = " << format_double(s.capital.kappa_k)
    << "\nkappa_w = " << format_double(s.capital.kappa_w) << "\nsigma_k = " << format_double(s.capital.sigma_k)
    << "\n\n";
  for (auto [name, p] : {std::pair{"price_L", &s.prices.L}, std::pair{"price_M", &s.prices.M},
                         std::pair{"price_K", &s.prices.K}})
    o << '[' << name << "]\nmean = " << format_double(p->mean) << "\nrho = " << format_double(p->rho)
      << "\nsd = " << format_double(p->sd) << "\nfe_sd = " << format_double(p->fe_sd) << "\n\n";
  o << "[shocks]\nsigma_eps = " << format_double(s.shocks.sigma_eps) << "\n\n";
  o << "[estimate]\nmode = " << name_of(c.mode) << "\nfirst_stage_degree = " << c.first_stage_degree
    << "\ng_degree = " << c.moments.g_degree << "\ninstruments = " << detail::join_strings(c.moments.instruments)
    << "\nrevenue_input = " << name_of(c.moments.revenue_input)
    << "\ncalE = " << (c.moments.calE ? format_double(*c.moments.calE) : std::string("auto"))
    << "\nweighting = " << name_of(c.gmm.weighting) << "\nrestarts = " << c.gmm.restarts
    << "\nseed = " << c.gmm.seed << "\nmax_iterations = " << c.gmm.max_iterations;
  if (!c.gmm.start.empty()) o << "\nstart = " << detail::join_doubles(c.gmm.start);
  o << "\n\n[diagnose]\nfd_steps = " << detail::join_doubles(c.fd_steps)
    << "\nequivalence = " << format_double(c.thresholds.equivalence)
    << "\nrank_relative = " << format_double(c.thresholds.rank_relative)
    << "\nrank_absolute = " << format_double(c.thresholds.rank_absolute)
    << "\nalignment = " << format_double(c.thresholds.alignment)
    << "\nestimate_for_omega = " << (c.estimate_for_omega ? "true" : "false");
  if (!c.scan.empty()) o << "\nscan = " << detail::join_strings(c.scan);
  if (!c.grid.empty()) o << "\ngrid = " << c.grid;
  o << '\n';
  if (!c.panel.empty()) o << "\n[input]\npanel = " << c.panel << '\n';
  o << "\n[output]\ndir = " << c.output_dir << '\n';
  return o.str();
}

// Hash of the settings that determine results; file locations are excluded so
// that reruns into another directory carry the same provenance.
inline std::string config_hash(RunConfig c) {
  c.panel.clear();
  c.output_dir = ".";
  return sha256_hex(to_ini(c));
}

inline EstimateSpec estimate_spec(const RunConfig& c) {
  EstimateSpec spec;
  spec.mode = c.mode;
  spec.kind = c.sim.tech.kind();
  spec.first_stage_degree = c.first_stage_degree;
  spec.moments = c.moments;
  spec.gmm = c.gmm;
  return spec;
}

inline DiagnoseSpec diagnose_spec(const RunConfig& c) {
  DiagnoseSpec spec;
  spec.reference = c.sim.tech;
  spec.first_stage_degree = c.first_stage_degree;
  spec.moments = c.moments;
  spec.fd_steps = c.fd_steps;
  spec.thresholds = c.thresholds;
  spec.estimate_for_omega = c.estimate_for_omega;
  spec.gmm = c.gmm;
  spec.threads = c.gmm.threads;
  if (!c.grid.empty()) {
    const auto grid = parse_grid(c.grid);
    const auto names = c.scan.empty() ? Technology::param_names(spec.reference.kind()) : c.scan;
    for (const auto& p : names) spec.scans.push_back({p, grid});
  } else {
    const auto names = Technology::param_names(spec.reference.kind());
    const auto box = c.moments.box ? *c.moments.box : default_box(spec.reference.kind());
    const auto theta = spec.reference.to_vector();
    for (const auto& p : c.scan) {
      const auto j = static_cast<std::size_t>(std::find(names.begin(), names.end(), p) - names.begin());
      spec.scans.push_back({p, detail::default_scan_grid(box, j, theta[j])});
    }
  }
  return spec;
}

}  // namespace revpf
