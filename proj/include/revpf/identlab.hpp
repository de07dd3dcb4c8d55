#pragma once

// Identification diagnostics: observational-equivalence gaps between
// technologies, objective profiles, finite-difference moment-Jacobian rank and
// the productivity-recovery check.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "revpf/detail/numeric.hpp"
#include "revpf/errors.hpp"
#include "revpf/estimator.hpp"
#include "revpf/model.hpp"
#include "revpf/simulator.hpp"

namespace revpf {

enum class Verdict { Identified, NotIdentified, IdentifiedRatioOnly };

inline const char* name_of(Verdict v) {
  switch (v) {
    case Verdict::Identified: return "identified";
    case Verdict::NotIdentified: return "not identified";
    case Verdict::IdentifiedRatioOnly: return "identified-ratio-only";
  }
  return "?";
}

inline Verdict parse_verdict(std::string_view s) {
  if (s == "identified") return Verdict::Identified;
  if (s == "not identified") return Verdict::NotIdentified;
  if (s == "identified-ratio-only") return Verdict::IdentifiedRatioOnly;
  throw FormatError("unknown verdict '" + std::string(s) + "'");
}

struct IdentThresholds {
  double equivalence = 1e-10;    // max |log revenue gap| certifying equivalence
  double rank_relative = 1e-8;   // singular values below rel * s_max are zero
  double rank_absolute = 1e-9;   // ... or below this floor (weighted moment units)
  double alignment = 0.999;      // cosine for "null space contains axis"

  bool operator==(const IdentThresholds&) const = default;
};

// ---------------------------------------------------------------------------
// Observational equivalence

// Largest |log R*_a - log R*_b| over the panel, using the parametric revenue
// functions on the observed (L, M, pL, pM, s*).
inline double observational_equivalence(const Technology& a, const Technology& b, const Panel& panel,
                                        double calE = 1.0, FlexibleInput which = FlexibleInput::M) {
  if (a.kind() != b.kind())
    throw ArgumentError(std::string("technology kinds differ (") + name_of(a.kind()) + " vs " + name_of(b.kind()) + ")");
  double gap = 0.0;
  for (const auto& r : panel.rows) {
    const double l = std::log(r.L), m = std::log(r.M), pl = std::log(r.pL), pm = std::log(r.pM);
    const double s = std::log(r.share(which));
    const double ra = log_revenue(a, l, m, pl, pm, s, calE, which);
    const double rb = log_revenue(b, l, m, pl, pm, s, calE, which);
    gap = std::max(gap, std::abs(ra - rb));
  }
  return gap;
}

struct EquivalenceCheck {
  std::string label;
  std::vector<double> theta_a, theta_b;
  double gap = 0;
  bool equivalent = false;

  bool operator==(const EquivalenceCheck&) const = default;
};

// ---------------------------------------------------------------------------
// Profiles

struct ProfileCurve {
  std::string param;
  std::vector<double> grid;
  std::vector<double> objective;
  double flatness = 0;
  std::size_t argmin = 0;

  bool operator==(const ProfileCurve&) const = default;
};

// (max - min) / max(1, min)
inline double flatness_statistic(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return (*hi - *lo) / std::max(1.0, *lo);
}

// "lo:hi:n" -> n evenly spaced points.
inline std::vector<double> parse_grid(std::string_view text) {
  const auto a = text.find(':');
  const auto b = a == std::string_view::npos ? a : text.find(':', a + 1);
  if (b == std::string_view::npos) throw ArgumentError("grid must look like lo:hi:n, got '" + std::string(text) + "'");
  double lo = 0, hi = 0;
  long n = 0;
  try {
    std::size_t used = 0;
    const std::string slo(text.substr(0, a)), shi(text.substr(a + 1, b - a - 1)), sn(text.substr(b + 1));
    lo = std::stod(slo, &used);
    if (used != slo.size()) throw std::invalid_argument("lo");
    hi = std::stod(shi, &used);
    if (used != shi.size()) throw std::invalid_argument("hi");
    n = std::stol(sn, &used);
    if (used != sn.size()) throw std::invalid_argument("n");
  } catch (const std::logic_error&) {
    throw ArgumentError("grid must look like lo:hi:n, got '" + std::string(text) + "'");
  }
  if (n < 1) throw ArgumentError("grid needs at least one point");
  if (n > 1 && !(hi > lo)) throw ArgumentError("grid upper end must exceed the lower end");
  std::vector<double> g(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1.0);
  return g;
}

// Objective m' W m along `grid` for one coordinate, others held at `theta`.
inline ProfileCurve profile_scan(const MomentSystem& ms, std::string_view param, const std::vector<double>& grid,
                                 const std::vector<double>& theta, const Eigen::MatrixXd& W, unsigned threads = 1) {
  const std::size_t j = ms.param_index(param);
  if (theta.size() != ms.n_params()) throw ArgumentError("parameter vector has the wrong length");
  if (grid.empty()) throw ArgumentError("profile grid is empty");
  for (double x : grid)
    if (!(x >= ms.box.lower[j] && x <= ms.box.upper[j]))
      throw ArgumentError("profile grid point " + std::to_string(x) + " lies outside the bounds of " + std::string(param));
  ProfileCurve pc;
  pc.param = std::string(param);
  pc.grid = grid;
  pc.objective.resize(grid.size());
  detail::parallel_for(grid.size(), threads, [&](std::size_t i) {
    auto t = theta;
    t[j] = grid[i];
    pc.objective[i] = ms.objective(t, W);
  });
  pc.flatness = flatness_statistic(pc.objective);
  pc.argmin = static_cast<std::size_t>(std::min_element(pc.objective.begin(), pc.objective.end()) - pc.objective.begin());
  return pc;
}

inline ProfileCurve profile_scan(const MomentSystem& ms, std::string_view param, const std::vector<double>& grid,
                                 const std::vector<double>& theta) {
  return profile_scan(ms, param, grid, theta, instrument_weight(ms));
}

// ---------------------------------------------------------------------------
// Local (rank) analysis

struct RankResult {
  double fd_step = 0;
  std::vector<double> singular_values;  // descending
  double threshold = 0;
  std::size_t rank = 0;
  std::size_t deficiency = 0;
  std::vector<std::vector<double>> null_directions;  // parameter coordinates
  // The same after removing the joint (beta_L, beta_M) scale direction.
  std::size_t projected_deficiency = 0;
  std::vector<std::vector<double>> projected_null_directions;
  std::map<std::string, double> alignment;            // axis -> cosine with raw null space
  std::map<std::string, double> projected_alignment;  // axis -> cosine with projected null space

  bool operator==(const RankResult&) const = default;
};

namespace detail {

// Weighted moment Jacobian U dm/dtheta by the five-point central stencil.
// Truncation error is O(h^4): with the three-point rule the h^2 term alone
// separates exact invariance directions (e.g. the beta scale, where only
// Euler's identity cancels first-order terms) from zero at h = 1e-4.
inline Eigen::MatrixXd moment_jacobian(const MomentSystem& ms, const std::vector<double>& theta, double step,
                                       const Eigen::MatrixXd& U, unsigned threads) {
  const std::size_t p = ms.n_params();
  Eigen::MatrixXd J(static_cast<Eigen::Index>(ms.n_moments()), static_cast<Eigen::Index>(p));
  std::vector<Eigen::VectorXd> cols(p);
  parallel_for(p, threads, [&](std::size_t j) {
    auto at = [&](double k) {
      auto t = theta;
      t[j] += k * step;
      return ms.moments(t);
    };
    cols[j] = U * (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / (12.0 * step);
  });
  for (std::size_t j = 0; j < p; ++j) J.col(static_cast<Eigen::Index>(j)) = cols[j];
  if (!J.allFinite()) throw ArgumentError("moment Jacobian is undefined at this parameter vector");
  return J;
}

// Unit vector along the joint (beta_L, beta_M) scale at theta.
inline Eigen::VectorXd beta_scale_direction(const MomentSystem& ms, const std::vector<double>& theta) {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ms.n_params()));
  const auto il = static_cast<Eigen::Index>(ms.param_index("beta_L"));
  const auto im = static_cast<Eigen::Index>(ms.param_index("beta_M"));
  b(il) = theta[static_cast<std::size_t>(il)];
  b(im) = theta[static_cast<std::size_t>(im)];
  return b / b.norm();
}

inline std::vector<std::vector<double>> columns(const Eigen::MatrixXd& N) {
  std::vector<std::vector<double>> out;
  for (Eigen::Index c = 0; c < N.cols(); ++c) out.emplace_back(N.col(c).data(), N.col(c).data() + N.rows());
  return out;
}

// |projection of each axis onto span(N)| for orthonormal N.
inline std::map<std::string, double> axis_alignment(const MomentSystem& ms, const Eigen::MatrixXd& N) {
  std::map<std::string, double> out;
  for (std::size_t j = 0; j < ms.n_params(); ++j)
    out[ms.param_names[j]] = N.cols() == 0 ? 0.0 : N.row(static_cast<Eigen::Index>(j)).norm();
  return out;
}

}  // namespace detail

inline RankResult jacobian_rank(const MomentSystem& ms, const std::vector<double>& theta, double fd_step,
                                const IdentThresholds& th = {}, unsigned threads = 1) {
  if (theta.size() != ms.n_params()) throw ArgumentError("parameter vector has the wrong length");
  if (!(fd_step > 0.0) || !std::isfinite(fd_step)) throw ArgumentError("finite-difference step must be positive");
  for (std::size_t j = 0; j < theta.size(); ++j) {
    if (theta[j] + fd_step == theta[j]) throw ArgumentError("finite-difference step underflows at " + ms.param_names[j]);
    if (!(theta[j] - 2 * fd_step >= ms.box.lower[j] && theta[j] + 2 * fd_step <= ms.box.upper[j]))
      throw ArgumentError("theta is not interior: " + ms.param_names[j] + " +/- 2 steps leaves the bounds");
  }
  const Eigen::MatrixXd U = detail::weight_factor(instrument_weight(ms));
  const Eigen::MatrixXd J = detail::moment_jacobian(ms, theta, fd_step, U, threads);

  RankResult rr;
  rr.fd_step = fd_step;
  auto analyse = [&](const Eigen::MatrixXd& A, std::vector<double>* sv_out, std::size_t& deficiency,
                     double& threshold) -> Eigen::MatrixXd {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
    const Eigen::VectorXd sv = svd.singularValues();
    const double top = sv.size() ? sv(0) : 0.0;
    threshold = std::max(th.rank_relative * top, th.rank_absolute);
    Eigen::Index rank = 0;
    while (rank < sv.size() && sv(rank) > threshold) ++rank;
    if (sv_out) sv_out->assign(sv.data(), sv.data() + sv.size());
    deficiency = static_cast<std::size_t>(A.cols() - rank);
    return svd.matrixV().rightCols(A.cols() - rank);
  };
  const Eigen::MatrixXd N = analyse(J, &rr.singular_values, rr.deficiency, rr.threshold);
  rr.rank = ms.n_params() - rr.deficiency;
  rr.null_directions = detail::columns(N);
  rr.alignment = detail::axis_alignment(ms, N);

  // Restrict to the orthogonal complement of the beta-scale direction.
  const Eigen::VectorXd b = detail::beta_scale_direction(ms, theta);
  const auto p = static_cast<Eigen::Index>(ms.n_params());
  Eigen::MatrixXd P = Eigen::MatrixXd::Identity(p, p) - b * b.transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> basis(P, Eigen::ComputeFullU);
  const Eigen::MatrixXd Q = basis.matrixU().leftCols(p - 1);  // orthonormal basis of b-perp
  double pth = 0;
  const Eigen::MatrixXd Np = Q * analyse(J * Q, nullptr, rr.projected_deficiency, pth);
  rr.projected_null_directions = detail::columns(Np);
  rr.projected_alignment = detail::axis_alignment(ms, Np);
  return rr;
}

// ---------------------------------------------------------------------------
// Productivity recovery

struct OmegaRecovery {
  Mode mode = Mode::Revenue;
  bool skipped = false;
  std::string note;
  std::size_t n = 0;
  double correlation = 0;
  double threshold = 0;  // revenue: |corr| bound; quantity: minimum corr
  bool passed = false;   // revenue: no omega signal; quantity: omega recovered
  double residual_variance = 0;

  bool operator==(const OmegaRecovery&) const = default;
};

namespace detail {

inline double correlation(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

inline double variance(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  double m = 0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

}  // namespace detail

// Revenue: residual log R - log R*_theta, which must carry no omega signal
// (|corr| <= 3/sqrt(n)). Quantity: omega-hat = fitted q* - log F_theta (or
// log Q - log F_theta without a first stage), which must track omega
// (corr >= 0.95).
inline OmegaRecovery omega_recovery_attempt(const Panel& panel, const Technology& tech, Mode mode,
                                            const FirstStage* fs = nullptr, double calE = 1.0,
                                            FlexibleInput which = FlexibleInput::M) {
  OmegaRecovery out;
  out.mode = mode;
  out.n = panel.size();
  out.threshold = mode == Mode::Revenue ? (panel.empty() ? 0.0 : 3.0 / std::sqrt(static_cast<double>(panel.size())))
                                        : 0.95;
  if (!panel.has_omega) {
    out.skipped = true;
    out.note = "panel has no true omega column; recovery check skipped";
    return out;
  }
  if (mode == Mode::Quantity && !panel.has_Q && !fs)
    throw ArgumentError("quantities unobserved: quantity-mode omega recovery needs the Q column");
  if (fs && fs->fitted.size() != panel.size()) throw ArgumentError("first stage is not aligned with the panel");
  if (panel.empty()) {
    out.skipped = true;
    out.note = "empty panel";
    return out;
  }
  std::vector<double> resid(panel.size()), omega(panel.size());
  for (std::size_t i = 0; i < panel.size(); ++i) {
    const auto& r = panel.rows[i];
    const double l = std::log(r.L), m = std::log(r.M);
    omega[i] = r.omega;
    if (mode == Mode::Revenue) {
      resid[i] = std::log(r.R) - log_revenue(tech, l, m, std::log(r.pL), std::log(r.pM), std::log(r.share(which)),
                                             calE, which);
    } else {
      const double q = fs ? fs->fitted[i] : std::log(r.Q);
      resid[i] = q - detail::output_constraint(tech, std::log(r.K), 0.0).value(l, m);
    }
  }
  out.residual_variance = detail::variance(resid);
  const double c = detail::correlation(resid, omega);
  if (!std::isfinite(c)) {
    out.correlation = 0.0;
    out.note = "residual or true omega has no variation; correlation set to 0";
  } else {
    out.correlation = c;
  }
  out.passed = mode == Mode::Revenue ? std::abs(out.correlation) <= out.threshold : out.correlation >= out.threshold;
  return out;
}

// ---------------------------------------------------------------------------
// Verdicts from equivalence gaps

namespace detail {

inline std::vector<double> with(std::vector<double> t, std::size_t j, double value) {
  t[j] = value;
  return t;
}

}  // namespace detail

// Perturb each coordinate (and the joint beta scale and the beta ratio) away
// from `ref` and record the revenue-prediction gap. Coordinates whose
// perturbation leaves predictions unchanged are not identified; beta_L and
// beta_M are identified-ratio-only when only the ratio moves predictions.
inline std::vector<EquivalenceCheck> equivalence_checks(const Technology& ref, const Panel& panel, double calE,
                                                        FlexibleInput which, const IdentThresholds& th = {}) {
  const auto kind = ref.kind();
  const auto& names = Technology::param_names(kind);
  const auto theta = ref.to_vector();
  auto index = [&](std::string_view n) {
    return static_cast<std::size_t>(std::find(names.begin(), names.end(), n) - names.begin());
  };
  std::vector<EquivalenceCheck> out;
  auto add = [&](std::string label, std::vector<double> alt) {
    EquivalenceCheck c;
    c.label = std::move(label);
    c.theta_a = theta;
    c.theta_b = alt;
    c.gap = observational_equivalence(ref, Technology::from_vector(kind, alt), panel, calE, which);
    c.equivalent = c.gap <= th.equivalence;
    out.push_back(std::move(c));
  };
  const std::size_t il = index("beta_L"), im = index("beta_M");
  if (kind == TechKind::CobbDouglas) {
    const std::size_t ik = index("beta_K");
    add("beta_K", detail::with(theta, ik, theta[ik] + 0.25));
  } else {
    const std::size_t is = index("sigma"), iv = index("v");
    const double s = theta[is];
    double alt = s + 0.1;
    if (std::abs(alt) < 0.05 || std::abs(alt - 1.0) < 0.05) alt = s - 0.1;
    add("sigma", detail::with(theta, is, alt));
    add("v", detail::with(theta, iv, theta[iv] * 1.25));
  }
  auto scaled = theta;
  scaled[il] *= 0.8;
  scaled[im] *= 0.8;
  add("beta_scale", scaled);
  add("beta_ratio", detail::with(theta, il, theta[il] * 0.8));
  return out;
}

inline std::map<std::string, Verdict> verdicts_from_equivalence(TechKind kind,
                                                                const std::vector<EquivalenceCheck>& checks) {
  std::map<std::string, bool> eq;
  for (const auto& c : checks) eq[c.label] = c.equivalent;
  auto at = [&](const std::string& k) {
    const auto it = eq.find(k);
    if (it == eq.end()) throw ArgumentError("missing equivalence check '" + k + "'");
    return it->second;
  };
  std::map<std::string, Verdict> v;
  const Verdict flat = Verdict::NotIdentified;
  if (kind == TechKind::CobbDouglas) {
    v["beta_K"] = at("beta_K") ? flat : Verdict::Identified;
  } else {
    v["sigma"] = at("sigma") ? flat : Verdict::Identified;
    v["v"] = at("v") ? flat : Verdict::Identified;
  }
  Verdict beta;
  if (at("beta_ratio")) beta = flat;
  else if (at("beta_scale")) beta = Verdict::IdentifiedRatioOnly;
  else beta = Verdict::Identified;
  v["beta_L"] = beta;
  v["beta_M"] = beta;
  v[kind == TechKind::CobbDouglas ? "beta_L/(beta_L+beta_M)" : "beta_L/beta_M"] = beta;
  return v;
}

// ---------------------------------------------------------------------------
// Report

struct IdentificationReport {
  TechKind kind = TechKind::CES;
  std::vector<std::string> param_names;
  std::vector<double> theta;  // reference point of the local analysis
  double calE = 1;
  IdentThresholds thresholds;
  std::vector<EquivalenceCheck> equivalence;
  std::vector<ProfileCurve> profiles;
  std::vector<RankResult> revenue_rank;   // one per fd step
  std::vector<RankResult> quantity_rank;  // empty when Q is unobserved
  bool rank_stable = true;                // raw revenue rank equal across steps
  std::vector<double> revenue_estimate;   // empty unless requested
  double revenue_objective = 0;
  OmegaRecovery omega;
  std::map<std::string, Verdict> verdicts;
  std::vector<std::string> notes;
  std::map<std::string, std::string> provenance;

  bool operator==(const IdentificationReport&) const = default;
};

struct ScanRequest {
  std::string param;
  std::vector<double> grid;
};

struct DiagnoseSpec {
  Technology reference = Technology::ces({0.3, 0.4, 0.5, 0.9});
  int first_stage_degree = 3;
  MomentSpec moments;
  std::vector<double> fd_steps{1e-4, 1e-5, 1e-6};
  IdentThresholds thresholds;
  std::vector<ScanRequest> scans;  // empty: every parameter, reference +/- 0.2, 25 points
  bool estimate_for_omega = true;  // omega check at the revenue estimate (else at the reference)
  GmmOptions gmm;
  unsigned threads = 1;
};

namespace detail {

inline std::vector<double> default_scan_grid(const ParamBox& box, std::size_t j, double centre, int points = 25) {
  const double lo = std::max(box.lower[j], centre - 0.2);
  const double hi = std::min(box.upper[j], centre + 0.2);
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1.0);
  return g;
}

}  // namespace detail

inline IdentificationReport diagnose(const Panel& panel, const DiagnoseSpec& spec) {
  IdentificationReport rep;
  rep.kind = spec.reference.kind();
  rep.param_names = Technology::param_names(rep.kind);
  rep.theta = spec.reference.to_vector();
  rep.thresholds = spec.thresholds;

  const auto fs = first_stage_project(panel, {Mode::Revenue, spec.first_stage_degree});
  rep.notes = fs.warnings;
  const MomentSystem ms = build_revenue_moments(rep.kind, fs, panel, spec.moments);
  rep.calE = ms.calE;
  const FlexibleInput which = spec.moments.revenue_input;

  rep.equivalence = equivalence_checks(spec.reference, panel, ms.calE, which, spec.thresholds);
  rep.verdicts = verdicts_from_equivalence(rep.kind, rep.equivalence);

  const Eigen::MatrixXd W = instrument_weight(ms);
  if (spec.scans.empty()) {
    for (std::size_t j = 0; j < ms.n_params(); ++j)
      rep.profiles.push_back(profile_scan(ms, ms.param_names[j], detail::default_scan_grid(ms.box, j, rep.theta[j]),
                                          rep.theta, W, spec.threads));
  } else {
    for (const auto& s : spec.scans) rep.profiles.push_back(profile_scan(ms, s.param, s.grid, rep.theta, W, spec.threads));
  }

  for (double h : spec.fd_steps) rep.revenue_rank.push_back(jacobian_rank(ms, rep.theta, h, spec.thresholds, spec.threads));
  for (const auto& r : rep.revenue_rank)
    if (r.rank != rep.revenue_rank.front().rank) rep.rank_stable = false;

  if (panel.has_Q) {
    const auto fq = first_stage_project(panel, {Mode::Quantity, spec.first_stage_degree});
    const MomentSystem mq = build_quantity_moments(rep.kind, fq, panel, spec.moments);
    for (double h : spec.fd_steps)
      rep.quantity_rank.push_back(jacobian_rank(mq, rep.theta, h, spec.thresholds, spec.threads));
  } else {
    rep.notes.push_back("quantities unobserved: quantity-mode rank analysis skipped");
  }

  Technology at = spec.reference;
  if (spec.estimate_for_omega) {
    const auto est = gmm_minimize(ms, spec.gmm);
    rep.revenue_estimate = est.estimate;
    rep.revenue_objective = est.objective;
    at = Technology::from_vector(rep.kind, est.estimate);
  }
  rep.omega = omega_recovery_attempt(panel, at, Mode::Revenue, nullptr, ms.calE, which);
  if (rep.omega.skipped) rep.notes.push_back(rep.omega.note);
  else rep.verdicts["omega"] = rep.omega.passed ? Verdict::NotIdentified : Verdict::Identified;
  return rep;
}

}  // namespace revpf
