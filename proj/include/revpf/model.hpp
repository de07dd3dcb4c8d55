#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "revpf/errors.hpp"

namespace revpf {

enum class Input { K, L, M };

// The two freely variable inputs. Capital is the dynamic input.
enum class FlexibleInput { L, M };

inline Input to_input(FlexibleInput v) { return v == FlexibleInput::L ? Input::L : Input::M; }

inline const char* name_of(Input in) {
  switch (in) {
    case Input::K: return "K";
    case Input::L: return "L";
    case Input::M: return "M";
  }
  return "?";
}

inline const char* name_of(FlexibleInput v) { return v == FlexibleInput::L ? "L" : "M"; }

inline Input parse_input(std::string_view s) {
  if (s == "K" || s == "k") return Input::K;
  if (s == "L" || s == "l") return Input::L;
  if (s == "M" || s == "m") return Input::M;
  throw ArgumentError("unknown input name '" + std::string(s) + "' (expected K, L or M)");
}

inline FlexibleInput parse_flexible_input(std::string_view s) {
  Input in = parse_input(s);
  if (in == Input::K) throw ArgumentError("capital is not a flexible input");
  return in == Input::L ? FlexibleInput::L : FlexibleInput::M;
}

namespace detail {

inline void require_positive(double x, const char* what) {
  if (!(x > 0.0) || !std::isfinite(x))
    throw DomainError(std::string(what) + " must be finite and strictly positive");
}

inline void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw DomainError(std::string(what) + " must be finite");
}

// log(exp(a) + exp(b)) without overflow.
inline double log_add_exp(double a, double b) {
  const double hi = std::max(a, b);
  if (hi == -std::numeric_limits<double>::infinity()) return hi;
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameters

struct CDParams {
  double beta_K = 0.0;
  double beta_L = 0.0;
  double beta_M = 0.0;

  double variable_returns() const { return beta_L + beta_M; }
  bool operator==(const CDParams&) const = default;
};

struct CESParams {
  double beta_L = 0.0;
  double beta_M = 0.0;
  double sigma = 0.0;  // substitution exponent, elasticity of substitution is 1/(1-sigma)
  double v = 1.0;      // returns to scale

  // Capital share parameter 1 - beta_L - beta_M.
  double beta_K() const { return 1.0 - beta_L - beta_M; }
  bool operator==(const CESParams&) const = default;
};

inline void check_params(const CDParams& p) {
  if (!std::isfinite(p.beta_K) || !std::isfinite(p.beta_L) || !std::isfinite(p.beta_M))
    throw DomainError("Cobb-Douglas elasticities must be finite");
  if (!(p.beta_L > 0.0) || !(p.beta_M > 0.0))
    throw DomainError("Cobb-Douglas requires beta_L > 0 and beta_M > 0");
  if (p.beta_K < 0.0) throw DomainError("Cobb-Douglas requires beta_K >= 0");
}

inline void check_sigma(double sigma) {
  if (!std::isfinite(sigma)) throw DomainError("CES sigma must be finite");
  if (sigma == 0.0 || sigma == 1.0)
    throw UnsupportedParameterError("CES sigma must differ from 0 and 1 (use the Cobb-Douglas form for sigma = 0)");
  if (sigma > 1.0) throw DomainError("CES requires sigma < 1");
}

inline void check_params(const CESParams& p) {
  check_sigma(p.sigma);
  if (!(p.beta_L > 0.0) || !(p.beta_M > 0.0))
    throw DomainError("CES requires beta_L > 0 and beta_M > 0");
  if (!(p.beta_L + p.beta_M < 1.0))
    throw DomainError("CES requires beta_L + beta_M < 1 (positive capital share)");
  if (!(p.v > 0.0) || !std::isfinite(p.v)) throw DomainError("CES requires v > 0");
}

// ---------------------------------------------------------------------------
// Variable-input aggregate h(L, M), always homogeneous of degree one, and its
// dual unit cost C2(pL, pM) = min { pL L + pM M : h(L, M) >= 1 }.
//
// Everything the revenue production function can depend on goes through this
// type, so code written against it cannot read beta_K, v or omega.

class VariableAggregate {
 public:
  enum class Form { CobbDouglas, CES };

  // h = L^a M^(1-a)
  static VariableAggregate cobb_douglas(double share_L) {
    if (!(share_L > 0.0 && share_L < 1.0))
      throw DomainError("Cobb-Douglas aggregate needs 0 < a < 1");
    VariableAggregate h;
    h.form_ = Form::CobbDouglas;
    h.a_ = share_L;
    return h;
  }

  // h = (beta_L L^sigma + beta_M M^sigma)^(1/sigma)
  static VariableAggregate ces(double beta_L, double beta_M, double sigma) {
    check_sigma(sigma);
    detail::require_positive(beta_L, "beta_L");
    detail::require_positive(beta_M, "beta_M");
    VariableAggregate h;
    h.form_ = Form::CES;
    h.beta_L_ = beta_L;
    h.beta_M_ = beta_M;
    h.sigma_ = sigma;
    return h;
  }

  Form form() const { return form_; }

  double log_value(double L, double M) const {
    detail::require_positive(L, "L");
    detail::require_positive(M, "M");
    const double l = std::log(L), m = std::log(M);
    if (form_ == Form::CobbDouglas) return a_ * l + (1.0 - a_) * m;
    return log_sum(l, m) / sigma_;
  }

  double value(double L, double M) const { return std::exp(log_value(L, M)); }

  // d h / d log V
  double log_derivative(double L, double M, FlexibleInput which) const {
    detail::require_positive(L, "L");
    detail::require_positive(M, "M");
    const double l = std::log(L), m = std::log(M);
    if (form_ == Form::CobbDouglas) {
      const double share = which == FlexibleInput::L ? a_ : 1.0 - a_;
      return share * std::exp(a_ * l + (1.0 - a_) * m);
    }
    const double beta = which == FlexibleInput::L ? beta_L_ : beta_M_;
    const double x = which == FlexibleInput::L ? l : m;
    return std::exp(std::log(beta) + sigma_ * x + (1.0 - sigma_) / sigma_ * log_sum(l, m));
  }

  // d h / d V
  double derivative(double L, double M, FlexibleInput which) const {
    return log_derivative(L, M, which) / (which == FlexibleInput::L ? L : M);
  }

  // Closed-form unit cost C2. For CES this is B^((sigma-1)/sigma) with
  // B = sum_V pV^(sigma/(sigma-1)) beta_V^(-1/(sigma-1)).
  double log_unit_cost(double pL, double pM) const {
    detail::require_positive(pL, "pL");
    detail::require_positive(pM, "pM");
    const double lpl = std::log(pL), lpm = std::log(pM);
    if (form_ == Form::CobbDouglas)
      return a_ * (lpl - std::log(a_)) + (1.0 - a_) * (lpm - std::log(1.0 - a_));
    return (sigma_ - 1.0) / sigma_ * log_B(lpl, lpm);
  }

  double unit_cost(double pL, double pM) const { return std::exp(log_unit_cost(pL, pM)); }

  // log B for the CES form (the paper's unit-cost kernel); only valid for CES.
  double log_B(double log_pL, double log_pM) const {
    const double e = sigma_ / (sigma_ - 1.0);
    const double w = -1.0 / (sigma_ - 1.0);
    return detail::log_add_exp(e * log_pL + w * std::log(beta_L_), e * log_pM + w * std::log(beta_M_));
  }

  double share_L() const { return a_; }
  double beta_L() const { return beta_L_; }
  double beta_M() const { return beta_M_; }
  double sigma() const { return sigma_; }

 private:
  VariableAggregate() = default;

  // log(beta_L L^sigma + beta_M M^sigma)
  double log_sum(double l, double m) const {
    return detail::log_add_exp(std::log(beta_L_) + sigma_ * l, std::log(beta_M_) + sigma_ * m);
  }

  Form form_ = Form::CobbDouglas;
  double a_ = 0.5;
  double beta_L_ = 0.0, beta_M_ = 0.0, sigma_ = 0.0;
};

// ---------------------------------------------------------------------------
// Technology: Q = F(K, h(L, M)) exp(omega) exp(eps), h of degree one.
//
//   Cobb-Douglas: F(K, h) = K^beta_K h^(beta_L + beta_M), h = L^a M^(1-a)
//   CES:          F(K, h) = (beta_K K^sigma + h^sigma)^(v/sigma),
//                 h = (beta_L L^sigma + beta_M M^sigma)^(1/sigma)

enum class TechKind { CobbDouglas, CES };

inline const char* name_of(TechKind k) { return k == TechKind::CobbDouglas ? "cd" : "ces"; }

inline TechKind parse_tech_kind(std::string_view s) {
  if (s == "cd" || s == "CD" || s == "cobb_douglas" || s == "cobb-douglas") return TechKind::CobbDouglas;
  if (s == "ces" || s == "CES") return TechKind::CES;
  throw ArgumentError("unknown technology kind '" + std::string(s) + "' (expected cd or ces)");
}

class Technology {
 public:
  static Technology cobb_douglas(const CDParams& p) {
    check_params(p);
    return Technology(p);
  }

  static Technology ces(const CESParams& p) {
    check_params(p);
    return Technology(p);
  }

  // Parameter vector in the canonical order of `param_names(kind)`.
  static Technology from_vector(TechKind kind, std::span<const double> theta) {
    if (theta.size() != param_names(kind).size())
      throw ArgumentError("parameter vector has the wrong length for this technology");
    if (kind == TechKind::CobbDouglas) return cobb_douglas({theta[0], theta[1], theta[2]});
    return ces({theta[1], theta[2], theta[0], theta[3]});
  }

  static const std::vector<std::string>& param_names(TechKind kind) {
    static const std::vector<std::string> cd{"beta_K", "beta_L", "beta_M"};
    static const std::vector<std::string> ces{"sigma", "beta_L", "beta_M", "v"};
    return kind == TechKind::CobbDouglas ? cd : ces;
  }

  std::vector<double> to_vector() const {
    if (const auto* p = std::get_if<CDParams>(&params_)) return {p->beta_K, p->beta_L, p->beta_M};
    const auto& c = std::get<CESParams>(params_);
    return {c.sigma, c.beta_L, c.beta_M, c.v};
  }

  TechKind kind() const {
    return std::holds_alternative<CDParams>(params_) ? TechKind::CobbDouglas : TechKind::CES;
  }
  const CDParams& cd() const { return std::get<CDParams>(params_); }
  const CESParams& ces_params() const { return std::get<CESParams>(params_); }

  VariableAggregate aggregate() const {
    if (const auto* p = std::get_if<CDParams>(&params_))
      return VariableAggregate::cobb_douglas(p->beta_L / p->variable_returns());
    const auto& c = std::get<CESParams>(params_);
    return VariableAggregate::ces(c.beta_L, c.beta_M, c.sigma);
  }

  // h(K, L, M); neither parametric form lets K enter h.
  double h(double /*K*/, double L, double M) const { return aggregate().value(L, M); }

  double log_outer(double K, double h) const {
    detail::require_positive(K, "K");
    detail::require_positive(h, "h");
    return log_outer_at(std::log(K), std::log(h));
  }

  // log F in terms of log K and log h; no range checks, used by root finders.
  double log_outer_at(double log_K, double log_h) const {
    if (const auto* p = std::get_if<CDParams>(&params_))
      return p->beta_K * log_K + p->variable_returns() * log_h;
    const auto& c = std::get<CESParams>(params_);
    return c.v / c.sigma * ces_outer_log_sum(c, log_K, log_h);
  }

  double outer(double K, double h) const { return std::exp(log_outer(K, h)); }

  // dF/dh evaluated at (K, h).
  double outer_dh(double K, double h) const {
    detail::require_positive(K, "K");
    detail::require_positive(h, "h");
    if (const auto* p = std::get_if<CDParams>(&params_)) {
      const double s = p->variable_returns();
      return s * std::exp(p->beta_K * std::log(K) + (s - 1.0) * std::log(h));
    }
    const auto& c = std::get<CESParams>(params_);
    const double lsum = ces_outer_log_sum(c, std::log(K), std::log(h));
    return c.v * std::exp((c.v / c.sigma - 1.0) * lsum + (c.sigma - 1.0) * std::log(h));
  }

  // Infimum and supremum of F(K, h) over h in (0, inf). The cost program has a
  // solution only for targets strictly inside this range.
  std::pair<double, double> outer_range(double K) const {
    detail::require_positive(K, "K");
    constexpr double inf = std::numeric_limits<double>::infinity();
    if (std::holds_alternative<CDParams>(params_)) return {0.0, inf};
    const auto& c = std::get<CESParams>(params_);
    const double bound = std::exp(c.v / c.sigma * std::log(c.beta_K()) + c.v * std::log(K));
    return c.sigma > 0.0 ? std::pair{bound, inf} : std::pair{0.0, bound};
  }

  bool operator==(const Technology&) const = default;

 private:
  explicit Technology(CDParams p) : params_(p) {}
  explicit Technology(CESParams p) : params_(p) {}

  // log(beta_K K^sigma + h^sigma)
  static double ces_outer_log_sum(const CESParams& c, double log_K, double log_h) {
    return detail::log_add_exp(std::log(c.beta_K()) + c.sigma * log_K, c.sigma * log_h);
  }

  std::variant<CDParams, CESParams> params_;
};

// ---------------------------------------------------------------------------
// Observation and shock/demand configuration

struct FirmPeriod {
  std::int64_t firm_id = 0;
  int t = 0;
  double K = 0, L = 0, M = 0;
  double pL = 0, pM = 0, pK = 0;  // pK is carried but enters no equation
  double omega = 0;               // log Hicks-neutral productivity
  double eps = 0;                 // ex-post log output shock
  double Q = 0;                   // realized output
  double Qstar = 0;               // planned output Q / exp(eps)
  double P = 0;
  double R = 0;                   // realized revenue P * Q
  // Target revenue shares pV V / (P Qstar calE), i.e. relative to expected
  // revenue. With this normalization markup = elasticity / share exactly.
  double sL_star = 0, sM_star = 0;

  double share(FlexibleInput v) const { return v == FlexibleInput::L ? sL_star : sM_star; }
  double price(FlexibleInput v) const { return v == FlexibleInput::L ? pL : pM; }
  double quantity(FlexibleInput v) const { return v == FlexibleInput::L ? L : M; }
  double target_revenue() const { return P * Qstar; }
};

struct ShockConfig {
  double sigma_eps = 0.0;

  // E[exp(eps) | information set] for eps ~ N(0, sigma_eps^2).
  double calE() const { return std::exp(0.5 * sigma_eps * sigma_eps); }
};

// Constant-elasticity demand Q = scale * P^(-eta). `eta_dispersion` > 0 draws
// a firm-specific elasticity 1 + (eta - 1) exp(eta_dispersion * z).
struct DemandConfig {
  double eta = 4.0;
  double scale = 1.0;
  double eta_dispersion = 0.0;

  double markup() const { return eta / (eta - 1.0); }
};

inline void check_demand(const DemandConfig& d) {
  if (!(d.eta > 1.0) || !std::isfinite(d.eta)) throw DomainError("demand elasticity eta must exceed 1");
  detail::require_positive(d.scale, "demand scale");
  if (!(d.eta_dispersion >= 0.0)) throw DomainError("eta_dispersion must be >= 0");
}

// ---------------------------------------------------------------------------
// Operations

inline double h_separable(const Technology& tech, double K, double L, double M) {
  detail::require_positive(K, "K");
  return tech.h(K, L, M);
}

inline double log_quantity(const Technology& tech, double K, double L, double M, double omega, double eps) {
  detail::require_finite(omega, "omega");
  detail::require_finite(eps, "eps");
  return tech.log_outer(K, tech.h(K, L, M)) + omega + eps;
}

// F(K, h(K, L, M)) exp(omega) exp(eps)
inline double evaluate_quantity(const Technology& tech, double K, double L, double M, double omega, double eps) {
  return std::exp(log_quantity(tech, K, L, M, omega, eps));
}

// d log Q / d log input.
inline double output_elasticity(const Technology& tech, double K, double L, double M, Input input) {
  detail::require_positive(K, "K");
  detail::require_positive(L, "L");
  detail::require_positive(M, "M");
  if (tech.kind() == TechKind::CobbDouglas) {
    const auto& p = tech.cd();
    switch (input) {
      case Input::K: return p.beta_K;
      case Input::L: return p.beta_L;
      case Input::M: return p.beta_M;
    }
    return 0.0;
  }
  // v beta_V V^sigma / (beta_K K^sigma + beta_L L^sigma + beta_M M^sigma)
  const auto& c = tech.ces_params();
  const std::array<double, 3> logs{std::log(c.beta_K()) + c.sigma * std::log(K),
                                   std::log(c.beta_L) + c.sigma * std::log(L),
                                   std::log(c.beta_M) + c.sigma * std::log(M)};
  const double lse = detail::log_add_exp(detail::log_add_exp(logs[0], logs[1]), logs[2]);
  return c.v * std::exp(logs[static_cast<int>(input)] - lse);
}

inline double output_elasticity(const Technology& tech, double K, double L, double M, std::string_view input) {
  return output_elasticity(tech, K, L, M, parse_input(input));
}

// Production-approach markup: elasticity over revenue share.
inline double markup_production_approach(double elasticity, double revenue_share) {
  detail::require_positive(elasticity, "output elasticity");
  detail::require_positive(revenue_share, "revenue share");
  return elasticity / revenue_share;
}

inline double price_from_markup(double mu, double lambda) {
  detail::require_positive(mu, "markup");
  detail::require_positive(lambda, "marginal cost");
  return mu * lambda;
}

// Target revenue implied by one flexible input:
//   R* = C2(pL, pM) * dh/dlog V * (S*_V calE)^-1.
// Takes only the aggregate h, so beta_K, v and omega cannot enter.
inline double revenue_pf_reduced_form(const VariableAggregate& h, double L, double M, double pL, double pM,
                                      double s_star, double calE, FlexibleInput which) {
  detail::require_positive(s_star, "target revenue share");
  detail::require_positive(calE, "calE");
  return h.unit_cost(pL, pM) * h.log_derivative(L, M, which) / (s_star * calE);
}

inline double revenue_pf_reduced_form(const Technology& tech, double K, double L, double M, double pL, double pM,
                                      double s_star, double calE, FlexibleInput which) {
  detail::require_positive(K, "K");
  return revenue_pf_reduced_form(tech.aggregate(), L, M, pL, pM, s_star, calE, which);
}

// Intercept of the log Cobb-Douglas revenue function for flexible input V:
//   theta0 = log beta_V - (beta_L log beta_L + beta_M log beta_M) / (beta_L + beta_M)
inline double cd_revenue_intercept(double beta_L, double beta_M, FlexibleInput which) {
  const double s = beta_L + beta_M;
  const double bv = which == FlexibleInput::L ? beta_L : beta_M;
  return std::log(bv) - (beta_L * std::log(beta_L) + beta_M * std::log(beta_M)) / s;
}

// Log target revenue of the Cobb-Douglas technology. Arguments are logs;
// `s_star` is the log target share of the flexible input `which`. The realized
// log revenue adds eps.
inline double log_revenue_cd(const CDParams& params, double l, double m, double pl, double pm, double s_star,
                             double calE, FlexibleInput which) {
  if (!(params.beta_L + params.beta_M > 0.0))
    throw DomainError("log_revenue_cd requires beta_L + beta_M > 0");
  detail::require_positive(params.beta_L, "beta_L");
  detail::require_positive(params.beta_M, "beta_M");
  detail::require_positive(calE, "calE");
  const double a = params.beta_L / (params.beta_L + params.beta_M);
  return cd_revenue_intercept(params.beta_L, params.beta_M, which) + a * (l + pl) + (1.0 - a) * (m + pm) -
         s_star - std::log(calE);
}

// Log target revenue of the CES technology:
//   log beta_V + sigma v + (1-sigma)/sigma log(beta_L L^sigma + beta_M M^sigma)
//     + (sigma-1)/sigma log B - s*_V - log calE
inline double log_revenue_ces(const CESParams& params, double l, double m, double pl, double pm, double s_star,
                              double calE, FlexibleInput which) {
  check_sigma(params.sigma);
  detail::require_positive(params.beta_L, "beta_L");
  detail::require_positive(params.beta_M, "beta_M");
  detail::require_positive(calE, "calE");
  const double sigma = params.sigma;
  const double lbl = std::log(params.beta_L), lbm = std::log(params.beta_M);
  const double log_sum = detail::log_add_exp(lbl + sigma * l, lbm + sigma * m);
  const double e = sigma / (sigma - 1.0), w = -1.0 / (sigma - 1.0);
  const double log_B = detail::log_add_exp(e * pl + w * lbl, e * pm + w * lbm);
  const double lbv = which == FlexibleInput::L ? lbl : lbm;
  const double x = which == FlexibleInput::L ? l : m;
  return lbv + sigma * x + (1.0 - sigma) / sigma * log_sum + (sigma - 1.0) / sigma * log_B - s_star -
         std::log(calE);
}

// The same CES revenue function written through sigma and rho = beta_L/beta_M
// only (flexible input M):
//   sigma m + (1-sigma)/sigma log(rho L^sigma + M^sigma)
//     + (sigma-1)/sigma log(pL^(sigma/(sigma-1)) rho^(-1/(sigma-1)) + pM^(sigma/(sigma-1))) - s*_M - log calE
inline double log_revenue_ces_ratio_form(double sigma, double rho, double l, double m, double pl, double pm,
                                         double s_star_M, double calE) {
  check_sigma(sigma);
  detail::require_positive(rho, "beta_L / beta_M");
  detail::require_positive(calE, "calE");
  const double lr = std::log(rho);
  const double log_sum = detail::log_add_exp(lr + sigma * l, sigma * m);
  const double e = sigma / (sigma - 1.0);
  const double log_B_bar = detail::log_add_exp(e * pl - lr / (sigma - 1.0), e * pm);
  return sigma * m + (1.0 - sigma) / sigma * log_sum + (sigma - 1.0) / sigma * log_B_bar - s_star_M -
         std::log(calE);
}

// Dispatch on the technology kind.
inline double log_revenue(const Technology& tech, double l, double m, double pl, double pm, double s_star,
                          double calE, FlexibleInput which) {
  if (tech.kind() == TechKind::CobbDouglas) return log_revenue_cd(tech.cd(), l, m, pl, pm, s_star, calE, which);
  return log_revenue_ces(tech.ces_params(), l, m, pl, pm, s_star, calE, which);
}

// ---------------------------------------------------------------------------
// Production-set validity on a grid

struct InputPoint {
  double K = 1, L = 1, M = 1;
};

struct ValidityReport {
  bool monotone = true;
  bool weakly_essential = true;
  bool quasi_concave = true;
  std::size_t points = 0;
  std::vector<std::string> counterexamples;

  bool ok() const { return monotone && weakly_essential && quasi_concave; }
};

// n^3 points with each coordinate log-spaced on [lo, hi].
inline std::vector<InputPoint> log_grid(int n, double lo, double hi) {
  if (n < 1) throw ArgumentError("grid needs at least one point per axis");
  detail::require_positive(lo, "grid lower bound");
  detail::require_positive(hi, "grid upper bound");
  std::vector<double> axis(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double u = n == 1 ? 0.0 : static_cast<double>(i) / (n - 1);
    axis[static_cast<std::size_t>(i)] = std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
  }
  std::vector<InputPoint> grid;
  grid.reserve(axis.size() * axis.size() * axis.size());
  for (double k : axis)
    for (double l : axis)
      for (double m : axis) grid.push_back({k, l, m});
  return grid;
}

// Checks free disposability (monotonicity), weak essentiality (output vanishes
// along rays toward the origin) and quasi-concavity (midpoint output at least
// the smaller endpoint output) on every pair of grid points.
inline ValidityReport validate_technology(const Technology& tech, std::span<const InputPoint> grid) {
  if (grid.empty()) throw ArgumentError("validate_technology needs a non-empty grid");
  ValidityReport rep;
  rep.points = grid.size();
  constexpr double rel_tol = 1e-12;
  constexpr std::size_t max_examples = 20;
  auto F = [&](const InputPoint& x) { return evaluate_quantity(tech, x.K, x.L, x.M, 0.0, 0.0); };
  auto describe = [](const InputPoint& x) {
    return "(" + std::to_string(x.K) + ", " + std::to_string(x.L) + ", " + std::to_string(x.M) + ")";
  };
  auto note = [&](std::string s) {
    if (rep.counterexamples.size() < max_examples) rep.counterexamples.push_back(std::move(s));
  };

  std::vector<double> values(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    detail::require_positive(grid[i].K, "grid K");
    detail::require_positive(grid[i].L, "grid L");
    detail::require_positive(grid[i].M, "grid M");
    values[i] = F(grid[i]);
  }

  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (std::size_t j = 0; j < grid.size(); ++j) {
      if (i == j) continue;
      const auto& x = grid[i];
      const auto& y = grid[j];
      const bool dominates = y.K >= x.K && y.L >= x.L && y.M >= x.M;
      if (dominates && values[j] < values[i] * (1.0 - rel_tol)) {
        rep.monotone = false;
        note("monotonicity: F" + describe(y) + " < F" + describe(x));
      }
      if (j > i) {
        const InputPoint mid{0.5 * (x.K + y.K), 0.5 * (x.L + y.L), 0.5 * (x.M + y.M)};
        if (F(mid) < std::min(values[i], values[j]) * (1.0 - rel_tol)) {
          rep.quasi_concave = false;
          note("quasi-concavity: midpoint of " + describe(x) + " and " + describe(y));
        }
      }
    }
  }

  // Along t x with t -> 0 output must fall strictly and its log must keep a
  // positive slope in log t, so the limit is zero.
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& x = grid[i];
    double prev = values[i];
    double prev_log_t = 0.0;
    bool ok = true;
    double slope = 0.0;
    for (int k = 1; k <= 12; ++k) {
      const double t = std::pow(10.0, -k);
      const double f = F({t * x.K, t * x.L, t * x.M});
      if (!(f < prev)) ok = false;
      slope = (std::log(prev) - std::log(f)) / (prev_log_t - std::log(t));
      prev = f;
      prev_log_t = std::log(t);
    }
    if (!ok || !(slope > 1e-3)) {
      rep.weakly_essential = false;
      note("weak essentiality: output does not vanish toward zero from " + describe(x));
    }
  }
  return rep;
}

}  // namespace revpf
