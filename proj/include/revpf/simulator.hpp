#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "revpf/costmin.hpp"
#include "revpf/detail/numeric.hpp"
#include "revpf/model.hpp"

namespace revpf {

// omega_t = c0 + rho omega_{t-1} + xi_t, xi ~ N(0, sigma_xi^2)
struct ProductivityProcess {
  double rho = 0.8;
  double c0 = 0.0;
  double sigma_xi = 0.15;

  double g(double omega_prev) const { return c0 + rho * omega_prev; }
  double stationary_mean() const { return c0 / (1.0 - rho); }
};

// log K_t = kappa0 + kappa_k log K_{t-1} + kappa_w omega_{t-1} + sigma_k u_t
struct CapitalPolicy {
  double kappa0 = 0.0;
  double kappa_k = 0.5;
  double kappa_w = 0.4;
  double sigma_k = 0.8;
};

// Firm-specific log-AR(1) around mean + firm effect:
//   log p_t = mean + fe + rho (log p_{t-1} - mean - fe) + sd e_t,  fe ~ N(0, fe_sd^2)
struct PriceSeries {
  double mean = 0.0;
  double rho = 0.5;
  double sd = 0.1;
  double fe_sd = 0.0;
};

struct PriceProcess {
  PriceSeries L{0.0, 0.9, 0.15, 0.2};
  PriceSeries M{0.0, 0.2, 0.3, 0.2};
  PriceSeries K{0.0, 0.5, 0.05, 0.0};
};

struct SimConfig {
  Technology tech = Technology::cobb_douglas({0.25, 0.3, 0.4});
  DemandConfig demand;
  ProductivityProcess prod;
  CapitalPolicy capital;
  PriceProcess prices;
  ShockConfig shocks{0.1};
  int N = 500;
  int T = 10;
  int burn_in = 50;
  std::uint64_t seed = 0;
};

inline void check_config(const SimConfig& cfg) {
  check_demand(cfg.demand);
  if (!(std::abs(cfg.prod.rho) < 1.0)) throw DomainError("productivity persistence must satisfy |rho| < 1");
  if (!(cfg.prod.sigma_xi >= 0.0) || !std::isfinite(cfg.prod.c0)) throw DomainError("invalid productivity process");
  if (!(std::abs(cfg.capital.kappa_k) < 1.0)) throw DomainError("capital policy needs |kappa_k| < 1");
  if (!(cfg.capital.sigma_k >= 0.0)) throw DomainError("sigma_k must be >= 0");
  for (const PriceSeries* p : {&cfg.prices.L, &cfg.prices.M, &cfg.prices.K}) {
    if (!(std::abs(p->rho) < 1.0)) throw DomainError("price persistence must satisfy |rho| < 1");
    if (!(p->sd >= 0.0) || !(p->fe_sd >= 0.0) || !std::isfinite(p->mean)) throw DomainError("invalid price process");
  }
  if (!(cfg.shocks.sigma_eps >= 0.0) || !std::isfinite(cfg.shocks.sigma_eps)) throw DomainError("sigma_eps must be >= 0");
  if (cfg.N < 0 || cfg.T < 1) throw DomainError("panel needs N >= 0 and T >= 1");
  if (cfg.burn_in < 0) throw DomainError("burn_in must be >= 0");
}

// Rows sorted by (firm_id, t). The flags say which optional columns carry data;
// an external revenue-only file has none of them.
struct Panel {
  std::vector<FirmPeriod> rows;
  bool has_omega = true;
  bool has_eps = true;
  bool has_Q = true;
  bool has_P = true;

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }
  bool has_truth() const { return has_omega && has_eps; }
};

namespace detail {

// Independent substream per firm; the stream depends only on (seed, firm).
inline std::mt19937_64 firm_stream(std::uint64_t seed, std::int64_t firm) {
  const auto f = static_cast<std::uint64_t>(firm);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(f), static_cast<std::uint32_t>(f >> 32), 0x5eedu};
  return std::mt19937_64(seq);
}

// Planned log h at which P = mu lambda clears demand Q* = A P^-eta with
// Q* = F(K, h) exp(omega).
inline double pricing_log_h(const Technology& tech, double log_K, double omega, double log_C2, double mu, double eta,
                            double log_A, double log_calE, std::int64_t firm, int t) {
  const double K = std::exp(log_K);
  auto gap = [&](double u) {
    const double log_F = tech.log_outer_at(log_K, u);
    const double log_Fh = std::log(tech.outer_dh(K, std::exp(u)));
    const double log_lambda = log_C2 - log_Fh - omega - log_calE;
    return log_F + omega - log_A + eta * (std::log(mu) + log_lambda);
  };
  try {
    return find_root_expanding(gap, 0.0, 1.0, 1e-15, 20);
  } catch (const Error& e) {
    throw SimulationError(std::string("pricing fixed point failed: ") + e.what() + " (firm " + std::to_string(firm) +
                              ", period " + std::to_string(t) + ")",
                          firm, t);
  }
}

inline std::vector<FirmPeriod> simulate_firm(const SimConfig& cfg, std::int64_t firm) {
  auto rng = firm_stream(cfg.seed, firm);
  std::normal_distribution<double> z(0.0, 1.0);
  const auto& pr = cfg.prod;
  const auto& cp = cfg.capital;
  const double calE = cfg.shocks.calE();
  const double log_calE = std::log(calE);
  const double log_A = std::log(cfg.demand.scale);

  double eta = cfg.demand.eta;
  if (cfg.demand.eta_dispersion > 0.0) eta = 1.0 + (eta - 1.0) * std::exp(cfg.demand.eta_dispersion * z(rng));
  const double mu = eta / (eta - 1.0);

  const double feL = cfg.prices.L.fe_sd * z(rng);
  const double feM = cfg.prices.M.fe_sd * z(rng);
  const double feK = cfg.prices.K.fe_sd * z(rng);

  // Start at the stationary means; the burn-in removes the rest.
  double omega = pr.stationary_mean();
  double log_K = (cp.kappa0 + cp.kappa_w * omega) / (1.0 - cp.kappa_k);
  double dL = 0.0, dM = 0.0, dK = 0.0;  // price deviations from mean + fe

  const VariableAggregate agg = cfg.tech.aggregate();
  std::vector<FirmPeriod> out;
  out.reserve(static_cast<std::size_t>(cfg.T));
  const int total = cfg.burn_in + cfg.T;
  for (int s = 0; s < total; ++s) {
    const double omega_prev = omega;
    omega = pr.g(omega_prev) + pr.sigma_xi * z(rng);
    log_K = cp.kappa0 + cp.kappa_k * log_K + cp.kappa_w * omega_prev + cp.sigma_k * z(rng);
    dL = cfg.prices.L.rho * dL + cfg.prices.L.sd * z(rng);
    dM = cfg.prices.M.rho * dM + cfg.prices.M.sd * z(rng);
    dK = cfg.prices.K.rho * dK + cfg.prices.K.sd * z(rng);
    const double eps = cfg.shocks.sigma_eps * z(rng);
    if (s < cfg.burn_in) continue;

    const int t = s - cfg.burn_in;
    FirmPeriod r;
    r.firm_id = firm;
    r.t = t;
    r.K = std::exp(log_K);
    r.pL = std::exp(cfg.prices.L.mean + feL + dL);
    r.pM = std::exp(cfg.prices.M.mean + feM + dM);
    r.pK = std::exp(cfg.prices.K.mean + feK + dK);
    r.omega = omega;
    r.eps = eps;

    const double log_C2 = agg.log_unit_cost(r.pL, r.pM);
    const double u = pricing_log_h(cfg.tech, log_K, omega, log_C2, mu, eta, log_A, log_calE, firm, t);
    CostSolution sol;
    try {
      sol = cost_min_numeric(cfg.tech, r.K, r.pL, r.pM, std::exp(cfg.tech.log_outer_at(log_K, u)));
    } catch (const Error& e) {
      throw SimulationError(std::string("cost minimization failed: ") + e.what() + " (firm " + std::to_string(firm) +
                                ", period " + std::to_string(t) + ")",
                            firm, t);
    }
    r.L = sol.L_star;
    r.M = sol.M_star;
    const double lambda = marginal_cost_closed_form(cfg.tech, r.K, r.L, r.M, r.pL, r.pM, omega, calE);
    r.P = price_from_markup(mu, lambda);
    r.Qstar = std::exp(log_quantity(cfg.tech, r.K, r.L, r.M, omega, 0.0));
    r.Q = r.Qstar * std::exp(eps);
    r.R = r.P * r.Q;
    const double expected_revenue = r.P * r.Qstar * calE;
    r.sL_star = r.pL * r.L / expected_revenue;
    r.sM_star = r.pM * r.M / expected_revenue;
    out.push_back(r);
  }
  return out;
}

}  // namespace detail

// Simulates N firms over burn_in + T periods and keeps the last T. Per period:
// omega (AR(1)), K (policy on t-1 information), input prices, the pricing
// fixed point P = mu lambda on the demand curve, cost-minimizing (L, M), eps.
// Firms use independent substreams, so the panel does not depend on `threads`.
inline Panel simulate_panel(const SimConfig& cfg, unsigned threads = detail::default_threads()) {
  check_config(cfg);
  std::vector<std::vector<FirmPeriod>> firms(static_cast<std::size_t>(cfg.N));
  detail::parallel_for(firms.size(), threads,
                       [&](std::size_t i) { firms[i] = detail::simulate_firm(cfg, static_cast<std::int64_t>(i)); });
  Panel panel;
  panel.rows.reserve(static_cast<std::size_t>(cfg.N) * static_cast<std::size_t>(cfg.T));
  for (auto& f : firms) panel.rows.insert(panel.rows.end(), f.begin(), f.end());
  return panel;
}

// ---------------------------------------------------------------------------
// Assumption checks

struct PanelCheck {
  std::string name;
  double tolerance = 0;
  std::size_t violations = 0;
  double max_error = 0;
  bool skipped = false;
  std::string note;
};

struct VerifyReport {
  std::size_t rows = 0;
  std::vector<PanelCheck> checks;
  std::vector<std::size_t> flagged_rows;  // 0-based row indices, ascending

  std::size_t violations() const {
    std::size_t n = 0;
    for (const auto& c : checks) n += c.violations;
    return n;
  }
  bool ok() const { return flagged_rows.empty(); }
};

struct VerifyTolerances {
  double revenue_identity = 1e-9;
  double reduced_form = 1e-7;
  double foc_price = 1e-7;
  double markup = 1e-8;
};

// Per-observation checks of the data-generating assumptions:
//   revenue identity R = P Q;
//   reduced form R e^-eps = C2 dh/dlog V (S*_V calE)^-1 for V = L, M;
//   FOC prices pV = C2 dh/dV;
//   markup theta_V / S*_V = eta / (eta - 1) (only without eta dispersion).
// Checks whose columns are absent are reported as skipped.
inline VerifyReport verify_panel(const Panel& panel, const SimConfig& cfg, const VerifyTolerances& tol = {}) {
  VerifyReport rep;
  rep.rows = panel.size();
  const auto agg = cfg.tech.aggregate();
  const double calE = cfg.shocks.calE();
  const double mu = cfg.demand.markup();

  enum { kRevenue, kReducedL, kReducedM, kFocL, kFocM, kMarkupL, kMarkupM, kCount };
  auto check = [](std::string name, double tolerance) {
    PanelCheck c;
    c.name = std::move(name);
    c.tolerance = tolerance;
    return c;
  };
  rep.checks = {check("revenue_identity", tol.revenue_identity), check("reduced_form_L", tol.reduced_form),
                check("reduced_form_M", tol.reduced_form),       check("foc_price_L", tol.foc_price),
                check("foc_price_M", tol.foc_price),             check("markup_L", tol.markup),
                check("markup_M", tol.markup)};
  if (!(panel.has_P && panel.has_Q)) {
    rep.checks[kRevenue].skipped = true;
    rep.checks[kRevenue].note = "P or Q unobserved";
  }
  if (!panel.has_eps) {
    for (int c : {kReducedL, kReducedM}) {
      rep.checks[c].skipped = true;
      rep.checks[c].note = "eps unobserved, target revenue unknown";
    }
  }
  if (cfg.demand.eta_dispersion > 0.0) {
    for (int c : {kMarkupL, kMarkupM}) {
      rep.checks[c].skipped = true;
      rep.checks[c].note = "firm-specific markups";
    }
  }

  auto rel = [](double a, double b) { return std::abs(a - b) / std::abs(b); };
  for (std::size_t i = 0; i < panel.size(); ++i) {
    const auto& r = panel.rows[i];
    std::array<double, kCount> err{};
    err.fill(0.0);
    bool valid = r.K > 0 && r.L > 0 && r.M > 0 && r.pL > 0 && r.pM > 0 && r.R > 0 && r.sL_star > 0 && r.sM_star > 0;
    if (valid) {
      if (!rep.checks[kRevenue].skipped) err[kRevenue] = rel(r.P * r.Q, r.R);
      const double C2 = agg.unit_cost(r.pL, r.pM);
      if (panel.has_eps) {
        const double target = r.R * std::exp(-r.eps);
        err[kReducedL] = rel(revenue_pf_reduced_form(agg, r.L, r.M, r.pL, r.pM, r.sL_star, calE, FlexibleInput::L), target);
        err[kReducedM] = rel(revenue_pf_reduced_form(agg, r.L, r.M, r.pL, r.pM, r.sM_star, calE, FlexibleInput::M), target);
      }
      err[kFocL] = rel(C2 * agg.derivative(r.L, r.M, FlexibleInput::L), r.pL);
      err[kFocM] = rel(C2 * agg.derivative(r.L, r.M, FlexibleInput::M), r.pM);
      if (!rep.checks[kMarkupL].skipped) {
        err[kMarkupL] = rel(output_elasticity(cfg.tech, r.K, r.L, r.M, Input::L) / r.sL_star, mu);
        err[kMarkupM] = rel(output_elasticity(cfg.tech, r.K, r.L, r.M, Input::M) / r.sM_star, mu);
      }
    }
    bool flagged = false;
    for (int c = 0; c < kCount; ++c) {
      auto& chk = rep.checks[static_cast<std::size_t>(c)];
      if (chk.skipped) continue;
      const double e = valid ? err[static_cast<std::size_t>(c)] : std::numeric_limits<double>::infinity();
      if (!(e <= chk.tolerance)) {
        ++chk.violations;
        flagged = true;
      }
      if (!(e <= chk.max_error)) chk.max_error = e;
    }
    if (flagged) rep.flagged_rows.push_back(i);
  }
  return rep;
}

}  // namespace revpf
