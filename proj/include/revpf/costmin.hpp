#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <tuple>
#include <utility>

#include <Eigen/Dense>

#include "revpf/detail/numeric.hpp"
#include "revpf/errors.hpp"
#include "revpf/model.hpp"

namespace revpf {

struct CostSolution {
  double L_star = 0;
  double M_star = 0;
  double total_cost = 0;
  double lambda = 0;  // multiplier on the output constraint, cost per unit of target
  bool converged = false;
  int iterations = 0;
  double kkt_residual = 0;  // max relative KKT residual at the returned point
};

// Non-convergence of the constrained program; carries the last iterate.
class CostSolverError : public SolverError {
 public:
  CostSolverError(const std::string& what, CostSolution last) : SolverError(what), last_(last) {}
  const CostSolution& last_iterate() const noexcept { return last_; }

 private:
  CostSolution last_;
};

struct C2Value {
  double value = 0;    // closed-form dual unit cost
  double numeric = 0;  // minimum of the unit program found by the numeric solver
  double pL = 0, pM = 0;
};

struct KktOptions {
  double tolerance = 1e-9;
  int max_iterations = 200;
  int polish_steps = 3;
};

namespace detail {

// Constraint value, gradient and the derivatives of log gradient, all in
// log-input coordinates.
struct LogConstraintEval {
  double c = 0;
  std::array<double, 2> g{};
  std::array<std::array<double, 2>, 2> dlog_g{};  // d log g_i / d x_j
};

// scale * log(e^a0 + e^(a1 + s x1) + e^(a2 + s x2)) - log_y, the log of a CES
// composite (a0 = -inf drops the fixed term), or b1 x1 + b2 x2 + b0 - log_y.
class LogConstraint {
 public:
  static LogConstraint ces(double scale, double s, double a0, double a1, double a2, double log_y) {
    LogConstraint c;
    c.ces_ = true;
    c.scale_ = scale;
    c.s_ = s;
    c.a_ = {a0, a1, a2};
    c.log_y_ = log_y;
    return c;
  }
  static LogConstraint linear(double b0, double b1, double b2, double log_y) {
    LogConstraint c;
    c.a_ = {b0, b1, b2};
    c.log_y_ = log_y;
    return c;
  }

  double value(double x1, double x2) const {
    if (!ces_) return a_[0] + a_[1] * x1 + a_[2] * x2 - log_y_;
    return scale_ * lse(x1, x2) - log_y_;
  }

  LogConstraintEval eval(double x1, double x2) const {
    LogConstraintEval e;
    if (!ces_) {
      e.c = value(x1, x2);
      e.g = {a_[1], a_[2]};
      return e;
    }
    const double t1 = a_[1] + s_ * x1, t2 = a_[2] + s_ * x2;
    const double l = lse(x1, x2);
    const double w1 = std::exp(t1 - l), w2 = std::exp(t2 - l);
    e.c = scale_ * l - log_y_;
    e.g = {scale_ * s_ * w1, scale_ * s_ * w2};
    e.dlog_g = {{{s_ * (1.0 - w1), -s_ * w2}, {-s_ * w1, s_ * (1.0 - w2)}}};
    return e;
  }

 private:
  double lse(double x1, double x2) const {
    return log_add_exp(log_add_exp(a_[0], a_[1] + s_ * x1), a_[2] + s_ * x2);
  }

  bool ces_ = false;
  double scale_ = 1, s_ = 1, log_y_ = 0;
  std::array<double, 3> a_{};
};

// min pL exp(x1) + pM exp(x2)  s.t.  c(x1, x2) = 0 with c increasing in both
// arguments. Newton on the KKT system
//   1 - exp(n + log c_V - log pV - x_V) = 0,  c = 0
// in (x1, x2, n = log multiplier), backtracking on the residual norm.
inline CostSolution solve_log_kkt(const LogConstraint& c, double pL, double pM, const KktOptions& opt) {
  const double lpl = std::log(pL), lpm = std::log(pM);
  double x1 = 0.0, x2 = 0.0;

  // Moves (x1, x2) along the ray of fixed ratio onto the constraint.
  auto rescale = [&](double a, double b) {
    const double t = find_root_expanding([&](double s) { return c.value(a + s, b + s); }, 0.0, 1.0, 1e-15, 16);
    return std::pair{a + t, b + t};
  };

  // Start: the log input ratio d = x1 - x2 at which, on the constraint, the
  // tangency condition log(c1 / c2) = d + log pL - log pM holds. Found as a
  // bracketed 1-D root; plain fixed-point iteration diverges for strong
  // complements.
  auto tangency_gap = [&](double d) {
    const auto [a, b] = rescale(0.5 * d, -0.5 * d);
    const auto g = c.eval(a, b).g;
    if (!(g[0] > 0.0) || !(g[1] > 0.0)) throw SolverError("constraint gradient must be positive");
    return std::log(g[0] / g[1]) - lpl + lpm - d;
  };
  const double d = find_root_expanding(tangency_gap, lpm - lpl, 1.0, 1e-13, 16);
  std::tie(x1, x2) = rescale(0.5 * d, -0.5 * d);

  double n;
  {
    const auto g = c.eval(x1, x2).g;
    n = std::log((pL * std::exp(x1) + pM * std::exp(x2)) / (g[0] + g[1]));
  }

  struct State {
    LogConstraintEval e;
    std::array<double, 3> r{};
    std::array<double, 2> q{};  // exp(n + log c_V - log pV - x_V)
    double res = 0;
  };
  auto evaluate = [&](double a, double b, double nn) {
    State st;
    st.e = c.eval(a, b);
    st.q = {std::exp(nn + std::log(st.e.g[0]) - lpl - a), std::exp(nn + std::log(st.e.g[1]) - lpm - b)};
    st.r = {1.0 - st.q[0], 1.0 - st.q[1], st.e.c};
    st.res = std::max({std::abs(st.r[0]), std::abs(st.r[1]), std::abs(st.r[2])});
    return st;
  };
  auto merit = [](const State& st) { return st.r[0] * st.r[0] + st.r[1] * st.r[1] + st.r[2] * st.r[2]; };

  State cur = evaluate(x1, x2, n);
  int polish = 0;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    if (!std::isfinite(cur.res)) break;
    if (cur.res <= opt.tolerance && polish++ >= opt.polish_steps) break;
    const auto& e = cur.e;
    Eigen::Matrix3d J;
    J << -cur.q[0] * (e.dlog_g[0][0] - 1.0), -cur.q[0] * e.dlog_g[0][1], -cur.q[0],  //
        -cur.q[1] * e.dlog_g[1][0], -cur.q[1] * (e.dlog_g[1][1] - 1.0), -cur.q[1],   //
        e.g[0], e.g[1], 0.0;
    const Eigen::Vector3d F(cur.r[0], cur.r[1], cur.r[2]);
    const Eigen::Vector3d step = J.fullPivLu().solve(-F);
    if (!step.allFinite()) break;

    const double m0 = merit(cur);
    double alpha = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      const double a = x1 + alpha * step(0), b = x2 + alpha * step(1), nn = n + alpha * step(2);
      State trial = evaluate(a, b, nn);
      if (std::isfinite(trial.res) && merit(trial) < m0) {
        x1 = a;
        x2 = b;
        n = nn;
        cur = trial;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;  // no further decrease possible at this precision
  }

  CostSolution sol;
  sol.L_star = std::exp(x1);
  sol.M_star = std::exp(x2);
  sol.total_cost = pL * sol.L_star + pM * sol.M_star;
  sol.lambda = std::exp(n);
  sol.iterations = it;
  sol.kkt_residual = cur.res;
  sol.converged = cur.res <= opt.tolerance;
  if (!sol.converged)
    throw CostSolverError("cost minimization did not converge (relative KKT residual " + std::to_string(cur.res) + ")",
                          sol);
  return sol;
}

// log F(K, h(L, M)) - log y as a function of (log L, log M).
inline LogConstraint output_constraint(const Technology& tech, double log_K, double log_y) {
  if (tech.kind() == TechKind::CobbDouglas) {
    const auto& p = tech.cd();
    return LogConstraint::linear(p.beta_K * log_K, p.beta_L, p.beta_M, log_y);
  }
  const auto& c = tech.ces_params();
  return LogConstraint::ces(c.v / c.sigma, c.sigma, std::log(c.beta_K()) + c.sigma * log_K, std::log(c.beta_L),
                            std::log(c.beta_M), log_y);
}

// log h(L, M) as a function of (log L, log M).
inline LogConstraint aggregate_constraint(const Technology& tech) {
  if (tech.kind() == TechKind::CobbDouglas) {
    const double a = tech.cd().beta_L / tech.cd().variable_returns();
    return LogConstraint::linear(0.0, a, 1.0 - a, 0.0);
  }
  const auto& c = tech.ces_params();
  return LogConstraint::ces(1.0 / c.sigma, c.sigma, -std::numeric_limits<double>::infinity(), std::log(c.beta_L),
                            std::log(c.beta_M), 0.0);
}

}  // namespace detail

// Numeric short-run cost minimization
//   min pL L + pM M  s.t.  F(K, h(K, L, M)) >= target,
// solved in log-input space. `target` is planned output net of exp(omega) and
// calE. `lambda` in the result is dC/d(target).
inline CostSolution cost_min_numeric(const Technology& tech, double K, double pL, double pM, double target,
                                     const KktOptions& opt = {}) {
  detail::require_positive(K, "K");
  detail::require_positive(pL, "pL");
  detail::require_positive(pM, "pM");
  detail::require_positive(target, "target output");
  const auto [lo, hi] = tech.outer_range(K);
  if (!(target > lo && target < hi)) throw DomainError("target output is outside the attainable range F(K, (0, inf))");

  CostSolution sol = detail::solve_log_kkt(detail::output_constraint(tech, std::log(K), std::log(target)), pL, pM, opt);
  // The solver multiplier is dC/dlog(target).
  sol.lambda /= target;
  return sol;
}

// Numeric program for the unit cost: min pL L + pM M s.t. h(L, M) >= 1.
inline CostSolution c2_numeric(const Technology& tech, double K, double pL, double pM, const KktOptions& opt = {}) {
  detail::require_positive(K, "K");
  detail::require_positive(pL, "pL");
  detail::require_positive(pM, "pM");
  return detail::solve_log_kkt(detail::aggregate_constraint(tech), pL, pM, opt);
}

// C2(K, pL, pM): the closed-form dual unit cost, checked against the numeric
// unit program. Throws SolverError if the two disagree beyond 1e-6 relative.
inline C2Value c2_min(const Technology& tech, double K, double pL, double pM) {
  C2Value out;
  out.pL = pL;
  out.pM = pM;
  out.value = tech.aggregate().unit_cost(pL, pM);
  out.numeric = c2_numeric(tech, K, pL, pM).total_cost;
  if (std::abs(out.numeric - out.value) > 1e-6 * out.value)
    throw SolverError("closed-form unit cost disagrees with the numeric unit program");
  return out;
}

// F^{-1}(K, y): the h with F(K, h) = y, by bracketed root finding on log h.
inline double invert_outer(const Technology& tech, double K, double y) {
  detail::require_positive(K, "K");
  detail::require_positive(y, "output");
  const auto [lo, hi] = tech.outer_range(K);
  if (!(y > lo && y < hi)) throw DomainError("output is outside the range of F(K, .)");
  const double log_K = std::log(K), log_y = std::log(y);
  const double u =
      detail::find_root_expanding([&](double lh) { return tech.log_outer_at(log_K, lh) - log_y; }, 0.0, 1.0, 1e-14, 12);
  return std::exp(u);
}

// Relative gap between the numeric minimum cost and F^{-1}(K, target/e^omega) * C2.
inline double factorization_check(const Technology& tech, double K, double pL, double pM, double target,
                                  double omega) {
  detail::require_finite(omega, "omega");
  const double y = target / std::exp(omega);
  const double numeric = cost_min_numeric(tech, K, pL, pM, y).total_cost;
  const double factored = invert_outer(tech, K, y) * c2_min(tech, K, pL, pM).value;
  return std::abs(numeric - factored) / numeric;
}

// Closed-form short-run cost of producing F(K, h) = y.
//   CD:  nu (y K^-beta_K)^(1/nu) (pL/beta_L)^(beta_L/nu) (pM/beta_M)^(beta_M/nu), nu = beta_L + beta_M
//   CES: (y^(sigma/v) - beta_K K^sigma)^(1/sigma) B^((sigma-1)/sigma)
inline double cost_closed_form(const Technology& tech, double K, double pL, double pM, double y) {
  detail::require_positive(K, "K");
  detail::require_positive(pL, "pL");
  detail::require_positive(pM, "pM");
  detail::require_positive(y, "output");
  if (tech.kind() == TechKind::CobbDouglas) {
    const auto& p = tech.cd();
    const double nu = p.variable_returns();
    return nu * std::exp((std::log(y) - p.beta_K * std::log(K)) / nu + p.beta_L / nu * std::log(pL / p.beta_L) +
                         p.beta_M / nu * std::log(pM / p.beta_M));
  }
  const auto& c = tech.ces_params();
  const double core = std::pow(y, c.sigma / c.v) - c.beta_K() * std::pow(K, c.sigma);
  if (!(core > 0.0)) throw DomainError("output is outside the range of the CES technology");
  const auto agg = tech.aggregate();
  return std::pow(core, 1.0 / c.sigma) * std::exp((c.sigma - 1.0) / c.sigma * agg.log_B(std::log(pL), std::log(pM)));
}

// Marginal cost in closed form written in the technology parameters:
//   CD:  (1/nu) y^(1/nu - 1) K^(-beta_K/nu) C2
//   CES: (1/v) (y^(sigma/v) - beta_K K^sigma)^((1-sigma)/sigma) y^(sigma/v - 1) C2
// divided by exp(omega) calE, with y = F(K, h).
inline double marginal_cost_parametric(const Technology& tech, double K, double y, double pL, double pM,
                                       double omega, double calE) {
  detail::require_positive(K, "K");
  detail::require_positive(y, "output");
  detail::require_positive(calE, "calE");
  const double C2 = tech.aggregate().unit_cost(pL, pM);
  double dC;
  if (tech.kind() == TechKind::CobbDouglas) {
    const auto& p = tech.cd();
    const double nu = p.variable_returns();
    dC = std::exp((1.0 / nu - 1.0) * std::log(y) - p.beta_K / nu * std::log(K)) * C2 / nu;
  } else {
    const auto& c = tech.ces_params();
    const double core = std::pow(y, c.sigma / c.v) - c.beta_K() * std::pow(K, c.sigma);
    dC = std::pow(core, (1.0 - c.sigma) / c.sigma) * std::pow(y, c.sigma / c.v - 1.0) * C2 / c.v;
  }
  return dC / (std::exp(omega) * calE);
}

// lambda = C2 / (dF/dh(K, h) exp(omega) calE), the derivative of cost with
// respect to planned (expected) output.
inline double marginal_cost_closed_form(const Technology& tech, double K, double L, double M, double pL, double pM,
                                        double omega, double calE) {
  detail::require_positive(calE, "calE");
  detail::require_finite(omega, "omega");
  const double h = tech.h(K, L, M);
  return tech.aggregate().unit_cost(pL, pM) / (tech.outer_dh(K, h) * std::exp(omega) * calE);
}

// Input price implied by the cost-minimization first-order condition,
// C2 * dh/dV. The calE factors of the multiplier and of the expected-output
// derivative cancel, so none appears here.
inline double foc_input_price(const Technology& tech, double K, double L, double M, double pL, double pM,
                              FlexibleInput which) {
  detail::require_positive(K, "K");
  const auto agg = tech.aggregate();
  return agg.unit_cost(pL, pM) * agg.derivative(L, M, which);
}

}  // namespace revpf
