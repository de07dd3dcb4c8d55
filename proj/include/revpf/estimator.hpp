#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "revpf/costmin.hpp"
#include "revpf/detail/numeric.hpp"
#include "revpf/model.hpp"
#include "revpf/simulator.hpp"

namespace revpf {

enum class Mode { Quantity, Revenue };

inline const char* name_of(Mode m) { return m == Mode::Quantity ? "quantity" : "revenue"; }

inline Mode parse_mode(std::string_view s) {
  if (s == "quantity" || s == "q") return Mode::Quantity;
  if (s == "revenue" || s == "r") return Mode::Revenue;
  throw ArgumentError("unknown mode '" + std::string(s) + "' (expected quantity or revenue)");
}

// ---------------------------------------------------------------------------
// First stage: log Q (or log R) on a polynomial in (k, l, m, log pL, log pM)

struct FirstStageSpec {
  Mode mode = Mode::Quantity;
  int degree = 3;
};

struct FirstStage {
  std::vector<double> fitted;     // q-hat* or r-hat*, aligned with panel rows
  std::vector<double> residuals;  // eps-hat
  int degree_requested = 0;
  int degree_used = 0;
  std::vector<std::string> regressors;  // base variables kept
  std::vector<std::string> warnings;

  double residual_variance() const {
    if (residuals.empty()) return 0.0;
    double s = 0.0;
    for (double e : residuals) s += e * e;
    return s / static_cast<double>(residuals.size());
  }
  // calE estimated from the residual variance, exp(var(eps-hat) / 2).
  double calE_hat() const { return std::exp(0.5 * residual_variance()); }
};

namespace detail {

// Exponent vectors of all monomials of total degree <= d in n variables,
// ordered by degree.
inline std::vector<std::vector<int>> monomials(int n, int d) {
  std::vector<std::vector<int>> out;
  std::vector<int> e(static_cast<std::size_t>(n), 0);
  for (int deg = 0; deg <= d; ++deg) {
    // distribute deg over n slots, lexicographic
    std::function<void(int, int)> rec = [&](int pos, int left) {
      if (pos == n - 1) {
        e[static_cast<std::size_t>(pos)] = left;
        out.push_back(e);
        return;
      }
      for (int a = left; a >= 0; --a) {
        e[static_cast<std::size_t>(pos)] = a;
        rec(pos + 1, left - a);
      }
    };
    if (n == 0) {
      if (deg == 0) out.push_back({});
      continue;
    }
    rec(0, deg);
  }
  return out;
}

inline Eigen::MatrixXd poly_design(const Eigen::MatrixXd& z, int degree) {
  const auto terms = monomials(static_cast<int>(z.cols()), degree);
  Eigen::MatrixXd X(z.rows(), static_cast<Eigen::Index>(terms.size()));
  for (std::size_t j = 0; j < terms.size(); ++j) {
    Eigen::VectorXd col = Eigen::VectorXd::Ones(z.rows());
    for (Eigen::Index v = 0; v < z.cols(); ++v)
      for (int p = 0; p < terms[j][static_cast<std::size_t>(v)]; ++p) col.array() *= z.col(v).array();
    X.col(static_cast<Eigen::Index>(j)) = col;
  }
  return X;
}

constexpr double kRankTolerance = 1e-10;

}  // namespace detail

inline FirstStage first_stage_project(const Panel& panel, const FirstStageSpec& spec) {
  if (spec.degree < 1) throw ArgumentError("first-stage polynomial degree must be >= 1");
  if (spec.mode == Mode::Quantity && !panel.has_Q)
    throw ArgumentError("quantities unobserved: quantity mode needs the Q column (revenue-only panel)");
  FirstStage fs;
  fs.degree_requested = spec.degree;
  const auto n = static_cast<Eigen::Index>(panel.size());
  if (n == 0) throw EstimationError("first stage needs a non-empty panel");

  const std::vector<std::string> names{"k", "l", "m", "pl", "pm"};
  Eigen::MatrixXd z(n, 5);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = panel.rows[static_cast<std::size_t>(i)];
    z.row(i) << std::log(r.K), std::log(r.L), std::log(r.M), std::log(r.pL), std::log(r.pM);
    y(i) = std::log(spec.mode == Mode::Quantity ? r.Q : r.R);
  }
  if (!z.allFinite() || !y.allFinite()) throw DomainError("first stage needs strictly positive K, L, M, prices and Q/R");

  // Standardize, then keep a linearly independent subset of the base
  // variables (constant columns and exact collinearities are dropped).
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    const double mean = z.col(j).mean();
    const double sd = std::sqrt((z.col(j).array() - mean).square().mean());
    z.col(j).array() -= mean;
    if (sd > 0.0) z.col(j) /= sd;
  }
  Eigen::MatrixXd base(n, 6);
  base.col(0).setOnes();
  base.rightCols(5) = z;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> bqr(base);
  bqr.setThreshold(detail::kRankTolerance);
  std::vector<Eigen::Index> keep;
  {
    std::vector<bool> independent(6, false);
    for (Eigen::Index r = 0; r < bqr.rank(); ++r) independent[static_cast<std::size_t>(bqr.colsPermutation().indices()(r))] = true;
    for (Eigen::Index j = 1; j < 6; ++j) {
      if (independent[static_cast<std::size_t>(j)]) {
        keep.push_back(j - 1);
        fs.regressors.push_back(names[static_cast<std::size_t>(j - 1)]);
      } else {
        fs.warnings.push_back("regressor " + names[static_cast<std::size_t>(j - 1)] +
                              " is constant or collinear with the others; dropped");
      }
    }
  }
  Eigen::MatrixXd zk(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) zk.col(static_cast<Eigen::Index>(j)) = z.col(keep[j]);

  Eigen::VectorXd fitted;
  bool done = false;
  for (int d = spec.degree; d >= 1 && !done; --d) {
    const Eigen::MatrixXd X = detail::poly_design(zk, d);
    if (X.cols() > n) {
      fs.warnings.push_back("degree " + std::to_string(d) + " has more terms than observations; reducing degree");
      continue;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    qr.setThreshold(detail::kRankTolerance);
    if (qr.rank() < X.cols()) {
      fs.warnings.push_back("rank-deficient design at degree " + std::to_string(d) + "; reducing degree");
      continue;
    }
    fitted = X * qr.solve(y);
    fs.degree_used = d;
    done = true;
  }
  if (!done) {
    const Eigen::MatrixXd X = detail::poly_design(zk, 1);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(X);
    cod.setThreshold(detail::kRankTolerance);
    fitted = X * cod.solve(y);
    fs.degree_used = 1;
    fs.warnings.push_back("design rank-deficient at every degree; using the minimum-norm linear projection");
  }
  fs.fitted.assign(fitted.data(), fitted.data() + n);
  fs.residuals.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) fs.residuals[static_cast<std::size_t>(i)] = y(i) - fitted(i);
  return fs;
}

// ---------------------------------------------------------------------------
// Moment systems

// Per-observation data the residual function reads.
struct MomentRow {
  double k = 0, l = 0, m = 0, pl = 0, pm = 0;
  double log_s_star = 0;  // log target share of the revenue-mode input
  double fitted = 0;      // q-hat* or r-hat*
};

struct ParamBox {
  std::vector<double> lower, upper;              // hard bounds
  std::vector<double> start_lower, start_upper;  // multi-start draw box
};

inline ParamBox default_box(TechKind kind) {
  if (kind == TechKind::CobbDouglas)
    return {{0.0, 0.01, 0.01}, {1.5, 1.5, 1.5}, {0.05, 0.1, 0.1}, {0.5, 0.6, 0.6}};
  // sigma, beta_L, beta_M, v
  return {{-2.0, 0.05, 0.05, 0.3}, {0.95, 0.95, 0.95, 2.0}, {-0.8, 0.1, 0.1, 0.6}, {0.85, 0.45, 0.45, 1.4}};
}

// Default instruments {1, k_t, l_{t-1}, m_{t-1}, log pL_{t-1}, log pM_{t-1}}.
// Under exact cost minimization l - m is linear in log(pL/pM), so l_lag is
// redundant and the set carries one fewer independent moment than it lists.
inline std::vector<std::string> default_instruments() { return {"1", "k", "l_lag", "m_lag", "pl_lag", "pm_lag"}; }

// Over-identifying set used by the shipped configs: lagged inputs, current
// (exogenous) input prices, and second-order terms.
inline std::vector<std::string> extended_instruments() {
  return {"1", "k", "k_lag", "m_lag", "pl_lag", "pm_lag", "pl", "pm",
          "k*k", "k*m_lag", "m_lag*m_lag", "pl*pl", "pm*pm", "pl*pm"};
}

// Named presets or a comma-separated list.
inline std::vector<std::string> parse_instruments(std::string_view text) {
  if (text == "default") return default_instruments();
  if (text == "extended") return extended_instruments();
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    std::string item(text.substr(pos, comma - pos));
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item.empty()) throw ArgumentError("empty instrument name in '" + std::string(text) + "'");
    out.push_back(std::move(item));
    pos = comma + 1;
  }
  return out;
}

// Residual xi(theta) = omega_t(theta) - Poly_g(omega_{t-1}(theta)) with
// omega(theta) = fitted - f_theta(observables), g concentrated out by least
// squares, and moments E[Z xi] = 0.
//   quantity: f_theta = log F(K, h(L, M))
//   revenue:  f_theta = parametric log target revenue (reads l, m, prices, s*)
class MomentSystem {
 public:
  Mode mode = Mode::Quantity;
  TechKind kind = TechKind::CobbDouglas;
  int g_degree = 1;
  double calE = 1.0;
  FlexibleInput revenue_input = FlexibleInput::M;
  std::vector<std::string> param_names;
  ParamBox box;
  std::vector<std::string> instrument_names;
  std::vector<MomentRow> rows;                         // sorted by (firm, t)
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row t, row t-1)
  Eigen::MatrixXd Z;                                   // pairs x instruments

  std::size_t n_params() const { return param_names.size(); }
  std::size_t n_moments() const { return static_cast<std::size_t>(Z.cols()); }
  std::size_t n_pairs() const { return pairs.size(); }

  std::size_t param_index(std::string_view name) const {
    for (std::size_t i = 0; i < param_names.size(); ++i)
      if (param_names[i] == name) return i;
    throw ArgumentError("unknown parameter '" + std::string(name) + "'");
  }

  bool in_bounds(std::span<const double> theta) const {
    for (std::size_t i = 0; i < theta.size(); ++i)
      if (!(theta[i] >= box.lower[i] && theta[i] <= box.upper[i])) return false;
    return true;
  }

  // omega(theta) for every row; false when theta is not a valid technology.
  bool omega(std::span<const double> theta, Eigen::VectorXd& out) const {
    if (theta.size() != n_params()) throw ArgumentError("parameter vector has the wrong length");
    std::optional<Technology> tech;
    try {
      tech = Technology::from_vector(kind, theta);
    } catch (const Error&) {
      return false;
    }
    out.resize(static_cast<Eigen::Index>(rows.size()));
    // Per-theta constants are hoisted out of the row loop; the formulas are
    // those of output_constraint and log_revenue (cross-checked in the tests).
    const auto n = rows.size();
    if (mode == Mode::Quantity && kind == TechKind::CobbDouglas) {
      const auto& c = tech->cd();
      for (std::size_t i = 0; i < n; ++i) {
        const auto& r = rows[i];
        out(static_cast<Eigen::Index>(i)) = r.fitted - (c.beta_K * r.k + c.beta_L * r.l + c.beta_M * r.m);
      }
    } else if (mode == Mode::Quantity) {
      const auto& c = tech->ces_params();
      const double s = c.sigma, scale = c.v / c.sigma;
      const double a0 = std::log(c.beta_K()), a1 = std::log(c.beta_L), a2 = std::log(c.beta_M);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& r = rows[i];
        const double x0 = a0 + s * r.k, x1 = a1 + s * r.l, x2 = a2 + s * r.m;
        const double top = std::max({x0, x1, x2});
        const double lse = top + std::log(std::exp(x0 - top) + std::exp(x1 - top) + std::exp(x2 - top));
        out(static_cast<Eigen::Index>(i)) = r.fitted - scale * lse;
      }
    } else if (kind == TechKind::CobbDouglas) {
      const auto& c = tech->cd();
      if (!(c.beta_L > 0.0 && c.beta_M > 0.0)) return false;
      const double a = c.beta_L / (c.beta_L + c.beta_M);
      const double b0 = cd_revenue_intercept(c.beta_L, c.beta_M, revenue_input) - std::log(calE);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& r = rows[i];
        out(static_cast<Eigen::Index>(i)) = r.fitted - (b0 + a * (r.l + r.pl) + (1.0 - a) * (r.m + r.pm) - r.log_s_star);
      }
    } else {
      const auto& c = tech->ces_params();
      if (!(c.beta_L > 0.0 && c.beta_M > 0.0)) return false;
      const double s = c.sigma;
      const double lbl = std::log(c.beta_L), lbm = std::log(c.beta_M);
      const double e = s / (s - 1.0), w = -1.0 / (s - 1.0);
      const double c1 = (1.0 - s) / s, c2 = (s - 1.0) / s;
      const bool on_l = revenue_input == FlexibleInput::L;
      const double b0 = (on_l ? lbl : lbm) - std::log(calE);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& r = rows[i];
        const double log_sum = detail::log_add_exp(lbl + s * r.l, lbm + s * r.m);
        const double log_B = detail::log_add_exp(e * r.pl + w * lbl, e * r.pm + w * lbm);
        out(static_cast<Eigen::Index>(i)) =
            r.fitted - (b0 + s * (on_l ? r.l : r.m) + c1 * log_sum + c2 * log_B - r.log_s_star);
      }
    }
    return out.allFinite();
  }

  struct Residuals {
    Eigen::VectorXd xi;
    Eigen::VectorXd g;  // coefficients of Poly_g(omega_{t-1}), constant first
    bool valid = false;
  };

  Residuals residuals(std::span<const double> theta) const {
    Residuals res;
    Eigen::VectorXd w;
    if (!omega(theta, w)) return res;
    const auto n = static_cast<Eigen::Index>(pairs.size());
    Eigen::VectorXd cur(n);
    Eigen::MatrixXd X(n, g_degree + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto [a, b] = pairs[static_cast<std::size_t>(i)];
      cur(i) = w(static_cast<Eigen::Index>(a));
      const double lag = w(static_cast<Eigen::Index>(b));
      double p = 1.0;
      for (int d = 0; d <= g_degree; ++d) {
        X(i, d) = p;
        p *= lag;
      }
    }
    // Least-squares g; a rank-revealing solve keeps the projection well
    // defined when omega_{t-1}(theta) is constant.
    // Normal equations on the small Gram matrix: X has only g_degree + 1 columns.
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X.transpose() * X);
    qr.setThreshold(detail::kRankTolerance);
    res.g = qr.solve(X.transpose() * cur);
    res.xi = cur - X * res.g;
    res.valid = res.xi.allFinite();
    return res;
  }

  // Stacked sample moments Z' xi / n; NaN when theta is invalid.
  Eigen::VectorXd moments(std::span<const double> theta) const {
    const auto r = residuals(theta);
    if (!r.valid) return Eigen::VectorXd::Constant(Z.cols(), std::numeric_limits<double>::quiet_NaN());
    return Z.transpose() * r.xi / static_cast<double>(pairs.size());
  }

  // m' W m (infinite when theta is invalid).
  double objective(std::span<const double> theta, const Eigen::MatrixXd& W) const {
    const Eigen::VectorXd m = moments(theta);
    if (!m.allFinite()) return std::numeric_limits<double>::infinity();
    return m.dot(W * m);
  }

  double objective(std::span<const double> theta) const {
    return objective(theta, Eigen::MatrixXd::Identity(Z.cols(), Z.cols()));
  }

  // (1/n) sum (z_i xi_i)(z_i xi_i)'
  Eigen::MatrixXd moment_covariance(std::span<const double> theta) const {
    const auto r = residuals(theta);
    if (!r.valid) throw EstimationError("moment covariance requested at an invalid parameter vector");
    const Eigen::MatrixXd G = Z.array().colwise() * r.xi.array();
    return G.transpose() * G / static_cast<double>(pairs.size());
  }
};

struct MomentSpec {
  int g_degree = 1;
  std::vector<std::string> instruments = default_instruments();
  FlexibleInput revenue_input = FlexibleInput::M;
  std::optional<double> calE;  // known constant; otherwise exp(var(eps-hat)/2)
  std::optional<ParamBox> box;
};

namespace detail {

inline double instrument_value(const MomentRow& cur, const MomentRow& lag, std::string_view name) {
  if (const auto star = name.find('*'); star != std::string_view::npos)
    return instrument_value(cur, lag, name.substr(0, star)) * instrument_value(cur, lag, name.substr(star + 1));
  if (name == "1") return 1.0;
  const bool is_lag = name.size() > 4 && name.substr(name.size() - 4) == "_lag";
  const auto base = is_lag ? name.substr(0, name.size() - 4) : name;
  const MomentRow& r = is_lag ? lag : cur;
  if (base == "k") return r.k;
  if (base == "l") return r.l;
  if (base == "m") return r.m;
  if (base == "pl") return r.pl;
  if (base == "pm") return r.pm;
  throw ArgumentError("unknown instrument '" + std::string(name) +
                      "' (use 1, k, l, m, pl, pm, optionally with the suffix _lag, or products a*b)");
}

inline MomentSystem build_moments(Mode mode, TechKind kind, const std::vector<double>& fitted, const Panel& panel,
                                  const MomentSpec& spec, double calE) {
  if (spec.g_degree < 1) throw ArgumentError("g_degree must be >= 1");
  if (fitted.size() != panel.size()) throw ArgumentError("fitted series is not aligned with the panel");
  if (spec.instruments.empty()) throw ArgumentError("at least one instrument is required");
  MomentSystem ms;
  ms.mode = mode;
  ms.kind = kind;
  ms.g_degree = spec.g_degree;
  ms.calE = calE;
  ms.revenue_input = spec.revenue_input;
  ms.param_names = Technology::param_names(kind);
  ms.box = spec.box ? *spec.box : default_box(kind);
  ms.instrument_names = spec.instruments;

  // Canonical (firm, t) order, so the system does not depend on row order.
  std::vector<std::size_t> order(panel.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ra = panel.rows[a];
    const auto& rb = panel.rows[b];
    return ra.firm_id != rb.firm_id ? ra.firm_id < rb.firm_id : ra.t < rb.t;
  });
  ms.rows.reserve(order.size());
  for (std::size_t idx : order) {
    const auto& r = panel.rows[idx];
    MomentRow mr;
    mr.k = std::log(r.K);
    mr.l = std::log(r.L);
    mr.m = std::log(r.M);
    mr.pl = std::log(r.pL);
    mr.pm = std::log(r.pM);
    mr.log_s_star = std::log(r.share(spec.revenue_input));
    mr.fitted = fitted[idx];
    ms.rows.push_back(mr);
  }
  for (std::size_t i = 1; i < order.size(); ++i) {
    const auto& a = panel.rows[order[i]];
    const auto& b = panel.rows[order[i - 1]];
    if (a.firm_id == b.firm_id && a.t == b.t + 1) ms.pairs.emplace_back(i, i - 1);
  }
  if (ms.pairs.empty()) throw EstimationError("no (t, t-1) pairs in the panel; moments need lagged observations");
  ms.Z.resize(static_cast<Eigen::Index>(ms.pairs.size()), static_cast<Eigen::Index>(spec.instruments.size()));
  for (std::size_t i = 0; i < ms.pairs.size(); ++i)
    for (std::size_t j = 0; j < spec.instruments.size(); ++j)
      ms.Z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          instrument_value(ms.rows[ms.pairs[i].first], ms.rows[ms.pairs[i].second], spec.instruments[j]);
  if (!ms.Z.allFinite()) throw DomainError("instruments must be finite");
  return ms;
}

}  // namespace detail

inline MomentSystem build_quantity_moments(TechKind kind, const FirstStage& fs, const Panel& panel,
                                           const MomentSpec& spec = {}) {
  if (!panel.has_Q) throw ArgumentError("quantities unobserved: quantity moments need the Q column");
  return detail::build_moments(Mode::Quantity, kind, fs.fitted, panel, spec, spec.calE.value_or(fs.calE_hat()));
}

inline MomentSystem build_revenue_moments(TechKind kind, const FirstStage& fs, const Panel& panel,
                                          const MomentSpec& spec = {}) {
  return detail::build_moments(Mode::Revenue, kind, fs.fitted, panel, spec, spec.calE.value_or(fs.calE_hat()));
}

// ---------------------------------------------------------------------------
// GMM

enum class Weighting { Identity, TwoStep };

inline const char* name_of(Weighting w) { return w == Weighting::Identity ? "identity" : "two-step"; }

inline Weighting parse_weighting(std::string_view s) {
  if (s == "identity") return Weighting::Identity;
  if (s == "two-step" || s == "two_step" || s == "twostep") return Weighting::TwoStep;
  throw ArgumentError("unknown weighting '" + std::string(s) + "' (expected identity or two-step)");
}

struct GmmOptions {
  Weighting weighting = Weighting::TwoStep;
  int restarts = 20;
  std::uint64_t seed = 0;
  std::vector<double> start;  // optional first start
  int max_iterations = 200;
  unsigned threads = detail::default_threads();
};

struct LocalRun {
  int restart = 0;
  int stage = 1;  // 1: identity weight, 2: efficient weight
  std::vector<double> start;
  std::vector<double> estimate;
  double objective = std::numeric_limits<double>::infinity();
  bool converged = false;
  int iterations = 0;
  std::string message;
};

struct EstimateResult {
  Mode mode = Mode::Quantity;
  TechKind kind = TechKind::CobbDouglas;
  Weighting weighting = Weighting::TwoStep;
  std::vector<std::string> param_names;
  std::vector<double> estimate;
  double objective = 0;
  std::vector<double> moments;
  Eigen::MatrixXd moment_covariance;
  Eigen::MatrixXd weight;
  std::vector<double> g_coefficients;
  std::vector<LocalRun> runs;             // every local search, in restart order
  std::vector<LocalRun> minima;           // distinct converged end points of the final stage
  std::vector<std::string> non_identified_axes;
  std::map<std::string, double> identified_functionals;
  std::size_t n_obs = 0;
  std::size_t n_pairs = 0;
  int first_stage_degree = 0;
  double calE = 1;
  std::vector<std::string> instruments;
  std::vector<std::string> warnings;
  std::map<std::string, std::string> provenance;
  bool converged = false;
};

namespace detail {

// Levenberg-Marquardt on r(theta) = U m(theta) with W = U'U and a central
// finite-difference Jacobian. Bounds are handled by an active set: a coordinate
// sitting on a bound with the gradient pointing outward is frozen for the step.
inline LocalRun levenberg_marquardt(const MomentSystem& ms, const Eigen::MatrixXd& U, std::vector<double> theta,
                                    int max_iterations) {
  LocalRun run;
  run.start = theta;
  const auto p = static_cast<Eigen::Index>(theta.size());
  const auto& lo = ms.box.lower;
  const auto& hi = ms.box.upper;
  auto clamp = [&](std::vector<double>& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::clamp(t[i], lo[i], hi[i]);
  };
  auto resid = [&](const std::vector<double>& t) -> Eigen::VectorXd {
    const Eigen::VectorXd m = ms.moments(t);
    if (!m.allFinite()) return m;
    return U * m;
  };
  clamp(theta);
  Eigen::VectorXd r = resid(theta);
  if (!r.allFinite()) {
    run.message = "objective undefined at the start";
    run.estimate = theta;
    return run;
  }
  double f = r.squaredNorm();
  double damping = 1e-3;
  int it = 0;
  for (; it < max_iterations; ++it) {
    Eigen::MatrixXd J(r.size(), p);
    bool jac_ok = true;
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto sj = static_cast<std::size_t>(j);
      const double h = 1e-6 * std::max(1.0, std::abs(theta[sj]));
      auto tp = theta, tm = theta;
      tp[sj] = std::min(theta[sj] + h, hi[sj]);
      tm[sj] = std::max(theta[sj] - h, lo[sj]);
      Eigen::VectorXd rp = resid(tp), rm = resid(tm);
      if (!rp.allFinite() || !rm.allFinite()) {
        // one-sided fallback
        if (rp.allFinite()) rm = r, tm[sj] = theta[sj];
        else if (rm.allFinite()) rp = r, tp[sj] = theta[sj];
        else {
          jac_ok = false;
          break;
        }
      }
      J.col(j) = tp[sj] > tm[sj] ? Eigen::VectorXd((rp - rm) / (tp[sj] - tm[sj])) : Eigen::VectorXd::Zero(r.size());
    }
    if (!jac_ok) {
      run.message = "Jacobian undefined";
      break;
    }
    const Eigen::VectorXd g = J.transpose() * r;
    const Eigen::MatrixXd A = J.transpose() * J;
    const double scale = std::max(A.diagonal().maxCoeff(), 1e-300);
    std::vector<Eigen::Index> free;
    for (Eigen::Index j = 0; j < p; ++j) {
      const auto sj = static_cast<std::size_t>(j);
      const bool pinned = (theta[sj] <= lo[sj] && g(j) > 0.0) || (theta[sj] >= hi[sj] && g(j) < 0.0);
      // Exactly flat coordinates cannot move the objective; leave them alone.
      if (!pinned && A(j, j) > 0.0) free.push_back(j);
    }
    if (free.empty()) {
      run.converged = true;
      run.message = "converged: stationary on the bounds";
      break;
    }
    const auto nf = static_cast<Eigen::Index>(free.size());
    Eigen::MatrixXd Af(nf, nf);
    Eigen::VectorXd gf(nf);
    for (Eigen::Index a = 0; a < nf; ++a) {
      gf(a) = g(free[a]);
      for (Eigen::Index b = 0; b < nf; ++b) Af(a, b) = A(free[a], free[b]);
    }
    bool accepted = false;
    while (damping < 1e16) {
      Eigen::MatrixXd Ad = Af;
      for (Eigen::Index a = 0; a < nf; ++a) Ad(a, a) += damping * (Af(a, a) + 1e-9 * scale);
      const Eigen::VectorXd step = Ad.ldlt().solve(-gf);
      auto trial = theta;
      for (Eigen::Index a = 0; a < nf; ++a) trial[static_cast<std::size_t>(free[a])] += step(a);
      clamp(trial);
      const Eigen::VectorXd rt = resid(trial);
      const double ft = rt.allFinite() ? rt.squaredNorm() : std::numeric_limits<double>::infinity();
      if (ft < f) {
        double moved = 0.0;
        for (std::size_t j = 0; j < trial.size(); ++j)
          moved = std::max(moved, std::abs(trial[j] - theta[j]) / (1.0 + std::abs(theta[j])));
        const double df = f - ft;
        theta = trial;
        r = rt;
        f = ft;
        const bool heavy = damping > 1e3;  // tiny steps under heavy damping are not convergence
        damping = std::max(damping / 3.0, 1e-12);
        accepted = true;
        if ((!heavy && ((df <= 1e-10 * f && moved <= 1e-5) || moved <= 1e-10)) || f <= 1e-30) {
          run.converged = true;
          run.message = "converged: negligible improvement";
        }
        break;
      }
      damping *= 4.0;
    }
    if (!accepted) {
      // No decrease at any damping: a numerical local minimum.
      run.converged = true;
      run.message = "converged: no descent step";
      break;
    }
    if (run.converged) break;
  }
  if (it >= max_iterations && !run.converged) run.message = "maximum iterations reached";
  run.iterations = it;
  run.estimate = theta;
  run.objective = f;
  return run;
}

inline Eigen::MatrixXd weight_factor(const Eigen::MatrixXd& W) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(W);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  return (es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose());
}

// Pseudo-inverse of a covariance matrix with a relative eigenvalue floor.
inline Eigen::MatrixXd efficient_weight(const Eigen::MatrixXd& S) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  const double top = std::max(es.eigenvalues().maxCoeff(), 0.0);
  Eigen::VectorXd inv(es.eigenvalues().size());
  for (Eigen::Index i = 0; i < inv.size(); ++i) {
    const double e = es.eigenvalues()(i);
    inv(i) = e > 1e-12 * top && e > 0.0 ? 1.0 / e : 0.0;
  }
  if (top <= 0.0) return Eigen::MatrixXd::Identity(S.rows(), S.cols());
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

inline std::vector<LocalRun> distinct_minima(std::vector<LocalRun> runs) {
  std::vector<LocalRun> out;
  std::sort(runs.begin(), runs.end(), [](const LocalRun& a, const LocalRun& b) {
    return a.objective != b.objective ? a.objective < b.objective : a.restart < b.restart;
  });
  for (auto& r : runs) {
    if (!r.converged) continue;
    bool dup = false;
    for (const auto& o : out) {
      double d = 0.0;
      for (std::size_t j = 0; j < r.estimate.size(); ++j)
        d = std::max(d, std::abs(r.estimate[j] - o.estimate[j]) / (1.0 + std::abs(o.estimate[j])));
      if (d <= 1e-6) {
        dup = true;
        break;
      }
    }
    if (!dup) out.push_back(r);
  }
  return out;
}

}  // namespace detail

// (Z'Z/n)^-1: makes the objective invariant to rescaling an instrument.
inline Eigen::MatrixXd instrument_weight(const MomentSystem& ms) {
  return detail::efficient_weight(ms.Z.transpose() * ms.Z / static_cast<double>(ms.n_pairs()));
}

// Start points: the user start (or the box centre) followed by uniform draws
// from the start box.
inline std::vector<std::vector<double>> gmm_starts(const MomentSystem& ms, const GmmOptions& opt) {
  const std::size_t p = ms.n_params();
  std::vector<std::vector<double>> starts;
  if (!opt.start.empty()) {
    if (opt.start.size() != p) throw ArgumentError("start vector has the wrong length");
    if (!ms.in_bounds(opt.start)) throw ArgumentError("start vector lies outside the parameter bounds");
    starts.push_back(opt.start);
  } else {
    std::vector<double> c(p);
    for (std::size_t j = 0; j < p; ++j) c[j] = 0.5 * (ms.box.start_lower[j] + ms.box.start_upper[j]);
    starts.push_back(c);
  }
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (starts.size() < static_cast<std::size_t>(std::max(1, opt.restarts))) {
    std::vector<double> s(p);
    for (std::size_t j = 0; j < p; ++j) s[j] = ms.box.start_lower[j] + u(rng) * (ms.box.start_upper[j] - ms.box.start_lower[j]);
    starts.push_back(s);
  }
  return starts;
}

inline EstimateResult gmm_minimize(const MomentSystem& ms, const GmmOptions& opt = {}) {
  if (opt.restarts < 1) throw ArgumentError("restarts must be >= 1");
  const auto nz = static_cast<Eigen::Index>(ms.n_moments());
  if (nz < static_cast<Eigen::Index>(ms.n_params()))
    throw ArgumentError("fewer moments than parameters; add instruments");
  EstimateResult res;
  res.mode = ms.mode;
  res.kind = ms.kind;
  res.weighting = opt.weighting;
  res.param_names = ms.param_names;
  res.n_obs = ms.rows.size();
  res.n_pairs = ms.n_pairs();
  res.calE = ms.calE;
  res.instruments = ms.instrument_names;

  const auto starts = gmm_starts(ms, opt);
  auto run_stage = [&](const Eigen::MatrixXd& W, const std::vector<std::vector<double>>& from, int stage) {
    const Eigen::MatrixXd U = detail::weight_factor(W);
    std::vector<LocalRun> runs(from.size());
    detail::parallel_for(from.size(), opt.threads, [&](std::size_t i) {
      runs[i] = detail::levenberg_marquardt(ms, U, from[i], opt.max_iterations);
      runs[i].restart = static_cast<int>(i);
      runs[i].stage = stage;
    });
    return runs;
  };
  auto best_of = [](const std::vector<LocalRun>& runs) -> const LocalRun* {
    const LocalRun* best = nullptr;
    for (const auto& r : runs)
      if (r.converged && std::isfinite(r.objective) && (!best || r.objective < best->objective)) best = &r;
    return best;
  };
  auto fail = [&](const std::vector<LocalRun>& runs) {
    std::string trace = "all restarts failed to converge:";
    for (const auto& r : runs) trace += " [" + std::to_string(r.restart) + "] " + r.message + ";";
    throw EstimationError(trace);
  };

  // Two-step starts from the instrument-scaled weight (Z'Z/n)^-1; identity
  // weighting is kept literal.
  Eigen::MatrixXd W = Eigen::MatrixXd::Identity(nz, nz);
  if (opt.weighting == Weighting::TwoStep) W = instrument_weight(ms);
  auto runs = run_stage(W, starts, 1);
  const LocalRun* best = best_of(runs);
  if (!best) fail(runs);
  res.runs = runs;

  if (opt.weighting == Weighting::TwoStep) {
    const Eigen::MatrixXd S = ms.moment_covariance(best->estimate);
    W = detail::efficient_weight(S);
    std::vector<std::vector<double>> from;
    for (const auto& r : runs) from.push_back(r.converged ? r.estimate : r.start);
    auto runs2 = run_stage(W, from, 2);
    if (!best_of(runs2)) fail(runs2);
    res.runs.insert(res.runs.end(), runs2.begin(), runs2.end());
    runs = std::move(runs2);
    best = best_of(runs);
  }

  res.estimate = best->estimate;
  res.objective = ms.objective(res.estimate, W);
  const Eigen::VectorXd m = ms.moments(res.estimate);
  res.moments.assign(m.data(), m.data() + m.size());
  res.moment_covariance = ms.moment_covariance(res.estimate);
  res.weight = W;
  const auto rr = ms.residuals(res.estimate);
  res.g_coefficients.assign(rr.g.data(), rr.g.data() + rr.g.size());
  res.minima = detail::distinct_minima(runs);
  res.converged = true;

  if (ms.mode == Mode::Revenue) {
    res.non_identified_axes = ms.kind == TechKind::CobbDouglas ? std::vector<std::string>{"beta_K"}
                                                                : std::vector<std::string>{"v"};
  }
  const auto& t = res.estimate;
  if (ms.kind == TechKind::CobbDouglas) {
    res.identified_functionals["beta_L/(beta_L+beta_M)"] = t[1] / (t[1] + t[2]);
  } else {
    res.identified_functionals["sigma"] = t[0];
    res.identified_functionals["beta_L/beta_M"] = t[1] / t[2];
  }
  return res;
}

// First stage, moments and GMM in one call.
struct EstimateSpec {
  Mode mode = Mode::Quantity;
  TechKind kind = TechKind::CES;
  int first_stage_degree = 3;
  MomentSpec moments;
  GmmOptions gmm;
};

// Numerical rank of the instrument matrix (columns scaled to unit norm).
inline std::size_t instrument_rank(const MomentSystem& ms) {
  Eigen::MatrixXd Z = ms.Z;
  for (Eigen::Index j = 0; j < Z.cols(); ++j) {
    const double nrm = Z.col(j).norm();
    if (nrm > 0.0) Z.col(j) /= nrm;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
  qr.setThreshold(detail::kRankTolerance);
  return static_cast<std::size_t>(qr.rank());
}

inline EstimateResult estimate(const Panel& panel, const EstimateSpec& spec) {
  const auto fs = first_stage_project(panel, {spec.mode, spec.first_stage_degree});
  const MomentSystem ms = spec.mode == Mode::Quantity ? build_quantity_moments(spec.kind, fs, panel, spec.moments)
                                                      : build_revenue_moments(spec.kind, fs, panel, spec.moments);
  auto res = gmm_minimize(ms, spec.gmm);
  res.first_stage_degree = fs.degree_used;
  res.warnings = fs.warnings;
  const auto rank = instrument_rank(ms);
  if (rank < ms.n_moments())
    res.warnings.push_back("instrument matrix has rank " + std::to_string(rank) + " of " +
                           std::to_string(ms.n_moments()) + "; some moments are redundant");
  if (rank < ms.n_params() + 1)
    res.warnings.push_back("fewer independent moments than parameters plus the g intercept; "
                           "the system is at best just identified");
  return res;
}

}  // namespace revpf
