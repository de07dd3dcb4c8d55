#include <cmath>
#include <tuple>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "revpf/simulator.hpp"

using namespace revpf;

namespace {

SimConfig small_config(std::uint64_t seed, bool ces = false, int N = 200) {
  SimConfig cfg;
  cfg.seed = seed;
  cfg.N = N;
  cfg.T = 10;
  if (ces) cfg.tech = Technology::ces({0.3, 0.4, 0.5, 0.9});
  return cfg;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

auto fields(const FirmPeriod& r) {
  return std::tie(r.firm_id, r.t, r.K, r.L, r.M, r.pL, r.pM, r.pK, r.omega, r.eps, r.Q, r.Qstar, r.P, r.R, r.sL_star,
                  r.sM_star);
}

bool same_bits(const Panel& a, const Panel& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (fields(a.rows[i]) != fields(b.rows[i])) return false;
  return true;
}

}  // namespace

TEST(SimulatePanel, ShapeAndOrder) {
  const auto p = simulate_panel(small_config(3, false, 7), 1);
  ASSERT_EQ(p.size(), 70u);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(p.rows[i].firm_id, static_cast<std::int64_t>(i / 10));
    EXPECT_EQ(p.rows[i].t, static_cast<int>(i % 10));
  }
  EXPECT_TRUE(p.has_truth());
}

TEST(SimulatePanel, CobbDouglasSharesEqualElasticityOverMarkup) {
  const auto p = simulate_panel(small_config(11), 1);
  for (const auto& r : p.rows) {
    EXPECT_NEAR(r.sM_star, 0.30, 1e-8);
    EXPECT_NEAR(r.sL_star, 0.225, 1e-8);
  }
}

TEST(SimulatePanel, CesSharesEqualElasticityOverMarkup) {
  const auto cfg = small_config(12, true);
  const auto p = simulate_panel(cfg, 1);
  const double mu = cfg.demand.markup();
  for (const auto& r : p.rows) {
    EXPECT_LE(rel(r.sL_star * mu, output_elasticity(cfg.tech, r.K, r.L, r.M, Input::L)), 1e-8);
    EXPECT_LE(rel(r.sM_star * mu, output_elasticity(cfg.tech, r.K, r.L, r.M, Input::M)), 1e-8);
  }
}

TEST(SimulatePanel, PriceOverMarginalCostIsMarkup) {
  for (bool ces : {false, true}) {
    const auto cfg = small_config(13, ces);
    const auto p = simulate_panel(cfg, 1);
    const double calE = cfg.shocks.calE();
    for (const auto& r : p.rows) {
      const double y = r.Qstar * std::exp(-r.omega);
      const double lambda = marginal_cost_parametric(cfg.tech, r.K, y, r.pL, r.pM, r.omega, calE);
      EXPECT_LE(rel(r.P / lambda, cfg.demand.markup()), 1e-8);
    }
  }
}

TEST(SimulatePanel, PlannedOutputClearsDemand) {
  const auto cfg = small_config(14, true);
  const auto p = simulate_panel(cfg, 1);
  for (const auto& r : p.rows)
    EXPECT_LE(rel(r.Qstar, cfg.demand.scale * std::pow(r.P, -cfg.demand.eta)), 1e-9);
}

TEST(SimulatePanel, SameSeedBitIdentical) {
  const auto cfg = small_config(99, true, 50);
  EXPECT_TRUE(same_bits(simulate_panel(cfg, 1), simulate_panel(cfg, 1)));
}

TEST(SimulatePanel, ThreadCountDoesNotChangeResults) {
  const auto cfg = small_config(100, true, 37);
  EXPECT_TRUE(same_bits(simulate_panel(cfg, 1), simulate_panel(cfg, 4)));
}

TEST(SimulatePanel, FirmStreamsIndependentOfN) {
  // Firm i's history depends only on (seed, i).
  const auto a = simulate_panel(small_config(5, false, 3), 1);
  const auto b = simulate_panel(small_config(5, false, 6), 1);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(fields(a.rows[i]) == fields(b.rows[i]));
}

TEST(SimulatePanel, DifferentSeedsDiffer) {
  EXPECT_FALSE(same_bits(simulate_panel(small_config(1, false, 5), 1), simulate_panel(small_config(2, false, 5), 1)));
}

TEST(SimulatePanel, NoOutputShock) {
  auto cfg = small_config(15, true, 30);
  cfg.shocks.sigma_eps = 0.0;
  EXPECT_EQ(cfg.shocks.calE(), 1.0);
  const auto p = simulate_panel(cfg, 1);
  for (const auto& r : p.rows) {
    EXPECT_EQ(r.eps, 0.0);
    EXPECT_EQ(r.Q, r.Qstar);
    EXPECT_EQ(r.R, r.P * r.Qstar);
  }
}

TEST(SimulatePanel, EmptyPanel) {
  auto cfg = small_config(1);
  cfg.N = 0;
  const auto p = simulate_panel(cfg, 1);
  EXPECT_TRUE(p.empty());
  EXPECT_TRUE(verify_panel(p, cfg).ok());
}

TEST(SimulatePanel, InvalidConfig) {
  auto cfg = small_config(1);
  cfg.prod.rho = 1.0;
  EXPECT_THROW(simulate_panel(cfg, 1), DomainError);
  cfg = small_config(1);
  cfg.demand.eta = 1.0;
  EXPECT_THROW(simulate_panel(cfg, 1), DomainError);
  cfg = small_config(1);
  cfg.T = 0;
  EXPECT_THROW(simulate_panel(cfg, 1), DomainError);
  cfg = small_config(1);
  cfg.shocks.sigma_eps = -0.1;
  EXPECT_THROW(simulate_panel(cfg, 1), DomainError);
}

// omega_t on (1, omega_{t-1}) by OLS recovers (c0, rho) within 3 standard errors.
TEST(SimulatePanel, MarkovPropertyRecoversAr1) {
  auto cfg = small_config(21, false, 600);
  cfg.prod.c0 = 0.1;
  const auto p = simulate_panel(cfg, 1);
  std::vector<double> y, x;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p.rows[i].firm_id == p.rows[i - 1].firm_id) {
      y.push_back(p.rows[i].omega);
      x.push_back(p.rows[i - 1].omega);
    }
  const auto n = static_cast<Eigen::Index>(y.size());
  ASSERT_GE(n, 5000);
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd Y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = x[static_cast<std::size_t>(i)];
    Y(i) = y[static_cast<std::size_t>(i)];
  }
  const Eigen::Vector2d b = (X.transpose() * X).ldlt().solve(X.transpose() * Y);
  const double s2 = (Y - X * b).squaredNorm() / static_cast<double>(n - 2);
  const Eigen::Matrix2d V = s2 * (X.transpose() * X).inverse();
  EXPECT_LE(std::abs(b(0) - cfg.prod.c0), 3.0 * std::sqrt(V(0, 0)));
  EXPECT_LE(std::abs(b(1) - cfg.prod.rho), 3.0 * std::sqrt(V(1, 1)));
  EXPECT_NEAR(std::sqrt(s2), cfg.prod.sigma_xi, 0.01);
}

// Sample moments E[xi z] for z in the t-1 information set are O(1/sqrt(NT)).
TEST(SimulatePanel, InnovationOrthogonalToLaggedInformation) {
  const auto cfg = small_config(22, true, 500);
  const auto p = simulate_panel(cfg, 1);
  std::vector<double> m(5, 0.0);
  std::size_t n = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    const auto& a = p.rows[i];
    const auto& b = p.rows[i - 1];
    if (a.firm_id != b.firm_id) continue;
    const double xi = (a.omega - cfg.prod.g(b.omega)) / cfg.prod.sigma_xi;
    const double z[5] = {1.0, b.omega, std::log(a.K), std::log(b.M), std::log(b.pL)};
    for (int j = 0; j < 5; ++j) m[static_cast<std::size_t>(j)] += xi * z[j];
    ++n;
  }
  const double bound = 4.0 / std::sqrt(static_cast<double>(cfg.N * cfg.T));
  for (double v : m) EXPECT_LE(std::abs(v / static_cast<double>(n)), bound);
}

TEST(SimulatePanel, FirmSpecificMarkups) {
  auto cfg = small_config(23, false, 20);
  cfg.demand.eta_dispersion = 0.3;
  const auto p = simulate_panel(cfg, 1);
  // shares vary across firms but not within a firm
  EXPECT_GT(std::abs(p.rows[0].sM_star - p.rows[10].sM_star), 1e-6);
  EXPECT_NEAR(p.rows[0].sM_star, p.rows[5].sM_star, 1e-8);
  const auto rep = verify_panel(p, cfg);
  EXPECT_TRUE(rep.ok());
  EXPECT_TRUE(rep.checks[5].skipped);
  EXPECT_TRUE(rep.checks[6].skipped);
}

TEST(VerifyPanel, SelfGeneratedPanelPasses) {
  for (bool ces : {false, true}) {
    const auto cfg = small_config(31, ces);
    const auto rep = verify_panel(simulate_panel(cfg, 1), cfg);
    EXPECT_TRUE(rep.ok());
    EXPECT_EQ(rep.violations(), 0u);
    EXPECT_EQ(rep.rows, 2000u);
    for (const auto& c : rep.checks) {
      EXPECT_FALSE(c.skipped);
      EXPECT_LE(c.max_error, c.tolerance) << c.name;
    }
  }
}

TEST(VerifyPanel, PerturbedRevenueFlagsExactlyThoseRows) {
  const auto cfg = small_config(32, true, 30);
  auto p = simulate_panel(cfg, 1);
  const std::vector<std::size_t> bad{3, 17, 150, 299};
  for (auto i : bad) p.rows[i].R *= 1.01;
  const auto rep = verify_panel(p, cfg);
  EXPECT_FALSE(rep.ok());
  EXPECT_EQ(rep.flagged_rows, bad);
  EXPECT_EQ(rep.checks[0].violations, bad.size());
}

TEST(VerifyPanel, PerturbedPriceFailsFoc) {
  const auto cfg = small_config(33, false, 10);
  auto p = simulate_panel(cfg, 1);
  p.rows[4].pM *= 1.001;
  const auto rep = verify_panel(p, cfg);
  EXPECT_EQ(rep.flagged_rows, std::vector<std::size_t>{4});
  EXPECT_GE(rep.checks[4].violations, 1u);
}

TEST(VerifyPanel, RevenueOnlyPanelSkipsChecks) {
  const auto cfg = small_config(34, false, 10);
  auto p = simulate_panel(cfg, 1);
  p.has_Q = p.has_P = p.has_eps = p.has_omega = false;
  const auto rep = verify_panel(p, cfg);
  EXPECT_TRUE(rep.ok());
  EXPECT_TRUE(rep.checks[0].skipped);
  EXPECT_TRUE(rep.checks[1].skipped);
  EXPECT_TRUE(rep.checks[2].skipped);
  EXPECT_FALSE(rep.checks[3].skipped);
}

TEST(VerifyPanel, WrongTechnologyFails) {
  auto cfg = small_config(35, false, 10);
  const auto p = simulate_panel(cfg, 1);
  cfg.tech = Technology::cobb_douglas({0.25, 0.35, 0.4});
  EXPECT_FALSE(verify_panel(p, cfg).ok());
}
