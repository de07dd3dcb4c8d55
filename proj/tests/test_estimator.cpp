#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "revpf/estimator.hpp"

using namespace revpf;

namespace {

const Technology kCd = Technology::cobb_douglas({0.25, 0.3, 0.4});
const Technology kCes = Technology::ces({0.3, 0.4, 0.5, 0.9});

Panel sim(const Technology& tech, std::uint64_t seed, int N = 500, double sigma_eps = 0.1) {
  SimConfig cfg;
  cfg.tech = tech;
  cfg.seed = seed;
  cfg.N = N;
  cfg.shocks.sigma_eps = sigma_eps;
  return simulate_panel(cfg, 1);
}

double calE_of(double sigma_eps = 0.1) { return std::exp(0.5 * sigma_eps * sigma_eps); }

MomentSystem moments_for(const Panel& p, Mode mode, TechKind kind, std::vector<std::string> instruments = {},
                         FlexibleInput which = FlexibleInput::M) {
  const auto fs = first_stage_project(p, {mode, 3});
  MomentSpec spec;
  if (!instruments.empty()) spec.instruments = std::move(instruments);
  spec.revenue_input = which;
  spec.calE = calE_of();
  return mode == Mode::Quantity ? build_quantity_moments(kind, fs, p, spec) : build_revenue_moments(kind, fs, p, spec);
}

double corr(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

// ---------------------------------------------------------------------------
// First stage

TEST(FirstStage, NoNoiseCobbDouglasFitsExactly) {
  const auto p = sim(kCd, 1, 100, 0.0);
  for (Mode mode : {Mode::Quantity, Mode::Revenue}) {
    const auto fs = first_stage_project(p, {mode, 3});
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_NEAR(fs.residuals[i], 0.0, 1e-10);
      const double obs = std::log(mode == Mode::Quantity ? p.rows[i].Q : p.rows[i].R);
      EXPECT_NEAR(fs.fitted[i], obs, 1e-10);
    }
  }
}

TEST(FirstStage, ResidualsHaveZeroMean) {
  const auto p = sim(kCes, 2, 200);
  for (Mode mode : {Mode::Quantity, Mode::Revenue}) {
    const auto fs = first_stage_project(p, {mode, 3});
    const double mean = std::accumulate(fs.residuals.begin(), fs.residuals.end(), 0.0) / static_cast<double>(p.size());
    EXPECT_NEAR(mean, 0.0, 1e-12);
  }
}

TEST(FirstStage, FittedTracksPlannedOutput) {
  for (const auto& tech : {kCd, kCes}) {
    const auto p = sim(tech, 3);
    const auto fs = first_stage_project(p, {Mode::Quantity, 3});
    std::vector<double> qstar;
    for (const auto& r : p.rows) qstar.push_back(std::log(r.Qstar));
    EXPECT_GE(corr(fs.fitted, qstar), 0.999);
    EXPECT_NEAR(fs.calE_hat(), calE_of(), 2e-3);
  }
}

TEST(FirstStage, CollinearInputsAreDroppedWithWarning) {
  // Exact cost minimization makes l - m linear in the log price ratio.
  const auto fs = first_stage_project(sim(kCd, 4, 50), {Mode::Quantity, 3});
  EXPECT_EQ(fs.regressors.size(), 4u);
  EXPECT_FALSE(fs.warnings.empty());
  EXPECT_EQ(fs.degree_used, 3);
}

TEST(FirstStage, Errors) {
  auto p = sim(kCd, 5, 20);
  EXPECT_THROW(first_stage_project(p, {Mode::Quantity, 0}), ArgumentError);
  p.has_Q = false;
  EXPECT_THROW(first_stage_project(p, {Mode::Quantity, 3}), ArgumentError);
  EXPECT_NO_THROW(first_stage_project(p, {Mode::Revenue, 3}));
}

// ---------------------------------------------------------------------------
// Instruments

TEST(Instruments, Presets) {
  EXPECT_EQ(parse_instruments("default"), default_instruments());
  EXPECT_EQ(parse_instruments("extended"), extended_instruments());
  EXPECT_EQ(parse_instruments(" k , pl*pm "), (std::vector<std::string>{"k", "pl*pm"}));
  EXPECT_THROW(parse_instruments("k,,m_lag"), ArgumentError);
}

TEST(Instruments, ValuesAndProducts) {
  MomentRow cur{}, lag{};
  cur.k = 2;
  cur.pl = 3;
  lag.m = 5;
  EXPECT_EQ(detail::instrument_value(cur, lag, "1"), 1.0);
  EXPECT_EQ(detail::instrument_value(cur, lag, "k"), 2.0);
  EXPECT_EQ(detail::instrument_value(cur, lag, "m_lag"), 5.0);
  EXPECT_EQ(detail::instrument_value(cur, lag, "k*m_lag"), 10.0);
  EXPECT_EQ(detail::instrument_value(cur, lag, "pl*pl"), 9.0);
  EXPECT_THROW(detail::instrument_value(cur, lag, "q_lag"), ArgumentError);
}

TEST(Instruments, DefaultSetIsRankDeficient) {
  const auto p = sim(kCd, 6, 100);
  EXPECT_EQ(instrument_rank(moments_for(p, Mode::Quantity, TechKind::CobbDouglas, default_instruments())), 5u);
  const auto ext = moments_for(p, Mode::Quantity, TechKind::CobbDouglas, extended_instruments());
  EXPECT_EQ(instrument_rank(ext), ext.n_moments());
}

// ---------------------------------------------------------------------------
// Moment systems

// The hoisted omega(theta) against the model-level functions.
TEST(MomentSystem, OmegaMatchesModelFunctions) {
  std::mt19937_64 rng(7);
  for (const auto& tech : {kCd, kCes}) {
    const auto p = sim(tech, 8, 30);
    for (Mode mode : {Mode::Quantity, Mode::Revenue}) {
      for (FlexibleInput which : {FlexibleInput::L, FlexibleInput::M}) {
        const auto ms = moments_for(p, mode, tech.kind(), {}, which);
        for (int draw = 0; draw < 5; ++draw) {
          std::vector<double> theta(ms.n_params());
          for (std::size_t j = 0; j < theta.size(); ++j)
            theta[j] = std::uniform_real_distribution<double>(ms.box.start_lower[j], ms.box.start_upper[j])(rng);
          const auto t = Technology::from_vector(tech.kind(), theta);
          Eigen::VectorXd w;
          ASSERT_TRUE(ms.omega(theta, w));
          for (std::size_t i = 0; i < ms.rows.size(); ++i) {
            const auto& r = ms.rows[i];
            const double f =
                mode == Mode::Quantity
                    ? log_quantity(t, std::exp(r.k), std::exp(r.l), std::exp(r.m), 0.0, 0.0)
                    : log_revenue(t, r.l, r.m, r.pl, r.pm, r.log_s_star, ms.calE, which);
            EXPECT_NEAR(w(static_cast<Eigen::Index>(i)), r.fitted - f, 1e-11 * std::max(1.0, std::abs(f)));
          }
        }
      }
    }
  }
}

TEST(MomentSystem, QuantityMomentsSmallAtTruth) {
  for (const auto& tech : {kCd, kCes}) {
    const auto p = sim(tech, 9);
    const auto ms = moments_for(p, Mode::Quantity, tech.kind(), default_instruments());
    const auto m = ms.moments(tech.to_vector());
    const double bound = 4.0 / std::sqrt(500.0 * 9.0);
    for (Eigen::Index j = 0; j < m.size(); ++j) EXPECT_LE(std::abs(m(j)), bound) << ms.instrument_names[j];
  }
}

TEST(MomentSystem, RevenueMomentsSmallAtIdentifiedTruthForAnyV) {
  const auto p = sim(kCes, 10);
  const auto ms = moments_for(p, Mode::Revenue, TechKind::CES, default_instruments());
  const double bound = 4.0 / std::sqrt(500.0 * 9.0);
  for (double v : {0.5, 0.9, 1.7}) {
    const auto m = ms.moments(std::vector<double>{0.5, 0.3, 0.4, v});
    for (Eigen::Index j = 0; j < m.size(); ++j) EXPECT_LE(std::abs(m(j)), bound);
  }
}

TEST(MomentSystem, PermutingFirmsLeavesMomentsUnchanged) {
  const auto p = sim(kCes, 11, 120);
  Panel q = p;
  std::vector<std::int64_t> ids(120);
  std::iota(ids.begin(), ids.end(), 0);
  std::shuffle(ids.begin(), ids.end(), std::mt19937_64(3));
  for (auto& r : q.rows) r.firm_id = ids[static_cast<std::size_t>(r.firm_id)];
  std::reverse(q.rows.begin(), q.rows.end());
  for (Mode mode : {Mode::Quantity, Mode::Revenue}) {
    const auto a = moments_for(p, mode, TechKind::CES).moments(kCes.to_vector());
    const auto b = moments_for(q, mode, TechKind::CES).moments(kCes.to_vector());
    for (Eigen::Index j = 0; j < a.size(); ++j) EXPECT_NEAR(a(j), b(j), 1e-12);
  }
}

TEST(MomentSystem, RevenueObjectiveIgnoresNonIdentifiedCoordinate) {
  const auto pc = sim(kCes, 12, 100);
  const auto ces = moments_for(pc, Mode::Revenue, TechKind::CES);
  const auto pd = sim(kCd, 12, 100);
  const auto cd = moments_for(pd, Mode::Revenue, TechKind::CobbDouglas);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 10; ++i) {
    const double s = -0.5 + 1.3 * u(rng), bl = 0.1 + 0.3 * u(rng), bm = 0.1 + 0.3 * u(rng);
    EXPECT_EQ(ces.objective(std::vector<double>{s, bl, bm, 0.7}), ces.objective(std::vector<double>{s, bl, bm, 1.3}));
    EXPECT_EQ(cd.objective(std::vector<double>{0.0, bl, bm}), cd.objective(std::vector<double>{1.2, bl, bm}));
  }
}

TEST(MomentSystem, RevenueSigmaDirectionIsNotFlat) {
  const auto p = sim(kCes, 13);
  const auto ms = moments_for(p, Mode::Revenue, TechKind::CES, extended_instruments());
  const auto W = instrument_weight(ms);
  const double at = ms.objective(std::vector<double>{0.5, 0.3, 0.4, 0.9}, W);
  for (double s : {0.4, 0.6}) {
    const double off = ms.objective(std::vector<double>{s, 0.3, 0.4, 0.9}, W);
    EXPECT_GT(off - at, 10.0 * 1e-12 * at);
    EXPECT_GT(off, at);
  }
}

TEST(MomentSystem, LinearGRecoversMarkovCoefficients) {
  const auto p = sim(kCd, 14);
  const auto ms = moments_for(p, Mode::Quantity, TechKind::CobbDouglas);
  const auto r = ms.residuals(kCd.to_vector());
  ASSERT_TRUE(r.valid);
  ASSERT_EQ(r.g.size(), 2);
  EXPECT_NEAR(r.g(0), 0.0, 0.03);
  EXPECT_NEAR(r.g(1), 0.8, 0.03);
}

TEST(MomentSystem, InvalidParametersGiveInfiniteObjective) {
  const auto ms = moments_for(sim(kCes, 15, 30), Mode::Quantity, TechKind::CES);
  EXPECT_TRUE(std::isinf(ms.objective(std::vector<double>{0.5, 0.6, 0.6, 0.9})));  // beta_K < 0
  EXPECT_TRUE(std::isinf(ms.objective(std::vector<double>{0.0, 0.3, 0.4, 0.9})));  // sigma = 0
  EXPECT_THROW(ms.objective(std::vector<double>{0.5, 0.3}), ArgumentError);
}

TEST(MomentSystem, NeedsLaggedPairs) {
  SimConfig cfg;
  cfg.seed = 1;
  cfg.N = 20;
  cfg.T = 1;
  const auto p = simulate_panel(cfg, 1);
  const auto fs = first_stage_project(p, {Mode::Revenue, 1});
  EXPECT_THROW(build_revenue_moments(TechKind::CobbDouglas, fs, p), EstimationError);
}

// ---------------------------------------------------------------------------
// GMM

TEST(Gmm, QuantityCobbDouglasNearTruth) {
  const auto p = sim(kCd, 16);
  EstimateSpec spec;
  spec.kind = TechKind::CobbDouglas;
  spec.moments.instruments = extended_instruments();
  spec.gmm.restarts = 6;
  spec.gmm.threads = 1;
  const auto res = estimate(p, spec);
  ASSERT_TRUE(res.converged);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(res.estimate[j], kCd.to_vector()[j], 0.05) << res.param_names[j];
  EXPECT_TRUE(res.non_identified_axes.empty());
}

TEST(Gmm, ObjectiveNonNegativeAndWeightPsd) {
  const auto ms = moments_for(sim(kCd, 17, 200), Mode::Quantity, TechKind::CobbDouglas, extended_instruments());
  GmmOptions opt;
  opt.restarts = 3;
  opt.threads = 1;
  const auto res = gmm_minimize(ms, opt);
  EXPECT_GE(res.objective, 0.0);
  EXPECT_LE((res.weight - res.weight.transpose()).cwiseAbs().maxCoeff(), 1e-12 * res.weight.cwiseAbs().maxCoeff());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(res.weight);
  EXPECT_GE(eig.eigenvalues().minCoeff(), -1e-10 * eig.eigenvalues().maxCoeff());
  for (const auto& r : res.runs) {
    EXPECT_GE(r.objective, 0.0);
    if (r.converged) {
      EXPECT_TRUE(ms.in_bounds(r.estimate));
    }
  }
}

TEST(Gmm, RevenueCesMinimaSpanV) {
  const auto ms = moments_for(sim(kCes, 18, 300), Mode::Revenue, TechKind::CES, extended_instruments());
  GmmOptions opt;
  opt.restarts = 20;
  opt.threads = 1;
  const auto res = gmm_minimize(ms, opt);
  ASSERT_TRUE(res.converged);
  EXPECT_EQ(res.non_identified_axes, std::vector<std::string>{"v"});
  // End points that share the best (sigma, ratio) differ only in v.
  double vlo = 1e9, vhi = -1e9, olo = 1e300, ohi = 0;
  for (const auto& m : res.minima) {
    if (std::abs(m.estimate[0] - res.estimate[0]) > 1e-4) continue;
    if (std::abs(m.estimate[1] / m.estimate[2] - res.estimate[1] / res.estimate[2]) > 1e-4) continue;
    vlo = std::min(vlo, m.estimate[3]);
    vhi = std::max(vhi, m.estimate[3]);
    olo = std::min(olo, m.objective);
    ohi = std::max(ohi, m.objective);
  }
  EXPECT_GE(vhi - vlo, 0.4);
  EXPECT_LT((ohi - olo) / ohi, 1e-6);
  EXPECT_NEAR(res.identified_functionals.at("sigma"), 0.5, 0.1);
}

TEST(Gmm, DeterministicAcrossThreadCounts) {
  const auto ms = moments_for(sim(kCd, 19, 150), Mode::Revenue, TechKind::CobbDouglas, extended_instruments());
  GmmOptions a;
  a.restarts = 4;
  a.threads = 1;
  GmmOptions b = a;
  b.threads = 3;
  const auto ra = gmm_minimize(ms, a), rb = gmm_minimize(ms, b);
  EXPECT_EQ(ra.estimate, rb.estimate);
  EXPECT_EQ(ra.objective, rb.objective);
  ASSERT_EQ(ra.runs.size(), rb.runs.size());
  for (std::size_t i = 0; i < ra.runs.size(); ++i) EXPECT_EQ(ra.runs[i].estimate, rb.runs[i].estimate);
}

TEST(Gmm, FailureCarriesTrace) {
  const auto ms = moments_for(sim(kCes, 20, 60), Mode::Quantity, TechKind::CES, extended_instruments());
  GmmOptions opt;
  opt.restarts = 2;
  opt.max_iterations = 1;
  opt.threads = 1;
  try {
    gmm_minimize(ms, opt);
    FAIL() << "expected EstimationError";
  } catch (const EstimationError& e) {
    EXPECT_NE(std::string(e.what()).find("[0]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[1]"), std::string::npos);
  }
}

TEST(Gmm, ArgumentChecks) {
  const auto ms = moments_for(sim(kCd, 21, 40), Mode::Quantity, TechKind::CobbDouglas, {"1", "k"});
  EXPECT_THROW(gmm_minimize(ms), ArgumentError);
  GmmOptions opt;
  opt.restarts = 0;
  EXPECT_THROW(gmm_minimize(moments_for(sim(kCd, 21, 40), Mode::Quantity, TechKind::CobbDouglas), opt), ArgumentError);
}

TEST(Gmm, IdentityWeightingIsLiteral) {
  const auto ms = moments_for(sim(kCd, 22, 150), Mode::Quantity, TechKind::CobbDouglas, extended_instruments());
  GmmOptions opt;
  opt.weighting = Weighting::Identity;
  opt.restarts = 3;
  opt.threads = 1;
  const auto res = gmm_minimize(ms, opt);
  EXPECT_TRUE(res.weight.isIdentity());
  for (const auto& r : res.runs) EXPECT_EQ(r.stage, 1);
}
