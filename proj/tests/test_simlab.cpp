#include <peg/peg.hpp>

#include <gtest/gtest.h>

#include <sstream>

using namespace peg;

namespace {

SimConfig small_config() {
  SimConfig cfg;
  cfg.n = 150;
  cfg.K = 9;
  cfg.reps = 3;
  cfg.boot = 200;
  cfg.lambda_points = 8;
  cfg.methods = {Method::naive, Method::uposi, Method::os_full, Method::os_lasso, Method::os_dantzig};
  return cfg;
}

std::string csv_of(const AggregateMetrics& agg) {
  std::ostringstream os;
  write_metrics_csv(os, agg);
  write_plot_data(os, agg);
  return os.str();
}

}  // namespace

TEST(SimColumns, UnmeasuredCovariateDropped) {
  for (Index K : {7, 16, 20, 50}) {
    auto names = simulation_column_names(K);
    ASSERT_EQ(static_cast<Index>(names.size()), K) << K;
    EXPECT_EQ(names[0], "(Intercept)");
    EXPECT_EQ(names[6], "L6");
    EXPECT_EQ(std::count(names.begin(), names.end(), "X10"), 0);
    auto map = analysis_column_map(K);
    ASSERT_EQ(static_cast<Index>(map.size()), K + 1);
    EXPECT_EQ(map[6 + unmeasured_x(K)], -1);
    EXPECT_EQ(std::count(map.begin(), map.end(), -1), 1);
  }
  EXPECT_EQ(unmeasured_x(20), 10);
  EXPECT_EQ(simulation_column_names(9).back(), "X2");
  EXPECT_EQ(simulation_column_names(20)[15], "X9");
  EXPECT_EQ(simulation_column_names(20)[16], "X11");
}

TEST(SimTruth, BlipCoefficientsOnAnalysisColumns) {
  SimConfig cfg;
  cfg.n = 5;
  cfg.K = 20;
  auto sim = generate_dataset(cfg, TrueParams::for_K(20), 0);
  Vector expected = Vector::Zero(20);
  expected.head(7) << 1, 1, -1, -0.9, 0.8, 1, 0;
  EXPECT_EQ(sim.truth.psi, expected);
  EXPECT_EQ(sim.data.K(), 20);
  EXPECT_EQ(sim.data.n(), 5);
  EXPECT_EQ(sim.data.subject(0).sessions(), 6);
}

TEST(SimTruth, DeltaUsesTwentyOutcomePredictorsAtMost) {
  auto tp = TrueParams::for_K(50);
  ASSERT_EQ(tp.delta.size(), 55);
  EXPECT_EQ(tp.delta.segment(7, 20), Vector::Ones(20));
  EXPECT_EQ(tp.delta.segment(27, 24), Vector::Zero(24));
  EXPECT_EQ(tp.delta(51), -0.8);
  EXPECT_EQ(tp.delta(54), -1.5);
  auto small = TrueParams::for_K(20);
  EXPECT_EQ(small.delta.segment(7, 14), Vector::Ones(14));
  EXPECT_EQ(small.psi.size(), 21);
}

TEST(SimGenerate, NoiselessOutcomeIsMeanPlusBlip) {
  SimConfig cfg;
  cfg.n = 50;
  cfg.K = 20;
  cfg.sigma2_eps = 0.0;
  auto tp = TrueParams::for_K(cfg.K);
  auto sim = generate_dataset(cfg, tp, 4);
  for (Index i = 0; i < cfg.n; ++i) {
    const auto& s = sim.data.subject(i);
    const auto& mu = sim.truth.mu[static_cast<std::size_t>(i)];
    const auto& blip = sim.truth.blip[static_cast<std::size_t>(i)];
    EXPECT_LT(sup_norm(s.y - mu - blip), 1e-12);
    for (Index j = 0; j < s.sessions(); ++j) {
      // independent recomputation from the recorded covariates
      const auto& h = s.h;
      const double x10 = sim.truth.x_unmeasured[static_cast<std::size_t>(i)](j);
      double m = 1 + h(j, 1) + 1.2 * h(j, 2) + 1.2 * h(j, 3) - 0.9 * h(j, 4) + 0.8 * h(j, 5) - 1.0 * h(j, 6);
      for (Index c = 7; c < 20; ++c) m += h(j, c);  // X1..X9, X11..X14
      m += x10;
      m += -0.8 * h(j, 1) * h(j, 5) + 1.0 * h(j, 3) * h(j, 4) + 1.2 * std::sin(h(j, 3) - h(j, 4)) -
           1.5 * std::cos(2.0 * h(j, 5));
      EXPECT_NEAR(mu(j), m, 1e-12);
      double g = 1 + h(j, 1) - h(j, 2) - 0.9 * h(j, 3) + 0.8 * h(j, 4) + h(j, 5);
      EXPECT_NEAR(blip(j), s.a(j) * g, 1e-12);
    }
  }
}

TEST(SimGenerate, BaselineConfoundersConstantWithinSubject) {
  SimConfig cfg;
  cfg.n = 20;
  cfg.K = 10;
  auto sim = generate_dataset(cfg, TrueParams::for_K(10), 1);
  for (const auto& s : sim.data.subjects()) {
    EXPECT_TRUE((s.h.col(1).array() == s.h(0, 1)).all());
    EXPECT_TRUE((s.h.col(2).array() == s.h(0, 2)).all());
    EXPECT_TRUE((s.h.col(0).array() == 1.0).all());
    EXPECT_TRUE((s.a.array() == 0.0 || s.a.array() == 1.0).all());
  }
}

TEST(SimGenerate, FirstSessionCovariatesCentredAndLaterSessionsCarryOver) {
  SimConfig cfg;
  cfg.n = 6000;
  cfg.K = 12;
  auto sim = generate_dataset(cfg, TrueParams::for_K(cfg.K), 2);
  const double n = static_cast<double>(cfg.n);
  Vector first = Vector::Zero(cfg.K), second = Vector::Zero(cfg.K);
  double treated = 0.0;
  for (const auto& s : sim.data.subjects()) {
    first += s.h.row(0).transpose();
    second += s.h.row(1).transpose();
    treated += s.a(0);
  }
  first /= n;
  second /= n;
  treated /= n;
  for (Index c = 1; c < cfg.K; ++c) EXPECT_LT(std::abs(first(c)), 5.0 / std::sqrt(n)) << c;
  // time-varying confounders at session 2 have mean 0.3 * (E l_1 + E a_1)
  for (Index c = 3; c <= 6; ++c) EXPECT_NEAR(second(c), 0.3 * treated, 6.0 / std::sqrt(n)) << c;
}

TEST(SimGenerate, ReproducibleAndDistinctAcrossReplications) {
  SimConfig cfg;
  cfg.n = 30;
  cfg.K = 10;
  auto tp = TrueParams::for_K(10);
  auto a = generate_dataset(cfg, tp, 7), b = generate_dataset(cfg, tp, 7), c = generate_dataset(cfg, tp, 8);
  EXPECT_EQ(a.data.subject(3).y, b.data.subject(3).y);
  EXPECT_EQ(a.data.subject(3).h, b.data.subject(3).h);
  EXPECT_NE(a.data.subject(3).y, c.data.subject(3).y);
}

TEST(SimConfigValidation, RejectsInvalidSettings) {
  SimConfig cfg;
  cfg.K = 6;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = SimConfig{};
  cfg.J = 1;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = SimConfig{};
  cfg.alpha = 0.0;
  EXPECT_THROW(cfg.validate(), UsageError);
  EXPECT_NO_THROW(SimConfig{}.validate());
}

TEST(Methods, ParseAndName) {
  for (auto m : {Method::naive, Method::uposi, Method::os_full, Method::os_lasso, Method::os_dantzig})
    EXPECT_EQ(parse_method(to_string(m)), m);
  try {
    parse_method("bootstrap");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("os-dantzig"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------

TEST(Metrics, AllCoveredAndAllRejected) {
  Vector truth(3);
  truth << 1.0, -0.5, 0.0;
  std::vector<Interval> iv{{0, 1.0, 0.8, 1.2}, {1, -0.5, -0.7, -0.3}, {2, 0.0, -0.1, 0.1}};
  auto m = compute_metrics(iv, truth);
  EXPECT_EQ(m.fcr, 0.0);
  EXPECT_EQ(m.power, 1.0);
  EXPECT_NEAR(m.avg_length, 0.4 * 2 / 3 + 0.2 / 3, 1e-15);
}

TEST(Metrics, HalfMissed) {
  Vector truth(2);
  truth << 1.0, 0.0;
  std::vector<Interval> iv{{0, 1.0, 0.9, 1.1}, {1, 0.5, 0.4, 0.6}};
  auto m = compute_metrics(iv, truth);
  EXPECT_EQ(m.fcr, 0.5);
  EXPECT_EQ(m.power, 1.0);
}

TEST(Metrics, PowerUndefinedWithoutNonzeroTruth) {
  Vector truth = Vector::Zero(2);
  auto m = compute_metrics({{1, 0.0, -1.0, 1.0}}, truth);
  EXPECT_TRUE(std::isnan(m.power));
  EXPECT_THROW(compute_metrics({}, truth), UsageError);
}

TEST(Metrics, SelectionOutcomes) {
  Vector truth = Vector::Zero(8);
  truth.head(3) << 1, 1, -1;
  auto exact = selection_outcome(ModelIndexSet({0, 1, 2}), truth);
  EXPECT_TRUE(exact.exact);
  auto fp = selection_outcome(ModelIndexSet({0, 1, 2, 5, 7}), truth);
  EXPECT_TRUE(fp.false_positive);
  EXPECT_FALSE(fp.false_negative);
  EXPECT_EQ(fp.n_false_positive, 2);
  auto fn = selection_outcome(ModelIndexSet({0, 2, 4}), truth);
  EXPECT_TRUE(fn.false_negative);
  EXPECT_TRUE(fn.false_positive);
  EXPECT_FALSE(fn.exact);
}

TEST(Metrics, AggregateAveragesOverSuccessfulReplications) {
  SimConfig cfg;
  cfg.methods = {Method::naive};
  std::vector<RepOutcome> reps(4);
  for (int r = 0; r < 4; ++r) {
    reps[r].ok = r != 3;
    reps[r].selection.exact = r == 0;
    reps[r].selection.false_positive = r != 0;
    reps[r].selection.n_false_positive = r;
    MethodOutcome mo;
    mo.ok = true;
    mo.metrics.fcr = 0.1 * r;
    mo.metrics.avg_length = 1.0;
    mo.metrics.power = r == 1 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
    reps[r].methods.push_back(mo);
  }
  auto agg = aggregate(cfg, reps);
  EXPECT_EQ(agg.reps_ok, 3);
  EXPECT_EQ(agg.failures, 1);
  EXPECT_NEAR(agg.exact_pct, 100.0 / 3, 1e-12);
  EXPECT_NEAR(agg.fp_pct, 200.0 / 3, 1e-12);
  EXPECT_NEAR(agg.afp, 1.0, 1e-15);
  EXPECT_NEAR(agg.method(Method::naive).fcr, 0.1, 1e-15);
  EXPECT_EQ(agg.method(Method::naive).power, 1.0);
  EXPECT_EQ(agg.method(Method::naive).power_reps, 2);
  EXPECT_THROW(agg.method(Method::uposi), UsageError);
}

// ---------------------------------------------------------------------------

TEST(Replications, EveryMethodRunsAndReportsSelectedCoordinates) {
  SimConfig cfg = small_config();
  auto agg = run_replications(cfg, 0, 1);
  ASSERT_EQ(agg.replications.size(), 1u);
  const auto& r = agg.replications[0];
  ASSERT_TRUE(r.ok) << r.error;
  ASSERT_EQ(r.methods.size(), 5u);
  for (const auto& mo : r.methods) {
    ASSERT_TRUE(mo.ok) << to_string(mo.method) << ": " << mo.error;
    ASSERT_EQ(static_cast<Index>(mo.intervals.size()), r.selected.size());
    for (std::size_t c = 0; c < mo.intervals.size(); ++c) EXPECT_EQ(mo.intervals[c].k, r.selected[static_cast<Index>(c)]);
  }
}

TEST(Replications, BitwiseIdenticalAcrossThreadCounts) {
  SimConfig cfg = small_config();
  const std::size_t saved = thread_count();
  set_thread_count(1);
  std::string one = csv_of(run_replications(cfg));
  set_thread_count(4);
  std::string four = csv_of(run_replications(cfg));
  set_thread_count(saved);
  EXPECT_EQ(one, four);
}

TEST(Replications, SubrangeMatchesFullRun) {
  SimConfig cfg = small_config();
  cfg.methods = {Method::naive, Method::os_lasso};
  auto all = run_replications(cfg);
  auto tail = run_replications(cfg, 2, 1);
  ASSERT_EQ(tail.replications[0].rep, 2u);
  const auto& a = all.replications[2].methods[1].intervals;
  const auto& b = tail.replications[0].methods[1].intervals;
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t c = 0; c < a.size(); ++c) EXPECT_EQ(a[c].lower, b[c].lower);
}
