// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "pdsim/dynsched.hpp"

namespace pdsim {
namespace {

LoadMatrix row(std::vector<double> v) { return LoadMatrix::from_rows({std::move(v)}); }

// Independent EWMA oracle written directly from the weight definition.
double ewma_oracle(const std::vector<double>& xs, double decay) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double w = decay * std::pow(1 - decay, static_cast<double>(xs.size() - 1 - i));
    num += w * xs[i];
    den += w;
  }
  return num / den;
}

// Independent least-squares oracle via the normal equations.
double trend_oracle(const std::vector<double>& ys) {
  const double n = static_cast<double>(ys.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const double x = static_cast<double>(i);
    sx += x;
    sy += ys[i];
    sxx += x * x;
    sxy += x * ys[i];
  }
  const double det = n * sxx - sx * sx;
  const double slope = (n * sxy - sx * sy) / det;
  const double intercept = (sy - slope * sx) / n;
  return std::max(0.0, intercept + slope * n);
}

TEST(ActivationWindow, SingleSnapshotIsItself) {
  ActivationWindow w(4, 0.5);
  EXPECT_EQ(update_activation_window(w, row({3, 7})), row({3, 7}));
}

TEST(ActivationWindow, ConstantStreamIsConstant) {
  ActivationWindow w(3, 0.3);
  LoadMatrix last;
  for (int i = 0; i < 6; ++i) last = update_activation_window(w, row({5, 0, 2}));
  EXPECT_NEAR(last.at(0, 0), 5, 1e-12);
  EXPECT_NEAR(last.at(0, 1), 0, 1e-12);
  EXPECT_NEAR(last.at(0, 2), 2, 1e-12);
  EXPECT_EQ(w.filled(), 3u);
}

TEST(ActivationWindow, TwoSnapshotExample) {
  ActivationWindow w(2, 0.5);
  w.push(row({10}));
  const auto s = update_activation_window(w, row({20}));
  EXPECT_NEAR(s.at(0, 0), 50.0 / 3.0, 1e-12);
  EXPECT_NEAR(s.at(0, 0), ewma_oracle({10, 20}, 0.5), 1e-12);
}

TEST(ActivationWindow, EvictsOldestAndMatchesOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 100);
  ActivationWindow w(5, 0.35);
  std::vector<double> stream;
  for (int i = 0; i < 12; ++i) {
    stream.push_back(u(rng));
    const auto s = update_activation_window(w, row({stream.back()}));
    const std::vector<double> tail(stream.end() - static_cast<std::ptrdiff_t>(std::min<std::size_t>(5, stream.size())),
                                   stream.end());
    EXPECT_NEAR(s.at(0, 0), ewma_oracle(tail, 0.35), 1e-9);
  }
}

TEST(ActivationWindow, RejectsBadInput) {
  EXPECT_THROW(ActivationWindow(0, 0.5), InvalidArgument);
  EXPECT_THROW(ActivationWindow(2, 0.0), InvalidArgument);
  ActivationWindow w(2, 0.5);
  EXPECT_THROW(w.smoothed(), EmptyInput);
  w.push(row({1, 2}));
  EXPECT_THROW(w.push(row({1})), InvalidArgument);
}

TEST(Forecast, Examples) {
  ActivationWindow w(4, 0.5);
  for (int i = 0; i < 3; ++i) w.push(row({7}));
  EXPECT_NEAR(predict_future_activations(w).at(0, 0), 7, 1e-12);

  ActivationWindow up(4, 0.5);
  up.push(row({10}));
  up.push(row({20}));
  EXPECT_NEAR(predict_future_activations(up).at(0, 0), 30, 1e-12);

  ActivationWindow curve(4, 0.5);
  for (double v : {1.0, 2.0, 4.0}) curve.push(row({v}));
  EXPECT_NEAR(predict_future_activations(curve).at(0, 0), 16.0 / 3.0, 1e-12);
  EXPECT_NEAR(trend_oracle({1, 2, 4}), 16.0 / 3.0, 1e-12);
}

TEST(Forecast, ClampsAtZeroAndMatchesOracle) {
  ActivationWindow down(4, 0.5);
  for (double v : {9.0, 5.0, 1.0}) down.push(row({v}));
  EXPECT_EQ(predict_future_activations(down).at(0, 0), 0.0);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 50);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + rng() % 6;
    ActivationWindow w(n, 0.5);
    std::vector<double> ys(n);
    for (auto& y : ys) {
      y = u(rng);
      w.push(row({y}));
    }
    const double expect = n == 1 ? ys[0] : trend_oracle(ys);
    EXPECT_NEAR(predict_future_activations(w).at(0, 0), expect, 1e-9);
  }
}

TEST(Decision, MarginGate) {
  EXPECT_FALSE(improves_enough(1.8, 1.75, 0.1));
  EXPECT_TRUE(improves_enough(1.8, 1.6, 0.1));
  EXPECT_FALSE(improves_enough(1.3, 1.25, 0.05));
}

TEST(SchedulerStep, BalancedLoadTakesNoAction) {
  PlacementTensor p(1, 2, 2);
  p.set(0, 0, 0);
  p.set(0, 1, 1);
  ActivationWindow w(4, 0.5);
  w.push(row({5, 5}));
  SchedulerConfig cfg;
  cfg.budget = 2;
  const auto res = scheduler_step(p, w, cfg, Topology::zeros(2));
  EXPECT_EQ(res.decision, SchedulerDecision::kNoAction);
  EXPECT_EQ(res.b_current, 1.0);
  EXPECT_FALSE(res.candidate.has_value());
}

TEST(SchedulerStep, SkewedLoadRebalancesWithRedundancy) {
  // Device 0 holds {0,1}: loads 10 vs 2, B = 10/6.
  PlacementTensor p(1, 2, 4);
  p.set(0, 0, 0);
  p.set(0, 0, 1);
  p.set(0, 1, 2);
  p.set(0, 1, 3);
  ActivationWindow w(4, 0.5);
  w.push(row({9, 1, 1, 1}));
  SchedulerConfig cfg;
  cfg.budget = 2;
  const auto res = scheduler_step(p, w, cfg, Topology::zeros(2));
  EXPECT_NEAR(res.b_current, 10.0 / 6.0, 1e-12);
  EXPECT_EQ(res.decision, SchedulerDecision::kRebalance);
  ASSERT_TRUE(res.candidate.has_value());
  EXPECT_EQ(res.b_sim, 1.0);
  EXPECT_TRUE(res.candidate->placement.is_valid(res.candidate->budget.slots));
}

TEST(SchedulerStep, NoGainWithoutBudgetTakesNoAction) {
  // Already the best no-redundancy layout for these loads.
  PlacementTensor p(1, 2, 4);
  p.set(0, 0, 0);
  p.set(0, 1, 1);
  p.set(0, 1, 2);
  p.set(0, 1, 3);
  ActivationWindow w(4, 0.5);
  w.push(row({9, 1, 1, 1}));
  SchedulerConfig cfg;
  cfg.budget = 0;
  const auto res = scheduler_step(p, w, cfg, Topology::zeros(2));
  EXPECT_GT(res.b_current, cfg.trigger);
  EXPECT_EQ(res.decision, SchedulerDecision::kNoAction);
}

TEST(Migration, DurationExamples) {
  const std::vector<ExpertMove> one{{0, 0, 0, 1, 8}};
  EXPECT_DOUBLE_EQ(migration_duration(one, 2), 4);
  const std::vector<ExpertMove> disjoint{{0, 0, 0, 1, 8}, {0, 1, 2, 3, 6}};
  EXPECT_DOUBLE_EQ(migration_duration(disjoint, 2), 4);
  const std::vector<ExpertMove> shared{{0, 0, 0, 1, 8}, {0, 1, 0, 1, 6}};
  EXPECT_DOUBLE_EQ(migration_duration(shared, 2), 7);
  EXPECT_EQ(migration_duration({}, 2), 0);
}

TEST(Migration, EmptyPlanEmitsOnlySwitch) {
  PlacementTensor p(1, 2, 2);
  p.set(0, 0, 0);
  p.set(0, 1, 1);
  const auto plan = plan_migration(p, p, {1}, Topology::zeros(2), 8, 2, 3.0);
  EXPECT_TRUE(plan.moves.empty());
  const auto ev = migration_events(plan);
  ASSERT_EQ(ev.size(), 1u);
  EXPECT_EQ(ev[0].kind, MigrationEventKind::kSwitch);
  EXPECT_EQ(ev[0].time, 3.0);
}

TEST(Migration, CopiesFromNearestSource) {
  PlacementTensor from(1, 4, 2);
  from.set(0, 0, 0);
  from.set(0, 2, 0);
  from.set(0, 1, 1);
  from.set(0, 3, 1);
  auto to = from;
  to.set(0, 3, 0);
  const auto topo = Topology::grouped(4, 2, 1.0, 5.0);
  const auto plan = plan_migration(from, to, {2}, topo, 8, 2, 1.0);
  ASSERT_EQ(plan.moves.size(), 1u);
  EXPECT_EQ(plan.moves[0].source, 2u);
  EXPECT_EQ(plan.moves[0].destination, 3u);
  EXPECT_DOUBLE_EQ(plan.switch_time, 5.0);
  const auto ev = migration_events(plan);
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_EQ(ev[0].kind, MigrationEventKind::kTransferStart);
  EXPECT_EQ(ev[1].time, 5.0);
}

TEST(Migration, RoutingSwitchesAtomicallyAndDefersOverlap) {
  PlacementTensor a(1, 2, 2);
  a.set(0, 0, 0);
  a.set(0, 1, 1);
  PlacementTensor b(1, 2, 2);
  b.set(0, 1, 0);
  b.set(0, 0, 1);
  MigrationController mc(a, {1});
  const auto plan = plan_migration(a, b, {1}, Topology::zeros(2), 8, 2, 0.0);
  EXPECT_FALSE(mc.apply_migration(plan, 0.0).deferred);
  EXPECT_TRUE(mc.in_flight(1.0));
  EXPECT_EQ(mc.routing_placement(3.999), a);
  EXPECT_TRUE(mc.apply_migration(plan_migration(a, a, {1}, Topology::zeros(2), 8, 2, 2.0), 2.0).deferred);
  EXPECT_EQ(mc.routing_placement(4.0), b);
  EXPECT_EQ(mc.switches(), 1u);
  EXPECT_FALSE(mc.pending_switch_time().has_value());
}

// Zipf-skewed loads with the hottest experts packed onto the first devices.
struct SkewScenario {
  std::size_t layers = 2, devices = 8, experts = 16;

  LoadMatrix loads(std::size_t rotation) const {
    LoadMatrix d(layers, experts);
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t rank = 0; rank < experts; ++rank)
        d.set(l, (rank + rotation) % experts, 1000.0 / std::pow(static_cast<double>(rank + 1), 1.1));
    return d;
  }

  PlacementTensor contiguous() const {
    PlacementTensor p(layers, devices, experts);
    for (std::size_t l = 0; l < layers; ++l)
      for (std::size_t e = 0; e < experts; ++e) p.set(l, e / (experts / devices), e);
    return p;
  }

  SchedulerConfig config() const {
    SchedulerConfig cfg;
    cfg.budget = static_cast<std::int64_t>(layers * devices);
    cfg.window_len = 3;
    cfg.expert_bytes = 1.0;
    cfg.link_bandwidth = 1.0;
    return cfg;
  }
};

TEST(DynamicScheduler, StationarySkewRebalancesExactlyOnce) {
  SkewScenario sc;
  const auto cfg = sc.config();
  DynamicExpertScheduler sched(sc.contiguous(), std::vector<std::size_t>(sc.layers, 2),
                               Topology::zeros(sc.devices), cfg);
  const auto d = sc.loads(0);
  EXPECT_GT(max_imbalance(sc.contiguous(), d), cfg.trigger);
  for (int i = 1; i <= 10; ++i) {
    sched.observe(d);
    const double now = i * cfg.interval;
    sched.step(now);
    const auto& routed = sched.routing_placement(now);
    EXPECT_TRUE(routed.is_valid(sched.migration().slots()));
  }
  EXPECT_EQ(sched.rebalances(), 1u);
  EXPECT_LE(max_imbalance(sched.routing_placement(1e9), d), cfg.trigger);
}

TEST(DynamicScheduler, RecoversAfterHotSetShift) {
  SkewScenario sc;
  const auto cfg = sc.config();
  DynamicExpertScheduler sched(sc.contiguous(), std::vector<std::size_t>(sc.layers, 2),
                               Topology::zeros(sc.devices), cfg);
  double now = 0;
  for (int i = 0; i < 5; ++i) {
    sched.observe(sc.loads(0));
    now += cfg.interval;
    sched.step(now);
  }
  const auto shifted = sc.loads(5);
  EXPECT_GT(max_imbalance(sched.routing_placement(now), shifted), cfg.trigger);
  int recovered_at = -1;
  for (int i = 1; i <= 3 && recovered_at < 0; ++i) {
    sched.observe(shifted);
    now += cfg.interval;
    sched.step(now);
    // Evaluate at the next interval boundary, after any in-flight switch.
    if (max_imbalance(sched.routing_placement(now + cfg.interval - 1e-9), shifted) <= cfg.trigger) recovered_at = i;
  }
  EXPECT_GT(recovered_at, 0);
}

TEST(DynamicScheduler, RoutingAlwaysValidUnderRandomDrift) {
  SkewScenario sc;
  auto cfg = sc.config();
  cfg.link_bandwidth = 0.05;  // migrations span several intervals
  DynamicExpertScheduler sched(sc.contiguous(), std::vector<std::size_t>(sc.layers, 2),
                               Topology::zeros(sc.devices), cfg);
  std::mt19937_64 rng(99);
  bool saw_defer = false;
  for (int i = 1; i <= 40; ++i) {
    sched.observe(sc.loads(rng() % sc.experts));
    const double now = i * cfg.interval;
    const auto rec = sched.step(now);
    saw_defer |= rec.decision == SchedulerDecision::kDeferred;
    for (double t : {now, now + 0.5 * cfg.interval}) {
      const auto& routed = sched.routing_placement(t);
      EXPECT_TRUE(routed.satisfies_existence());
      EXPECT_TRUE(routed.is_valid(sched.migration().slots()));
    }
  }
  EXPECT_TRUE(saw_defer);
  EXPECT_GE(sched.migration().switches(), 1u);
}

TEST(SchedulerConfig, ValidationRejectsBadValues) {
  SchedulerConfig cfg;
  cfg.trigger = 0.9;
  EXPECT_THROW(cfg.validate(), InvalidConfig);
  cfg = {};
  cfg.budget = -1;
  EXPECT_THROW(cfg.validate(), InvalidConfig);
  cfg = {};
  cfg.link_bandwidth = 0;
  EXPECT_THROW(cfg.validate(), InvalidConfig);
}

}  // namespace
}  // namespace pdsim
