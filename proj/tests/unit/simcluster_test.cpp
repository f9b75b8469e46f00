// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.

#include <gtest/gtest.h>

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pdsim/io.hpp"
#include "pdsim/simcluster.hpp"

namespace pdsim {
namespace {

Scenario tiny() {
  Scenario s;
  s.name = "tiny";
  s.cluster.set_xpyd("1P8-1D8");
  s.cluster.per_die_batch = 2;
  s.cluster.experts = 16;
  s.cluster.top_k = 2;
  s.workload.mean_in = 400;
  s.workload.mean_out = 40;
  s.workload.cap = 2048;
  s.workload.prefix_len = 200;
  s.workload.prefix_pool = 8;
  s.sim.duration = 40;
  return s;
}

TEST(ClusterConfig, XpydLabelAndConcurrency) {
  ClusterConfig c;
  c.set_xpyd("6P8-1D32");
  EXPECT_EQ(c.xpyd(), "6P8-1D32");
  EXPECT_EQ(c.decode_nodes(), 4u);
  // per-die batch x decode nodes x 8 devices x 2 dies
  EXPECT_EQ(c.concurrency(), 40u * 4u * 8u * 2u);
  c.set_xpyd("2P16-2D16");
  EXPECT_EQ(c.decode_nodes(), 4u);
  EXPECT_EQ(c.total_decode_dies(), 64u);
  EXPECT_THROW(c.set_xpyd("6P8"), InvalidConfig);
  EXPECT_THROW(c.set_xpyd("6P8-1D32x"), InvalidConfig);
  c.set_xpyd("1P8-1D4");
  EXPECT_THROW(c.validate(), InvalidConfig);
}

TEST(CostModel, PrefillIsLinearInNewTokens) {
  CostModel cost;
  AttnConfig off;
  off.enabled = false;
  EXPECT_DOUBLE_EQ(prefill_duration(cost, 0, off), cost.prefill_base);
  const double v1 = prefill_duration(cost, 3500, off) - cost.prefill_base;
  const double v2 = prefill_duration(cost, 7000, off) - cost.prefill_base;
  EXPECT_NEAR(v2, 2 * v1, 1e-15);
  EXPECT_NEAR(v1, 3500 * cost.prefill_per_token, 1e-15);
}

TEST(CostModel, CompressedLayersShrinkPrefill) {
  AttnConfig a;
  a.pattern = CompressionPattern::parse("1100");
  a.compressed_prefill_cost = 0.5;
  EXPECT_DOUBLE_EQ(a.layer_cost_factor(), (0.5 + 0.5 + 1 + 1) / 4.0);
  a.pattern = CompressionPattern::parse("0000");
  EXPECT_DOUBLE_EQ(a.layer_cost_factor(), 1.0);
  a.enabled = false;
  a.pattern = CompressionPattern::parse("1111");
  EXPECT_DOUBLE_EQ(a.layer_cost_factor(), 1.0);
}

TEST(CostModel, KvEffectiveKeepsSinkAndRecent) {
  AttnConfig a;
  a.pattern = CompressionPattern::parse("10");
  a.sink = 4;
  a.recent = 6;
  EXPECT_DOUBLE_EQ(a.kv_effective(8), 8.0);  // shorter than the kept window
  EXPECT_DOUBLE_EQ(a.kv_effective(100), 0.5 * 100 + 0.5 * 10);
  a.enabled = false;
  EXPECT_DOUBLE_EQ(a.kv_effective(100), 100.0);
}

TEST(CostModel, DecodeStepGatedByHottestDevice) {
  const auto d = LoadMatrix::from_rows({{9, 1, 1, 1}});
  PlacementTensor skewed(1, 2, 4);  // {9,1} | {1,1}
  skewed.set(0, 0, 0);
  skewed.set(0, 0, 1);
  skewed.set(0, 1, 2);
  skewed.set(0, 1, 3);
  const auto st = static_expert_placement(d, 2, 2, Topology::zeros(2));

  // Hand-summed max device loads with replicas sharing load evenly.
  auto max_load = [&](const PlacementTensor& p) {
    double worst = 0;
    for (std::size_t r = 0; r < 2; ++r) {
      double sum = 0;
      for (std::size_t e : p.experts_on(0, r)) sum += d.at(0, e) / static_cast<double>(p.replica_count(0, e));
      worst = std::max(worst, sum);
    }
    return worst;
  };
  EXPECT_DOUBLE_EQ(max_load(skewed), 10.0);
  EXPECT_LT(max_load(st.placement), 10.0);

  CostModel pure;
  pure.decode_base = 0;
  pure.decode_per_kv_token = 0;
  pure.decode_per_expert_load = 1e-3;
  const double t_skew = decode_step_duration(pure, 0, expert_gate(skewed, d));
  const double t_bal = decode_step_duration(pure, 0, expert_gate(st.placement, d));
  EXPECT_LT(t_bal, t_skew);
  EXPECT_NEAR(t_bal / t_skew, max_load(st.placement) / max_load(skewed), 1e-12);

  CostModel cost;
  EXPECT_DOUBLE_EQ(decode_step_duration(cost, 0, 10),
                   cost.decode_base + cost.decode_per_expert_load * 10);  // empty KV
}

TEST(CostModel, ContiguousPlacementIsValid) {
  const auto p = contiguous_placement(3, 32, 128);
  EXPECT_TRUE(p.is_valid(std::vector<std::size_t>(3, 4)));
  EXPECT_EQ(p.experts_on(0, 1), (std::vector<std::size_t>{4, 5, 6, 7}));
}

TEST(Scenario, InvalidConfigFailsBeforeRunning) {
  auto s = tiny();
  s.cluster.per_die_batch = 0;
  EXPECT_THROW(Simulator{s}, InvalidConfig);
  s = tiny();
  s.placement.budget = 3;  // not a multiple of the device count
  EXPECT_THROW(Simulator{s}, InvalidConfig);
  s = tiny();
  s.workload.mean_in = 5000;
  EXPECT_THROW(Simulator{s}, InvalidSpec);
}

TEST(Simulation, DeterministicAcrossRuns) {
  std::vector<std::string> log_a, log_b;
  const auto a = run_simulation(tiny(), [&](const std::string& l) { log_a.push_back(l); });
  const auto b = run_simulation(tiny(), [&](const std::string& l) { log_b.push_back(l); });
  EXPECT_EQ(report_csv_row(a), report_csv_row(b));
  EXPECT_EQ(report_to_json(a).dump(), report_to_json(b).dump());
  EXPECT_EQ(log_a, log_b);
  auto other = tiny();
  other.workload.seed = 9;
  EXPECT_NE(report_csv_row(run_simulation(other)), report_csv_row(a));
}

TEST(Simulation, TokensAreConserved) {
  const auto r = run_simulation(tiny());
  ASSERT_GT(r.completed, 0u);
  EXPECT_EQ(r.total_tokens, r.output_tokens + r.prompt_tokens);
  EXPECT_EQ(r.ttt, r.ott + r.ptt);
  EXPECT_GE(r.ttt, r.ott);
  const double span = r.window_end - r.window_start;
  EXPECT_DOUBLE_EQ(r.ott, static_cast<double>(r.output_tokens) / span);
  EXPECT_NEAR(r.qpm, static_cast<double>(r.completed) * 60.0 / span, 1e-9);
  for (double v : {r.qpm, r.ttft_mean, r.ttft_p99, r.tpot_mean, r.tpot_p99, r.e2e_mean, r.e2e_p99}) EXPECT_GE(v, 0.0);
  EXPECT_GE(r.ttft_p99, r.ttft_mean);
}

TEST(Simulation, LifecycleTimestampsAreMonotone) {
  std::map<std::uint64_t, std::vector<std::pair<std::string, double>>> phases;
  std::size_t done = 0, generated = 0;
  run_simulation(tiny(), [&](const std::string& line) {
    const auto j = Json::parse(line);
    if (j["type"] == "phase") phases[j["req"]].emplace_back(j["phase"], j["t"]);
    if (j["type"] == "done") {
      ++done;
      generated += j["out"].get<std::size_t>();
    }
  });
  const std::vector<std::string> order{"tokenize",        "apc_matching",   "prefill_waiting",
                                       "prefill_scheduled", "prefill_running", "decode_waiting",
                                       "decode_scheduled", "decode_running",  "done"};
  ASSERT_GT(done, 0u);
  ASSERT_GT(generated, done);
  std::size_t finished = 0;
  for (const auto& [id, seq] : phases) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      ASSERT_LT(i, order.size());
      EXPECT_EQ(seq[i].first, order[i]) << "request " << id;
      if (i > 0) {
        EXPECT_GE(seq[i].second, seq[i - 1].second);
      }
    }
    finished += seq.back().first == "done";
  }
  EXPECT_EQ(finished, done);
}

TEST(Simulation, EventLogReplayMatchesReport) {
  std::ostringstream log;
  const auto r = run_simulation(tiny(), [&](const std::string& l) { log << l << "\n"; });
  std::istringstream in(log.str());
  const auto replay = replay_event_log(in, "log");
  EXPECT_EQ(report_csv_row(replay), report_csv_row(r));
  EXPECT_EQ(replay.output_tokens, r.output_tokens);
  EXPECT_EQ(replay.completed, r.completed);
}

TEST(Simulation, DynamicPlacementReactsToShiftingHotSet) {
  auto s = tiny();
  s.sim.duration = 60;
  s.workload.expert_skew = 1.2;
  s.workload.shift_period = 20;
  s.placement.scheduler.interval = 5;
  const auto r = run_simulation(s);
  EXPECT_GE(r.rebalances, 1u);
  s.placement_mode = PlacementMode::kStatic;
  EXPECT_EQ(run_simulation(s).rebalances, 0u);
}

TEST(Simulation, DeferralNeverExceedsHoldMax) {
  auto s = tiny();
  s.proxy.hold_max = 0.05;
  const auto r = run_simulation(s);
  EXPECT_LE(r.max_deferral, 0.05);
  s.proxy.deferral = false;
  EXPECT_EQ(run_simulation(s).max_deferral, 0.0);
}

TEST(Simulation, MultipleDecodeGroups) {
  auto s = tiny();
  s.cluster.set_xpyd("2P8-2D8");
  const auto r = run_simulation(s);
  EXPECT_EQ(r.concurrency, 2u * 16u * 2u);
  ASSERT_EQ(r.decode_utilization.size(), 2u);
  for (double u : r.decode_utilization) EXPECT_GT(u, 0.0);
  EXPECT_GT(r.completed, 0u);
}

}  // namespace
}  // namespace pdsim
