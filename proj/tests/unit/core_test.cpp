// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.

#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "pdsim/core.hpp"

namespace pdsim {
namespace {

PlacementTensor from_lists(std::size_t experts, const std::vector<std::vector<std::size_t>>& devices) {
  PlacementTensor p(1, devices.size(), experts);
  for (std::size_t r = 0; r < devices.size(); ++r)
    for (std::size_t e : devices[r]) p.set(0, r, e);
  return p;
}

// Scalar oracle: walk every (r, e) cell and divide by a separately counted
// replica number.
std::vector<double> scalar_device_loads(const PlacementTensor& p, const std::vector<double>& d) {
  std::vector<double> out(p.devices(), 0.0);
  for (std::size_t r = 0; r < p.devices(); ++r) {
    for (std::size_t e = 0; e < p.experts(); ++e) {
      if (!p.hosts(0, r, e)) continue;
      int n = 0;
      for (std::size_t x = 0; x < p.devices(); ++x) n += p.hosts(0, x, e);
      out[r] += d[e] / n;
    }
  }
  return out;
}

TEST(DeviceLoads, OneReplicaEach) {
  const auto p = from_lists(2, {{0}, {1}});
  const auto d = LoadMatrix::from_rows({{3, 5}});
  EXPECT_EQ(device_loads(p, d, 0), (DeviceLoadVector{3, 5}));
}

TEST(DeviceLoads, EvenSplitAcrossTwoReplicas) {
  const auto p = from_lists(1, {{0}, {0}});
  const auto d = LoadMatrix::from_rows({{4}});
  EXPECT_EQ(device_loads(p, d, 0), (DeviceLoadVector{2, 2}));
}

TEST(DeviceLoads, SharedHotExpertMatchesScalarOracle) {
  const auto p = from_lists(3, {{0, 1}, {0, 2}});
  const std::vector<double> d_row{9, 2, 1};
  const auto d = LoadMatrix::from_rows({d_row});
  const auto loads = device_loads(p, d, 0);
  const auto oracle = scalar_device_loads(p, d_row);
  ASSERT_EQ(loads.size(), 2u);
  EXPECT_DOUBLE_EQ(oracle[0], 6.5);
  EXPECT_DOUBLE_EQ(oracle[1], 5.5);
  EXPECT_DOUBLE_EQ(loads[0], oracle[0]);
  EXPECT_DOUBLE_EQ(loads[1], oracle[1]);
}

TEST(DeviceLoads, LiteralModeCountsFullLoadOnEveryReplica) {
  const auto p = from_lists(1, {{0}, {0}});
  const auto d = LoadMatrix::from_rows({{4}});
  EXPECT_EQ(device_loads(p, d, 0, LoadSplit::kFullPerReplica), (DeviceLoadVector{4, 4}));
}

TEST(DeviceLoads, EmptyDeviceIsZero) {
  const auto p = from_lists(1, {{0}, {}});
  const auto d = LoadMatrix::from_rows({{4}});
  EXPECT_EQ(device_loads(p, d, 0), (DeviceLoadVector{4, 0}));
}

TEST(DeviceLoads, Errors) {
  const auto p = from_lists(2, {{0}, {1}});
  EXPECT_THROW(device_loads(p, LoadMatrix::from_rows({{1, 2, 3}}), 0), InvalidArgument);
  EXPECT_THROW(device_loads(p, LoadMatrix::from_rows({{1, 2}}), 1), InvalidArgument);
}

TEST(Imbalance, Examples) {
  EXPECT_DOUBLE_EQ(imbalance_ratio(std::vector<double>{3, 5}), 1.25);
  EXPECT_EQ(imbalance_ratio(std::vector<double>{0.1, 0.1, 0.1}), 1.0);
  EXPECT_EQ(imbalance_ratio(std::vector<double>{0, 0}), 1.0);
  const auto p = from_lists(3, {{0, 1}, {0, 2}});
  EXPECT_NEAR(imbalance_ratio(p, LoadMatrix::from_rows({{9, 2, 1}}), 0), 6.5 / 6.0, 1e-12);
}

TEST(Imbalance, RandomPropertiesHold) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> load(0.0, 10.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r_count = 1 + rng() % 4;
    const std::size_t e_count = 1 + rng() % 6;
    PlacementTensor p(1, r_count, e_count);
    for (std::size_t e = 0; e < e_count; ++e) {
      p.set(0, rng() % r_count, e);
      if (rng() % 3 == 0) p.set(0, rng() % r_count, e);
    }
    std::vector<double> row(e_count);
    for (auto& v : row) v = load(rng);
    const auto d = LoadMatrix::from_rows({row});
    const auto loads = device_loads(p, d, 0);
    double in = 0, out = 0;
    for (double v : row) in += v;
    for (double v : loads) out += v;
    EXPECT_NEAR(in, out, 1e-9);
    const double b = imbalance_ratio(p, d, 0);
    EXPECT_GE(b, 1.0);
    const double c = 0.5 + load(rng);
    const auto scaled_loads = device_loads(p, d.scaled(c), 0);
    for (std::size_t r = 0; r < r_count; ++r) EXPECT_NEAR(scaled_loads[r], c * loads[r], 1e-9);
    EXPECT_NEAR(imbalance_ratio(p, d.scaled(c), 0), b, 1e-12);
  }
}

TEST(PlacementTensor, ConstraintChecks) {
  auto p = from_lists(3, {{0, 1}, {2}});
  const std::vector<std::size_t> two{2}, one{1};
  EXPECT_TRUE(p.satisfies_existence());
  EXPECT_TRUE(p.satisfies_capacity(two));
  EXPECT_FALSE(p.satisfies_capacity(one));
  p.set(0, 1, 2, false);
  EXPECT_FALSE(p.satisfies_existence());
  EXPECT_THROW(PlacementTensor(0, 1, 1), InvalidArgument);
}

TEST(Percentile, NearestRank) {
  MetricSeries s;
  for (int i = 1; i <= 100; ++i) s.add(i);
  EXPECT_EQ(percentile(s, 0.99), 99);
  EXPECT_EQ(percentile(s, 0.0), 1);
  EXPECT_EQ(percentile(s, 1.0), 100);
  EXPECT_EQ(percentile(MetricSeries{MetricKind::kTpotMillis, {7}}, 0.37), 7);
}

TEST(Percentile, MedianOfThreeMatchesExhaustiveRank) {
  MetricSeries s{MetricKind::kTokenCount, {5, 1, 3}};
  // Exhaustive rank check: the answer v is the smallest sample with at least
  // ceil(q*n) samples <= v.
  const double q = 0.5;
  double expected = -1;
  for (double v : s.samples) {
    int le = 0;
    for (double w : s.samples) le += (w <= v);
    if (le >= 2 && (expected < 0 || v < expected)) expected = v;
  }
  EXPECT_EQ(expected, 3);
  EXPECT_EQ(percentile(s, q), expected);
}

TEST(Percentile, MonotoneInQAndEmptyThrows) {
  std::mt19937_64 rng(3);
  MetricSeries s;
  for (int i = 0; i < 57; ++i) s.add(static_cast<double>(rng() % 1000));
  double prev = -1;
  for (int i = 0; i <= 100; ++i) {
    const double v = percentile(s, i / 100.0);
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_THROW(percentile(MetricSeries{}, 0.5), EmptyInput);
}

}  // namespace
}  // namespace pdsim
