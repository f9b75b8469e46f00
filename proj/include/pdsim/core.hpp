// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// Shared domain types: expert placement tensors, per-layer load matrices,
// device load / imbalance arithmetic and metric series.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pdsim/errors.hpp"

namespace pdsim {

// Binary occupancy of experts on devices, one R x E slab per layer.
// bits(l, r, e) == true means device r hosts a replica of expert e in layer l.
class PlacementTensor {
 public:
  PlacementTensor() = default;

  PlacementTensor(std::size_t layers, std::size_t devices, std::size_t experts)
      : layers_(layers), devices_(devices), experts_(experts),
        bits_(layers * devices * experts, 0) {
    detail::require(layers >= 1 && devices >= 1 && experts >= 1,
                    "placement dimensions must all be >= 1");
  }

  std::size_t layers() const { return layers_; }
  std::size_t devices() const { return devices_; }
  std::size_t experts() const { return experts_; }

  bool hosts(std::size_t l, std::size_t r, std::size_t e) const {
    return bits_[index(l, r, e)] != 0;
  }

  void set(std::size_t l, std::size_t r, std::size_t e, bool on = true) {
    bits_[index(l, r, e)] = on ? 1 : 0;
  }

  std::size_t replica_count(std::size_t l, std::size_t e) const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < devices_; ++r) n += hosts(l, r, e) ? 1 : 0;
    return n;
  }

  std::size_t used_slots(std::size_t l, std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t e = 0; e < experts_; ++e) n += hosts(l, r, e) ? 1 : 0;
    return n;
  }

  std::vector<std::size_t> experts_on(std::size_t l, std::size_t r) const {
    std::vector<std::size_t> out;
    for (std::size_t e = 0; e < experts_; ++e)
      if (hosts(l, r, e)) out.push_back(e);
    return out;
  }

  std::vector<std::size_t> devices_hosting(std::size_t l, std::size_t e) const {
    std::vector<std::size_t> out;
    for (std::size_t r = 0; r < devices_; ++r)
      if (hosts(l, r, e)) out.push_back(r);
    return out;
  }

  // Every expert of every layer lives on at least one device.
  bool satisfies_existence() const {
    for (std::size_t l = 0; l < layers_; ++l)
      for (std::size_t e = 0; e < experts_; ++e)
        if (replica_count(l, e) == 0) return false;
    return true;
  }

  // No device exceeds its per-layer slot budget.
  bool satisfies_capacity(std::span<const std::size_t> slots) const {
    if (slots.size() != layers_) return false;
    for (std::size_t l = 0; l < layers_; ++l)
      for (std::size_t r = 0; r < devices_; ++r)
        if (used_slots(l, r) > slots[l]) return false;
    return true;
  }

  bool is_valid(std::span<const std::size_t> slots) const {
    return satisfies_existence() && satisfies_capacity(slots);
  }

  std::size_t total_replicas(std::size_t l) const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < devices_; ++r) n += used_slots(l, r);
    return n;
  }

  // Single-layer view as an independent tensor (layers() == 1).
  PlacementTensor layer(std::size_t l) const {
    PlacementTensor out(1, devices_, experts_);
    auto first = bits_.begin() + static_cast<std::ptrdiff_t>(index(l, 0, 0));
    std::copy(first, first + static_cast<std::ptrdiff_t>(devices_ * experts_),
              out.bits_.begin());
    return out;
  }

  void assign_layer(std::size_t l, const PlacementTensor& single) {
    detail::require(single.layers_ == 1 && single.devices_ == devices_ &&
                        single.experts_ == experts_,
                    "assign_layer: shape mismatch");
    std::copy(single.bits_.begin(), single.bits_.end(),
              bits_.begin() + static_cast<std::ptrdiff_t>(index(l, 0, 0)));
  }

  bool operator==(const PlacementTensor&) const = default;

 private:
  std::size_t index(std::size_t l, std::size_t r, std::size_t e) const {
    return (l * devices_ + r) * experts_ + e;
  }

  std::size_t layers_ = 0;
  std::size_t devices_ = 0;
  std::size_t experts_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Per-layer, per-expert non-negative load (abstract activation units).
class LoadMatrix {
 public:
  LoadMatrix() = default;

  LoadMatrix(std::size_t layers, std::size_t experts, double fill = 0.0)
      : layers_(layers), experts_(experts), values_(layers * experts, fill) {
    detail::require(layers >= 1 && experts >= 1, "load matrix dimensions must be >= 1");
    detail::require(fill >= 0.0, "loads must be non-negative");
  }

  static LoadMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    detail::require(!rows.empty() && !rows.front().empty(), "load matrix must be non-empty");
    LoadMatrix m(rows.size(), rows.front().size());
    for (std::size_t l = 0; l < rows.size(); ++l) {
      detail::require(rows[l].size() == m.experts_, "ragged load matrix");
      for (std::size_t e = 0; e < m.experts_; ++e) m.set(l, e, rows[l][e]);
    }
    return m;
  }

  std::size_t layers() const { return layers_; }
  std::size_t experts() const { return experts_; }

  double at(std::size_t l, std::size_t e) const { return values_[l * experts_ + e]; }

  void set(std::size_t l, std::size_t e, double v) {
    detail::require(v >= 0.0 && std::isfinite(v), "loads must be finite and non-negative");
    values_[l * experts_ + e] = v;
  }

  void add(std::size_t l, std::size_t e, double v) { set(l, e, at(l, e) + v); }

  std::span<const double> row(std::size_t l) const {
    return {values_.data() + l * experts_, experts_};
  }

  std::vector<double> row_copy(std::size_t l) const {
    auto r = row(l);
    return {r.begin(), r.end()};
  }

  LoadMatrix scaled(double c) const {
    LoadMatrix out = *this;
    for (double& v : out.values_) v *= c;
    return out;
  }

  bool operator==(const LoadMatrix&) const = default;

 private:
  std::size_t layers_ = 0;
  std::size_t experts_ = 0;
  std::vector<double> values_;
};

using DeviceLoadVector = std::vector<double>;

// How an expert's load is attributed to the devices that host it.
enum class LoadSplit {
  // D[l,e] is shared equally between the replicas of e.
  kEvenAcrossReplicas,
  // Every hosting device carries the full D[l,e] (the formula taken literally).
  kFullPerReplica,
};

// Loads of one layer's devices given that layer's expert loads.
inline DeviceLoadVector layer_device_loads(const PlacementTensor& p, std::size_t l,
                                           std::span<const double> expert_loads,
                                           LoadSplit mode = LoadSplit::kEvenAcrossReplicas) {
  detail::require(l < p.layers(), "layer index out of range");
  detail::require(expert_loads.size() == p.experts(), "expert load vector size mismatch");
  DeviceLoadVector loads(p.devices(), 0.0);
  for (std::size_t e = 0; e < p.experts(); ++e) {
    const double d = expert_loads[e];
    if (d == 0.0) continue;
    const std::size_t replicas = p.replica_count(l, e);
    if (replicas == 0) continue;
    const double share = mode == LoadSplit::kEvenAcrossReplicas ? d / static_cast<double>(replicas) : d;
    for (std::size_t r = 0; r < p.devices(); ++r)
      if (p.hosts(l, r, e)) loads[r] += share;
  }
  return loads;
}

inline DeviceLoadVector device_loads(const PlacementTensor& p, const LoadMatrix& d, std::size_t l,
                                     LoadSplit mode = LoadSplit::kEvenAcrossReplicas) {
  detail::require(d.layers() == p.layers() && d.experts() == p.experts(),
                  "placement and load matrix dimensions disagree");
  detail::require(l < p.layers(), "layer index out of range");
  return layer_device_loads(p, l, d.row(l), mode);
}

// Peak over mean. An all-zero vector counts as perfectly balanced.
inline double imbalance_ratio(std::span<const double> loads) {
  detail::require(!loads.empty(), "imbalance of an empty device set");
  const double peak = *std::max_element(loads.begin(), loads.end());
  const double total = std::accumulate(loads.begin(), loads.end(), 0.0);
  if (total <= 0.0) return 1.0;
  // Equal loads must give exactly 1.0, which peak / (total / n) does not
  // guarantee in floating point.
  if (std::all_of(loads.begin(), loads.end(), [&](double v) { return v == peak; })) return 1.0;
  return peak * static_cast<double>(loads.size()) / total;
}

inline double imbalance_ratio(const PlacementTensor& p, const LoadMatrix& d, std::size_t l,
                              LoadSplit mode = LoadSplit::kEvenAcrossReplicas) {
  const auto loads = device_loads(p, d, l, mode);
  return imbalance_ratio(loads);
}

// Worst layer.
inline double max_imbalance(const PlacementTensor& p, const LoadMatrix& d,
                            LoadSplit mode = LoadSplit::kEvenAcrossReplicas) {
  double worst = 1.0;
  for (std::size_t l = 0; l < p.layers(); ++l) worst = std::max(worst, imbalance_ratio(p, d, l, mode));
  return worst;
}

enum class MetricKind { kTtftSeconds, kTpotMillis, kE2eSeconds, kTokenCount };

struct MetricSeries {
  MetricKind kind = MetricKind::kTtftSeconds;
  std::vector<double> samples;

  void add(double v) {
    detail::require(v >= 0.0, "metric samples must be non-negative");
    samples.push_back(v);
  }
  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  double mean() const {
    if (samples.empty()) throw EmptyInput("mean of an empty metric series");
    return std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
  }
};

// Nearest-rank percentile: sorted[ceil(q*n) - 1], q=0 gives the minimum.
inline double percentile(const MetricSeries& series, double q) {
  if (series.empty()) throw EmptyInput("percentile of an empty metric series");
  detail::require(q >= 0.0 && q <= 1.0, "percentile fraction must lie in [0,1]");
  std::vector<double> sorted = series.samples;
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  // The epsilon keeps q*n that lands a hair above an integer (0.99*100) on it.
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-9));
  if (rank == 0) rank = 1;
  return sorted[std::min(rank, sorted.size()) - 1];
}

}  // namespace pdsim
