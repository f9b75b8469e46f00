// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// Static expert placement: per-layer redundancy budgeting, heap-greedy
// replica counts, greedy + topology-aware device assignment, and an
// exhaustive single-layer oracle used by the tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "pdsim/core.hpp"

namespace pdsim {

// Per-layer slot counts s_l plus the whole-slot increments granted on top of
// the ceil(E/R) baseline. One extra slot costs R redundant instances.
struct BudgetVector {
  std::size_t experts = 0;
  std::size_t devices = 0;
  std::vector<std::size_t> slots;
  std::vector<std::size_t> extra_slots;

  std::size_t layers() const { return slots.size(); }

  // Room for redundant instances in layer l under its slot count.
  std::size_t redundancy_room(std::size_t l) const { return slots[l] * devices - experts; }
};

using ReplicaCounts = std::vector<std::size_t>;

// Relative communication cost between devices; symmetric with a zero diagonal.
class Topology {
 public:
  Topology() = default;

  Topology(std::size_t devices, std::vector<double> cost) : devices_(devices), cost_(std::move(cost)) {
    detail::require(devices_ >= 1, "topology needs at least one device");
    detail::require(cost_.size() == devices_ * devices_, "topology matrix must be R x R");
    for (std::size_t a = 0; a < devices_; ++a) {
      detail::require(at(a, a) == 0.0, "topology diagonal must be zero");
      for (std::size_t b = 0; b < devices_; ++b) {
        detail::require(at(a, b) >= 0.0, "topology costs must be non-negative");
        detail::require(at(a, b) == at(b, a), "topology matrix must be symmetric");
      }
    }
  }

  static Topology zeros(std::size_t devices) {
    return Topology(devices, std::vector<double>(devices * devices, 0.0));
  }

  // Devices grouped in blocks of `group`; cost `near` inside a block, `far` across.
  static Topology grouped(std::size_t devices, std::size_t group, double near, double far) {
    detail::require(group >= 1, "topology group size must be >= 1");
    std::vector<double> c(devices * devices, 0.0);
    for (std::size_t a = 0; a < devices; ++a)
      for (std::size_t b = 0; b < devices; ++b)
        if (a != b) c[a * devices + b] = (a / group == b / group) ? near : far;
    return Topology(devices, std::move(c));
  }

  std::size_t devices() const { return devices_; }
  double at(std::size_t a, std::size_t b) const { return cost_[a * devices_ + b]; }

  bool is_zero() const {
    return std::all_of(cost_.begin(), cost_.end(), [](double v) { return v == 0.0; });
  }

 private:
  std::size_t devices_ = 0;
  std::vector<double> cost_;
};

struct PlacementOptions {
  // Upper bound on hill-climbing passes in the topology remap.
  std::size_t remap_passes = 3;
  // Local search over candidate layouts (may change replica counts).
  bool refine = true;
  // Above this E*R product only the winning candidate is refined.
  std::size_t refine_all_limit = 512;
};

// Sum over experts of pairwise communication cost between that expert's replicas.
inline double topology_cost(const PlacementTensor& p, std::size_t l, const Topology& topo) {
  double total = 0.0;
  for (std::size_t e = 0; e < p.experts(); ++e) {
    const auto hosts = p.devices_hosting(l, e);
    for (std::size_t i = 0; i < hosts.size(); ++i)
      for (std::size_t j = i + 1; j < hosts.size(); ++j) total += topo.at(hosts[i], hosts[j]);
  }
  return total;
}

// Heap-greedy: hand out k extra replicas one at a time to the expert with the
// largest per-replica load that can still take one (at most one per device).
inline ReplicaCounts determine_replicas(std::span<const double> layer_loads, std::size_t k,
                                        std::size_t devices) {
  const std::size_t experts = layer_loads.size();
  detail::require(experts >= 1 && devices >= 1, "determine_replicas: empty layer");
  if (k > experts * (devices - 1))
    throw InvalidArgument("determine_replicas: " + std::to_string(k) +
                          " redundant replicas exceed the one-per-device cap");

  ReplicaCounts counts(experts, 1);
  struct Entry {
    double per_replica;
    std::size_t expert;
  };
  // Max-heap on per-replica load, lower expert index first on ties.
  auto worse = [](const Entry& a, const Entry& b) {
    if (a.per_replica != b.per_replica) return a.per_replica < b.per_replica;
    return a.expert > b.expert;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (std::size_t e = 0; e < experts; ++e)
    if (devices > 1) heap.push({layer_loads[e], e});

  for (std::size_t step = 0; step < k; ++step) {
    const Entry top = heap.top();
    heap.pop();
    const std::size_t e = top.expert;
    ++counts[e];
    if (counts[e] < devices)
      heap.push({layer_loads[e] / static_cast<double>(counts[e]), e});
  }
  return counts;
}

namespace detail {

inline void check_replica_counts(const ReplicaCounts& counts, std::size_t devices, std::size_t slots) {
  std::size_t total = 0;
  for (std::size_t c : counts) {
    if (c < 1 || c > devices)
      throw InfeasiblePlacement("replica count " + std::to_string(c) + " outside [1, " +
                                std::to_string(devices) + "]");
    total += c;
  }
  if (total > slots * devices)
    throw InfeasiblePlacement(std::to_string(total) + " instances do not fit in " +
                              std::to_string(devices) + " devices x " + std::to_string(slots) + " slots");
}

inline std::vector<std::vector<std::size_t>> host_lists(const PlacementTensor& p) {
  std::vector<std::vector<std::size_t>> on(p.devices());
  for (std::size_t r = 0; r < p.devices(); ++r) on[r] = p.experts_on(0, r);
  return on;
}

// Pairwise refinement: move an instance from a heavier device a to a lighter
// device b (into a free slot, or swapping with one of b's instances) when the
// transferred load t satisfies 0 < t < load[a] - load[b]. Each accepted step
// lowers the sum of squared loads and never raises the peak.
inline void balance_refine(PlacementTensor& p, const std::vector<double>& share, std::vector<double>& load,
                           std::vector<std::size_t>& used, std::size_t slots) {
  const std::size_t devices = p.devices();
  constexpr double kEps = 1e-12;
  constexpr std::size_t kMaxSteps = 10000;
  constexpr std::size_t kFreeSlot = static_cast<std::size_t>(-1);

  for (std::size_t step = 0; step < kMaxSteps; ++step) {
    const auto on = host_lists(p);
    bool moved = false;
    for (std::size_t a = 0; a < devices && !moved; ++a) {
      for (std::size_t b = 0; b < devices && !moved; ++b) {
        const double gap = load[a] - load[b];
        if (gap <= kEps) continue;
        for (std::size_t e : on[a]) {
          if (p.hosts(0, b, e)) continue;
          std::size_t pick = kFreeSlot;
          double t = share[e];
          bool ok = used[b] < slots && t > kEps && t < gap - kEps;
          if (!ok) {
            for (std::size_t f : on[b]) {
              if (p.hosts(0, a, f)) continue;
              const double tf = share[e] - share[f];
              if (tf > kEps && tf < gap - kEps) {
                pick = f;
                t = tf;
                ok = true;
                break;
              }
            }
          }
          if (!ok) continue;
          p.set(0, a, e, false);
          p.set(0, b, e, true);
          if (pick != kFreeSlot) {
            p.set(0, b, pick, false);
            p.set(0, a, pick, true);
          } else {
            --used[a];
            ++used[b];
          }
          load[a] -= t;
          load[b] += t;
          moved = true;
          break;
        }
      }
    }
    if (!moved) break;
  }
}

// Local search on a finished layout that may also change replica counts:
// add a replica of a peak-device expert into a free slot elsewhere, or swap a
// redundant replica on the peak device for a replica of another expert.
// Candidates are ranked lexicographically by (peak load, sum of squares).
inline void replica_refine(PlacementTensor& p, std::span<const double> layer_loads, std::size_t slots) {
  const std::size_t devices = p.devices();
  const std::size_t experts = p.experts();
  constexpr double kEps = 1e-12;
  constexpr std::size_t kMaxSteps = 1000;

  auto score = [](const std::vector<double>& v) {
    double peak = 0.0, ssq = 0.0;
    for (double x : v) {
      peak = std::max(peak, x);
      ssq += x * x;
    }
    return std::pair{peak, ssq};
  };
  auto better = [&](std::pair<double, double> a, std::pair<double, double> b) {
    if (a.first < b.first - kEps) return true;
    return a.first <= b.first + kEps && a.second < b.second - kEps;
  };

  for (std::size_t step = 0; step < kMaxSteps; ++step) {
    std::vector<std::size_t> count(experts), used(devices);
    for (std::size_t e = 0; e < experts; ++e) count[e] = p.replica_count(0, e);
    for (std::size_t r = 0; r < devices; ++r) used[r] = p.used_slots(0, r);
    std::vector<double> share(experts);
    for (std::size_t e = 0; e < experts; ++e) share[e] = layer_loads[e] / static_cast<double>(count[e]);
    std::vector<double> load = layer_device_loads(p, 0, layer_loads);
    balance_refine(p, share, load, used, slots);

    const std::size_t a = static_cast<std::size_t>(std::max_element(load.begin(), load.end()) - load.begin());
    auto best = score(load);
    enum class Kind { kNone, kAdd, kExchange } kind = Kind::kNone;
    std::size_t bx = 0, by = 0, bb = 0;
    std::vector<double> trial(devices);

    // Re-shares expert e from c to c + dc replicas on its current hosts.
    auto reshare = [&](std::size_t e, int dc) {
      const double now = share[e];
      const double next = layer_loads[e] / static_cast<double>(static_cast<int>(count[e]) + dc);
      for (std::size_t r = 0; r < devices; ++r)
        if (p.hosts(0, r, e)) trial[r] += next - now;
      return next;
    };

    for (std::size_t x = 0; x < experts; ++x) {
      if (!p.hosts(0, a, x)) continue;
      if (count[x] < devices) {
        for (std::size_t b = 0; b < devices; ++b) {
          if (used[b] >= slots || p.hosts(0, b, x)) continue;
          trial = load;
          trial[b] += reshare(x, +1);
          const auto sc = score(trial);
          if (better(sc, best)) best = sc, kind = Kind::kAdd, bx = x, bb = b;
        }
      }
      if (count[x] >= 2) {
        for (std::size_t y = 0; y < experts; ++y) {
          if (y == x || p.hosts(0, a, y) || count[y] >= devices) continue;
          trial = load;
          trial[a] -= share[x];
          // x loses its replica on a; remaining hosts absorb the difference.
          const double x_next = layer_loads[x] / static_cast<double>(count[x] - 1);
          for (std::size_t r = 0; r < devices; ++r)
            if (r != a && p.hosts(0, r, x)) trial[r] += x_next - share[x];
          trial[a] += reshare(y, +1);
          const auto sc = score(trial);
          if (better(sc, best)) best = sc, kind = Kind::kExchange, bx = x, by = y;
        }
      }
    }
    if (kind == Kind::kNone) break;
    if (kind == Kind::kAdd) {
      p.set(0, bb, bx, true);
    } else {
      p.set(0, a, bx, false);
      p.set(0, a, by, true);
    }
  }
}

// Greedy list assignment of expert instances to the least-loaded legal device.
inline PlacementTensor greedy_assign(const ReplicaCounts& counts, std::span<const double> layer_loads,
                                     std::size_t devices, std::size_t slots) {
  const std::size_t experts = counts.size();
  PlacementTensor p(1, devices, experts);
  std::vector<double> share(experts);
  for (std::size_t e = 0; e < experts; ++e) share[e] = layer_loads[e] / static_cast<double>(counts[e]);

  std::vector<std::size_t> order;  // one entry per instance
  for (std::size_t e = 0; e < experts; ++e)
    for (std::size_t c = 0; c < counts[e]; ++c) order.push_back(e);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (share[a] != share[b]) return share[a] > share[b];
    return a < b;
  });

  std::vector<double> load(devices, 0.0);
  std::vector<std::size_t> used(devices, 0);
  auto pick = [&](auto&& ok) {
    std::size_t best = devices;
    for (std::size_t r = 0; r < devices; ++r)
      if (ok(r) && (best == devices || load[r] < load[best])) best = r;
    return best;
  };

  for (std::size_t e : order) {
    std::size_t dev = pick([&](std::size_t r) { return used[r] < slots && !p.hosts(0, r, e); });
    if (dev == devices) {
      // Every device with a free slot already hosts e. Move some expert f off a
      // full device b that lacks e onto a free device a (a cannot hold all of
      // b's experts, or it would be over capacity), then put e on b.
      const std::size_t a = pick([&](std::size_t r) { return used[r] < slots; });
      const std::size_t b = pick([&](std::size_t r) { return !p.hosts(0, r, e); });
      if (a == devices || b == devices) throw InfeasiblePlacement("no legal slot for expert instance");
      std::size_t f = experts;
      for (std::size_t cand = 0; cand < experts; ++cand) {
        if (!p.hosts(0, b, cand) || p.hosts(0, a, cand)) continue;
        if (f == experts || share[cand] < share[f]) f = cand;
      }
      if (f == experts) throw InfeasiblePlacement("placement repair failed");
      p.set(0, b, f, false);
      p.set(0, a, f, true);
      load[b] -= share[f];
      load[a] += share[f];
      ++used[a];
      --used[b];
      dev = b;
    }
    p.set(0, dev, e, true);
    load[dev] += share[e];
    ++used[dev];
  }
  return p;
}

// Pairwise instance swaps that strictly lower topology cost and keep the
// peak device load (and therefore the imbalance ratio) from rising.
inline void topology_remap(PlacementTensor& p, std::span<const double> layer_loads, const Topology& topo,
                           std::size_t passes) {
  if (topo.is_zero() || passes == 0) return;
  const std::size_t devices = p.devices();
  const std::size_t experts = p.experts();
  std::vector<std::size_t> counts(experts);
  for (std::size_t e = 0; e < experts; ++e) counts[e] = p.replica_count(0, e);
  std::vector<double> share(experts);
  for (std::size_t e = 0; e < experts; ++e) share[e] = layer_loads[e] / static_cast<double>(counts[e]);

  std::vector<double> load = layer_device_loads(p, 0, layer_loads);
  constexpr double kEps = 1e-12;

  // Cost change of moving one replica of e from device `from` to device `to`.
  auto move_delta = [&](std::size_t e, std::size_t from, std::size_t to) {
    double d = 0.0;
    for (std::size_t x = 0; x < devices; ++x) {
      if (x == from || !p.hosts(0, x, e)) continue;
      d += topo.at(to, x) - topo.at(from, x);
    }
    return d;
  };

  for (std::size_t pass = 0; pass < passes; ++pass) {
    bool improved = false;
    auto on = host_lists(p);
    for (std::size_t e = 0; e < experts; ++e) {
      if (counts[e] < 2) continue;  // single replicas contribute no pair cost
      for (std::size_t a = 0; a < devices; ++a) {
        if (!p.hosts(0, a, e)) continue;
        bool moved = false;
        for (std::size_t b = 0; b < devices && !moved; ++b) {
          if (b == a || p.hosts(0, b, e)) continue;
          const double peak = *std::max_element(load.begin(), load.end());
          for (std::size_t f : on[b]) {
            if (f == e || p.hosts(0, a, f)) continue;
            const double new_a = load[a] - share[e] + share[f];
            const double new_b = load[b] - share[f] + share[e];
            if (new_a > peak + kEps || new_b > peak + kEps) continue;
            const double delta = move_delta(e, a, b) + move_delta(f, b, a);
            if (delta >= -kEps) continue;
            p.set(0, a, e, false);
            p.set(0, b, e, true);
            p.set(0, b, f, false);
            p.set(0, a, f, true);
            load[a] = new_a;
            load[b] = new_b;
            on[a] = p.experts_on(0, a);
            on[b] = p.experts_on(0, b);
            improved = moved = true;
            break;
          }
        }
      }
    }
    if (!improved) break;
  }
}

}  // namespace detail

// Maps replica counts onto devices for one layer. Returns a 1-layer tensor.
inline PlacementTensor generate_placement(const ReplicaCounts& counts, std::span<const double> layer_loads,
                                          std::size_t devices, std::size_t slots, const Topology& topo,
                                          const PlacementOptions& opts = {}) {
  detail::require(counts.size() == layer_loads.size(), "replica counts and loads differ in length");
  detail::require(topo.devices() == devices, "topology size does not match device count");
  detail::check_replica_counts(counts, devices, slots);
  PlacementTensor p = detail::greedy_assign(counts, layer_loads, devices, slots);
  detail::topology_remap(p, layer_loads, topo, opts.remap_passes);
  return p;
}

inline std::size_t min_slots(std::size_t experts, std::size_t devices) {
  return (experts + devices - 1) / devices;
}

// Imbalance of the greedy single-replica layout at baseline slots.
inline double no_redundancy_imbalance(std::span<const double> layer_loads, std::size_t devices) {
  const std::size_t experts = layer_loads.size();
  const ReplicaCounts ones(experts, 1);
  const auto p = detail::greedy_assign(ones, layer_loads, devices, min_slots(experts, devices));
  return imbalance_ratio(layer_device_loads(p, 0, layer_loads));
}

namespace detail {

// Largest-remainder apportionment of `units` by weight, respecting per-entry
// caps. Zero-weight entries are only served once every positive-weight entry
// is capped; then they share equally.
inline std::vector<std::size_t> apportion(std::size_t units, const std::vector<double>& weight,
                                          const std::vector<std::size_t>& cap) {
  const std::size_t n = weight.size();
  std::vector<std::size_t> alloc(n, 0);
  std::size_t remaining = units;
  while (remaining > 0) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < n; ++i)
      if (alloc[i] < cap[i] && weight[i] > 0.0) pool.push_back(i);
    bool uniform = false;
    if (pool.empty()) {
      uniform = true;
      for (std::size_t i = 0; i < n; ++i)
        if (alloc[i] < cap[i]) pool.push_back(i);
    }
    if (pool.empty()) break;

    double total_w = 0.0;
    for (std::size_t i : pool) total_w += uniform ? 1.0 : weight[i];
    std::vector<double> remainder(n, 0.0);
    std::size_t given = 0;
    for (std::size_t i : pool) {
      const double quota = static_cast<double>(remaining) * (uniform ? 1.0 : weight[i]) / total_w;
      const auto whole = static_cast<std::size_t>(std::floor(quota));
      const std::size_t take = std::min(whole, cap[i] - alloc[i]);
      alloc[i] += take;
      given += take;
      remainder[i] = quota - static_cast<double>(whole);
    }
    std::vector<std::size_t> by_remainder = pool;
    std::stable_sort(by_remainder.begin(), by_remainder.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t i : by_remainder) {
      if (given >= remaining) break;
      if (alloc[i] < cap[i]) {
        ++alloc[i];
        ++given;
      }
    }
    if (given == 0) break;
    remaining -= std::min(given, remaining);
  }
  return alloc;
}

}  // namespace detail

// Splits a budget of `redundant_instances` across layers in whole-slot units
// (R instances each), proportionally to each layer's excess imbalance B_l - 1.
inline BudgetVector allocate_budget_by_imbalance(const LoadMatrix& loads, std::size_t devices,
                                                 std::int64_t redundant_instances) {
  if (redundant_instances < 0) throw InvalidArgument("redundancy budget must be non-negative");
  detail::require(devices >= 1, "need at least one device");
  const std::size_t layers = loads.layers();
  const std::size_t experts = loads.experts();
  const std::size_t base = min_slots(experts, devices);

  std::vector<double> excess(layers);
  std::vector<std::size_t> cap(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    excess[l] = no_redundancy_imbalance(loads.row(l), devices) - 1.0;
    if (excess[l] < 1e-12) excess[l] = 0.0;
    cap[l] = experts - base;  // s_l == E lets every device host every expert
  }
  const auto units = static_cast<std::size_t>(redundant_instances) / devices;

  BudgetVector budget;
  budget.experts = experts;
  budget.devices = devices;
  budget.extra_slots = detail::apportion(units, excess, cap);
  budget.slots.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) budget.slots[l] = base + budget.extra_slots[l];
  return budget;
}

struct LayerSearchResult {
  PlacementTensor placement;  // single layer
  double imbalance = 1.0;
  std::size_t redundancy = 0;
};

// Tries every redundancy level the slot count allows and keeps the least
// imbalanced layout (ties go to fewer replicas).
inline LayerSearchResult place_layer(std::span<const double> layer_loads, std::size_t devices, std::size_t slots,
                                     const Topology& topo, const PlacementOptions& opts = {}) {
  const std::size_t experts = layer_loads.size();
  if (slots * devices < experts)
    throw InfeasiblePlacement(std::to_string(experts) + " experts do not fit in " + std::to_string(devices) +
                              " devices x " + std::to_string(slots) + " slots");
  const std::size_t max_k = std::min(slots * devices - experts, experts * (devices - 1));

  const bool refine_each = opts.refine && experts * devices <= opts.refine_all_limit;
  auto refine = [&](PlacementTensor& cand) {
    detail::replica_refine(cand, layer_loads, slots);
    detail::topology_remap(cand, layer_loads, topo, opts.remap_passes);
  };

  LayerSearchResult best;
  double best_b = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k <= max_k; ++k) {
    const auto counts = determine_replicas(layer_loads, k, devices);
    auto cand = generate_placement(counts, layer_loads, devices, slots, topo, opts);
    if (refine_each) refine(cand);
    const double b = imbalance_ratio(layer_device_loads(cand, 0, layer_loads));
    if (b < best_b - 1e-12) {
      best_b = b;
      best.imbalance = b;
      best.redundancy = cand.total_replicas(0) - experts;
      best.placement = std::move(cand);
    }
  }
  if (opts.refine && !refine_each) {
    PlacementTensor cand = best.placement;
    refine(cand);
    const double b = imbalance_ratio(layer_device_loads(cand, 0, layer_loads));
    if (b < best.imbalance - 1e-12) {
      best.imbalance = b;
      best.redundancy = cand.total_replicas(0) - experts;
      best.placement = std::move(cand);
    }
  }
  return best;
}

struct StaticPlacement {
  PlacementTensor placement;
  BudgetVector budget;
  std::vector<double> imbalance;         // per layer, after placement
  std::vector<std::size_t> redundancy;   // chosen redundant instances per layer
};

inline StaticPlacement static_expert_placement(const LoadMatrix& loads, std::size_t devices,
                                               std::int64_t redundant_instances, const Topology& topo,
                                               const PlacementOptions& opts = {}) {
  detail::require(topo.devices() == devices, "topology size does not match device count");
  StaticPlacement out;
  out.budget = allocate_budget_by_imbalance(loads, devices, redundant_instances);
  out.placement = PlacementTensor(loads.layers(), devices, loads.experts());
  for (std::size_t l = 0; l < loads.layers(); ++l) {
    auto layer = place_layer(loads.row(l), devices, out.budget.slots[l], topo, opts);
    out.placement.assign_layer(l, layer.placement);
    out.imbalance.push_back(layer.imbalance);
    out.redundancy.push_back(layer.redundancy);
  }
  if (!out.placement.is_valid(out.budget.slots))
    throw InvariantBreach("static placement produced a layout violating existence/capacity");
  return out;
}

struct OracleResult {
  PlacementTensor placement;  // single layer
  double imbalance = 1.0;
};

inline constexpr double kBruteForceLimit = 1e7;

// Exhaustive search over every legal single-layer occupancy matrix. Devices are
// interchangeable, so only non-decreasing per-device subset sequences are visited.
inline OracleResult brute_force_layer(std::span<const double> layer_loads, std::size_t devices, std::size_t slots) {
  const std::size_t experts = layer_loads.size();
  detail::require(experts >= 1 && devices >= 1, "brute_force_layer: empty instance");
  if (experts > 24) throw SearchTooLarge("brute_force_layer: too many experts to enumerate");
  if (slots * devices < experts) throw InfeasiblePlacement("brute_force_layer: experts do not fit");

  std::vector<std::uint32_t> subsets;
  for (std::uint32_t m = 0; m < (1u << experts); ++m)
    if (static_cast<std::size_t>(__builtin_popcount(m)) <= slots) subsets.push_back(m);
  const double space = std::pow(static_cast<double>(subsets.size()), static_cast<double>(devices));
  if (space > kBruteForceLimit)
    throw SearchTooLarge("brute_force_layer: " + std::to_string(space) + " candidates exceed the limit");

  const std::uint32_t full = (experts == 32) ? ~0u : ((1u << experts) - 1);
  std::vector<std::size_t> chosen(devices, 0);
  std::vector<std::size_t> best_choice;
  double best_b = std::numeric_limits<double>::infinity();
  std::vector<double> dev_load(devices);

  auto evaluate = [&]() {
    std::vector<std::size_t> count(experts, 0);
    for (std::size_t r = 0; r < devices; ++r)
      for (std::size_t e = 0; e < experts; ++e)
        if (subsets[chosen[r]] >> e & 1u) ++count[e];
    std::fill(dev_load.begin(), dev_load.end(), 0.0);
    for (std::size_t r = 0; r < devices; ++r)
      for (std::size_t e = 0; e < experts; ++e)
        if (subsets[chosen[r]] >> e & 1u) dev_load[r] += layer_loads[e] / static_cast<double>(count[e]);
    const double b = imbalance_ratio(dev_load);
    if (b < best_b - 1e-12) {
      best_b = b;
      best_choice = chosen;
    }
  };

  auto recurse = [&](auto&& self, std::size_t r, std::size_t from, std::uint32_t covered) -> void {
    if (r == devices) {
      if (covered == full) evaluate();
      return;
    }
    for (std::size_t i = from; i < subsets.size(); ++i) {
      chosen[r] = i;
      self(self, r + 1, i, covered | subsets[i]);
    }
  };
  recurse(recurse, 0, 0, 0u);

  OracleResult out;
  out.placement = PlacementTensor(1, devices, experts);
  for (std::size_t r = 0; r < devices; ++r)
    for (std::size_t e = 0; e < experts; ++e)
      if (subsets[best_choice[r]] >> e & 1u) out.placement.set(0, r, e);
  out.imbalance = best_b;
  return out;
}

}  // namespace pdsim
