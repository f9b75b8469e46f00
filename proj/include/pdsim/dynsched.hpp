// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// Online expert re-balancing: sliding-window activation tracking, linear
// trend forecasting, trigger/margin decisions and non-blocking migration
// with an atomic placement switch.

#pragma once

#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pdsim/core.hpp"
#include "pdsim/placement.hpp"

namespace pdsim {

// Ring of the most recent W activation snapshots. Index 0 of snapshots() is
// the oldest entry.
class ActivationWindow {
 public:
  ActivationWindow(std::size_t capacity, double decay) : capacity_(capacity), decay_(decay) {
    detail::require(capacity >= 1, "activation window needs capacity >= 1");
    detail::require(decay > 0.0 && decay <= 1.0, "window decay must lie in (0, 1]");
  }

  std::size_t capacity() const { return capacity_; }
  double decay() const { return decay_; }
  std::size_t filled() const { return snapshots_.size(); }
  bool empty() const { return snapshots_.empty(); }
  const std::deque<LoadMatrix>& snapshots() const { return snapshots_; }

  void push(const LoadMatrix& snapshot) {
    if (!snapshots_.empty()) {
      const auto& ref = snapshots_.front();
      detail::require(snapshot.layers() == ref.layers() && snapshot.experts() == ref.experts(),
                      "activation snapshot dimensions do not match the window");
    }
    snapshots_.push_back(snapshot);
    if (snapshots_.size() > capacity_) snapshots_.pop_front();
  }

  // Normalised EWMA: weight decay * (1 - decay)^age, age 0 = newest.
  LoadMatrix smoothed() const {
    if (snapshots_.empty()) throw EmptyInput("activation window is empty");
    const auto& ref = snapshots_.back();
    LoadMatrix out(ref.layers(), ref.experts());
    double norm = 0.0;
    std::vector<double> w(snapshots_.size());
    for (std::size_t i = 0; i < snapshots_.size(); ++i) {
      const auto age = static_cast<double>(snapshots_.size() - 1 - i);
      w[i] = decay_ * std::pow(1.0 - decay_, age);
      norm += w[i];
    }
    for (std::size_t l = 0; l < ref.layers(); ++l) {
      for (std::size_t e = 0; e < ref.experts(); ++e) {
        double acc = 0.0;
        for (std::size_t i = 0; i < snapshots_.size(); ++i) acc += w[i] * snapshots_[i].at(l, e);
        out.set(l, e, acc / norm);
      }
    }
    return out;
  }

 private:
  std::size_t capacity_;
  double decay_;
  std::deque<LoadMatrix> snapshots_;
};

inline LoadMatrix update_activation_window(ActivationWindow& window, const LoadMatrix& snapshot) {
  window.push(snapshot);
  return window.smoothed();
}

// Per-entry least-squares line over the window, evaluated one interval past
// the newest snapshot and clamped at zero.
inline LoadMatrix predict_future_activations(const ActivationWindow& window) {
  if (window.empty()) throw EmptyInput("cannot forecast from an empty activation window");
  const auto& snaps = window.snapshots();
  const std::size_t n = snaps.size();
  if (n == 1) return snaps.front();

  const double x_mean = static_cast<double>(n - 1) / 2.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) sxx += (static_cast<double>(i) - x_mean) * (static_cast<double>(i) - x_mean);

  const auto& ref = snaps.back();
  LoadMatrix out(ref.layers(), ref.experts());
  for (std::size_t l = 0; l < ref.layers(); ++l) {
    for (std::size_t e = 0; e < ref.experts(); ++e) {
      double y_mean = 0.0;
      for (const auto& s : snaps) y_mean += s.at(l, e);
      y_mean /= static_cast<double>(n);
      double sxy = 0.0;
      for (std::size_t i = 0; i < n; ++i) sxy += (static_cast<double>(i) - x_mean) * (snaps[i].at(l, e) - y_mean);
      const double slope = sxy / sxx;
      const double pred = y_mean + slope * (static_cast<double>(n) - x_mean);
      out.set(l, e, pred > 0.0 ? pred : 0.0);
    }
  }
  return out;
}

struct SchedulerConfig {
  double trigger = 1.2;     // B_trigger
  double margin = 0.05;     // required improvement
  double interval = 10.0;   // seconds of simulated time between steps
  std::int64_t budget = 0;  // redundant expert instances across all layers
  std::size_t window_len = 4;
  double decay = 0.5;
  double expert_bytes = 1.0;    // size of one expert's weights, abstract units
  double link_bandwidth = 1.0;  // units per second on each device-to-device link

  void validate() const {
    if (!(trigger >= 1.0)) throw InvalidConfig("scheduler.trigger must be >= 1");
    if (!(margin >= 0.0)) throw InvalidConfig("scheduler.margin must be >= 0");
    if (!(interval > 0.0)) throw InvalidConfig("scheduler.interval must be > 0");
    if (budget < 0) throw InvalidConfig("scheduler.budget must be >= 0");
    if (window_len < 1) throw InvalidConfig("scheduler.window must be >= 1");
    if (!(decay > 0.0 && decay <= 1.0)) throw InvalidConfig("scheduler.decay must lie in (0, 1]");
    if (!(expert_bytes >= 0.0)) throw InvalidConfig("scheduler.expert_bytes must be >= 0");
    if (!(link_bandwidth > 0.0)) throw InvalidConfig("scheduler.link_bandwidth must be > 0");
  }
};

struct ExpertMove {
  std::size_t layer = 0;
  std::size_t expert = 0;
  std::size_t source = 0;
  std::size_t destination = 0;
  double bytes = 0.0;
};

struct MigrationPlan {
  std::vector<ExpertMove> moves;
  double start_time = 0.0;
  double duration = 0.0;  // max over links of bytes / bandwidth
  double switch_time = 0.0;
  PlacementTensor target;
  std::vector<std::size_t> target_slots;
};

// Links transfer in parallel; moves sharing a (source, destination) link queue up.
inline double migration_duration(std::span<const ExpertMove> moves, double link_bandwidth) {
  detail::require(link_bandwidth > 0.0, "link bandwidth must be positive");
  std::map<std::pair<std::size_t, std::size_t>, double> per_link;
  for (const auto& m : moves) {
    detail::require(m.source != m.destination, "a move must change devices");
    per_link[{m.source, m.destination}] += m.bytes;
  }
  double longest = 0.0;
  for (const auto& [link, bytes] : per_link) longest = std::max(longest, bytes / link_bandwidth);
  return longest;
}

// Every replica present in `to` but not in `from` is copied from the nearest
// current host (lowest device index on ties). Links run in parallel, so the
// transfer takes as long as the busiest (source, destination) link.
inline MigrationPlan plan_migration(const PlacementTensor& from, const PlacementTensor& to,
                                    std::vector<std::size_t> to_slots, const Topology& topo,
                                    double expert_bytes, double link_bandwidth, double now) {
  detail::require(from.layers() == to.layers() && from.devices() == to.devices() &&
                      from.experts() == to.experts(),
                  "migration endpoints differ in shape");
  detail::require(link_bandwidth > 0.0, "link bandwidth must be positive");
  MigrationPlan plan;
  plan.start_time = now;
  for (std::size_t l = 0; l < to.layers(); ++l) {
    for (std::size_t e = 0; e < to.experts(); ++e) {
      const auto sources = from.devices_hosting(l, e);
      for (std::size_t r = 0; r < to.devices(); ++r) {
        if (!to.hosts(l, r, e) || from.hosts(l, r, e)) continue;
        if (sources.empty()) throw InvalidArgument("migration target introduces an expert with no source replica");
        std::size_t src = sources.front();
        for (std::size_t s : sources)
          if (topo.devices() == to.devices() && topo.at(s, r) < topo.at(src, r)) src = s;
        plan.moves.push_back({l, e, src, r, expert_bytes});
      }
    }
  }
  plan.duration = migration_duration(plan.moves, link_bandwidth);
  plan.switch_time = now + plan.duration;
  plan.target = to;
  plan.target_slots = std::move(to_slots);
  return plan;
}

enum class MigrationEventKind { kTransferStart, kSwitch };

struct MigrationEvent {
  MigrationEventKind kind;
  double time;
};

// Background transfer (only when there is something to copy), then the cutover.
inline std::vector<MigrationEvent> migration_events(const MigrationPlan& plan) {
  std::vector<MigrationEvent> events;
  if (!plan.moves.empty()) events.push_back({MigrationEventKind::kTransferStart, plan.start_time});
  events.push_back({MigrationEventKind::kSwitch, plan.switch_time});
  return events;
}

struct MigrationRequest {
  bool deferred = false;  // another migration is still in flight
  std::vector<MigrationEvent> events;
};

// Owns the routing-visible placement. At most one migration is in flight;
// routing keeps using the old layout until the switch instant.
class MigrationController {
 public:
  MigrationController(PlacementTensor initial, std::vector<std::size_t> slots)
      : current_(std::move(initial)), slots_(std::move(slots)) {}

  bool in_flight(double now) const { return pending_.has_value() && now < pending_->switch_time; }

  MigrationRequest apply_migration(MigrationPlan plan, double now) {
    advance(now);
    if (pending_) return {true, {}};
    MigrationRequest req;
    req.events = migration_events(plan);
    pending_ = std::move(plan);
    advance(now);
    return req;
  }

  // Commits a pending switch once its instant has been reached.
  void advance(double now) {
    if (pending_ && now >= pending_->switch_time) {
      current_ = std::move(pending_->target);
      slots_ = std::move(pending_->target_slots);
      pending_.reset();
      ++switches_;
    }
  }

  const PlacementTensor& routing_placement(double now) {
    advance(now);
    return current_;
  }
  const PlacementTensor& placement() const { return current_; }
  const std::vector<std::size_t>& slots() const { return slots_; }
  std::size_t switches() const { return switches_; }
  std::optional<double> pending_switch_time() const {
    if (!pending_) return std::nullopt;
    return pending_->switch_time;
  }

 private:
  PlacementTensor current_;
  std::vector<std::size_t> slots_;
  std::optional<MigrationPlan> pending_;
  std::size_t switches_ = 0;
};

enum class SchedulerDecision { kNoAction, kRebalance, kDeferred };

inline const char* to_string(SchedulerDecision d) {
  switch (d) {
    case SchedulerDecision::kNoAction: return "no_action";
    case SchedulerDecision::kRebalance: return "rebalance";
    case SchedulerDecision::kDeferred: return "deferred";
  }
  return "?";
}

struct StepResult {
  SchedulerDecision decision = SchedulerDecision::kNoAction;
  double b_current = 1.0;
  double b_sim = std::numeric_limits<double>::quiet_NaN();  // set once a candidate was built
  std::optional<StaticPlacement> candidate;
  std::optional<LoadMatrix> predicted;
};

// A candidate is adopted only when it beats the current imbalance by more than the margin.
inline bool improves_enough(double b_current, double b_sim, double margin) { return b_sim < b_current - margin; }

// One pass of the trigger / forecast / candidate / margin logic against the
// current placement. Pure: does not touch the window or the placement.
inline StepResult scheduler_step(const PlacementTensor& current, const ActivationWindow& window,
                                 const SchedulerConfig& cfg, const Topology& topo) {
  StepResult out;
  const LoadMatrix d = window.smoothed();
  out.b_current = max_imbalance(current, d);
  if (out.b_current <= cfg.trigger) return out;

  LoadMatrix pred = predict_future_activations(window);
  auto cand = static_expert_placement(pred, current.devices(), cfg.budget, topo);
  out.b_sim = max_imbalance(cand.placement, pred);
  out.predicted = std::move(pred);
  if (improves_enough(out.b_current, out.b_sim, cfg.margin)) {
    out.decision = SchedulerDecision::kRebalance;
    out.candidate = std::move(cand);
  }
  return out;
}

struct SchedulerRecord {
  double time = 0.0;
  SchedulerDecision decision = SchedulerDecision::kNoAction;
  double b_current = 1.0;
  double b_sim = std::numeric_limits<double>::quiet_NaN();
  std::size_t moves = 0;
  double duration = 0.0;
  double switch_time = 0.0;
};

// Monitor + decision loop + migration pipeline, advanced by explicit calls
// from an event loop.
class DynamicExpertScheduler {
 public:
  DynamicExpertScheduler(PlacementTensor initial, std::vector<std::size_t> slots, Topology topo,
                         SchedulerConfig cfg)
      : cfg_((cfg.validate(), cfg)),
        topo_(std::move(topo)),
        window_(cfg.window_len, cfg.decay),
        migration_(std::move(initial), std::move(slots)) {
    detail::require(topo_.devices() == migration_.placement().devices(),
                    "topology size does not match the placement");
  }

  // Feeds one interval's activation counts into the sliding window.
  LoadMatrix observe(const LoadMatrix& snapshot) { return update_activation_window(window_, snapshot); }

  SchedulerRecord step(double now) {
    migration_.advance(now);
    SchedulerRecord rec;
    rec.time = now;
    if (window_.empty()) return push(rec);
    if (migration_.in_flight(now)) {
      rec.decision = SchedulerDecision::kDeferred;
      rec.b_current = max_imbalance(migration_.placement(), window_.smoothed());
      return push(rec);
    }
    auto res = scheduler_step(migration_.placement(), window_, cfg_, topo_);
    rec.b_current = res.b_current;
    rec.b_sim = res.b_sim;
    if (res.decision == SchedulerDecision::kRebalance) {
      auto plan = plan_migration(migration_.placement(), res.candidate->placement, res.candidate->budget.slots,
                                 topo_, cfg_.expert_bytes, cfg_.link_bandwidth, now);
      rec.moves = plan.moves.size();
      rec.duration = plan.duration;
      rec.switch_time = plan.switch_time;
      const auto req = migration_.apply_migration(std::move(plan), now);
      rec.decision = req.deferred ? SchedulerDecision::kDeferred : SchedulerDecision::kRebalance;
    }
    return push(rec);
  }

  const PlacementTensor& routing_placement(double now) { return migration_.routing_placement(now); }
  const MigrationController& migration() const { return migration_; }
  const ActivationWindow& window() const { return window_; }
  const SchedulerConfig& config() const { return cfg_; }
  const std::vector<SchedulerRecord>& history() const { return history_; }

  std::size_t rebalances() const {
    std::size_t n = 0;
    for (const auto& r : history_) n += r.decision == SchedulerDecision::kRebalance;
    return n;
  }

 private:
  SchedulerRecord push(const SchedulerRecord& rec) {
    history_.push_back(rec);
    return rec;
  }

  SchedulerConfig cfg_;
  Topology topo_;
  ActivationWindow window_;
  MigrationController migration_;
  std::vector<SchedulerRecord> history_;
};

}  // namespace pdsim
