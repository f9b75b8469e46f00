// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// Deterministic discrete-event simulation of a prefill/decode disaggregated
// MoE serving cluster driven by a closed-loop constant-concurrency client.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <queue>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "pdsim/attnpattern.hpp"
#include "pdsim/core.hpp"
#include "pdsim/dynsched.hpp"
#include "pdsim/placement.hpp"
#include "pdsim/proxy.hpp"
#include "pdsim/workload.hpp"

namespace pdsim {

struct ClusterConfig {
  std::size_t prefill_nodes = 6;
  std::size_t prefill_devices = 8;  // devices per prefill instance
  std::size_t decode_groups = 1;
  std::size_t decode_devices = 32;  // devices per decode group
  std::size_t dies_per_device = 2;
  std::size_t devices_per_node = 8;
  std::size_t per_die_batch = 40;
  std::size_t experts = 128;
  std::size_t moe_layers = 4;  // simulated MoE layers, each standing for a slice of the model
  std::size_t top_k = 8;

  std::size_t dies_per_group() const { return decode_devices * dies_per_device; }
  std::size_t total_decode_dies() const { return decode_groups * dies_per_group(); }
  std::size_t decode_nodes() const { return decode_groups * decode_devices / devices_per_node; }

  // per-die batch x decode nodes x devices per node x dies per device
  std::size_t concurrency() const { return per_die_batch * total_decode_dies(); }

  std::string xpyd() const {
    return std::to_string(prefill_nodes) + "P" + std::to_string(prefill_devices) + "-" +
           std::to_string(decode_groups) + "D" + std::to_string(decode_devices);
  }

  // Parses "6P8-1D32".
  void set_xpyd(const std::string& s) {
    std::size_t x = 0, p = 0, y = 0, d = 0;
    char c1 = 0, c2 = 0, dash = 0;
    std::istringstream in(s);
    if (!(in >> x >> c1 >> p >> dash >> y >> c2 >> d) || c1 != 'P' || dash != '-' || c2 != 'D' || in.peek() != EOF)
      throw InvalidConfig("xPyD label must look like 6P8-1D32, got " + s);
    prefill_nodes = x;
    prefill_devices = p;
    decode_groups = y;
    decode_devices = d;
  }

  void validate() const {
    if (prefill_nodes < 1 || prefill_devices < 1 || decode_groups < 1 || decode_devices < 1 || dies_per_device < 1)
      throw InvalidConfig("cluster counts must all be >= 1");
    if (devices_per_node < 1 || decode_devices % devices_per_node != 0)
      throw InvalidConfig("cluster.decode_devices must be a multiple of cluster.devices_per_node");
    if (per_die_batch < 1) throw InvalidConfig("cluster.per_die_batch must be >= 1");
    if (experts < 1 || moe_layers < 1 || top_k < 1) throw InvalidConfig("cluster MoE shape must be >= 1");
    if (top_k > experts) throw InvalidConfig("cluster.top_k cannot exceed cluster.experts");
  }
};

// Time constants in seconds. Calibrated once against the 6P8-1D32 batch-40
// operating point; see the scenario files for provenance.
struct CostModel {
  double prefill_base = 0.04;
  double prefill_per_token = 3.2e-5;
  std::size_t prefill_token_budget = 32768;
  double kv_transfer_per_token = 2e-5;
  double decode_base = 0.022;
  double decode_per_kv_token = 7.5e-8;
  double decode_per_expert_load = 5.7e-6;

  void validate() const {
    for (double v : {prefill_base, prefill_per_token, kv_transfer_per_token, decode_base, decode_per_kv_token,
                     decode_per_expert_load})
      if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidConfig("cost model constants must be finite and >= 0");
    if (prefill_token_budget < 1) throw InvalidConfig("cost.prefill_token_budget must be >= 1");
  }
};

struct AttnConfig {
  bool enabled = true;
  CompressionPattern pattern = CompressionPattern::parse("1101001101001010");
  std::size_t sink = 64;
  std::size_t recent = 1024;
  double compressed_prefill_cost = 0.7;  // per-token cost of a compressed layer relative to a full one

  void validate() const {
    if (pattern.layers() < 1) throw InvalidConfig("attn.pattern must be non-empty");
    if (!(compressed_prefill_cost >= 0.0 && compressed_prefill_cost < 1.0))
      throw InvalidConfig("attn.compressed_prefill_cost must lie in [0,1)");
  }

  double compressed_fraction() const { return enabled ? pattern.compressed_fraction() : 0.0; }

  // Prefill per-token multiplier from the additive layer latency model.
  double layer_cost_factor() const {
    if (!enabled) return 1.0;
    const auto lat = LatencyModel::uniform(pattern.layers(), 1.0, compressed_prefill_cost);
    return pattern_latency(pattern, lat) / static_cast<double>(pattern.layers());
  }

  // KV entries a decode step reads for a context of `len` tokens, averaged
  // over layers.
  double kv_effective(std::size_t len) const {
    const double f = compressed_fraction();
    const double kept = static_cast<double>(std::min(len, sink + recent));
    return (1.0 - f) * static_cast<double>(len) + f * kept;
  }
};

enum class PlacementMode { kNone, kStatic, kDynamic };

inline const char* to_string(PlacementMode m) {
  switch (m) {
    case PlacementMode::kNone: return "none";
    case PlacementMode::kStatic: return "static";
    case PlacementMode::kDynamic: return "dynamic";
  }
  return "?";
}

inline PlacementMode parse_placement_mode(const std::string& s) {
  if (s == "none") return PlacementMode::kNone;
  if (s == "static") return PlacementMode::kStatic;
  if (s == "dynamic") return PlacementMode::kDynamic;
  throw InvalidConfig("features.placement must be none, static or dynamic, got " + s);
}

struct PlacementSettings {
  std::optional<std::int64_t> budget;  // redundant instances; defaults to one extra slot per device per layer
  SchedulerConfig scheduler;
};

struct SimSettings {
  double duration = 400.0;  // simulated seconds
  double warmup_fraction = 0.05;
  double imbalance_bucket = 10.0;  // seconds per imbalance sample

  void validate() const {
    if (!(duration > 0.0)) throw InvalidConfig("sim.duration must be > 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw InvalidConfig("sim.warmup_fraction must lie in [0,1)");
    if (!(imbalance_bucket > 0.0)) throw InvalidConfig("sim.imbalance_bucket must be > 0");
  }
};

struct Scenario {
  std::string name = "default";
  ClusterConfig cluster;
  CostModel cost;
  WorkloadSpec workload;
  AttnConfig attn;
  PlacementMode placement_mode = PlacementMode::kDynamic;
  PlacementSettings placement;
  ProxyConfig proxy;
  std::size_t prefix_cache_tokens = 400000;  // per prefill node; 0 = unlimited
  SimSettings sim;

  void validate() const {
    cluster.validate();
    cost.validate();
    workload.validate();
    attn.validate();
    proxy.validate();
    sim.validate();
    if (placement.budget && *placement.budget < 0) throw InvalidConfig("placement.budget must be >= 0");
    if (placement.budget &&
        *placement.budget % static_cast<std::int64_t>(cluster.decode_devices) != 0)
      throw InvalidConfig("placement.budget must be a multiple of the decode device count");
    placement.scheduler.validate();
  }

  std::int64_t placement_budget() const {
    return placement.budget.value_or(static_cast<std::int64_t>(cluster.moe_layers * cluster.decode_devices));
  }

  // One full prefill batch at the token budget: the predicted batch cycle.
  double predicted_batch_cycle() const {
    return cost.prefill_base +
           cost.prefill_per_token * static_cast<double>(cost.prefill_token_budget) * attn.layer_cost_factor();
  }

  DeferralPolicy deferral() const {
    if (!proxy.deferral) return {0.0, 0.0};
    const double cycle = predicted_batch_cycle();
    return {proxy.hold_max.value_or(cycle), proxy.horizon.value_or(0.1 * cycle)};
  }
};

inline double prefill_duration(const CostModel& cost, std::size_t new_tokens, const AttnConfig& attn) {
  return cost.prefill_base + cost.prefill_per_token * static_cast<double>(new_tokens) * attn.layer_cost_factor();
}

// base + c_kv * (heaviest die's KV reads) + c_expert * sum over layers of the
// hottest device's routed load.
inline double decode_step_duration(const CostModel& cost, double max_die_kv, double expert_term) {
  return cost.decode_base + cost.decode_per_kv_token * max_die_kv + cost.decode_per_expert_load * expert_term;
}

// Sum over layers of max device load for one step's routed loads.
inline double expert_gate(const PlacementTensor& p, const LoadMatrix& step_loads) {
  double total = 0.0;
  for (std::size_t l = 0; l < p.layers(); ++l) {
    const auto loads = device_loads(p, step_loads, l);
    total += *std::max_element(loads.begin(), loads.end());
  }
  return total;
}

// Expert e on device e / ceil(E/R), the layout with no placement policy.
inline PlacementTensor contiguous_placement(std::size_t layers, std::size_t devices, std::size_t experts) {
  PlacementTensor p(layers, devices, experts);
  const std::size_t per = min_slots(experts, devices);
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t e = 0; e < experts; ++e) p.set(l, e / per, e);
  return p;
}

struct CompletedRequest {
  RequestId id = 0;
  double arrival = 0.0;
  double first_token = 0.0;
  double finish = 0.0;
  std::size_t in_len = 0;
  std::size_t out_len = 0;
  double tpot = 0.0;  // seconds, 0 for single-token outputs
  bool initial_fill = false;
};

struct SimReport {
  std::string scenario;
  std::string xpyd;
  std::size_t per_die_batch = 0;
  std::size_t concurrency = 0;
  double qpm = 0;
  double ttft_mean = 0, ttft_p99 = 0;  // seconds
  double tpot_mean = 0, tpot_p99 = 0;  // milliseconds
  double e2e_mean = 0, e2e_p99 = 0;    // seconds
  double ott = 0, ptt = 0, ttt = 0;    // tokens per second; ttt = ott + ptt
  std::uint64_t output_tokens = 0, prompt_tokens = 0, total_tokens = 0;
  std::size_t completed = 0;   // requests finishing inside the measurement window
  std::size_t latency_samples = 0;
  double window_start = 0, window_end = 0;
  std::uint64_t cache_hit_tokens = 0;
  std::uint64_t prefilled_prompt_tokens = 0;
  double max_deferral = 0;
  std::size_t rebalances = 0;
  std::vector<double> prefill_utilization;
  std::vector<double> decode_utilization;
  std::vector<std::pair<double, double>> imbalance;  // (bucket start, mean step imbalance)
};

// Window and metric aggregation shared by the simulator and the log replayer.
inline void aggregate_metrics(SimReport& rep, std::vector<CompletedRequest> done, double end_time, double warmup_fraction,
                              double fill_drained) {
  std::stable_sort(done.begin(), done.end(), [](const CompletedRequest& a, const CompletedRequest& b) {
    if (a.finish != b.finish) return a.finish < b.finish;
    return a.id < b.id;
  });
  const auto skip = static_cast<std::size_t>(std::ceil(warmup_fraction * static_cast<double>(done.size())));
  double start = fill_drained;
  if (skip > 0 && skip <= done.size()) start = std::max(start, done[skip - 1].finish);
  rep.window_start = start;
  rep.window_end = end_time;
  const double span = end_time - start;
  if (!(span > 0.0)) throw InvariantBreach("measurement window is empty; increase sim.duration");

  MetricSeries ttft{MetricKind::kTtftSeconds, {}}, tpot{MetricKind::kTpotMillis, {}}, e2e{MetricKind::kE2eSeconds, {}};
  for (const auto& c : done) {
    if (c.finish <= start) continue;
    ++rep.completed;
    rep.output_tokens += c.out_len;
    rep.prompt_tokens += c.in_len;
    if (c.arrival < start || c.initial_fill) continue;
    ttft.add(c.first_token - c.arrival);
    if (c.out_len > 1) tpot.add(c.tpot * 1000.0);
    e2e.add(c.finish - c.arrival);
  }
  rep.total_tokens = rep.output_tokens + rep.prompt_tokens;
  rep.latency_samples = e2e.size();
  rep.qpm = static_cast<double>(rep.completed) * 60.0 / span;
  rep.ott = static_cast<double>(rep.output_tokens) / span;
  rep.ptt = static_cast<double>(rep.prompt_tokens) / span;
  rep.ttt = rep.ott + rep.ptt;
  if (!e2e.empty()) {
    rep.ttft_mean = ttft.mean();
    rep.ttft_p99 = percentile(ttft, 0.99);
    rep.e2e_mean = e2e.mean();
    rep.e2e_p99 = percentile(e2e, 0.99);
  }
  if (!tpot.empty()) {
    rep.tpot_mean = tpot.mean();
    rep.tpot_p99 = percentile(tpot, 0.99);
  }
}

// Receives one JSON object per line; see Simulator::log.
using EventLog = std::function<void(const std::string&)>;

class Simulator {
 public:
  explicit Simulator(Scenario sc, EventLog log = {})
      : sc_((sc.validate(), std::move(sc))),
        log_(std::move(log)),
        gen_(sc_.workload),
        popularity_(sc_.cluster.moe_layers, sc_.cluster.experts, sc_.workload.expert_skew, sc_.workload.seed,
                    sc_.workload.shift_step),
        tree_(sc_.prefix_cache_tokens),
        route_rng_(detail::splitmix64(sc_.workload.seed ^ 0x77u)),
        deferral_(sc_.deferral()) {
    router_.cfg = sc_.proxy;
    const auto& c = sc_.cluster;
    prefill_.resize(c.prefill_nodes);
    for (std::size_t i = 0; i < prefill_.size(); ++i) prefill_[i].state.id = i;
    dies_.resize(c.total_decode_dies());
    for (std::size_t i = 0; i < dies_.size(); ++i) {
      dies_[i].id = i;
      dies_[i].role = NodeRole::kDecode;
    }
    groups_.resize(c.decode_groups);
    for (std::size_t g = 0; g < groups_.size(); ++g) setup_group(g);
  }

  SimReport run() {
    const std::size_t target = sc_.cluster.concurrency();
    if (log_) {
      std::ostringstream o;
      o << "{\"t\":0,\"type\":\"start\",\"scenario\":\"" << sc_.name << "\",\"xpyd\":\"" << sc_.cluster.xpyd()
        << "\",\"per_die_batch\":" << sc_.cluster.per_die_batch << ",\"concurrency\":" << target << "}";
      log_(o.str());
    }
    inject(0.0, target, true);
    for (std::size_t g = 0; g < groups_.size(); ++g)
      if (sc_.placement_mode == PlacementMode::kDynamic) push(sc_.placement.scheduler.interval, Ev::kSchedulerTick, g);
    while (!events_.empty()) {
      const Event ev = events_.top();
      if (ev.time > sc_.sim.duration) break;
      events_.pop();
      if (ev.time < now_) throw InvariantBreach("simulation clock moved backwards");
      now_ = ev.time;
      dispatch(ev);
      if (in_flight_ != target) throw InvariantBreach("closed-loop concurrency drifted from its target");
    }
    now_ = sc_.sim.duration;
    if (log_) {
      std::ostringstream o;
      o.precision(17);
      o << "{\"t\":" << now_ << ",\"type\":\"end\",\"warmup_fraction\":" << sc_.sim.warmup_fraction
        << ",\"fill_drained\":" << fill_drained() << "}";
      log_(o.str());
    }
    return report();
  }

 private:
  enum class Ev { kProxyTick, kPrefillDone, kDecodeReady, kStepDone, kSchedulerTick };

  struct Event {
    double time;
    std::uint64_t seq;
    Ev kind;
    std::size_t arg;
    bool operator>(const Event& o) const { return std::tie(time, seq) > std::tie(o.time, o.seq); }
  };

  struct Live {
    RequestSpec spec;
    Request req;
    bool initial_fill = false;
    std::size_t match = 0;
    std::size_t die = 0;
    double workload = 0.0;
    std::size_t generated = 0;
  };

  struct PrefillNode {
    NodeState state;
    std::vector<RequestId> queue;    // FIFO of scheduled requests
    std::vector<RequestId> running;  // current batch
    double busy_time = 0.0;
  };

  struct Group {
    std::vector<std::size_t> dies;
    PlacementTensor fixed;  // routing layout when not dynamic
    std::unique_ptr<DynamicExpertScheduler> sched;
    std::vector<RequestId> running;
    bool stepping = false;
    double busy_time = 0.0;
    LoadMatrix interval_loads;
  };

  void setup_group(std::size_t g) {
    const auto& c = sc_.cluster;
    auto& grp = groups_[g];
    for (std::size_t k = 0; k < c.dies_per_group(); ++k) grp.dies.push_back(g * c.dies_per_group() + k);
    grp.interval_loads = LoadMatrix(c.moe_layers, c.experts);
    if (sc_.placement_mode == PlacementMode::kNone) {
      grp.fixed = contiguous_placement(c.moe_layers, c.decode_devices, c.experts);
      return;
    }
    const auto profile = popularity_.expected(1.0, c.top_k, 0);
    const auto topo = Topology::zeros(c.decode_devices);
    auto st = static_expert_placement(profile, c.decode_devices, sc_.placement_budget(), topo);
    grp.fixed = st.placement;
    if (sc_.placement_mode == PlacementMode::kDynamic) {
      auto cfg = sc_.placement.scheduler;
      cfg.budget = sc_.placement_budget();
      grp.sched = std::make_unique<DynamicExpertScheduler>(st.placement, st.budget.slots, topo, cfg);
    }
  }

  void push(double t, Ev kind, std::size_t arg) { events_.push({t, seq_++, kind, arg}); }

  void log(const std::string& line) {
    if (log_) log_(line);
  }

  void log_transition(const Live& r, const char* phase, std::optional<std::size_t> node = std::nullopt,
                      std::optional<double> value = std::nullopt, std::optional<std::size_t> match = std::nullopt) {
    if (!log_) return;
    std::ostringstream o;
    o.precision(17);
    o << "{\"t\":" << now_ << ",\"type\":\"phase\",\"req\":" << r.spec.id << ",\"phase\":\"" << phase << "\"";
    if (node) o << ",\"node\":" << *node;
    if (value) o << ",\"score\":" << *value;
    if (match) o << ",\"match\":" << *match;
    o << "}";
    log_(o.str());
  }

  void advance(Live& r, LifecycleEvent e, std::optional<std::size_t> node = std::nullopt,
               std::optional<double> value = std::nullopt, std::optional<std::size_t> match = std::nullopt) {
    advance_lifecycle(r.req, e, now_);
    log_transition(r, to_string(r.req.phase), node, value, match);
  }

  Live& live(RequestId id) { return *live_.at(id); }

  void inject(double now, std::size_t n, bool initial) {
    for (std::size_t i = 0; i < n; ++i) {
      auto spec = gen_.next();
      auto l = std::make_unique<Live>();
      l->spec = spec;
      l->req = Request(spec.id, {}, std::nullopt, now);
      l->req.prompt_len = spec.in_len;
      l->initial_fill = initial;
      l->workload = static_cast<double>(spec.in_len + spec.out_len);
      const RequestId id = spec.id;
      if (live_.size() <= id) live_.resize(id + 1);
      live_[id] = std::move(l);
      ++in_flight_;
      auto& r = live(id);
      log_transition(r, to_string(Phase::kTokenize));
      advance(r, LifecycleEvent::kTokenized);
      advance(r, LifecycleEvent::kApcMatched);
      proxy_queue_.push_back({id, now, 0, 0.0});
    }
    proxy_dispatch();
  }

  // Best node and score for a queued request under the current loads.
  std::pair<std::size_t, double> best_target(const std::vector<Token>& tokens) const {
    std::size_t best = 0;
    double best_pi = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < prefill_.size(); ++i) {
      const double m = static_cast<double>(tree_.match(tokens, i));
      const double pi = score_prefill_node(m, prefill_[i].state, sc_.proxy.alpha, sc_.proxy.w_requests,
                                           sc_.proxy.w_tokens);
      if (pi > best_pi) {
        best_pi = pi;
        best = i;
      }
    }
    return {best, best_pi};
  }

  void proxy_dispatch() {
    if (proxy_queue_.empty()) return;
    std::vector<double> boundary;
    for (const auto& n : prefill_) boundary.push_back(n.state.next_boundary(now_));
    if (deferral_.hold_max > 0.0) {
      for (auto& item : proxy_queue_) {
        const auto tokens = materialize_tokens(live(item.id).spec, sc_.workload.seed);
        std::tie(item.target, item.priority) = best_target(tokens);
      }
    }
    auto res = defer_and_resort(proxy_queue_, boundary, now_, deferral_);
    proxy_queue_ = std::move(res.retained);
    if (!res.dispatch.empty()) {
      std::vector<Request> batch;
      batch.reserve(res.dispatch.size());
      for (const auto& item : res.dispatch) {
        max_deferral_ = std::max(max_deferral_, now_ - item.enqueued);
        Request q;
        q.id = item.id;
        q.prompt_tokens = materialize_tokens(live(item.id).spec, sc_.workload.seed);
        q.prompt_len = q.prompt_tokens.size();
        batch.push_back(std::move(q));
      }
      std::vector<const Request*> ptrs;
      for (const auto& q : batch) ptrs.push_back(&q);
      std::vector<NodeState> states;
      for (const auto& n : prefill_) states.push_back(n.state);
      const auto assigned = schedule_prefill(ptrs, states, tree_, router_, TreeUpdate::kBatchLocal, now_);
      for (std::size_t i = 0; i < prefill_.size(); ++i) prefill_[i].state = states[i];
      for (const auto& a : assigned) {
        auto& r = live(a.request);
        r.match = std::min(a.match, r.spec.in_len);
        hit_tokens_ += r.match;
        prefilled_tokens_ += r.spec.in_len;
        advance(r, LifecycleEvent::kPrefillScheduled, a.node, a.score, r.match);
        prefill_[a.node].queue.push_back(a.request);
      }
      for (std::size_t i = 0; i < prefill_.size(); ++i) try_start_prefill(i);
    }
    if (!proxy_queue_.empty()) {
      double next = std::numeric_limits<double>::infinity();
      for (const auto& item : proxy_queue_) next = std::min(next, item.enqueued + deferral_.hold_max);
      if (!(pending_tick_ && *pending_tick_ <= next)) {
        pending_tick_ = next;
        push(next, Ev::kProxyTick, 0);
      }
    }
  }

  void try_start_prefill(std::size_t n) {
    auto& node = prefill_[n];
    if (node.state.busy || node.queue.empty()) return;
    std::size_t tokens = 0, take = 0;
    while (take < node.queue.size()) {
      const auto& r = live(node.queue[take]);
      const std::size_t fresh = r.spec.in_len - r.match;
      if (take > 0 && tokens + fresh > sc_.cost.prefill_token_budget) break;
      tokens += fresh;
      ++take;
    }
    node.running.assign(node.queue.begin(), node.queue.begin() + static_cast<std::ptrdiff_t>(take));
    node.queue.erase(node.queue.begin(), node.queue.begin() + static_cast<std::ptrdiff_t>(take));
    const double dur = prefill_duration(sc_.cost, tokens, sc_.attn);
    for (RequestId id : node.running) advance(live(id), LifecycleEvent::kPrefillStarted, n);
    node.state.observe_batch(now_, dur);
    node.state.busy = true;
    node.busy_time += std::min(dur, std::max(0.0, sc_.sim.duration - now_));
    push(now_ + dur, Ev::kPrefillDone, n);
  }

  void on_prefill_done(std::size_t n) {
    auto& node = prefill_[n];
    for (RequestId id : node.running) {
      auto& r = live(id);
      tree_.insert(materialize_tokens(r.spec, sc_.workload.seed), n, now_);
      node.state.running_requests -= 1;
      node.state.running_tokens -= static_cast<double>(r.spec.in_len - std::min(r.match, r.spec.in_len));
      advance(r, LifecycleEvent::kPrefillFinished, n);
      push(now_ + sc_.cost.kv_transfer_per_token * static_cast<double>(r.spec.in_len), Ev::kDecodeReady, id);
    }
    node.running.clear();
    node.state.busy = false;
    try_start_prefill(n);
    proxy_dispatch();
  }

  void on_decode_ready(RequestId id) {
    decode_ready_.push_back(id);
    admit_decode();
  }

  // Ready requests are placed on dies with spare batch slots: LPT under OAS,
  // cyclic order otherwise.
  void admit_decode() {
    if (decode_ready_.empty()) return;
    std::vector<LptJob> jobs;
    for (RequestId id : decode_ready_) {
      const auto& r = live(id);
      jobs.push_back({id, effective_workload(r.req, sc_.proxy.default_max_tokens), r.req.arrival});
    }
    decode_ready_.clear();
    const double cap = static_cast<double>(sc_.cluster.per_die_batch);
    std::vector<DecodeAssignment> placed;
    if (sc_.proxy.policy == RoutingPolicy::kOas) {
      placed = schedule_decode_lpt(std::move(jobs), dies_, cap);
    } else {
      for (const auto& j : jobs) {
        std::size_t pick = dies_.size();
        for (std::size_t k = 0; k < dies_.size() && pick == dies_.size(); ++k) {
          const std::size_t d = (rr_die_ + k) % dies_.size();
          if (dies_[d].running_requests < cap) pick = d;
        }
        if (pick == dies_.size()) throw InvariantBreach("decode dies are full although concurrency is bounded");
        rr_die_ = (pick + 1) % dies_.size();
        dies_[pick].running_requests += 1;
        dies_[pick].running_tokens += j.workload;
        placed.push_back({j.id, pick, j.workload});
      }
    }
    for (const auto& a : placed) {
      auto& r = live(a.request);
      r.die = a.node;
      r.workload = a.workload;
      advance(r, LifecycleEvent::kDecodeScheduled, a.node, a.workload);
      const std::size_t g = a.node / sc_.cluster.dies_per_group();
      groups_[g].running.push_back(a.request);
    }
    for (std::size_t g = 0; g < groups_.size(); ++g)
      if (!groups_[g].stepping) start_step(g);
  }

  std::size_t epoch() const {
    if (sc_.workload.shift_period <= 0.0) return 0;
    return static_cast<std::size_t>(std::floor(now_ / sc_.workload.shift_period));
  }

  const PlacementTensor& routing(std::size_t g) {
    auto& grp = groups_[g];
    return grp.sched ? grp.sched->routing_placement(now_) : grp.fixed;
  }

  void start_step(std::size_t g) {
    auto& grp = groups_[g];
    if (grp.running.empty()) {
      grp.stepping = false;
      return;
    }
    const auto& c = sc_.cluster;
    std::vector<double> die_kv(c.dies_per_group(), 0.0);
    const std::size_t base = g * c.dies_per_group();
    for (RequestId id : grp.running) {
      auto& r = live(id);
      if (r.req.phase == Phase::kDecodeScheduled) advance(r, LifecycleEvent::kDecodeStarted, r.die);
      die_kv[r.die - base] += sc_.attn.kv_effective(r.spec.in_len + r.generated);
    }
    const double max_kv = *std::max_element(die_kv.begin(), die_kv.end());

    LoadMatrix step(c.moe_layers, c.experts);
    const auto assignments = static_cast<std::uint64_t>(grp.running.size() * c.top_k);
    const std::size_t ep = epoch();
    for (std::size_t l = 0; l < c.moe_layers; ++l) {
      const auto loads = sample_expert_loads(route_rng_, popularity_.shares(l, ep), assignments);
      for (std::size_t e = 0; e < c.experts; ++e) {
        step.set(l, e, loads[e]);
        grp.interval_loads.add(l, e, loads[e]);
      }
    }
    const auto& place = routing(g);
    const double gate = expert_gate(place, step);
    const double dur = decode_step_duration(sc_.cost, max_kv, gate);

    const auto bucket = static_cast<std::size_t>(std::floor(now_ / sc_.sim.imbalance_bucket));
    if (imbalance_sum_.size() <= bucket) {
      imbalance_sum_.resize(bucket + 1, 0.0);
      imbalance_n_.resize(bucket + 1, 0);
    }
    imbalance_sum_[bucket] += max_imbalance(place, step);
    imbalance_n_[bucket] += 1;

    grp.stepping = true;
    grp.busy_time += std::min(dur, std::max(0.0, sc_.sim.duration - now_));
    push(now_ + dur, Ev::kStepDone, g);
  }

  void on_step_done(std::size_t g) {
    auto& grp = groups_[g];
    std::vector<RequestId> still;
    std::size_t finished = 0;
    for (RequestId id : grp.running) {
      auto& r = live(id);
      if (r.req.phase != Phase::kDecodeRunning) {
        still.push_back(id);
        continue;
      }
      record_token(r.req, now_);
      ++r.generated;
      if (r.generated == 1 && r.initial_fill) {
        fill_first_tokens_ += 1;
        fill_drained_ = std::max(fill_drained_, now_);
      }
      if (r.generated >= r.spec.out_len) {
        advance(r, LifecycleEvent::kFinished, r.die);
        finish(r);
        ++finished;
      } else {
        still.push_back(id);
      }
    }
    grp.running = std::move(still);
    grp.stepping = false;
    if (finished > 0) inject(now_, finished, false);
    admit_decode();
    if (!grp.stepping) start_step(g);
  }

  void finish(Live& r) {
    auto& die = dies_[r.die];
    die.running_requests -= 1;
    die.running_tokens -= r.workload;
    CompletedRequest c;
    c.id = r.spec.id;
    c.arrival = r.req.arrival;
    c.first_token = r.req.arrival + r.req.ttft.value_or(0.0);
    c.finish = now_;
    c.in_len = r.spec.in_len;
    c.out_len = r.generated;
    c.tpot = r.req.tpot().value_or(0.0);
    c.initial_fill = r.initial_fill;
    if (log_) {
      std::ostringstream o;
      o.precision(17);
      o << "{\"t\":" << now_ << ",\"type\":\"done\",\"req\":" << c.id << ",\"arrival\":" << c.arrival
        << ",\"first_token\":" << c.first_token << ",\"finish\":" << c.finish << ",\"in\":" << c.in_len
        << ",\"out\":" << c.out_len << ",\"tpot\":" << c.tpot << ",\"initial\":" << (c.initial_fill ? "true" : "false")
        << "}";
      log_(o.str());
    }
    done_.push_back(c);
    --in_flight_;
    live_[r.spec.id].reset();
  }

  void on_scheduler_tick(std::size_t g) {
    auto& grp = groups_[g];
    grp.sched->observe(grp.interval_loads);
    grp.interval_loads = LoadMatrix(sc_.cluster.moe_layers, sc_.cluster.experts);
    const auto rec = grp.sched->step(now_);
    const auto& p = grp.sched->routing_placement(now_);
    if (!p.is_valid(grp.sched->migration().slots()))
      throw InvariantBreach("routing placement violates existence or capacity");
    if (log_) {
      std::ostringstream o;
      o.precision(17);
      o << "{\"t\":" << now_ << ",\"type\":\"scheduler\",\"group\":" << g << ",\"decision\":\"" << to_string(rec.decision)
        << "\",\"b_current\":" << rec.b_current << ",\"moves\":" << rec.moves << "}";
      log_(o.str());
    }
    push(now_ + sc_.placement.scheduler.interval, Ev::kSchedulerTick, g);
  }

  void dispatch(const Event& ev) {
    switch (ev.kind) {
      case Ev::kProxyTick:
        if (pending_tick_ && *pending_tick_ == ev.time) pending_tick_.reset();
        proxy_dispatch();
        break;
      case Ev::kPrefillDone: on_prefill_done(ev.arg); break;
      case Ev::kDecodeReady: on_decode_ready(ev.arg); break;
      case Ev::kStepDone: on_step_done(ev.arg); break;
      case Ev::kSchedulerTick: on_scheduler_tick(ev.arg); break;
    }
  }

  // Time by which every initial-fill request has its first token.
  double fill_drained() const {
    return fill_first_tokens_ == sc_.cluster.concurrency() ? fill_drained_ : now_;
  }

  SimReport report() const {
    SimReport rep;
    rep.scenario = sc_.name;
    rep.xpyd = sc_.cluster.xpyd();
    rep.per_die_batch = sc_.cluster.per_die_batch;
    rep.concurrency = sc_.cluster.concurrency();
    aggregate_metrics(rep, done_, now_, sc_.sim.warmup_fraction, fill_drained());
    rep.cache_hit_tokens = hit_tokens_;
    rep.prefilled_prompt_tokens = prefilled_tokens_;
    rep.max_deferral = max_deferral_;
    for (const auto& n : prefill_) rep.prefill_utilization.push_back(n.busy_time / now_);
    for (const auto& g : groups_) {
      rep.decode_utilization.push_back(g.busy_time / now_);
      if (g.sched) rep.rebalances += g.sched->rebalances();
    }
    for (std::size_t b = 0; b < imbalance_sum_.size(); ++b)
      if (imbalance_n_[b] > 0)
        rep.imbalance.emplace_back(static_cast<double>(b) * sc_.sim.imbalance_bucket,
                                   imbalance_sum_[b] / static_cast<double>(imbalance_n_[b]));
    return rep;
  }

  Scenario sc_;
  EventLog log_;
  WorkloadGenerator gen_;
  ExpertPopularity popularity_;
  PrefixTree tree_;
  PrefillRouter router_;
  std::mt19937_64 route_rng_;
  DeferralPolicy deferral_;

  std::priority_queue<Event, std::vector<Event>, std::greater<>> events_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;

  std::vector<std::unique_ptr<Live>> live_;
  std::size_t in_flight_ = 0;
  std::vector<QueuedItem> proxy_queue_;
  std::optional<double> pending_tick_;
  std::vector<PrefillNode> prefill_;
  std::vector<NodeState> dies_;
  std::vector<Group> groups_;
  std::vector<RequestId> decode_ready_;
  std::size_t rr_die_ = 0;

  std::vector<CompletedRequest> done_;
  std::size_t fill_first_tokens_ = 0;
  double fill_drained_ = 0.0;
  std::uint64_t hit_tokens_ = 0;
  std::uint64_t prefilled_tokens_ = 0;
  double max_deferral_ = 0.0;
  std::vector<double> imbalance_sum_;
  std::vector<std::size_t> imbalance_n_;
};

inline SimReport run_simulation(const Scenario& sc, EventLog log = {}) { return Simulator(sc, std::move(log)).run(); }

}  // namespace pdsim
