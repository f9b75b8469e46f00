// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// Request scheduling layer: request lifecycle, radix prefix cache, cache- and
// load-aware prefill routing, LPT decode assignment and deferred submission.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "pdsim/errors.hpp"

namespace pdsim {

using Token = std::int32_t;
using RequestId = std::uint64_t;
using NodeId = std::size_t;

enum class Phase : std::uint8_t {
  kTokenize,
  kApcMatching,
  kPrefillWaiting,
  kPrefillScheduled,
  kPrefillRunning,
  kDecodeWaiting,
  kDecodeScheduled,
  kDecodeRunning,
  kDone,
};

inline constexpr std::size_t kPhaseCount = 9;

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::kTokenize: return "tokenize";
    case Phase::kApcMatching: return "apc_matching";
    case Phase::kPrefillWaiting: return "prefill_waiting";
    case Phase::kPrefillScheduled: return "prefill_scheduled";
    case Phase::kPrefillRunning: return "prefill_running";
    case Phase::kDecodeWaiting: return "decode_waiting";
    case Phase::kDecodeScheduled: return "decode_scheduled";
    case Phase::kDecodeRunning: return "decode_running";
    case Phase::kDone: return "done";
  }
  return "?";
}

// Each event is legal in exactly one phase and moves to the next one.
enum class LifecycleEvent : std::uint8_t {
  kTokenized,
  kApcMatched,
  kPrefillScheduled,
  kPrefillStarted,
  kPrefillFinished,
  kDecodeScheduled,
  kDecodeStarted,
  kFinished,
};

inline const char* to_string(LifecycleEvent e) {
  switch (e) {
    case LifecycleEvent::kTokenized: return "tokenized";
    case LifecycleEvent::kApcMatched: return "apc_matched";
    case LifecycleEvent::kPrefillScheduled: return "prefill_scheduled";
    case LifecycleEvent::kPrefillStarted: return "prefill_started";
    case LifecycleEvent::kPrefillFinished: return "prefill_finished";
    case LifecycleEvent::kDecodeScheduled: return "decode_scheduled";
    case LifecycleEvent::kDecodeStarted: return "decode_started";
    case LifecycleEvent::kFinished: return "finished";
  }
  return "?";
}

struct Request {
  RequestId id = 0;
  std::vector<Token> prompt_tokens;
  std::size_t prompt_len = 0;
  std::optional<std::size_t> max_tokens;
  double arrival = 0.0;

  Phase phase = Phase::kTokenize;
  std::array<std::optional<double>, kPhaseCount> entered{};

  std::size_t output_tokens = 0;
  std::optional<double> ttft;
  double last_token_time = 0.0;
  double tpot_sum = 0.0;  // seconds summed over inter-token gaps
  std::size_t tpot_count = 0;

  Request() = default;
  Request(RequestId rid, std::vector<Token> tokens, std::optional<std::size_t> max_tok, double arrival_time)
      : id(rid), prompt_tokens(std::move(tokens)), max_tokens(max_tok), arrival(arrival_time) {
    prompt_len = prompt_tokens.size();
    entered[0] = arrival_time;
  }

  std::optional<double> entered_at(Phase p) const { return entered[static_cast<std::size_t>(p)]; }

  // Mean inter-token gap after the first token; empty until two tokens exist.
  std::optional<double> tpot() const {
    if (tpot_count == 0) return std::nullopt;
    return tpot_sum / static_cast<double>(tpot_count);
  }
};

inline Phase phase_after(LifecycleEvent e) { return static_cast<Phase>(static_cast<std::uint8_t>(e) + 1); }
inline Phase phase_before(LifecycleEvent e) { return static_cast<Phase>(static_cast<std::uint8_t>(e)); }

inline void advance_lifecycle(Request& r, LifecycleEvent e, double now) {
  if (r.phase != phase_before(e))
    throw ProtocolViolation("request " + std::to_string(r.id) + ": event " + to_string(e) + " is illegal in phase " +
                            to_string(r.phase));
  const auto prev = r.entered[static_cast<std::size_t>(r.phase)];
  if (prev && now < *prev)
    throw ProtocolViolation("request " + std::to_string(r.id) + ": phase timestamps must be non-decreasing");
  r.phase = phase_after(e);
  r.entered[static_cast<std::size_t>(r.phase)] = now;
}

// One generated token. The first fixes TTFT; later ones add TPOT samples.
inline void record_token(Request& r, double now) {
  if (r.phase != Phase::kDecodeRunning)
    throw ProtocolViolation("request " + std::to_string(r.id) + ": token emitted outside decode_running");
  if (r.output_tokens == 0) {
    r.ttft = now - r.arrival;
  } else {
    if (now < r.last_token_time) throw ProtocolViolation("token timestamps must be non-decreasing");
    r.tpot_sum += now - r.last_token_time;
    ++r.tpot_count;
  }
  r.last_token_time = now;
  ++r.output_tokens;
}

// Radix tree over token sequences. Every node carries the set of owners
// (prefill nodes) caching it with a last-use time; owner tags are
// prefix-closed. Each owner may be limited to a capacity in tokens, enforced
// by evicting its least recently used leaves.
class PrefixTree {
 public:
  explicit PrefixTree(std::size_t owner_capacity = 0) : capacity_(owner_capacity), root_(std::make_unique<Node>()) {}

  std::size_t owner_capacity() const { return capacity_; }

  // Longest prefix of `tokens` cached by `owner`.
  std::size_t match(std::span<const Token> tokens, NodeId owner) const {
    return walk(tokens, [owner](const Node& n) { return n.owners.count(owner) > 0; });
  }

  // Longest prefix cached by any owner.
  std::size_t longest_match(std::span<const Token> tokens) const {
    return walk(tokens, [](const Node& n) { return !n.owners.empty(); });
  }

  bool contains(std::span<const Token> tokens, NodeId owner) const { return match(tokens, owner) == tokens.size(); }

  // Caches `tokens` under `owner`, refreshing last-use along the path.
  void insert(std::span<const Token> tokens, NodeId owner, double now) {
    Node* cur = root_.get();
    std::size_t pos = 0;
    while (pos < tokens.size()) {
      auto it = cur->children.find(tokens[pos]);
      if (it == cur->children.end()) {
        auto child = std::make_unique<Node>();
        child->edge.assign(tokens.begin() + static_cast<std::ptrdiff_t>(pos), tokens.end());
        child->parent = cur;
        child->serial = next_serial_++;
        Node* raw = child.get();
        cur->children.emplace(tokens[pos], std::move(child));
        tag(*raw, owner, now);
        break;
      }
      Node* child = it->second.get();
      std::size_t common = 0;
      while (common < child->edge.size() && pos + common < tokens.size() &&
             child->edge[common] == tokens[pos + common])
        ++common;
      if (common < child->edge.size()) child = split(child, common);
      tag(*child, owner, now);
      pos += common;
      cur = child;
    }
    if (capacity_ > 0) evict(owner);
  }

  std::size_t owner_tokens(NodeId owner) const {
    auto it = tokens_.find(owner);
    return it == tokens_.end() ? 0 : it->second;
  }

  std::size_t node_count() const { return count_nodes(*root_) - 1; }

 private:
  struct Node {
    std::vector<Token> edge;
    std::map<Token, std::unique_ptr<Node>> children;
    std::map<NodeId, double> owners;  // owner -> last use
    Node* parent = nullptr;
    std::uint64_t serial = 0;
  };

  template <typename Pred>
  std::size_t walk(std::span<const Token> tokens, Pred ok) const {
    const Node* cur = root_.get();
    std::size_t pos = 0;
    while (pos < tokens.size()) {
      auto it = cur->children.find(tokens[pos]);
      if (it == cur->children.end() || !ok(*it->second)) break;
      const Node* child = it->second.get();
      std::size_t common = 0;
      while (common < child->edge.size() && pos + common < tokens.size() &&
             child->edge[common] == tokens[pos + common])
        ++common;
      pos += common;
      if (common < child->edge.size()) break;
      cur = child;
    }
    return pos;
  }

  void tag(Node& n, NodeId owner, double now) {
    auto [it, fresh] = n.owners.try_emplace(owner, now);
    if (fresh) {
      tokens_[owner] += n.edge.size();
    } else {
      it->second = std::max(it->second, now);
    }
  }

  // Cuts `n` after `at` tokens; returns the new upper half, which keeps n's owners.
  Node* split(Node* n, std::size_t at) {
    Node* parent = n->parent;
    auto& slot = parent->children.at(n->edge.front());
    std::unique_ptr<Node> lower = std::move(slot);
    auto upper = std::make_unique<Node>();
    upper->edge.assign(lower->edge.begin(), lower->edge.begin() + static_cast<std::ptrdiff_t>(at));
    upper->owners = lower->owners;
    upper->parent = parent;
    upper->serial = next_serial_++;
    lower->edge.erase(lower->edge.begin(), lower->edge.begin() + static_cast<std::ptrdiff_t>(at));
    lower->parent = upper.get();
    Node* raw = upper.get();
    upper->children.emplace(lower->edge.front(), std::move(lower));
    slot = std::move(upper);
    return raw;
  }

  static bool owner_leaf(const Node& n, NodeId owner) {
    if (!n.owners.count(owner)) return false;
    for (const auto& [t, c] : n.children)
      if (c->owners.count(owner)) return false;
    return true;
  }

  void collect_leaves(Node& n, NodeId owner, std::vector<Node*>& out) {
    for (auto& [t, c] : n.children) {
      if (!c->owners.count(owner)) continue;
      if (owner_leaf(*c, owner))
        out.push_back(c.get());
      else
        collect_leaves(*c, owner, out);
    }
  }

  void evict(NodeId owner) {
    using Key = std::tuple<double, std::uint64_t, Node*>;
    std::priority_queue<Key, std::vector<Key>, std::greater<>> heap;
    std::vector<Node*> leaves;
    collect_leaves(*root_, owner, leaves);
    for (Node* n : leaves) heap.emplace(n->owners.at(owner), n->serial, n);
    while (owner_tokens(owner) > capacity_ && !heap.empty()) {
      Node* n = std::get<2>(heap.top());
      heap.pop();
      n->owners.erase(owner);
      tokens_[owner] -= n->edge.size();
      Node* parent = n->parent;
      if (n->owners.empty() && n->children.empty()) parent->children.erase(n->edge.front());
      if (parent != root_.get() && owner_leaf(*parent, owner))
        heap.emplace(parent->owners.at(owner), parent->serial, parent);
    }
  }

  static std::size_t count_nodes(const Node& n) {
    std::size_t c = 1;
    for (const auto& [t, child] : n.children) c += count_nodes(*child);
    return c;
  }

  std::size_t capacity_;
  std::unique_ptr<Node> root_;
  std::map<NodeId, std::size_t> tokens_;
  std::uint64_t next_serial_ = 1;
};

inline std::size_t prefix_match_score(const PrefixTree& tree, std::span<const Token> prompt, NodeId node) {
  return tree.match(prompt, node);
}

enum class NodeRole { kPrefill, kDecode };

struct NodeState {
  NodeId id = 0;
  NodeRole role = NodeRole::kPrefill;
  double running_requests = 0;
  double running_tokens = 0;
  std::vector<RequestId> queue;
  double batch_cycle_est = 0.0;
  double last_batch_start = 0.0;
  bool busy = false;
  double cycle_smoothing = 0.3;

  // Folds one observed batch duration into the cycle estimate.
  void observe_batch(double start, double duration) {
    detail::require(duration >= 0.0, "batch duration must be non-negative");
    last_batch_start = start;
    batch_cycle_est = batch_cycle_est == 0.0 ? duration
                                             : (1.0 - cycle_smoothing) * batch_cycle_est + cycle_smoothing * duration;
  }

  // When this node will next pick up queued work.
  double next_boundary(double now) const { return busy ? last_batch_start + batch_cycle_est : now; }
};

enum class RoutingPolicy { kOas, kRoundRobin };

inline const char* to_string(RoutingPolicy p) { return p == RoutingPolicy::kOas ? "oas" : "round_robin"; }

inline RoutingPolicy parse_routing_policy(const std::string& s) {
  if (s == "oas") return RoutingPolicy::kOas;
  if (s == "round_robin") return RoutingPolicy::kRoundRobin;
  throw InvalidConfig("proxy.policy must be oas or round_robin, got " + s);
}

struct ProxyConfig {
  RoutingPolicy policy = RoutingPolicy::kOas;
  double alpha = 0.01;
  double w_requests = 0.0;
  double w_tokens = 1.0;
  std::size_t default_max_tokens = 1000;
  bool deferral = true;
  std::optional<double> hold_max;  // seconds; defaults to one predicted batch cycle
  std::optional<double> horizon;   // seconds; defaults to a tenth of a batch cycle

  void validate() const {
    if (!(alpha >= 0.0)) throw InvalidConfig("proxy.alpha must be >= 0");
    if (!(w_requests >= 0.0 && w_tokens >= 0.0)) throw InvalidConfig("proxy load weights must be >= 0");
    if (hold_max && !(*hold_max >= 0.0)) throw InvalidConfig("proxy.hold_max must be >= 0");
    if (horizon && !(*horizon >= 0.0)) throw InvalidConfig("proxy.horizon must be >= 0");
  }
};

// pi = match - alpha * (w_r * running_requests + w_t * running_tokens)
inline double score_prefill_node(double match, const NodeState& node, double alpha, double w_requests,
                                 double w_tokens) {
  detail::require(alpha >= 0.0, "alpha must be non-negative");
  return match - alpha * (w_requests * node.running_requests + w_tokens * node.running_tokens);
}

struct PrefillAssignment {
  RequestId request = 0;
  NodeId node = 0;
  std::size_t match = 0;  // cached prefix tokens on the chosen node
  double score = 0.0;
};

enum class TreeUpdate {
  kImmediate,   // insert every routed prompt into the tree at once
  kBatchLocal,  // later prompts of the same call see earlier ones; the caller commits
};

struct PrefillRouter {
  ProxyConfig cfg;
  std::size_t rr_next = 0;
};

// Routes `batch` in order. Each choice charges the chosen node with the
// request's unmatched tokens before the next request is scored.
inline std::vector<PrefillAssignment> schedule_prefill(std::span<const Request* const> batch,
                                                       std::vector<NodeState>& nodes, PrefixTree& tree,
                                                       PrefillRouter& router,
                                                       TreeUpdate update = TreeUpdate::kImmediate, double now = 0.0) {
  if (nodes.empty()) throw NoCapacity("no prefill nodes available");
  const auto& cfg = router.cfg;
  PrefixTree local;
  std::vector<PrefillAssignment> out;
  out.reserve(batch.size());
  auto match_on = [&](const Request& r, NodeId n) {
    std::size_t m = tree.match(r.prompt_tokens, n);
    if (update == TreeUpdate::kBatchLocal) m = std::max(m, local.match(r.prompt_tokens, n));
    return m;
  };
  for (const Request* r : batch) {
    PrefillAssignment a;
    a.request = r->id;
    if (cfg.policy == RoutingPolicy::kRoundRobin) {
      a.node = router.rr_next % nodes.size();
      router.rr_next = (router.rr_next + 1) % nodes.size();
      a.match = match_on(*r, nodes[a.node].id);
      a.score = static_cast<double>(a.match);
    } else {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        const std::size_t m = match_on(*r, nodes[i].id);
        const double pi = score_prefill_node(static_cast<double>(m), nodes[i], cfg.alpha, cfg.w_requests, cfg.w_tokens);
        if (pi > best) {
          best = pi;
          a.node = i;
          a.match = m;
          a.score = pi;
        }
      }
    }
    auto& chosen = nodes[a.node];
    chosen.running_requests += 1;
    chosen.running_tokens += static_cast<double>(r->prompt_len - std::min(a.match, r->prompt_len));
    if (update == TreeUpdate::kImmediate)
      tree.insert(r->prompt_tokens, chosen.id, now);
    else
      local.insert(r->prompt_tokens, chosen.id, now);
    a.node = chosen.id;
    out.push_back(a);
  }
  return out;
}

// l = T_prompt + (T_max or the configured default)
inline double effective_workload(const Request& r, std::size_t default_max) {
  return static_cast<double>(r.prompt_len) + static_cast<double>(r.max_tokens.value_or(default_max));
}

struct LptJob {
  RequestId id = 0;
  double workload = 0.0;
  double arrival = 0.0;
};

struct DecodeAssignment {
  RequestId request = 0;
  NodeId node = 0;
  double workload = 0.0;
};

// Longest job first onto the instance with the least accumulated workload.
// Instance accumulators live in running_tokens and are updated in place. With
// a capacity, instances already holding that many requests are skipped.
inline std::vector<DecodeAssignment> schedule_decode_lpt(std::vector<LptJob> jobs, std::vector<NodeState>& instances,
                                                         std::optional<double> capacity = std::nullopt) {
  if (instances.empty()) throw NoCapacity("no decode instances available");
  std::stable_sort(jobs.begin(), jobs.end(), [](const LptJob& a, const LptJob& b) {
    if (a.workload != b.workload) return a.workload > b.workload;
    if (a.arrival != b.arrival) return a.arrival < b.arrival;
    return a.id < b.id;
  });
  std::vector<DecodeAssignment> out;
  out.reserve(jobs.size());
  for (const auto& j : jobs) {
    std::size_t best = instances.size();
    for (std::size_t i = 0; i < instances.size(); ++i) {
      if (capacity && instances[i].running_requests >= *capacity) continue;
      if (best == instances.size() || instances[i].running_tokens < instances[best].running_tokens) best = i;
    }
    if (best == instances.size()) throw NoCapacity("every decode instance is at capacity");
    instances[best].running_tokens += j.workload;
    instances[best].running_requests += 1;
    out.push_back({j.id, instances[best].id, j.workload});
  }
  return out;
}

struct QueuedItem {
  RequestId id = 0;
  double enqueued = 0.0;
  NodeId target = 0;       // index into the boundary list
  double priority = 0.0;   // pi for prefill, l for decode; higher first
};

struct DeferralResult {
  std::vector<QueuedItem> dispatch;  // in queue order
  std::vector<QueuedItem> retained;  // re-sorted by priority
};

struct DeferralPolicy {
  double hold_max = 0.0;
  double horizon = 0.0;
};

// An item leaves when it has waited hold_max, or when its target's next batch
// boundary is within the horizon.
inline DeferralResult defer_and_resort(std::span<const QueuedItem> queue, std::span<const double> next_boundary,
                                       double now, const DeferralPolicy& policy) {
  DeferralResult out;
  for (const auto& item : queue) {
    detail::require(item.target < next_boundary.size(), "queued item targets an unknown node");
    const bool expired = now >= item.enqueued + policy.hold_max;
    const bool boundary_near = next_boundary[item.target] <= now + policy.horizon;
    (expired || boundary_near ? out.dispatch : out.retained).push_back(item);
  }
  std::stable_sort(out.retained.begin(), out.retained.end(), [](const QueuedItem& a, const QueuedItem& b) {
    if (a.priority != b.priority) return a.priority > b.priority;
    if (a.enqueued != b.enqueued) return a.enqueued < b.enqueued;
    return a.id < b.id;
  });
  return out;
}

}  // namespace pdsim
