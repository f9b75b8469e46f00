// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// JSON scenario files, placement/load files, SimReport JSON/CSV, and replay
// of JSONL event logs.

#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "pdsim/attnpattern.hpp"
#include "pdsim/core.hpp"
#include "pdsim/placement.hpp"
#include "pdsim/simcluster.hpp"

namespace pdsim {

using Json = nlohmann::ordered_json;

// Dotted key path ("cluster.per_die_batch") to the 1-based line holding it.
using KeyLines = std::map<std::string, std::size_t>;

inline KeyLines scan_key_lines(const std::string& text) {
  KeyLines out;
  std::vector<std::string> stack;  // "{key" frames for objects, "[" for arrays
  std::string pending;
  bool have_pending = false;
  std::size_t line = 1;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n') {
      ++line;
    } else if (c == '"') {
      std::string s;
      std::size_t j = i + 1;
      for (; j < text.size() && text[j] != '"'; ++j) {
        if (text[j] == '\\' && j + 1 < text.size()) ++j;
        s += text[j];
      }
      std::size_t k = j + 1;
      while (k < text.size() && (text[k] == ' ' || text[k] == '\t' || text[k] == '\r' || text[k] == '\n')) ++k;
      if (k < text.size() && text[k] == ':' && !stack.empty() && stack.back() != "[") {
        std::string path;
        for (const auto& f : stack)
          if (f != "[" && f.size() > 1) path += f.substr(1) + ".";
        out.emplace(path + s, line);
        pending = s;
        have_pending = true;
      }
      for (std::size_t m = i; m < j && m < text.size(); ++m)
        if (text[m] == '\n') ++line;
      i = j;
    } else if (c == '{') {
      stack.push_back("{" + (have_pending ? pending : std::string()));
      have_pending = false;
    } else if (c == '[') {
      stack.push_back("[");
      have_pending = false;
    } else if (c == '}' || c == ']') {
      if (!stack.empty()) stack.pop_back();
    } else if (c == ',') {
      have_pending = false;
    }
  }
  return out;
}

struct ConfigContext {
  std::string source;
  KeyLines lines;

  [[noreturn]] void fail(const std::string& path, const std::string& msg) const {
    std::string where = source;
    auto it = lines.find(path);
    if (it != lines.end()) where += ":" + std::to_string(it->second);
    throw InvalidConfig(where + ": " + path + ": " + msg);
  }
};

namespace detail {

inline const Json& expect_object(const Json& j, const std::string& path, const ConfigContext& ctx) {
  if (!j.is_object()) ctx.fail(path, "expected an object");
  return j;
}

inline void reject_unknown(const Json& obj, const std::string& prefix, const std::set<std::string>& known,
                           const ConfigContext& ctx) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!known.count(it.key())) ctx.fail(prefix + it.key(), "unknown key");
}

template <typename T>
void read(const Json& obj, const std::string& key, const std::string& prefix, T& out, const ConfigContext& ctx) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  const std::string path = prefix + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!it->is_boolean()) ctx.fail(path, "expected true or false");
    out = it->template get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!it->is_string()) ctx.fail(path, "expected a string");
    out = it->template get<std::string>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!it->is_number_integer() || (std::is_unsigned_v<T> && it->template get<std::int64_t>() < 0))
      ctx.fail(path, std::is_unsigned_v<T> ? "expected a non-negative integer" : "expected an integer");
    out = it->template get<T>();
  } else {
    if (!it->is_number()) ctx.fail(path, "expected a number");
    out = it->template get<T>();
  }
}

template <typename T>
void read_opt(const Json& obj, const std::string& key, const std::string& prefix, std::optional<T>& out,
              const ConfigContext& ctx) {
  if (!obj.contains(key)) return;
  if (obj.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(obj, key, prefix, v, ctx);
  out = v;
}

}  // namespace detail

// Axes of a scenario sweep; empty lists mean the base value only.
struct SweepAxes {
  std::vector<std::size_t> per_die_batch;
  std::vector<std::string> xpyd;
};

struct ScenarioFile {
  Scenario base;
  SweepAxes sweep;

  // Cartesian product of sweep axes, xPyD outermost.
  std::vector<Scenario> points() const {
    std::vector<std::string> xs = sweep.xpyd;
    if (xs.empty()) xs.push_back(base.cluster.xpyd());
    std::vector<std::size_t> bs = sweep.per_die_batch;
    if (bs.empty()) bs.push_back(base.cluster.per_die_batch);
    std::vector<Scenario> out;
    for (const auto& x : xs)
      for (std::size_t b : bs) {
        Scenario s = base;
        s.cluster.set_xpyd(x);
        s.cluster.per_die_batch = b;
        s.validate();
        out.push_back(std::move(s));
      }
    return out;
  }
};

// Applies `section.key=value`; the value is parsed as JSON when possible and
// taken as a string otherwise.
inline void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InvalidConfig("override must look like section.key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw InvalidConfig("override has an empty key segment: " + assignment);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = Json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw InvalidConfig("override path crosses a non-object: " + assignment);
    start = dot + 1;
  }
}

inline ScenarioFile scenario_from_json(const Json& doc, const ConfigContext& ctx) {
  using detail::read;
  using detail::read_opt;
  ScenarioFile f;
  Scenario& s = f.base;
  detail::expect_object(doc, "(root)", ctx);
  detail::reject_unknown(doc, "",
                         {"name", "seed", "cluster", "cost", "workload", "features", "attn", "placement", "proxy",
                          "sim", "sweep"},
                         ctx);
  read(doc, "name", "", s.name, ctx);
  read(doc, "seed", "", s.workload.seed, ctx);

  if (doc.contains("cluster")) {
    const auto& c = detail::expect_object(doc["cluster"], "cluster", ctx);
    const std::string p = "cluster.";
    detail::reject_unknown(c, p,
                           {"xpyd", "prefill_nodes", "prefill_devices", "decode_groups", "decode_devices",
                            "dies_per_device", "devices_per_node", "per_die_batch", "experts", "moe_layers", "top_k"},
                           ctx);
    if (c.contains("xpyd")) {
      std::string x;
      read(c, "xpyd", p, x, ctx);
      try {
        s.cluster.set_xpyd(x);
      } catch (const InvalidConfig& e) {
        ctx.fail(p + "xpyd", e.what());
      }
    }
    read(c, "prefill_nodes", p, s.cluster.prefill_nodes, ctx);
    read(c, "prefill_devices", p, s.cluster.prefill_devices, ctx);
    read(c, "decode_groups", p, s.cluster.decode_groups, ctx);
    read(c, "decode_devices", p, s.cluster.decode_devices, ctx);
    read(c, "dies_per_device", p, s.cluster.dies_per_device, ctx);
    read(c, "devices_per_node", p, s.cluster.devices_per_node, ctx);
    read(c, "per_die_batch", p, s.cluster.per_die_batch, ctx);
    read(c, "experts", p, s.cluster.experts, ctx);
    read(c, "moe_layers", p, s.cluster.moe_layers, ctx);
    read(c, "top_k", p, s.cluster.top_k, ctx);
  }
  if (doc.contains("cost")) {
    const auto& c = detail::expect_object(doc["cost"], "cost", ctx);
    const std::string p = "cost.";
    detail::reject_unknown(c, p,
                           {"prefill_base", "prefill_per_token", "prefill_token_budget", "kv_transfer_per_token",
                            "decode_base", "decode_per_kv_token", "decode_per_expert_load"},
                           ctx);
    read(c, "prefill_base", p, s.cost.prefill_base, ctx);
    read(c, "prefill_per_token", p, s.cost.prefill_per_token, ctx);
    read(c, "prefill_token_budget", p, s.cost.prefill_token_budget, ctx);
    read(c, "kv_transfer_per_token", p, s.cost.kv_transfer_per_token, ctx);
    read(c, "decode_base", p, s.cost.decode_base, ctx);
    read(c, "decode_per_kv_token", p, s.cost.decode_per_kv_token, ctx);
    read(c, "decode_per_expert_load", p, s.cost.decode_per_expert_load, ctx);
  }
  if (doc.contains("workload")) {
    const auto& w = detail::expect_object(doc["workload"], "workload", ctx);
    const std::string p = "workload.";
    detail::reject_unknown(w, p,
                           {"mean_in", "mean_out", "sigma_in", "sigma_out", "cap", "shared_fraction", "prefix_pool",
                            "prefix_len", "expert_skew", "shift_period", "shift_step"},
                           ctx);
    read(w, "mean_in", p, s.workload.mean_in, ctx);
    read(w, "mean_out", p, s.workload.mean_out, ctx);
    read(w, "sigma_in", p, s.workload.sigma_in, ctx);
    read(w, "sigma_out", p, s.workload.sigma_out, ctx);
    read(w, "cap", p, s.workload.cap, ctx);
    read(w, "shared_fraction", p, s.workload.shared_fraction, ctx);
    read(w, "prefix_pool", p, s.workload.prefix_pool, ctx);
    read(w, "prefix_len", p, s.workload.prefix_len, ctx);
    read(w, "expert_skew", p, s.workload.expert_skew, ctx);
    read(w, "shift_period", p, s.workload.shift_period, ctx);
    read(w, "shift_step", p, s.workload.shift_step, ctx);
  }
  if (doc.contains("features")) {
    const auto& ft = detail::expect_object(doc["features"], "features", ctx);
    const std::string p = "features.";
    detail::reject_unknown(ft, p, {"placement", "attn", "proxy"}, ctx);
    std::string v;
    if (ft.contains("placement")) {
      read(ft, "placement", p, v, ctx);
      try {
        s.placement_mode = parse_placement_mode(v);
      } catch (const InvalidConfig& e) {
        ctx.fail(p + "placement", e.what());
      }
    }
    if (ft.contains("attn")) {
      read(ft, "attn", p, v, ctx);
      if (v != "pattern" && v != "none") ctx.fail(p + "attn", "must be pattern or none");
      s.attn.enabled = v == "pattern";
    }
    if (ft.contains("proxy")) {
      read(ft, "proxy", p, v, ctx);
      try {
        s.proxy.policy = parse_routing_policy(v);
      } catch (const InvalidConfig& e) {
        ctx.fail(p + "proxy", e.what());
      }
    }
  }
  if (doc.contains("attn")) {
    const auto& a = detail::expect_object(doc["attn"], "attn", ctx);
    const std::string p = "attn.";
    detail::reject_unknown(a, p, {"pattern", "sink", "recent", "compressed_prefill_cost"}, ctx);
    if (a.contains("pattern")) {
      std::string v;
      read(a, "pattern", p, v, ctx);
      try {
        s.attn.pattern = CompressionPattern::parse(v);
      } catch (const Error& e) {
        ctx.fail(p + "pattern", e.what());
      }
    }
    read(a, "sink", p, s.attn.sink, ctx);
    read(a, "recent", p, s.attn.recent, ctx);
    read(a, "compressed_prefill_cost", p, s.attn.compressed_prefill_cost, ctx);
  }
  if (doc.contains("placement")) {
    const auto& pl = detail::expect_object(doc["placement"], "placement", ctx);
    const std::string p = "placement.";
    detail::reject_unknown(pl, p,
                           {"budget", "trigger", "margin", "interval", "window_len", "decay", "expert_bytes",
                            "link_bandwidth"},
                           ctx);
    read_opt(pl, "budget", p, s.placement.budget, ctx);
    auto& sc = s.placement.scheduler;
    read(pl, "trigger", p, sc.trigger, ctx);
    read(pl, "margin", p, sc.margin, ctx);
    read(pl, "interval", p, sc.interval, ctx);
    read(pl, "window_len", p, sc.window_len, ctx);
    read(pl, "decay", p, sc.decay, ctx);
    read(pl, "expert_bytes", p, sc.expert_bytes, ctx);
    read(pl, "link_bandwidth", p, sc.link_bandwidth, ctx);
  }
  if (doc.contains("proxy")) {
    const auto& px = detail::expect_object(doc["proxy"], "proxy", ctx);
    const std::string p = "proxy.";
    detail::reject_unknown(px, p,
                           {"alpha", "w_requests", "w_tokens", "default_max_tokens", "deferral", "hold_max", "horizon",
                            "cache_tokens"},
                           ctx);
    read(px, "alpha", p, s.proxy.alpha, ctx);
    read(px, "w_requests", p, s.proxy.w_requests, ctx);
    read(px, "w_tokens", p, s.proxy.w_tokens, ctx);
    read(px, "default_max_tokens", p, s.proxy.default_max_tokens, ctx);
    read(px, "deferral", p, s.proxy.deferral, ctx);
    read_opt(px, "hold_max", p, s.proxy.hold_max, ctx);
    read_opt(px, "horizon", p, s.proxy.horizon, ctx);
    read(px, "cache_tokens", p, s.prefix_cache_tokens, ctx);
  }
  if (doc.contains("sim")) {
    const auto& sm = detail::expect_object(doc["sim"], "sim", ctx);
    const std::string p = "sim.";
    detail::reject_unknown(sm, p, {"duration", "warmup_fraction", "imbalance_bucket"}, ctx);
    read(sm, "duration", p, s.sim.duration, ctx);
    read(sm, "warmup_fraction", p, s.sim.warmup_fraction, ctx);
    read(sm, "imbalance_bucket", p, s.sim.imbalance_bucket, ctx);
  }
  if (doc.contains("sweep")) {
    const auto& sw = detail::expect_object(doc["sweep"], "sweep", ctx);
    detail::reject_unknown(sw, "sweep.", {"per_die_batch", "xpyd"}, ctx);
    if (sw.contains("per_die_batch")) {
      const auto& arr = sw["per_die_batch"];
      if (!arr.is_array()) ctx.fail("sweep.per_die_batch", "expected a list of integers");
      for (const auto& v : arr) {
        if (!v.is_number_unsigned() || v.get<std::size_t>() < 1)
          ctx.fail("sweep.per_die_batch", "expected a list of positive integers");
        f.sweep.per_die_batch.push_back(v.get<std::size_t>());
      }
    }
    if (sw.contains("xpyd")) {
      const auto& arr = sw["xpyd"];
      if (!arr.is_array()) ctx.fail("sweep.xpyd", "expected a list of labels");
      for (const auto& v : arr) {
        if (!v.is_string()) ctx.fail("sweep.xpyd", "expected a list of labels");
        ClusterConfig probe;
        try {
          probe.set_xpyd(v.get<std::string>());
        } catch (const InvalidConfig& e) {
          ctx.fail("sweep.xpyd", e.what());
        }
        f.sweep.xpyd.push_back(v.get<std::string>());
      }
    }
  }
  try {
    s.validate();
    (void)f.points();
  } catch (const InvalidConfig& e) {
    throw InvalidConfig(ctx.source + ": " + e.what());
  } catch (const InvalidSpec& e) {
    throw InvalidConfig(ctx.source + ": " + e.what());
  }
  return f;
}

inline Json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < e.byte && i < text.size(); ++i) line += text[i] == '\n';
    throw InvalidConfig(source + ":" + std::to_string(line) + ": malformed JSON: " + e.what());
  }
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidConfig(path + ": cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// `seed` and `overrides` are applied on top of the file before validation.
inline ScenarioFile parse_scenario_text(const std::string& text, const std::string& source,
                                        const std::vector<std::string>& overrides = {},
                                        std::optional<std::uint64_t> seed = std::nullopt) {
  Json doc = parse_json_text(text, source);
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  return scenario_from_json(doc, ConfigContext{source, scan_key_lines(text)});
}

inline ScenarioFile load_scenario(const std::string& path, const std::vector<std::string>& overrides = {},
                                  std::optional<std::uint64_t> seed = std::nullopt) {
  return parse_scenario_text(read_text_file(path), path, overrides, seed);
}

// ---- load matrices, placements, topologies ----

inline Json loads_to_json(const LoadMatrix& d) {
  Json j;
  j["layers"] = d.layers();
  j["experts"] = d.experts();
  Json rows = Json::array();
  for (std::size_t l = 0; l < d.layers(); ++l) rows.push_back(d.row_copy(l));
  j["loads"] = rows;
  return j;
}

inline LoadMatrix loads_from_json(const Json& j, const std::string& source) {
  const ConfigContext ctx{source, {}};
  detail::expect_object(j, "(root)", ctx);
  if (!j.contains("loads") || !j["loads"].is_array() || j["loads"].empty())
    ctx.fail("loads", "expected a non-empty list of per-layer load lists");
  std::vector<std::vector<double>> rows;
  for (const auto& r : j["loads"]) {
    if (!r.is_array()) ctx.fail("loads", "each layer must be a list of numbers");
    std::vector<double> row;
    for (const auto& v : r) {
      if (!v.is_number() || v.get<double>() < 0) ctx.fail("loads", "loads must be non-negative numbers");
      row.push_back(v.get<double>());
    }
    rows.push_back(std::move(row));
  }
  for (const auto& r : rows)
    if (r.size() != rows[0].size() || r.empty()) ctx.fail("loads", "all layers need the same non-zero expert count");
  if (j.contains("layers") && j["layers"] != rows.size()) ctx.fail("layers", "does not match the loads list");
  if (j.contains("experts") && j["experts"] != rows[0].size()) ctx.fail("experts", "does not match the loads rows");
  return LoadMatrix::from_rows(rows);
}

// bits[l][r] lists the expert ids hosted by device r in layer l.
inline Json placement_to_json(const PlacementTensor& p, const std::vector<std::size_t>& slots, const LoadMatrix* loads) {
  Json j;
  j["layers"] = p.layers();
  j["devices"] = p.devices();
  j["experts"] = p.experts();
  j["slots"] = slots;
  if (loads != nullptr) {
    Json rows = Json::array();
    for (std::size_t l = 0; l < loads->layers(); ++l) rows.push_back(loads->row_copy(l));
    j["loads"] = rows;
  }
  Json bits = Json::array();
  for (std::size_t l = 0; l < p.layers(); ++l) {
    Json layer = Json::array();
    for (std::size_t r = 0; r < p.devices(); ++r) layer.push_back(p.experts_on(l, r));
    bits.push_back(layer);
  }
  j["bits"] = bits;
  return j;
}

inline PlacementTensor placement_from_json(const Json& j, const std::string& source) {
  const ConfigContext ctx{source, {}};
  detail::expect_object(j, "(root)", ctx);
  for (const char* k : {"layers", "devices", "experts"})
    if (!j.contains(k) || !j[k].is_number_unsigned()) ctx.fail(k, "expected a non-negative integer");
  const auto L = j["layers"].get<std::size_t>();
  const auto R = j["devices"].get<std::size_t>();
  const auto E = j["experts"].get<std::size_t>();
  if (!j.contains("bits") || !j["bits"].is_array() || j["bits"].size() != L)
    ctx.fail("bits", "expected one entry per layer");
  PlacementTensor p(L, R, E);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& layer = j["bits"][l];
    if (!layer.is_array() || layer.size() != R) ctx.fail("bits", "expected one expert list per device");
    for (std::size_t r = 0; r < R; ++r)
      for (const auto& e : layer[r]) {
        if (!e.is_number_unsigned() || e.get<std::size_t>() >= E) ctx.fail("bits", "expert id out of range");
        p.set(l, r, e.get<std::size_t>());
      }
  }
  return p;
}

// {"devices": R, "cost": [[...]]} or {"devices": R, "group": g, "near": a, "far": b}
inline Topology topology_from_json(const Json& j, const std::string& source) {
  const ConfigContext ctx{source, {}};
  detail::expect_object(j, "(root)", ctx);
  detail::reject_unknown(j, "", {"devices", "cost", "group", "near", "far"}, ctx);
  if (!j.contains("devices") || !j["devices"].is_number_unsigned()) ctx.fail("devices", "expected an integer");
  const auto R = j["devices"].get<std::size_t>();
  if (j.contains("cost")) {
    std::vector<double> flat;
    const auto& rows = j["cost"];
    if (!rows.is_array() || rows.size() != R) ctx.fail("cost", "expected an R x R matrix");
    for (const auto& row : rows) {
      if (!row.is_array() || row.size() != R) ctx.fail("cost", "expected an R x R matrix");
      for (const auto& v : row) {
        if (!v.is_number()) ctx.fail("cost", "expected numbers");
        flat.push_back(v.get<double>());
      }
    }
    return Topology(R, std::move(flat));
  }
  if (j.contains("group")) {
    std::size_t g = 1;
    double near = 0, far = 0;
    detail::read(j, "group", "", g, ctx);
    detail::read(j, "near", "", near, ctx);
    detail::read(j, "far", "", far, ctx);
    return Topology::grouped(R, g, near, far);
  }
  return Topology::zeros(R);
}

// ---- reports ----

inline const char* kReportCsvHeader =
    "scenario,xpyd,batch,qpm,ttft_s,tpot_ms,p99_ttft_s,p99_tpot_ms,e2e_s,p99_e2e_s,ott_tok_s,ttt_tok_s,ptt_tok_s";

inline std::string report_csv_row(const SimReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.2f,%.4f,%.3f,%.4f,%.3f,%.3f,%.3f,%.3f,%.3f,%.3f", r.scenario.c_str(),
                r.xpyd.c_str(), r.per_die_batch, r.qpm, r.ttft_mean, r.tpot_mean, r.ttft_p99, r.tpot_p99, r.e2e_mean,
                r.e2e_p99, r.ott, r.ttt, r.ptt);
  return buf;
}

inline std::string report_csv(const std::vector<SimReport>& reports) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const auto& r : reports) out += report_csv_row(r) + "\n";
  return out;
}

inline Json report_to_json(const SimReport& r) {
  Json j;
  j["scenario"] = r.scenario;
  j["xpyd"] = r.xpyd;
  j["per_die_batch"] = r.per_die_batch;
  j["concurrency"] = r.concurrency;
  j["qpm"] = r.qpm;
  j["ttft_s"] = {{"mean", r.ttft_mean}, {"p99", r.ttft_p99}};
  j["tpot_ms"] = {{"mean", r.tpot_mean}, {"p99", r.tpot_p99}};
  j["e2e_s"] = {{"mean", r.e2e_mean}, {"p99", r.e2e_p99}};
  j["throughput_tok_s"] = {{"ott", r.ott}, {"ptt", r.ptt}, {"ttt", r.ttt}};
  j["tokens"] = {{"output", r.output_tokens}, {"prompt", r.prompt_tokens}, {"total", r.total_tokens}};
  j["window_s"] = {r.window_start, r.window_end};
  j["completed"] = r.completed;
  j["latency_samples"] = r.latency_samples;
  j["prefix_cache"] = {{"hit_tokens", r.cache_hit_tokens}, {"prompt_tokens", r.prefilled_prompt_tokens}};
  j["max_deferral_s"] = r.max_deferral;
  j["rebalances"] = r.rebalances;
  j["utilization"] = {{"prefill", r.prefill_utilization}, {"decode", r.decode_utilization}};
  Json imb = Json::array();
  for (const auto& [t, b] : r.imbalance) imb.push_back({t, b});
  j["imbalance"] = imb;
  return j;
}

namespace detail {

inline void replay_record(const Json& j, SimReport& rep, std::vector<CompletedRequest>& done, std::optional<Json>& end,
                          bool& started) {
  const auto type = j.at("type").get<std::string>();
  if (type == "start") {
    started = true;
    rep.scenario = j.at("scenario").get<std::string>();
    rep.xpyd = j.at("xpyd").get<std::string>();
    rep.per_die_batch = j.at("per_die_batch").get<std::size_t>();
    rep.concurrency = j.at("concurrency").get<std::size_t>();
  } else if (type == "done") {
    CompletedRequest c;
    c.id = j.at("req").get<RequestId>();
    c.arrival = j.at("arrival").get<double>();
    c.first_token = j.at("first_token").get<double>();
    c.finish = j.at("finish").get<double>();
    c.in_len = j.at("in").get<std::size_t>();
    c.out_len = j.at("out").get<std::size_t>();
    c.tpot = j.at("tpot").get<double>();
    c.initial_fill = j.at("initial").get<bool>();
    done.push_back(c);
  } else if (type == "end") {
    for (const char* k : {"t", "warmup_fraction", "fill_drained"}) (void)j.at(k).get<double>();
    end = j;
  }
}

}  // namespace detail

// Rebuilds the headline metrics of a run from its JSONL event log.
inline SimReport replay_event_log(std::istream& in, const std::string& source) {
  SimReport rep;
  std::vector<CompletedRequest> done;
  std::optional<Json> end;
  bool started = false;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("type"))
      throw InvalidConfig(source + ":" + std::to_string(n) + ": not a JSON event record");
    try {
      detail::replay_record(j, rep, done, end, started);
    } catch (const Json::exception& e) {
      throw InvalidConfig(source + ":" + std::to_string(n) + ": malformed event record: " + e.what());
    }
  }
  if (!started || !end) throw InvalidConfig(source + ": event log lacks start/end records");
  aggregate_metrics(rep, std::move(done), end->at("t").get<double>(), end->at("warmup_fraction").get<double>(),
                    end->at("fill_drained").get<double>());
  return rep;
}

}  // namespace pdsim
