// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// Command-line front end: simulate, place, pattern-search, report.
//
// Exit codes:
//   0  success (including an infeasible pattern search, which is reported)
//   1  output could not be written
//   2  usage error or malformed input file
//   3  runtime invariant breach inside the simulator
//   4  infeasible placement budget

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "pdsim/attnpattern.hpp"
#include "pdsim/io.hpp"
#include "pdsim/placement.hpp"
#include "pdsim/simcluster.hpp"

namespace pdsim::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInvariant = 3;
inline constexpr int kExitInfeasible = 4;

inline constexpr const char* kVersion = "0.1.0";

class OutputError : public Error {
 public:
  using Error::Error;
};

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw OutputError("cannot write " + path.string());
  out << content;
  if (!out) throw OutputError("failed writing " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw OutputError("cannot create directory " + dir.string() + ": " + ec.message());
}

// Worker count for sweeps: PDSIM_THREADS, else 1.
inline std::size_t sweep_threads(std::size_t points) {
  std::size_t n = 1;
  if (const char* env = std::getenv("PDSIM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw InvalidConfig("PDSIM_THREADS must be a positive integer");
    n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, points));
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& command,
                           const std::vector<std::string>& argv, Json extra) {
  Json m;
  m["tool"] = "pdsim";
  m["version"] = kVersion;
  m["command"] = command;
  m["argv"] = argv;
  m["created_utc"] = utc_now();
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

struct SimulateArgs {
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool events = false;
  std::string out_dir = "out";
};

inline int cmd_simulate(const SimulateArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const auto file = load_scenario(a.scenario, a.overrides, a.seed);
  const auto points = file.points();
  const std::filesystem::path dir(a.out_dir);
  ensure_dir(dir);

  std::vector<SimReport> reports(points.size());
  std::vector<std::exception_ptr> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        if (a.events) {
          std::ofstream log(dir / ("events_" + std::to_string(i) + ".jsonl"), std::ios::binary | std::ios::trunc);
          if (!log) throw OutputError("cannot write event log for sweep point " + std::to_string(i));
          reports[i] = run_simulation(points[i], [&log](const std::string& line) { log << line << '\n'; });
        } else {
          reports[i] = run_simulation(points[i]);
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = sweep_threads(points.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  const std::string csv = report_csv(reports);
  Json js = Json::array();
  for (const auto& r : reports) js.push_back(report_to_json(r));
  write_file(dir / "report.csv", csv);
  write_file(dir / "report.json", js.dump(2) + "\n");
  write_manifest(dir, "simulate", argv,
                 Json{{"scenario", a.scenario},
                      {"seed", file.base.workload.seed},
                      {"overrides", a.overrides},
                      {"points", points.size()},
                      {"threads", threads},
                      {"event_logs", a.events}});
  out << csv;
  return kExitOk;
}

struct PlaceArgs {
  std::string loads;
  std::size_t devices = 0;
  std::int64_t budget = 0;
  std::optional<std::size_t> slots;
  std::string topology;
  bool oracle = false;
  std::string out_dir = "out";
};

inline int cmd_place(const PlaceArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const auto loads = loads_from_json(parse_json_text(read_text_file(a.loads), a.loads), a.loads);
  if (a.devices < 1) throw InvalidConfig("--devices must be >= 1");
  Topology topo = Topology::zeros(a.devices);
  if (!a.topology.empty()) {
    topo = topology_from_json(parse_json_text(read_text_file(a.topology), a.topology), a.topology);
    if (topo.devices() != a.devices) throw InvalidConfig(a.topology + ": device count does not match --devices");
  }
  if (a.budget < 0) throw InfeasiblePlacement("redundancy budget must be non-negative");

  PlacementTensor placement;
  std::vector<std::size_t> slots;
  std::vector<double> after;
  if (a.slots) {
    placement = PlacementTensor(loads.layers(), a.devices, loads.experts());
    for (std::size_t l = 0; l < loads.layers(); ++l) {
      const auto layer = place_layer(loads.row(l), a.devices, *a.slots, topo);
      placement.assign_layer(l, layer.placement);
      after.push_back(layer.imbalance);
      slots.push_back(*a.slots);
    }
  } else {
    const auto st = static_expert_placement(loads, a.devices, a.budget, topo);
    placement = st.placement;
    slots = st.budget.slots;
    after = st.imbalance;
  }
  if (!placement.is_valid(slots)) throw InvariantBreach("placement violates existence or capacity");

  Json summary = Json::array();
  char buf[256];
  for (std::size_t l = 0; l < loads.layers(); ++l) {
    const double before = no_redundancy_imbalance(loads.row(l), a.devices);
    Json row{{"layer", l}, {"slots", slots[l]}, {"b_before", before}, {"b_after", after[l]}};
    std::snprintf(buf, sizeof buf, "layer %zu: slots %zu B before %.6f after %.6f", l, slots[l], before, after[l]);
    std::string line = buf;
    if (a.oracle) {
      try {
        const auto opt = brute_force_layer(loads.row(l), a.devices, slots[l]);
        const double gap = after[l] / opt.imbalance;
        row["b_oracle"] = opt.imbalance;
        row["gap"] = gap;
        std::snprintf(buf, sizeof buf, " oracle %.6f gap %.2f%%", opt.imbalance, (gap - 1.0) * 100.0);
        line += buf;
      } catch (const SearchTooLarge&) {
        row["b_oracle"] = nullptr;
        line += " oracle skipped (search too large)";
      }
    }
    summary.push_back(row);
    out << line << "\n";
  }
  const std::filesystem::path dir(a.out_dir);
  ensure_dir(dir);
  Json pj = placement_to_json(placement, slots, &loads);
  pj["summary"] = summary;
  write_file(dir / "placement.json", pj.dump(2) + "\n");
  write_manifest(dir, "place", argv,
                 Json{{"loads", a.loads}, {"devices", a.devices}, {"budget", a.budget}, {"oracle", a.oracle}});
  return kExitOk;
}

// GA config file:
// {"layers": L, "tau": 0.9, "seed": 1,
//  "latency": {"full": 1.0 | [...], "compressed": 0.4 | [...]},
//  "oracle": {"kind": "allowed_subset", "allowed": "0110..."}
//          | {"kind": "sensitivity", "drop": [...], "base": 1.0}
//          | {"kind": "constant", "accuracy": 0.95},
//  "ga": {"population": 32, "generations": 200, "crossover_rate": 0.9, "mutation_rate": 0.125, "elitism": 2}}
struct PatternSearchSetup {
  std::size_t layers = 0;
  LatencyModel latency;
  FitnessOracle oracle;
  GAConfig ga;
};

inline PatternSearchSetup pattern_setup_from_json(const Json& j, const std::string& source) {
  const ConfigContext ctx{source, {}};
  detail::expect_object(j, "(root)", ctx);
  detail::reject_unknown(j, "", {"layers", "tau", "seed", "latency", "oracle", "ga"}, ctx);
  PatternSearchSetup s;
  detail::read(j, "layers", "", s.layers, ctx);
  if (s.layers < 1) ctx.fail("layers", "must be >= 1");
  detail::read(j, "tau", "", s.ga.tau, ctx);
  detail::read(j, "seed", "", s.ga.seed, ctx);

  auto per_layer = [&](const Json& obj, const char* key, double fallback) {
    std::vector<double> v(s.layers, fallback);
    if (!obj.contains(key)) return v;
    const auto& x = obj[key];
    if (x.is_number()) return std::vector<double>(s.layers, x.get<double>());
    if (!x.is_array() || x.size() != s.layers) ctx.fail(std::string("latency.") + key, "expected a number or L numbers");
    for (std::size_t l = 0; l < s.layers; ++l) {
      if (!x[l].is_number()) ctx.fail(std::string("latency.") + key, "expected numbers");
      v[l] = x[l].get<double>();
    }
    return v;
  };
  Json lat = j.value("latency", Json::object());
  detail::expect_object(lat, "latency", ctx);
  detail::reject_unknown(lat, "latency.", {"full", "compressed"}, ctx);
  s.latency = LatencyModel{per_layer(lat, "full", 1.0), per_layer(lat, "compressed", 0.5)};
  s.latency.validate();

  if (!j.contains("oracle")) ctx.fail("oracle", "an oracle section is required");
  const auto& o = detail::expect_object(j["oracle"], "oracle", ctx);
  std::string kind;
  detail::read(o, "kind", "oracle.", kind, ctx);
  if (kind == "allowed_subset") {
    detail::reject_unknown(o, "oracle.", {"kind", "allowed"}, ctx);
    std::string bits;
    detail::read(o, "allowed", "oracle.", bits, ctx);
    const auto mask = CompressionPattern::parse(bits);
    if (mask.layers() != s.layers) ctx.fail("oracle.allowed", "length must equal layers");
    s.oracle = allowed_subset_oracle(mask.bits());
  } else if (kind == "sensitivity") {
    detail::reject_unknown(o, "oracle.", {"kind", "drop", "base"}, ctx);
    double base = 1.0;
    detail::read(o, "base", "oracle.", base, ctx);
    if (!o.contains("drop") || !o["drop"].is_array() || o["drop"].size() != s.layers)
      ctx.fail("oracle.drop", "expected one number per layer");
    std::vector<double> drop;
    for (const auto& v : o["drop"]) {
      if (!v.is_number()) ctx.fail("oracle.drop", "expected numbers");
      drop.push_back(v.get<double>());
    }
    s.oracle = sensitivity_oracle(std::move(drop), base);
  } else if (kind == "constant") {
    detail::reject_unknown(o, "oracle.", {"kind", "accuracy"}, ctx);
    double acc = 1.0;
    detail::read(o, "accuracy", "oracle.", acc, ctx);
    s.oracle = constant_oracle(acc);
  } else {
    ctx.fail("oracle.kind", "must be allowed_subset, sensitivity or constant");
  }

  if (j.contains("ga")) {
    const auto& g = detail::expect_object(j["ga"], "ga", ctx);
    detail::reject_unknown(g, "ga.", {"population", "generations", "crossover_rate", "mutation_rate", "elitism"}, ctx);
    detail::read(g, "population", "ga.", s.ga.population, ctx);
    detail::read(g, "generations", "ga.", s.ga.generations, ctx);
    detail::read(g, "crossover_rate", "ga.", s.ga.crossover_rate, ctx);
    detail::read_opt(g, "mutation_rate", "ga.", s.ga.mutation_rate, ctx);
    detail::read(g, "elitism", "ga.", s.ga.elitism, ctx);
  }
  s.ga.validate();
  return s;
}

struct PatternArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
};

inline int cmd_pattern_search(const PatternArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  const std::string text = read_text_file(a.config);
  Json doc = parse_json_text(text, a.config);
  for (const auto& o : a.overrides) apply_override(doc, o);
  if (a.seed) doc["seed"] = *a.seed;
  const auto setup = pattern_setup_from_json(doc, a.config);
  const auto res = ga_search(setup.oracle, setup.latency, setup.ga, setup.layers);

  Json pj;
  if (res.best) {
    pj["status"] = "ok";
    pj["pattern"] = res.best->pattern.to_string();
    pj["accuracy"] = res.best->accuracy;
    pj["latency"] = res.best->latency;
    out << "pattern " << res.best->pattern.to_string() << " accuracy " << res.best->accuracy << " latency "
        << res.best->latency << "\n";
  } else {
    pj["status"] = "infeasible";
    pj["pattern"] = nullptr;
    pj["best_infeasible"] = {{"pattern", res.best_any.pattern.to_string()},
                             {"accuracy", res.best_any.accuracy},
                             {"latency", res.best_any.latency}};
    out << "infeasible: no pattern reaches accuracy " << setup.ga.tau << "\n";
  }
  pj["tau"] = setup.ga.tau;
  pj["generations_run"] = res.generations_run;
  pj["evaluations"] = res.evaluations;
  pj["early_stopped"] = res.early_stopped;
  const std::filesystem::path dir(a.out_dir);
  ensure_dir(dir);
  write_file(dir / "pattern.json", pj.dump(2) + "\n");
  write_file(dir / "ga_curve.csv", ga_curve_csv(res));
  write_manifest(dir, "pattern-search", argv, Json{{"config", a.config}, {"seed", setup.ga.seed}});
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> logs;
  std::string out_dir;
};

inline int cmd_report(const ReportArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  std::vector<SimReport> reports;
  for (const auto& path : a.logs) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidConfig(path + ": cannot open file");
    reports.push_back(replay_event_log(in, path));
  }
  const std::string csv = report_csv(reports);
  if (!a.out_dir.empty()) {
    const std::filesystem::path dir(a.out_dir);
    ensure_dir(dir);
    write_file(dir / "report.csv", csv);
    write_manifest(dir, "report", argv, Json{{"logs", a.logs}});
  }
  out << csv;
  return kExitOk;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Prefill/decode disaggregated MoE serving simulator and schedulers", "pdsim"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* s = app.add_subcommand("simulate", "Run a scenario file (all sweep points) and write reports");
  s->add_option("scenario", sim.scenario, "Scenario JSON file")->required();
  s->add_option("--seed", sim.seed, "Override the scenario seed");
  s->add_option("--set", sim.overrides, "Override a key: section.key=value")->take_all();
  s->add_flag("--events", sim.events, "Write a JSONL event log per sweep point");
  s->add_option("--out-dir", sim.out_dir, "Output directory")->capture_default_str();

  PlaceArgs place;
  auto* p = app.add_subcommand("place", "Static expert placement for a load matrix");
  p->add_option("loads", place.loads, "Load matrix JSON file")->required();
  p->add_option("--devices", place.devices, "Device count R")->required();
  p->add_option("--budget", place.budget, "Redundant expert instances M")->capture_default_str();
  p->add_option("--slots", place.slots, "Fixed slots per device, bypassing the budget");
  p->add_option("--topology", place.topology, "Topology JSON file");
  p->add_flag("--oracle", place.oracle, "Compare each layer against the brute-force optimum");
  p->add_option("--out-dir", place.out_dir, "Output directory")->capture_default_str();

  PatternArgs pat;
  auto* g = app.add_subcommand("pattern-search", "Genetic search for a layer compression pattern");
  g->add_option("config", pat.config, "GA config JSON file")->required();
  g->add_option("--seed", pat.seed, "Override the GA seed");
  g->add_option("--set", pat.overrides, "Override a key: section.key=value")->take_all();
  g->add_option("--out-dir", pat.out_dir, "Output directory")->capture_default_str();

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Re-aggregate metrics from JSONL event logs");
  r->add_option("logs", rep.logs, "Event log files")->required();
  r->add_option("--out-dir", rep.out_dir, "Also write report.csv here");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "pdsim: " << e.what() << "\n";
    for (auto* sub : app.get_subcommands()) err << sub->help();
    return kExitUsage;
  }

  try {
    if (s->parsed()) return cmd_simulate(sim, args, out);
    if (p->parsed()) return cmd_place(place, args, out);
    if (g->parsed()) return cmd_pattern_search(pat, args, out);
    return cmd_report(rep, args, out);
  } catch (const OutputError& e) {
    err << "pdsim: " << e.what() << "\n";
    return kExitIo;
  } catch (const InfeasiblePlacement& e) {
    err << "pdsim: infeasible: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const InvariantBreach& e) {
    err << "pdsim: invariant breach: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const ProtocolViolation& e) {
    err << "pdsim: invariant breach: " << e.what() << "\n";
    return kExitInvariant;
  } catch (const Error& e) {
    err << "pdsim: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Json::exception& e) {
    err << "pdsim: malformed input: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace pdsim::cli
