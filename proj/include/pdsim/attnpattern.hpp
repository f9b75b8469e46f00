// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// Layer-wise KV-cache compression: sink + recent token selection, reference
// dense and sparse attention, an additive latency model and a genetic search
// for the cheapest compression pattern that keeps accuracy above a threshold.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pdsim/errors.hpp"

namespace pdsim {

// Retained token positions (1-based) of a compressed layer.
struct SparseIndexSet {
  std::size_t total = 0;
  std::size_t sink = 0;
  std::size_t recent = 0;
  std::vector<std::size_t> indices;  // sorted, unique, within [1, total]

  std::size_t size() const { return indices.size(); }
};

inline SparseIndexSet build_sparse_index_set(std::size_t total, std::size_t sink, std::size_t recent) {
  detail::require(total >= 1, "sparse index set needs at least one token");
  SparseIndexSet out{total, sink, recent, {}};
  const std::size_t sink_end = std::min(sink, total);
  const std::size_t recent_begin = recent >= total ? 1 : total - recent + 1;
  for (std::size_t i = 1; i <= sink_end; ++i) out.indices.push_back(i);
  for (std::size_t i = std::max(recent_begin, sink_end + 1); i <= total; ++i) out.indices.push_back(i);
  return out;
}

// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(const std::vector<std::vector<double>>& rows) {
    detail::require(!rows.empty(), "matrix needs at least one row");
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      detail::require(rows[i].size() == m.cols_, "ragged matrix rows");
      std::copy(rows[i].begin(), rows[i].end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * m.cols_));
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Numerically stable softmax of one row of logits.
inline std::vector<double> softmax(const std::vector<double>& logits) {
  detail::require(!logits.empty(), "softmax of an empty row");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double norm = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    out[j] = std::exp(logits[j] - peak);
    norm += out[j];
  }
  for (double& v : out) v /= norm;
  return out;
}

// softmax(Q K^T / sqrt(d)) V. When `weights` is given it receives the
// attention probabilities, one row per query.
inline Matrix dense_attention(const Matrix& q, const Matrix& k, const Matrix& v, Matrix* weights = nullptr) {
  detail::require(q.cols() >= 1, "attention head dimension must be >= 1");
  detail::require(k.rows() >= 1, "attention needs at least one key");
  detail::require(q.cols() == k.cols() && k.cols() == v.cols() && k.rows() == v.rows(),
                  "attention operand shapes disagree");
  const std::size_t d = q.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix out(q.rows(), d);
  if (weights) *weights = Matrix(q.rows(), k.rows());
  std::vector<double> logits(k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < k.rows(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += q(i, c) * k(j, c);
      logits[j] = dot * scale;
    }
    const auto p = softmax(logits);
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (weights) (*weights)(i, j) = p[j];
      for (std::size_t c = 0; c < d; ++c) out(i, c) += p[j] * v(j, c);
    }
  }
  return out;
}

// Attention restricted to the key/value rows named by `idx`.
inline Matrix sparse_attention(const Matrix& q, const Matrix& k, const Matrix& v, const SparseIndexSet& idx,
                               Matrix* weights = nullptr) {
  detail::require(!idx.indices.empty(), "sparse attention needs a non-empty index set");
  detail::require(k.rows() == v.rows() && k.cols() == v.cols(), "attention operand shapes disagree");
  Matrix ks(idx.size(), k.cols());
  Matrix vs(idx.size(), v.cols());
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const std::size_t j = idx.indices[n];
    detail::require(j >= 1 && j <= k.rows(), "sparse index outside the key range");
    for (std::size_t c = 0; c < k.cols(); ++c) {
      ks(n, c) = k(j - 1, c);
      vs(n, c) = v(j - 1, c);
    }
  }
  return dense_attention(q, ks, vs, weights);
}

// Per-layer on/off compression decision.
class CompressionPattern {
 public:
  CompressionPattern() = default;
  explicit CompressionPattern(std::vector<bool> bits) : bits_(std::move(bits)) {
    detail::require(!bits_.empty(), "compression pattern needs at least one layer");
  }

  static CompressionPattern none(std::size_t layers) { return CompressionPattern(std::vector<bool>(layers, false)); }
  static CompressionPattern all(std::size_t layers) { return CompressionPattern(std::vector<bool>(layers, true)); }

  // "1" marks a compressed layer; character i is layer i.
  static CompressionPattern parse(const std::string& text) {
    std::vector<bool> bits;
    for (char ch : text) {
      if (ch != '0' && ch != '1') throw InvalidArgument("compression pattern must be a string of 0/1: " + text);
      bits.push_back(ch == '1');
    }
    return CompressionPattern(std::move(bits));
  }

  std::string to_string() const {
    std::string s;
    for (bool b : bits_) s.push_back(b ? '1' : '0');
    return s;
  }

  std::size_t layers() const { return bits_.size(); }
  bool compressed(std::size_t l) const { return bits_[l]; }
  void set(std::size_t l, bool on) { bits_[l] = on; }
  const std::vector<bool>& bits() const { return bits_; }

  std::size_t compressed_count() const {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), true));
  }

  // Fraction of layers using the compressed cache.
  double compressed_fraction() const {
    return static_cast<double>(compressed_count()) / static_cast<double>(bits_.size());
  }

  bool operator==(const CompressionPattern&) const = default;
  bool operator<(const CompressionPattern& o) const { return bits_ < o.bits_; }

 private:
  std::vector<bool> bits_;
};

// Additive per-layer cost: full-cache layers cost c_full, compressed ones c_cmp.
struct LatencyModel {
  std::vector<double> c_full;
  std::vector<double> c_cmp;

  static LatencyModel uniform(std::size_t layers, double full, double cmp) {
    LatencyModel m{std::vector<double>(layers, full), std::vector<double>(layers, cmp)};
    m.validate();
    return m;
  }

  std::size_t layers() const { return c_full.size(); }

  void validate() const {
    if (c_full.empty() || c_full.size() != c_cmp.size())
      throw InvalidConfig("latency model needs matching non-empty c_full and c_cmp");
    for (std::size_t l = 0; l < c_full.size(); ++l) {
      if (!(c_cmp[l] >= 0.0)) throw InvalidConfig("latency model costs must be non-negative");
      if (!(c_cmp[l] < c_full[l]))
        throw InvalidConfig("compressed cost must be below full cost at layer " + std::to_string(l));
    }
  }

  double lower_bound() const {
    double t = 0.0;
    for (double c : c_cmp) t += c;
    return t;
  }

  double upper_bound() const {
    double t = 0.0;
    for (double c : c_full) t += c;
    return t;
  }
};

inline double pattern_latency(const CompressionPattern& p, const LatencyModel& model) {
  model.validate();
  detail::require(p.layers() == model.layers(), "pattern and latency model disagree on layer count");
  double t = 0.0;
  for (std::size_t l = 0; l < p.layers(); ++l) t += p.compressed(l) ? model.c_cmp[l] : model.c_full[l];
  return t;
}

// Accuracy of a pattern on some held-out evaluation; must be deterministic.
using FitnessOracle = std::function<double(const CompressionPattern&)>;

inline FitnessOracle constant_oracle(double accuracy) {
  return [accuracy](const CompressionPattern&) { return accuracy; };
}

// 1.0 when only layers in `allowed` are compressed; each forbidden compressed
// layer costs 1/L.
inline FitnessOracle allowed_subset_oracle(std::vector<bool> allowed) {
  detail::require(!allowed.empty(), "allowed-layer mask must be non-empty");
  return [allowed = std::move(allowed)](const CompressionPattern& p) {
    detail::require(p.layers() == allowed.size(), "pattern length does not match the oracle");
    std::size_t bad = 0;
    for (std::size_t l = 0; l < p.layers(); ++l) bad += p.compressed(l) && !allowed[l];
    return 1.0 - static_cast<double>(bad) / static_cast<double>(p.layers());
  };
}

// Accuracy drops by a fixed per-layer amount for every compressed layer.
inline FitnessOracle sensitivity_oracle(std::vector<double> drop, double base = 1.0) {
  return [drop = std::move(drop), base](const CompressionPattern& p) {
    detail::require(p.layers() == drop.size(), "pattern length does not match the oracle");
    double acc = base;
    for (std::size_t l = 0; l < p.layers(); ++l)
      if (p.compressed(l)) acc -= drop[l];
    return std::clamp(acc, 0.0, 1.0);
  };
}

struct GAConfig {
  std::size_t population = 32;
  std::size_t generations = 200;
  double crossover_rate = 0.9;
  std::optional<double> mutation_rate;  // per bit; defaults to 1/L
  std::size_t elitism = 2;
  double tau = 0.9;
  std::uint64_t seed = 1;

  void validate() const {
    if (population < 2) throw InvalidConfig("ga.population must be >= 2");
    if (elitism < 1 || elitism >= population) throw InvalidConfig("ga.elitism must satisfy 1 <= elitism < population");
    if (!(crossover_rate >= 0.0 && crossover_rate <= 1.0)) throw InvalidConfig("ga.crossover_rate must lie in [0,1]");
    if (mutation_rate && !(*mutation_rate >= 0.0 && *mutation_rate <= 1.0))
      throw InvalidConfig("ga.mutation_rate must lie in [0,1]");
  }
};

struct ScoredPattern {
  CompressionPattern pattern;
  double accuracy = 0.0;
  double latency = 0.0;
  bool feasible = false;
};

// Feasible beats infeasible; feasible ranks by latency, infeasible by
// accuracy; ties fall back to the bit string for a total order.
inline bool fitter(const ScoredPattern& a, const ScoredPattern& b) {
  if (a.feasible != b.feasible) return a.feasible;
  if (a.feasible) {
    if (a.latency != b.latency) return a.latency < b.latency;
    if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
  } else {
    if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
    if (a.latency != b.latency) return a.latency < b.latency;
  }
  return a.pattern < b.pattern;
}

struct GACurvePoint {
  std::size_t generation = 0;
  double best_accuracy = 0.0;
  double best_latency = 0.0;
  std::size_t feasible_count = 0;
};

struct GAResult {
  std::optional<ScoredPattern> best;  // empty when no feasible pattern was seen
  ScoredPattern best_any;             // fittest pattern seen, feasible or not
  std::vector<GACurvePoint> curve;
  std::size_t generations_run = 0;
  std::size_t evaluations = 0;  // distinct oracle calls
  bool early_stopped = false;

  bool feasible() const { return best.has_value(); }
};

inline std::string ga_curve_csv(const GAResult& r) {
  std::string out = "generation,best_acc,best_latency,feasible_count\n";
  char buf[128];
  for (const auto& c : r.curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%zu\n", c.generation, c.best_accuracy, c.best_latency,
                  c.feasible_count);
    out += buf;
  }
  return out;
}

namespace detail {

// Independent stream per (seed, generation, individual), so results do not
// depend on evaluation order.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t generation, std::uint64_t individual) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(generation), static_cast<std::uint32_t>(individual)};
  return std::mt19937_64(seq);
}

}  // namespace detail

inline GAResult ga_search(const FitnessOracle& oracle, const LatencyModel& lat, const GAConfig& cfg,
                          std::size_t layers) {
  cfg.validate();
  lat.validate();
  detail::require(layers >= 1 && layers == lat.layers(), "layer count does not match the latency model");
  detail::require(static_cast<bool>(oracle), "fitness oracle is empty");
  const double mut = cfg.mutation_rate.value_or(1.0 / static_cast<double>(layers));
  const double lower = lat.lower_bound();

  GAResult result;
  std::map<std::vector<bool>, double> memo;
  auto score = [&](const CompressionPattern& p) {
    auto it = memo.find(p.bits());
    if (it == memo.end()) {
      it = memo.emplace(p.bits(), oracle(p)).first;
      ++result.evaluations;
    }
    ScoredPattern s{p, it->second, pattern_latency(p, lat), false};
    s.feasible = s.accuracy >= cfg.tau;
    return s;
  };

  std::vector<ScoredPattern> pop;
  pop.reserve(cfg.population);
  for (std::size_t i = 0; i < cfg.population; ++i) {
    auto rng = detail::stream_rng(cfg.seed, 0, i);
    std::vector<bool> bits(layers);
    for (std::size_t l = 0; l < layers; ++l) bits[l] = (rng() & 1u) != 0;
    pop.push_back(score(CompressionPattern(std::move(bits))));
  }

  bool have_any = false;
  for (std::size_t gen = 0;; ++gen) {
    std::sort(pop.begin(), pop.end(), fitter);
    if (!have_any || fitter(pop.front(), result.best_any)) result.best_any = pop.front();
    have_any = true;
    if (result.best_any.feasible) result.best = result.best_any;
    std::size_t feasible = 0;
    for (const auto& s : pop) feasible += s.feasible;
    result.curve.push_back({gen, result.best_any.accuracy, result.best_any.latency, feasible});
    result.generations_run = gen;
    if (result.best && result.best->latency <= lower) {
      result.early_stopped = true;
      break;
    }
    if (gen >= cfg.generations) break;

    std::vector<ScoredPattern> next(pop.begin(), pop.begin() + static_cast<std::ptrdiff_t>(cfg.elitism));
    for (std::size_t i = cfg.elitism; i < cfg.population; ++i) {
      auto rng = detail::stream_rng(cfg.seed, gen + 1, i);
      std::uniform_int_distribution<std::size_t> pick(0, pop.size() - 1);
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      auto tournament = [&]() -> const ScoredPattern& {
        const auto& a = pop[pick(rng)];
        const auto& b = pop[pick(rng)];
        return fitter(b, a) ? b : a;
      };
      const auto& pa = tournament();
      const auto& pb = tournament();
      std::vector<bool> child = pa.pattern.bits();
      if (coin(rng) < cfg.crossover_rate)
        for (std::size_t l = 0; l < layers; ++l)
          if (coin(rng) < 0.5) child[l] = pb.pattern.compressed(l);
      for (std::size_t l = 0; l < layers; ++l)
        if (coin(rng) < mut) child[l] = !child[l];
      next.push_back(score(CompressionPattern(std::move(child))));
    }
    pop = std::move(next);
  }
  return result;
}

// Scans all 2^L patterns; the reference answer for small L.
inline std::optional<ScoredPattern> exhaustive_pattern_search(const FitnessOracle& oracle, const LatencyModel& lat,
                                                              double tau, std::size_t layers) {
  lat.validate();
  detail::require(layers >= 1 && layers == lat.layers(), "layer count does not match the latency model");
  detail::require(layers <= 24, "exhaustive pattern search is limited to 24 layers");
  std::optional<ScoredPattern> best;
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << layers); ++mask) {
    std::vector<bool> bits(layers);
    for (std::size_t l = 0; l < layers; ++l) bits[l] = ((mask >> l) & 1u) != 0;
    CompressionPattern p(std::move(bits));
    ScoredPattern s{p, oracle(p), pattern_latency(p, lat), false};
    s.feasible = s.accuracy >= tau;
    if (s.feasible && (!best || fitter(s, *best))) best = s;
  }
  return best;
}

}  // namespace pdsim
