// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The pdsim Authors.
//
// Synthetic long-tail request traces: log-normal prompt/output lengths under
// a joint cap, a shared-prefix pool, and Zipf-skewed expert routing.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "pdsim/core.hpp"
#include "pdsim/errors.hpp"
#include "pdsim/proxy.hpp"

namespace pdsim {

struct WorkloadSpec {
  double mean_in = 3500;
  double mean_out = 1000;
  double sigma_in = 0.8;   // log-normal shape of prompt lengths
  double sigma_out = 0.8;  // log-normal shape of output lengths
  std::size_t cap = 16384;  // in + out must stay strictly below
  double shared_fraction = 0.3;
  std::size_t prefix_pool = 200;
  std::size_t prefix_len = 2000;
  double expert_skew = 0.5;    // Zipf exponent over expert popularity ranks
  double shift_period = 0.0;   // seconds between hot-set rotations; 0 disables
  std::size_t shift_step = 17;  // rank rotation applied at each shift
  std::uint64_t seed = 42;

  void validate() const {
    if (!(mean_in >= 1 && mean_out >= 1)) throw InvalidSpec("workload means must be >= 1 token");
    if (!(sigma_in >= 0 && sigma_out >= 0)) throw InvalidSpec("workload sigmas must be >= 0");
    if (!(shared_fraction >= 0 && shared_fraction <= 1)) throw InvalidSpec("workload.shared_fraction must lie in [0,1]");
    if (shared_fraction > 0 && (prefix_pool == 0 || prefix_len == 0))
      throw InvalidSpec("shared prefixes need prefix_pool >= 1 and prefix_len >= 1");
    if (!(expert_skew >= 0)) throw InvalidSpec("workload.expert_skew must be >= 0");
    if (!(shift_period >= 0)) throw InvalidSpec("workload.shift_period must be >= 0");
    if (cap < 3) throw InvalidSpec("workload.cap must be >= 3");
    if (mean_in + mean_out >= static_cast<double>(cap))
      throw InvalidSpec("workload means cannot be met under the length cap");
  }
};

// Compact request description; token ids are materialised on demand.
struct RequestSpec {
  RequestId id = 0;
  std::size_t in_len = 0;
  std::size_t out_len = 0;
  std::int64_t prefix_id = -1;  // -1: no shared prefix
  std::size_t prefix_len = 0;   // shared leading tokens, <= in_len
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Token token_of(std::uint64_t stream, std::uint64_t position) {
  return static_cast<Token>(splitmix64(stream * 0x100000001b3ULL + position) & 0x3fffffff);
}

}  // namespace detail

// Shared prefixes come from one token stream per pool entry; the remainder
// from a per-request stream.
inline std::vector<Token> materialize_tokens(const RequestSpec& r, std::uint64_t seed) {
  std::vector<Token> out(r.in_len);
  const std::uint64_t prefix_stream = detail::splitmix64(seed ^ 0xa5a5a5a5ULL) + static_cast<std::uint64_t>(r.prefix_id);
  const std::uint64_t own_stream = detail::splitmix64(seed + 0x5bd1e995ULL * (r.id + 1)) | 1ULL << 63;
  for (std::size_t i = 0; i < r.in_len; ++i)
    out[i] = i < r.prefix_len ? detail::token_of(prefix_stream, i) : detail::token_of(own_stream, i);
  return out;
}

// Multiplicative scales applied to the log-normal medians so that the capped
// distribution keeps the target means; computed by quadrature.
struct LengthModel {
  double mu_in = 0, mu_out = 0;

  static LengthModel fit(const WorkloadSpec& s) {
    LengthModel m;
    m.mu_in = std::log(s.mean_in) - s.sigma_in * s.sigma_in / 2;
    m.mu_out = std::log(s.mean_out) - s.sigma_out * s.sigma_out / 2;
    if (s.sigma_in == 0 && s.sigma_out == 0) return m;
    const int n = 160;
    std::vector<double> z(n), w(n);
    double wsum = 0;
    for (int i = 0; i < n; ++i) {
      z[i] = -6.0 + 12.0 * (i + 0.5) / n;
      w[i] = std::exp(-z[i] * z[i] / 2);
      wsum += w[i];
    }
    for (auto& x : w) x /= wsum;
    const double cap = static_cast<double>(s.cap);
    for (int iter = 0; iter < 60; ++iter) {
      double mass = 0, e_in = 0, e_out = 0;
      for (int i = 0; i < n; ++i) {
        const double a = std::max(1.0, std::round(std::exp(m.mu_in + s.sigma_in * z[i])));
        for (int j = 0; j < n; ++j) {
          const double b = std::max(1.0, std::round(std::exp(m.mu_out + s.sigma_out * z[j])));
          if (a + b >= cap) continue;
          const double p = (s.sigma_in == 0 ? (i == 0 ? 1.0 : 0.0) : w[i]) * (s.sigma_out == 0 ? (j == 0 ? 1.0 : 0.0) : w[j]);
          mass += p;
          e_in += p * a;
          e_out += p * b;
        }
      }
      if (mass < 1e-3) throw InvalidSpec("length cap rejects nearly every sample");
      e_in /= mass;
      e_out /= mass;
      m.mu_in += std::log(s.mean_in / e_in);
      m.mu_out += std::log(s.mean_out / e_out);
      if (std::abs(e_in / s.mean_in - 1) < 1e-4 && std::abs(e_out / s.mean_out - 1) < 1e-4) break;
    }
    return m;
  }
};

// Deterministic stream of request specs.
class WorkloadGenerator {
 public:
  explicit WorkloadGenerator(const WorkloadSpec& spec) : spec_((spec.validate(), spec)), model_(LengthModel::fit(spec)),
                                                         rng_(spec.seed) {}

  const WorkloadSpec& spec() const { return spec_; }

  RequestSpec next() {
    RequestSpec r;
    r.id = next_id_++;
    std::normal_distribution<double> z(0.0, 1.0);
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw InvalidSpec("length cap cannot be satisfied");
      const double a = std::max(1.0, std::round(std::exp(model_.mu_in + spec_.sigma_in * z(rng_))));
      const double b = std::max(1.0, std::round(std::exp(model_.mu_out + spec_.sigma_out * z(rng_))));
      if (a + b < static_cast<double>(spec_.cap)) {
        r.in_len = static_cast<std::size_t>(a);
        r.out_len = static_cast<std::size_t>(b);
        break;
      }
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    if (spec_.shared_fraction > 0 && u(rng_) < spec_.shared_fraction) {
      r.prefix_id = static_cast<std::int64_t>(rng_() % spec_.prefix_pool);
      r.prefix_len = std::min(spec_.prefix_len, r.in_len);
    }
    return r;
  }

 private:
  WorkloadSpec spec_;
  LengthModel model_;
  std::mt19937_64 rng_;
  RequestId next_id_ = 0;
};

inline std::vector<RequestSpec> generate_workload(const WorkloadSpec& spec, std::size_t n) {
  detail::require(n >= 1, "workload needs at least one request");
  WorkloadGenerator gen(spec);
  std::vector<RequestSpec> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen.next());
  return out;
}

// Per-layer expert popularity: Zipf over ranks, with a seeded rank-to-expert
// permutation per layer that rotates at every hot-set shift.
class ExpertPopularity {
 public:
  ExpertPopularity(std::size_t layers, std::size_t experts, double skew, std::uint64_t seed,
                   std::size_t shift_step = 0)
      : layers_(layers), experts_(experts), shift_step_(shift_step), rank_share_(experts), perm_(layers) {
    detail::require(layers >= 1 && experts >= 1, "expert popularity needs layers and experts");
    double norm = 0;
    for (std::size_t k = 0; k < experts; ++k) norm += rank_share_[k] = std::pow(static_cast<double>(k + 1), -skew);
    for (auto& p : rank_share_) p /= norm;
    std::mt19937_64 rng(detail::splitmix64(seed ^ 0xe0e0e0e0ULL));
    for (auto& pm : perm_) {
      pm.resize(experts);
      std::iota(pm.begin(), pm.end(), 0);
      std::shuffle(pm.begin(), pm.end(), rng);
    }
  }

  std::size_t layers() const { return layers_; }
  std::size_t experts() const { return experts_; }

  // Routing probability of expert e in layer l during hot-set epoch `epoch`.
  std::vector<double> shares(std::size_t l, std::size_t epoch) const {
    std::vector<double> out(experts_, 0.0);
    const std::size_t offset = (epoch * shift_step_) % experts_;
    for (std::size_t k = 0; k < experts_; ++k) out[perm_[l][(k + offset) % experts_]] = rank_share_[k];
    return out;
  }

  // Expected routed-token counts for `tokens` tokens with top-k routing.
  LoadMatrix expected(double tokens, std::size_t top_k, std::size_t epoch) const {
    LoadMatrix d(layers_, experts_);
    for (std::size_t l = 0; l < layers_; ++l) {
      const auto s = shares(l, epoch);
      for (std::size_t e = 0; e < experts_; ++e) d.set(l, e, tokens * static_cast<double>(top_k) * s[e]);
    }
    return d;
  }

 private:
  std::size_t layers_, experts_, shift_step_;
  std::vector<double> rank_share_;
  std::vector<std::vector<std::size_t>> perm_;
};

// Multinomial draw of tokens*top_k routed slots over the given shares, via
// sequential conditional binomials.
inline std::vector<double> sample_expert_loads(std::mt19937_64& rng, const std::vector<double>& shares,
                                               std::uint64_t assignments) {
  std::vector<double> out(shares.size(), 0.0);
  double rest = 1.0;
  std::uint64_t left = assignments;
  for (std::size_t e = 0; e < shares.size() && left > 0; ++e) {
    if (e + 1 == shares.size() || rest <= 0) {
      out[e] = static_cast<double>(left);
      break;
    }
    const double p = std::clamp(shares[e] / rest, 0.0, 1.0);
    std::binomial_distribution<std::uint64_t> bin(left, p);
    const auto k = bin(rng);
    out[e] = static_cast<double>(k);
    left -= k;
    rest -= shares[e];
  }
  return out;
}

}  // namespace pdsim
