#pragma once

// Generators and independent oracles shared by the unit and acceptance tests.
// Nothing here calls the library's gradient code.

#include "podyn/objectives.hpp"
#include "podyn/policy.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace support {

using podyn::ParamVector;
using podyn::PolicyKind;
using podyn::PolicySpec;
using podyn::PreferencePair;
using podyn::Rollout;
using podyn::TokenSequence;

using Rng = std::mt19937_64;

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline double normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline PolicySpec random_spec(Rng& rng, PolicyKind kind) {
  PolicySpec s;
  s.kind = kind;
  s.vocab_size = uniform_int(rng, 3, 6);
  s.context_len = uniform_int(rng, 1, 3);
  s.embed_dim = uniform_int(rng, 2, 4);
  s.seed = rng();
  return s;
}

inline ParamVector random_params(const PolicySpec& spec, Rng& rng, double scale = 0.7) {
  ParamVector p = podyn::zero_params(spec);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.values[i] = scale * normal(rng);
  return p;
}

inline TokenSequence random_seq(Rng& rng, int vocab, int len) {
  TokenSequence s(static_cast<std::size_t>(len));
  for (auto& t : s) t = uniform_int(rng, 0, vocab - 1);
  return s;
}

inline TokenSequence random_prompt(Rng& rng, const PolicySpec& spec) {
  return random_seq(rng, spec.vocab_size, uniform_int(rng, 0, spec.context_len));
}

inline TokenSequence random_response(Rng& rng, const PolicySpec& spec) {
  return random_seq(rng, spec.vocab_size, uniform_int(rng, 1, 3));
}

inline std::vector<PreferencePair> random_pairs(Rng& rng, const PolicySpec& spec, int n) {
  std::vector<PreferencePair> out;
  while (static_cast<int>(out.size()) < n) {
    PreferencePair p{random_prompt(rng, spec), random_response(rng, spec), random_response(rng, spec)};
    if (p.y_plus != p.y_minus) out.push_back(std::move(p));
  }
  return out;
}

/// Rollouts sampled from `old`, with a random terminal reward and whitened advantages.
inline std::vector<Rollout> random_rollouts(Rng& rng, const PolicySpec& spec, const ParamVector& old, int n) {
  std::vector<Rollout> out(static_cast<std::size_t>(n));
  podyn::SamplerParams sp{1.0, 1.0, 3};
  for (auto& r : out) {
    r.x = random_prompt(rng, spec);
    auto s = podyn::sample_response(old, spec, r.x, sp, rng());
    r.y = s.tokens;
    r.old_logps = s.log_probs;
    r.rewards.assign(r.y.size(), 0.0);
    r.rewards.back() = normal(rng);
  }
  podyn::advantage_estimate(out, 1.0, true);
  return out;
}

/// Central differences of a scalar function of the parameter values.
inline Eigen::VectorXd fd_gradient(const std::function<double(const ParamVector&)>& f, const ParamVector& p,
                                   double h = 1e-5) {
  Eigen::VectorXd g(p.size());
  ParamVector q = p;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double v = p.values[i];
    q.values[i] = v + h;
    const double fp = f(q);
    q.values[i] = v - h;
    const double fm = f(q);
    q.values[i] = v;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Elementwise relative error, with a 1e-5 floor on the denominator so
/// entries that are zero analytically compare on an absolute scale.
inline double max_rel_err(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double den = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-5});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / den);
  }
  return worst;
}

inline double rel_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double den = std::max(b.norm(), 1e-300);
  return (a - b).norm() / den;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Sequence log-probability from an explicitly materialized next-token table:
/// every context state's full softmax is written out and y is scored by lookup.
inline double dense_log_prob(const ParamVector& params, const PolicySpec& spec, const TokenSequence& x,
                             const TokenSequence& y) {
  const int V = spec.vocab_size;
  double total = 0.0;
  TokenSequence ctx = x;
  for (int tok : y) {
    // Window of the last context_len tokens, padded on the left with id V.
    std::vector<int> w(static_cast<std::size_t>(spec.context_len), V);
    for (int j = 0; j < spec.context_len && j < static_cast<int>(ctx.size()); ++j) {
      w[static_cast<std::size_t>(j)] = ctx[ctx.size() - 1 - static_cast<std::size_t>(j)];
    }
    Eigen::VectorXd logits(V);
    if (spec.kind == PolicyKind::Tabular) {
      long state = 0, mul = 1;
      for (int j = 0; j < spec.context_len; ++j) {
        state += w[static_cast<std::size_t>(j)] * mul;
        mul *= V + 1;
      }
      logits = params.values.segment(state * V, V);
    } else {
      const int d = spec.embed_dim;
      const auto E = params.segment("embed");
      const auto M = params.segment("mix");
      const auto H = params.segment("head");
      Eigen::VectorXd h = Eigen::VectorXd::Zero(d);
      for (int j = 0; j < spec.context_len; ++j) {
        const int tokj = w[static_cast<std::size_t>(j)];
        for (int a = 0; a < d; ++a) {
          for (int b = 0; b < d; ++b) h[a] += M[j * d * d + a * d + b] * E[tokj * d + b];
        }
      }
      for (int v = 0; v < V; ++v) {
        double s = H[V * d + v];
        for (int a = 0; a < d; ++a) s += H[v * d + a] * h[a];
        logits[v] = s;
      }
    }
    double z = 0.0;
    for (int v = 0; v < V; ++v) z += std::exp(logits[v]);
    total += logits[tok] - std::log(z);
    ctx.push_back(tok);
  }
  return total;
}

}  // namespace support
