#pragma once

#include "podyn/params.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace podyn {

using Token = int;
using TokenSequence = std::vector<Token>;

/// End-of-sequence token id.
inline constexpr Token kEos = 0;

enum class PolicyKind { Tabular, LinearSoftmax };

/// Toy autoregressive policy. The next-token distribution conditions on the
/// last `context_len` tokens of (x, y_<t), left-padded with a pad symbol.
///
/// Tabular: one logit row per context window, (V+1)^context_len rows.
/// LinearSoftmax: h = sum_j W_j E[w_j], logits = U h + b, with groups
/// "embed" (E), "mix" (W_j) and "head" (U, b).
struct PolicySpec {
  PolicyKind kind = PolicyKind::Tabular;
  int vocab_size = 8;
  int context_len = 2;
  int embed_dim = 8;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const PolicySpec&) const = default;
};

const char* to_string(PolicyKind kind);
PolicyKind policy_kind_from_string(const std::string& s);

Layout make_layout(const PolicySpec& spec);

/// All-zero parameters (the uniform policy for the tabular kind).
ParamVector zero_params(const PolicySpec& spec);

/// Gaussian initialization with standard deviation `scale`, seeded by spec.seed.
ParamVector init_params(const PolicySpec& spec, double scale = 0.5);

// Numerically stable softmax kernels over any Eigen vector expression.

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& logits) {
  const auto m = logits.maxCoeff();
  return m + std::log((logits.array() - m).exp().sum());
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_softmax(
    const Eigen::MatrixBase<Derived>& logits) {
  return (logits.array() - log_sum_exp(logits)).matrix();
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(
    const Eigen::MatrixBase<Derived>& logits) {
  return log_softmax(logits).array().exp().matrix();
}

/// Next-token logits after `context` (prompt followed by the response so far).
Eigen::VectorXd next_token_logits(const ParamVector& params, const PolicySpec& spec,
                                  std::span<const Token> context);

/// Next-token distribution; sums to 1.
Eigen::VectorXd next_token_probs(const ParamVector& params, const PolicySpec& spec,
                                 std::span<const Token> context);

/// log pi(y_t | x, y_<t) for every t.
std::vector<double> token_log_probs(const ParamVector& params, const PolicySpec& spec,
                                    const TokenSequence& x, const TokenSequence& y);

/// Sequence log-likelihood sum_t log pi(y_t | x, y_<t). Always <= 0.
/// Throws std::domain_error on out-of-vocab tokens, empty y, or a prompt
/// longer than the context window.
double log_prob(const ParamVector& params, const PolicySpec& spec, const TokenSequence& x,
                const TokenSequence& y);

/// Exact reverse-mode gradient of log_prob.
GradVector grad_log_prob(const ParamVector& params, const PolicySpec& spec,
                         const TokenSequence& x, const TokenSequence& y);

/// grad += sum_t weights[t] * d log pi(y_t | x, y_<t) / d params.
/// This is the single backward pass every objective reduces to.
void accumulate_grad_log_prob(const ParamVector& params, const PolicySpec& spec,
                              const TokenSequence& x, const TokenSequence& y,
                              std::span<const double> weights, GradVector& grad);

/// Argmax decoding; ties go to the lowest token id. Stops after emitting kEos
/// or after max_len tokens.
TokenSequence greedy_decode(const ParamVector& params, const PolicySpec& spec,
                            const TokenSequence& x, int max_len);

struct SamplerParams {
  double temperature = 1.0;
  double top_p = 0.9;
  int max_len = 4;
};

struct SampledResponse {
  TokenSequence tokens;
  /// Untempered policy log-probs of each sampled token.
  std::vector<double> log_probs;
};

/// Temperature + nucleus sampling, reproducible from `seed`. Temperatures
/// below 1e-6 route to greedy_decode.
SampledResponse sample_response(const ParamVector& params, const PolicySpec& spec,
                                const TokenSequence& x, const SamplerParams& sampler,
                                std::uint64_t seed);

TokenSequence sample(const ParamVector& params, const PolicySpec& spec, const TokenSequence& x,
                     const SamplerParams& sampler, std::uint64_t seed);

/// Mixes a base seed with stream indices into an independent sub-seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);

}  // namespace podyn
