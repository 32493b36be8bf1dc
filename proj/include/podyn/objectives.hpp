#pragma once

#include "podyn/params.hpp"
#include "podyn/policy.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace podyn {

inline constexpr double kDefaultBeta = 0.1;
inline constexpr double kDefaultClipEpsilon = 0.2;

/// Offline preference triple; y_plus is preferred over y_minus.
struct PreferencePair {
  TokenSequence x;
  TokenSequence y_plus;
  TokenSequence y_minus;

  bool operator==(const PreferencePair&) const = default;
};

/// One sampled response with per-token old-policy log-probs, rewards and
/// advantages. All per-token vectors have y.size() entries once populated.
struct Rollout {
  TokenSequence x;
  TokenSequence y;
  std::vector<double> old_logps;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> advantage_raw;

  bool operator==(const Rollout&) const = default;
};

/// DPO loss weight, strictly inside (0, beta).
struct ImplicitReward {
  double omega = 0.0;
};

/// Top / middle / bottom index sets by weight quantiles.
/// top: w >= q23, bot: w <= q13 (and not top), mid: q13 < w < q23.
struct TertilePartition {
  std::vector<std::size_t> top_idx;
  std::vector<std::size_t> mid_idx;
  std::vector<std::size_t> bot_idx;
  double q13 = 0.0;
  double q23 = 0.0;
};

struct LossResult {
  double value = 0.0;
  GradVector grad;
};

/// Positive/negative and top/middle/bottom pieces of an objective.
/// pos + neg and top + mid + bot both reconstruct the total.
struct ComponentLosses {
  LossResult pos;
  LossResult neg;
  LossResult top;
  LossResult mid;
  LossResult bot;
  TertilePartition partition;
};

// ---------------------------------------------------------------- quantiles

/// Throws PartitionError for fewer than three weights.
TertilePartition quantile_partition(std::span<const double> weights, double alpha_low = 1.0 / 3.0,
                                    double alpha_high = 2.0 / 3.0);

// ---------------------------------------------------------------------- DPO

/// Per-pair sequence log-likelihoods under the policy and the reference.
struct PairLogProbs {
  double policy_plus = 0.0;
  double policy_minus = 0.0;
  double ref_plus = 0.0;
  double ref_minus = 0.0;

  double policy_margin() const { return policy_plus - policy_minus; }
  double ref_margin() const { return ref_plus - ref_minus; }
};

/// Throws NumericError carrying the pair index on a non-finite log-prob.
std::vector<PairLogProbs> pair_log_probs(const PolicySpec& spec, const ParamVector& params,
                                         const ParamVector& ref_params,
                                         std::span<const PreferencePair> batch);

/// omega = beta * sigmoid(-beta * policy_margin + beta * ref_margin).
double implicit_reward_weight(double policy_margin, double ref_margin, double beta);

/// -log sigmoid(z), stable for large |z|.
double neg_log_sigmoid(double z);

/// -mean log sigmoid(beta * [(lp - ref)(y+) - (lp - ref)(y-)]).
LossResult dpo_loss(const PolicySpec& spec, const ParamVector& params,
                    const ParamVector& ref_params, std::span<const PreferencePair> batch,
                    double beta = kDefaultBeta);

ImplicitReward implicit_reward(const PolicySpec& spec, const ParamVector& params,
                               const ParamVector& ref_params, const PreferencePair& pair,
                               double beta = kDefaultBeta);

/// -mean[omega (lp(y+) - lp(y-))] with omega held constant. Same gradient as
/// dpo_loss. `omega_detached` must be true; false throws ContractError.
LossResult dpo_hat_loss(const PolicySpec& spec, const ParamVector& params,
                        const ParamVector& ref_params, std::span<const PreferencePair> batch,
                        double beta, bool omega_detached);

/// Needs at least three pairs for the omega tertiles.
ComponentLosses dpo_component_losses(const PolicySpec& spec, const ParamVector& params,
                                     const ParamVector& ref_params,
                                     std::span<const PreferencePair> batch,
                                     double beta = kDefaultBeta);

/// -mean[omega_i (plus_w[i] lp(y+) - minus_w[i] lp(y-))], omega detached.
LossResult dpo_weighted(const PolicySpec& spec, const ParamVector& params,
                        const ParamVector& ref_params, std::span<const PreferencePair> batch,
                        double beta, std::span<const double> plus_w,
                        std::span<const double> minus_w);

// ---------------------------------------------------------------------- PPO

/// min(ratio, 1+eps) when advantage_sign >= 0, else max(ratio, 1-eps).
double clip_op(double ratio, double advantage_sign, double epsilon);

/// Running mean of returns per response position, carried across batches.
class PositionBaseline {
 public:
  double value(std::size_t position) const;
  void update(std::size_t position, double ret);

  /// [means..., counts...] for checkpointing.
  std::vector<double> to_vector() const;
  static PositionBaseline from_vector(std::span<const double> v);

  bool operator==(const PositionBaseline&) const = default;

 private:
  std::vector<double> mean_;
  std::vector<double> count_;
};

/// advantage_raw_t = sum_{s>=t} gamma^{s-t} r_s - baseline(t); with `whiten`,
/// advantages are the raw values standardized over every token in the batch.
/// The baseline (when given) is read before and updated after this batch.
/// Whitening fewer than two tokens throws NumericError.
void advantage_estimate(std::span<Rollout> rollouts, double gamma, bool whiten,
                        PositionBaseline* baseline = nullptr);

/// Number of response tokens across the batch.
std::size_t token_count(std::span<const Rollout> rollouts);

/// All advantages flattened in rollout-major token order.
std::vector<double> flat_advantages(std::span<const Rollout> rollouts);

/// -mean over tokens of CLIP(ratio) * A. Gradient is zero on the clipped side.
LossResult ppo_loss(const PolicySpec& spec, const ParamVector& params,
                    std::span<const Rollout> rollouts, double epsilon = kDefaultClipEpsilon);

/// Like ppo_loss with each token's summand multiplied by token_weights[k]
/// (flattened order); the mean still divides by the total token count.
LossResult ppo_weighted(const PolicySpec& spec, const ParamVector& params,
                        std::span<const Rollout> rollouts, double epsilon,
                        std::span<const double> token_weights);

/// Sign split on A and tertile split on |A| over the batch's tokens.
ComponentLosses ppo_component_losses(const PolicySpec& spec, const ParamVector& params,
                                     std::span<const Rollout> rollouts,
                                     double epsilon = kDefaultClipEpsilon);

/// 0/1 indicator per flattened token for one tertile set.
std::vector<double> indicator(std::size_t n, std::span<const std::size_t> members);

}  // namespace podyn
