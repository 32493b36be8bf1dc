#pragma once

#include "podyn/objectives.hpp"
#include "podyn/probe.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace podyn {

/// Synthetic preference task with a hidden reward
/// R(x, y) = <normalize(sum_t P[x_t]), normalize(sum_t Q[y_t])> in [-1, 1],
/// P and Q being fixed random token features.
struct SyntheticTask {
  std::uint64_t seed = 0;
  int vocab_size = 8;
  int prompt_len = 2;
  int resp_len = 3;
  int feature_dim = 8;
  /// When > 0 the reward is rounded to this many steps per unit, producing ties.
  int reward_levels = 0;
  Eigen::MatrixXd prompt_features;
  Eigen::MatrixXd response_features;

  static SyntheticTask make(std::uint64_t seed, int vocab_size, int prompt_len, int resp_len,
                            int feature_dim = 8, int reward_levels = 0);

  double hidden_reward(const TokenSequence& x, const TokenSequence& y) const;
};

/// Training prompts: tokens uniform over [1, V).
std::vector<TokenSequence> make_train_prompts(const SyntheticTask& task, std::size_t n,
                                              std::uint64_t seed);

/// Evaluation prompts. Each prompt is, with probability overlap_fraction, a
/// copy of a random training prompt; otherwise it is drawn from a held-out
/// distribution tilted towards high token ids (p(k) proportional to k).
std::vector<TokenSequence> make_eval_prompts(const SyntheticTask& task, std::size_t n,
                                             std::span<const TokenSequence> train_prompts,
                                             double overlap_fraction, std::uint64_t seed);

/// Two distinct behavior-policy samples per prompt, labelled by the hidden
/// reward. Ties and duplicates are resampled up to `max_attempts` times,
/// after which GenerationError is thrown.
std::vector<PreferencePair> gen_pairs(const SyntheticTask& task, const PolicySpec& spec,
                                      const ParamVector& behavior,
                                      std::span<const TokenSequence> prompts,
                                      const SamplerParams& sampler, std::uint64_t seed,
                                      int max_attempts = 64);

/// Samples one response per prompt from the old policy, records old log-probs,
/// places the hidden reward on the last token and fills advantages.
std::vector<Rollout> gen_rollouts(const ParamVector& params_old, const PolicySpec& spec,
                                  const SyntheticTask& task,
                                  std::span<const TokenSequence> prompts,
                                  const SamplerParams& sampler, std::uint64_t seed,
                                  double gamma = 1.0, PositionBaseline* baseline = nullptr);

/// Greedy responses of `params_po` on the evaluation prompts.
FinalResponseSet build_final_responses(const ParamVector& params_po, const PolicySpec& spec,
                                       std::span<const TokenSequence> prompts_eval, int max_len,
                                       std::string provenance);

/// Mean hidden reward of greedy responses; the desk-scale performance metric.
double mean_greedy_reward(const SyntheticTask& task, const ParamVector& params,
                          const PolicySpec& spec, std::span<const TokenSequence> prompts,
                          int max_len);

// ----------------------------------------------------------- gradient flow

enum class FlowDirection { Positive, Negative };

/// Single-context tabular distribution and its target.
struct FlowState {
  Eigen::VectorXd probs;
  Eigen::VectorXd target;
};

/// Positive: probs += step (target - probs). Negative: probs -= step (target -
/// probs), then clamped to the simplex and renormalized.
FlowState flow_step(const FlowState& state, FlowDirection direction, double step_size);

/// q proportional to weight * p, normalized.
Eigen::VectorXd reweighted_target(const Eigen::VectorXd& target, const Eigen::VectorXd& weights);

/// Runs `steps` flow steps towards the (optionally reweighted) target and
/// returns ||probs - effective target|| before the first step and after each step.
std::vector<double> flow_experiment(const FlowState& initial, FlowDirection direction,
                                    const std::optional<Eigen::VectorXd>& reweight, int steps,
                                    double step_size);

/// softmax(inv_temperature * R(x, k)) over single-token responses k, with the
/// uniform distribution as the starting point.
FlowState task_flow_state(const SyntheticTask& task, const TokenSequence& x,
                          double inv_temperature = 4.0);

}  // namespace podyn
