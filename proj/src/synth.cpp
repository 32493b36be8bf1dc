#include "podyn/synth.hpp"

#include "podyn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace podyn {
namespace {

Eigen::MatrixXd random_features(std::mt19937_64& rng, int rows, int cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = normal(rng);
  }
  return m;
}

Eigen::VectorXd pooled_direction(const Eigen::MatrixXd& features, const TokenSequence& seq) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(features.cols());
  for (Token t : seq) v += features.row(t).transpose();
  const double n = v.norm();
  if (n > 0.0) v /= n;
  return v;
}

}  // namespace

SyntheticTask SyntheticTask::make(std::uint64_t seed, int vocab_size, int prompt_len,
                                  int resp_len, int feature_dim, int reward_levels) {
  if (vocab_size < 2) throw ConfigError("task.vocab_size", "must be >= 2");
  if (prompt_len < 1) throw ConfigError("task.prompt_len", "must be >= 1");
  if (resp_len < 1) throw ConfigError("task.resp_len", "must be >= 1");
  if (feature_dim < 1) throw ConfigError("task.feature_dim", "must be >= 1");
  if (reward_levels < 0) throw ConfigError("task.reward_levels", "must be >= 0");
  SyntheticTask t;
  t.seed = seed;
  t.vocab_size = vocab_size;
  t.prompt_len = prompt_len;
  t.resp_len = resp_len;
  t.feature_dim = feature_dim;
  t.reward_levels = reward_levels;
  std::mt19937_64 rng(derive_seed(seed, 0x7a5c));
  t.prompt_features = random_features(rng, vocab_size, feature_dim);
  t.response_features = random_features(rng, vocab_size, feature_dim);
  return t;
}

double SyntheticTask::hidden_reward(const TokenSequence& x, const TokenSequence& y) const {
  double r = pooled_direction(prompt_features, x).dot(pooled_direction(response_features, y));
  r = std::clamp(r, -1.0, 1.0);
  if (reward_levels > 0) r = std::round(r * reward_levels) / reward_levels;
  return r;
}

std::vector<TokenSequence> make_train_prompts(const SyntheticTask& task, std::size_t n,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 0x1001));
  std::uniform_int_distribution<int> tok(1, task.vocab_size - 1);
  std::vector<TokenSequence> out(n);
  for (auto& p : out) {
    p.resize(static_cast<std::size_t>(task.prompt_len));
    for (auto& t : p) t = tok(rng);
  }
  return out;
}

std::vector<TokenSequence> make_eval_prompts(const SyntheticTask& task, std::size_t n,
                                             std::span<const TokenSequence> train_prompts,
                                             double overlap_fraction, std::uint64_t seed) {
  if (!(overlap_fraction >= 0.0 && overlap_fraction <= 1.0)) {
    throw ConfigError("task.overlap_fraction", "must lie in [0, 1]");
  }
  if (overlap_fraction > 0.0 && train_prompts.empty()) {
    throw ConfigError("task.overlap_fraction", "overlap requested without training prompts");
  }
  std::mt19937_64 rng(derive_seed(seed, 0x2002));
  std::vector<double> tilt(static_cast<std::size_t>(task.vocab_size - 1));
  for (std::size_t k = 0; k < tilt.size(); ++k) tilt[k] = static_cast<double>(k + 1);
  std::discrete_distribution<int> held_out(tilt.begin(), tilt.end());
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<TokenSequence> out(n);
  for (auto& p : out) {
    if (overlap_fraction > 0.0 && coin(rng) < overlap_fraction) {
      std::uniform_int_distribution<std::size_t> pick(0, train_prompts.size() - 1);
      p = train_prompts[pick(rng)];
      continue;
    }
    p.resize(static_cast<std::size_t>(task.prompt_len));
    for (auto& t : p) t = held_out(rng) + 1;
  }
  return out;
}

std::vector<PreferencePair> gen_pairs(const SyntheticTask& task, const PolicySpec& spec,
                                      const ParamVector& behavior,
                                      std::span<const TokenSequence> prompts,
                                      const SamplerParams& sampler, std::uint64_t seed,
                                      int max_attempts) {
  if (prompts.empty()) throw std::invalid_argument("no prompts to generate pairs for");
  std::vector<PreferencePair> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& x = prompts[i];
    bool done = false;
    for (int attempt = 0; attempt < max_attempts && !done; ++attempt) {
      auto a = sample(behavior, spec, x, sampler, derive_seed(seed, i, 2 * attempt));
      auto b = sample(behavior, spec, x, sampler, derive_seed(seed, i, 2 * attempt + 1));
      if (a == b) continue;
      const double ra = task.hidden_reward(x, a);
      const double rb = task.hidden_reward(x, b);
      if (ra == rb) continue;
      if (ra > rb) {
        out.push_back({x, std::move(a), std::move(b)});
      } else {
        out.push_back({x, std::move(b), std::move(a)});
      }
      done = true;
    }
    if (!done) {
      throw GenerationError("prompt " + std::to_string(i) + ": no strictly ordered pair after " +
                            std::to_string(max_attempts) + " attempts");
    }
  }
  return out;
}

std::vector<Rollout> gen_rollouts(const ParamVector& params_old, const PolicySpec& spec,
                                  const SyntheticTask& task,
                                  std::span<const TokenSequence> prompts,
                                  const SamplerParams& sampler, std::uint64_t seed,
                                  double gamma, PositionBaseline* baseline) {
  if (prompts.empty()) throw std::invalid_argument("no prompts to roll out");
  std::vector<Rollout> out(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    auto s = sample_response(params_old, spec, prompts[i], sampler, derive_seed(seed, i));
    auto& r = out[i];
    r.x = prompts[i];
    r.y = std::move(s.tokens);
    r.old_logps = std::move(s.log_probs);
    r.rewards.assign(r.y.size(), 0.0);
    r.rewards.back() = task.hidden_reward(r.x, r.y);
  }
  advantage_estimate(out, gamma, /*whiten=*/true, baseline);
  return out;
}

FinalResponseSet build_final_responses(const ParamVector& params_po, const PolicySpec& spec,
                                       std::span<const TokenSequence> prompts_eval, int max_len,
                                       std::string provenance) {
  if (prompts_eval.empty()) throw std::invalid_argument("no evaluation prompts");
  FinalResponseSet d;
  d.provenance = std::move(provenance);
  d.items.reserve(prompts_eval.size());
  for (const auto& x : prompts_eval) d.items.emplace_back(x, greedy_decode(params_po, spec, x, max_len));
  return d;
}

double mean_greedy_reward(const SyntheticTask& task, const ParamVector& params,
                          const PolicySpec& spec, std::span<const TokenSequence> prompts,
                          int max_len) {
  if (prompts.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& x : prompts) sum += task.hidden_reward(x, greedy_decode(params, spec, x, max_len));
  return sum / static_cast<double>(prompts.size());
}

FlowState flow_step(const FlowState& state, FlowDirection direction, double step_size) {
  FlowState next = state;
  const Eigen::VectorXd delta = step_size * (state.target - state.probs);
  if (direction == FlowDirection::Positive) {
    next.probs += delta;
  } else {
    next.probs -= delta;
    next.probs = next.probs.cwiseMax(0.0);
  }
  next.probs /= next.probs.sum();
  return next;
}

Eigen::VectorXd reweighted_target(const Eigen::VectorXd& target, const Eigen::VectorXd& weights) {
  if (weights.size() != target.size()) throw std::invalid_argument("reweight size mismatch");
  Eigen::VectorXd q = weights.cwiseProduct(target);
  const double z = q.sum();
  if (!(z > 0.0)) throw std::domain_error("reweighted target has no mass");
  return q / z;
}

std::vector<double> flow_experiment(const FlowState& initial, FlowDirection direction,
                                    const std::optional<Eigen::VectorXd>& reweight, int steps,
                                    double step_size) {
  if (steps < 1) throw std::invalid_argument("steps must be >= 1");
  FlowState s = initial;
  if (reweight) s.target = reweighted_target(initial.target, *reweight);
  std::vector<double> distances;
  distances.reserve(static_cast<std::size_t>(steps) + 1);
  distances.push_back((s.probs - s.target).norm());
  for (int i = 0; i < steps; ++i) {
    s = flow_step(s, direction, step_size);
    distances.push_back((s.probs - s.target).norm());
  }
  return distances;
}

FlowState task_flow_state(const SyntheticTask& task, const TokenSequence& x,
                          double inv_temperature) {
  Eigen::VectorXd scores(task.vocab_size);
  for (int k = 0; k < task.vocab_size; ++k) scores[k] = inv_temperature * task.hidden_reward(x, {k});
  FlowState s;
  s.target = softmax(scores);
  s.probs = Eigen::VectorXd::Constant(task.vocab_size, 1.0 / task.vocab_size);
  return s;
}

}  // namespace podyn
