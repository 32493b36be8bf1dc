#pragma once

#include "podyn/checkpoint.hpp"
#include "podyn/objectives.hpp"
#include "podyn/optimizer.hpp"
#include "podyn/synth.hpp"
#include "podyn/variants.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace podyn {

enum class ObjectiveKind { Dpo, Cdpo, Ppo, Cppo, Hppo };

const char* to_string(ObjectiveKind kind);
/// Throws ConfigError("objective.id", ...) on an unknown id.
ObjectiveKind objective_kind_from_string(const std::string& s);
bool is_online(ObjectiveKind kind);

struct TrainConfig {
  PolicySpec policy;
  double init_scale = 0.5;

  ObjectiveKind objective = ObjectiveKind::Dpo;
  double beta = kDefaultBeta;
  double epsilon = kDefaultClipEpsilon;
  /// cdpo: CdpoRamp; hppo: HppoSine; cppo: Constant carrying lambda.
  ScheduleSpec schedule;
  CppoTarget cppo_target = CppoTarget::Top;

  OptimizerConfig optimizer;
  LrSchedule lr_schedule = LrSchedule::LinearWarmupDecay;
  double warmup_ratio = 0.05;
  /// 0 disables clipping.
  double clip_norm = 1.0;

  /// Optimizer steps. For offline runs 0 means `epochs` passes over the pairs.
  long steps = 0;
  int epochs = 2;
  int batch_size = 8;

  /// Plain NLL steps on y+ before preference training (offline only).
  long sft_steps = 0;
  double sft_lr = 0.05;

  /// Online: refresh theta_old every this many rollout iterations.
  long refresh_every = 1;
  /// Online: optimizer steps per rollout batch.
  int ppo_epochs = 1;
  int rollouts_per_step = 16;
  SamplerParams sampler;
  double gamma = 1.0;
  bool position_baseline = true;

  /// 0 writes only the initial and final checkpoints.
  long checkpoint_every = 0;
  /// Empty keeps everything in memory.
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  /// Record elapsed milliseconds; off by default so metrics stay byte-stable.
  bool wall_clock = false;
  std::string config_hash;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

struct StepMetrics {
  long step = 0;
  double loss = 0.0;
  double grad_norm_pre_clip = 0.0;
  double lr = 0.0;
  std::optional<double> lambda;
  double wall_ms = 0.0;
};

/// One JSON object per line, keys sorted.
std::string metrics_json(const StepMetrics& m);

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  /// Called for every checkpoint, including the initial one at step 0.
  std::function<void(const Checkpoint&)> on_checkpoint;
};

struct TrainResult {
  ParamVector params;
  ParamVector ref_params;
  OptimizerState optimizer;
  std::vector<StepMetrics> metrics;
  std::vector<Checkpoint> checkpoints;
  std::vector<std::filesystem::path> checkpoint_paths;
};

/// Total optimizer steps an offline run will take.
long offline_total_steps(const TrainConfig& config, std::size_t n_pairs);

/// DPO-family loss on one batch at optimizer step `step`.
LossResult offline_objective(const TrainConfig& config, const ParamVector& params,
                             const ParamVector& ref_params, std::span<const PreferencePair> batch,
                             long step);

/// PPO-family loss on one rollout batch at optimizer step `step`.
LossResult online_objective(const TrainConfig& config, const ParamVector& params,
                            std::span<const Rollout> rollouts, long step);

/// Logged lambda: nullopt for dpo, 1 for ppo, the schedule value otherwise.
std::optional<double> logged_lambda(const TrainConfig& config, long step);

/// Optional SFT warm start, then DPO or cDPO over `pairs`. The reference
/// policy is the warm-started one. Resuming from a checkpoint of the same run
/// reproduces the uninterrupted run exactly.
TrainResult train_offline(const TrainConfig& config, std::span<const PreferencePair> pairs,
                          const TrainHooks& hooks = {}, const Checkpoint* resume = nullptr);

/// PPO, cPPO or hPPO with rollouts sampled from theta_old on `prompts`.
TrainResult train_online(const TrainConfig& config, const SyntheticTask& task,
                         std::span<const TokenSequence> prompts, const TrainHooks& hooks = {},
                         const Checkpoint* resume = nullptr);

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, long step);

}  // namespace podyn
