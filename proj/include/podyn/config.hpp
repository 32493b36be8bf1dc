#pragma once

#include "podyn/trainer.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace podyn {

inline constexpr int kConfigSchemaVersion = 1;

struct TaskConfig {
  int vocab_size = 8;
  int prompt_len = 2;
  int resp_len = 3;
  int feature_dim = 8;
  int reward_levels = 0;
  int n_train_prompts = 64;
  int n_eval_prompts = 32;
  int n_pairs = 256;
  double overlap_fraction = 0.0;
};

struct ProbeConfig {
  std::string suite = "TOT,POS,NEG,TOP,MID,BOT";
  int sample_count = 500;
  /// 0 picks 4 for DPO and 6 for PPO.
  int batch_size = 0;
  /// Probe only checkpoints whose step is a multiple of this; 0 probes all.
  long every = 0;
  bool iqr = true;
  /// Also report G under the checkpoint's AdamW preconditioner.
  bool precondition = false;
};

/// Everything one experiment needs. vocab_size lives in the task section and
/// is copied into the policy; the sampler's max_len is the task's resp_len.
struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  TaskConfig task;
  TrainConfig train;
  ProbeConfig probe;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Parses and validates. Unknown keys and wrong types raise ConfigError with
/// the dotted field path.
ExperimentConfig config_from_json(const nlohmann::json& j);
/// Fully resolved form, defaults included, keys sorted.
nlohmann::json config_to_json(const ExperimentConfig& c);

/// Sets doc[a][b][c] for the dotted path "a.b.c", creating objects on the way.
void set_path(nlohmann::json& doc, const std::string& path, nlohmann::json value);

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON
/// when possible and taken as a plain string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});

/// SHA-256 of the canonical resolved config.
std::string config_hash(const ExperimentConfig& c);

/// output_dir, resolved against $PODYN_OUTPUT_ROOT when it is relative and
/// the variable is set.
std::filesystem::path output_root(const ExperimentConfig& c);

SyntheticTask make_task(const ExperimentConfig& c);

}  // namespace podyn
