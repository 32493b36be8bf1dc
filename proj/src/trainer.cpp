#include "podyn/trainer.hpp"

#include "podyn/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace podyn {
namespace {

using nlohmann::json;

constexpr std::uint64_t kSaltEpoch = 0xE90C;
constexpr std::uint64_t kSaltSft = 0x5F7;
constexpr std::uint64_t kSaltPrompts = 0xA11;
constexpr std::uint64_t kSaltRollouts = 0xB22;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t salt,
                                     long epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, salt, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Batch `step` of a stream of reshuffled epochs.
std::vector<std::size_t> batch_at(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                  std::uint64_t salt, long step) {
  const auto per_epoch = static_cast<long>((n + batch_size - 1) / batch_size);
  const long epoch = step / per_epoch;
  const auto b = static_cast<std::size_t>(step % per_epoch);
  const auto order = epoch_order(n, seed, salt, epoch);
  const std::size_t lo = b * batch_size;
  const std::size_t hi = std::min(n, lo + batch_size);
  return {order.begin() + static_cast<std::ptrdiff_t>(lo),
          order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

template <typename T>
std::vector<T> gather(std::span<const T> items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

class MetricsSink {
 public:
  MetricsSink(const std::filesystem::path& out_dir, long resume_step) {
    if (out_dir.empty()) return;
    std::filesystem::create_directories(out_dir);
    path_ = out_dir / "metrics.jsonl";
    std::vector<std::string> kept;
    if (resume_step > 0 && std::filesystem::exists(path_)) {
      std::ifstream in(path_);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (json::parse(line).at("step").get<long>() < resume_step) kept.push_back(line);
      }
    }
    out_.open(path_, std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open " + path_.string());
    for (const auto& l : kept) out_ << l << '\n';
  }

  void write(const StepMetrics& m) {
    if (out_.is_open()) out_ << metrics_json(m) << '\n' << std::flush;
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

struct Emitter {
  const TrainConfig& config;
  const TrainHooks& hooks;
  TrainResult& result;

  void checkpoint(Checkpoint c) {
    c.config_hash = config.config_hash;
    c.rng_state = "derive_seed/" + std::to_string(config.seed);
    if (!config.out_dir.empty()) {
      const auto p = checkpoint_path(config.out_dir, c.step);
      save_checkpoint(c, p);
      result.checkpoint_paths.push_back(p);
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(c);
    result.checkpoints.push_back(std::move(c));
  }

  void step(const StepMetrics& m, MetricsSink& sink) {
    sink.write(m);
    if (hooks.on_step) hooks.on_step(m);
    result.metrics.push_back(m);
  }
};

bool checkpoint_due(const TrainConfig& c, long step_after, long total) {
  return step_after == total || (c.checkpoint_every > 0 && step_after % c.checkpoint_every == 0);
}

void check_finite(const LossResult& r, long step) {
  if (!std::isfinite(r.value)) throw TrainingAbort(step, "non-finite loss");
  if (!r.grad.all_finite()) throw TrainingAbort(step, "non-finite gradient");
}

/// Evaluates one step's loss; any non-finite value becomes a TrainingAbort.
template <typename F>
LossResult guard_step(long step, F&& loss) {
  LossResult r;
  try {
    r = loss();
  } catch (const NumericError& e) {
    throw TrainingAbort(step, e.what());
  }
  check_finite(r, step);
  return r;
}

/// Clips, steps the optimizer and returns the pre-clip norm.
double apply_update(const TrainConfig& c, OptimizerState& opt, ParamVector& params,
                    const GradVector& grad, double lr) {
  const double pre = norm(grad);
  if (c.clip_norm > 0.0) {
    optimizer_step(opt, params, clip_grad_norm(grad, c.clip_norm), lr);
  } else {
    optimizer_step(opt, params, grad, lr);
  }
  return pre;
}

double elapsed_ms(const TrainConfig& c, std::chrono::steady_clock::time_point t0) {
  if (!c.wall_clock) return 0.0;
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

void check_resume(const TrainConfig& c, const Checkpoint& r, long total) {
  if (!(r.spec == c.policy)) throw CheckpointError("resume checkpoint has a different policy");
  if (!(r.optimizer.config == c.optimizer)) {
    throw CheckpointError("resume checkpoint has a different optimizer config");
  }
  if (r.step < 0 || r.step > total) throw CheckpointError("resume step outside the run");
  if (!c.config_hash.empty() && r.config_hash != c.config_hash) {
    throw CheckpointError("resume checkpoint was written by a different config");
  }
}

ParamVector extra_params(const Checkpoint& r, const std::string& name) {
  const auto it = r.extras.find(name);
  if (it == r.extras.end()) throw CheckpointError("resume checkpoint lacks '" + name + "'");
  if (it->second.size() != r.params.size()) throw CheckpointError("'" + name + "' has wrong size");
  return ParamVector(it->second, r.params.layout);
}

}  // namespace

const char* to_string(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::Dpo: return "dpo";
    case ObjectiveKind::Cdpo: return "cdpo";
    case ObjectiveKind::Ppo: return "ppo";
    case ObjectiveKind::Cppo: return "cppo";
    case ObjectiveKind::Hppo: return "hppo";
  }
  return "?";
}

ObjectiveKind objective_kind_from_string(const std::string& s) {
  if (s == "dpo") return ObjectiveKind::Dpo;
  if (s == "cdpo") return ObjectiveKind::Cdpo;
  if (s == "ppo") return ObjectiveKind::Ppo;
  if (s == "cppo") return ObjectiveKind::Cppo;
  if (s == "hppo") return ObjectiveKind::Hppo;
  throw ConfigError("objective.id", "unknown objective '" + s + "'");
}

bool is_online(ObjectiveKind kind) {
  return kind == ObjectiveKind::Ppo || kind == ObjectiveKind::Cppo || kind == ObjectiveKind::Hppo;
}

void TrainConfig::validate() const {
  policy.validate();
  if (!(init_scale >= 0.0)) throw ConfigError("policy.init_scale", "must be >= 0");
  if (!(beta > 0.0)) throw ConfigError("objective.beta", "must be > 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("objective.epsilon", "must lie in (0, 1)");
  schedule.validate();
  switch (objective) {
    case ObjectiveKind::Cdpo:
      if (schedule.kind != ScheduleKind::CdpoRamp) {
        throw ConfigError("objective.schedule.kind", "cdpo needs the cdpo_ramp schedule");
      }
      break;
    case ObjectiveKind::Hppo:
      if (schedule.kind != ScheduleKind::HppoSine) {
        throw ConfigError("objective.schedule.kind", "hppo needs the hppo_sine schedule");
      }
      if (!(schedule.tau < 1.0)) throw ConfigError("objective.schedule.tau", "must be < 1 for hppo");
      break;
    case ObjectiveKind::Cppo:
      if (schedule.kind != ScheduleKind::Constant) {
        throw ConfigError("objective.schedule.kind", "cppo needs a constant lambda");
      }
      break;
    default:
      break;
  }
  optimizer.validate();
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
    throw ConfigError("optimizer.warmup_ratio", "must lie in [0, 1)");
  }
  if (!(clip_norm >= 0.0)) throw ConfigError("optimizer.clip_norm", "must be >= 0");
  if (steps < 0) throw ConfigError("training.steps", "must be >= 0");
  if (epochs < 1) throw ConfigError("training.epochs", "must be >= 1");
  if (batch_size < 1) throw ConfigError("training.batch_size", "must be >= 1");
  if (sft_steps < 0) throw ConfigError("training.sft_steps", "must be >= 0");
  if (sft_steps > 0 && !(sft_lr > 0.0)) throw ConfigError("training.sft_lr", "must be > 0");
  if (checkpoint_every < 0) throw ConfigError("training.checkpoint_every", "must be >= 0");
  if (is_online(objective)) {
    if (steps < 1) throw ConfigError("training.steps", "online training needs steps >= 1");
    if (refresh_every < 1) throw ConfigError("training.refresh_every", "must be >= 1");
    if (ppo_epochs < 1) throw ConfigError("training.ppo_epochs", "must be >= 1");
    if (rollouts_per_step < 2) throw ConfigError("training.rollouts_per_step", "must be >= 2");
    if (steps % ppo_epochs != 0) {
      throw ConfigError("training.steps", "must be a multiple of training.ppo_epochs");
    }
    if (checkpoint_every % ppo_epochs != 0) {
      throw ConfigError("training.checkpoint_every", "must be a multiple of training.ppo_epochs");
    }
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("training.gamma", "must lie in (0, 1]");
    if (!(sampler.top_p > 0.0 && sampler.top_p <= 1.0)) {
      throw ConfigError("sampler.top_p", "must lie in (0, 1]");
    }
    if (!(sampler.temperature >= 0.0)) throw ConfigError("sampler.temperature", "must be >= 0");
    if (sampler.max_len < 1) throw ConfigError("sampler.max_len", "must be >= 1");
  }
}

std::string metrics_json(const StepMetrics& m) {
  json j = {{"step", m.step},
            {"loss", m.loss},
            {"grad_norm_pre_clip", m.grad_norm_pre_clip},
            {"lr", m.lr},
            {"lambda", m.lambda ? json(*m.lambda) : json(nullptr)},
            {"wall_ms", m.wall_ms}};
  return j.dump();
}

long offline_total_steps(const TrainConfig& config, std::size_t n_pairs) {
  if (config.steps > 0) return config.steps;
  const auto per_epoch = static_cast<long>(
      (n_pairs + static_cast<std::size_t>(config.batch_size) - 1) /
      static_cast<std::size_t>(config.batch_size));
  return per_epoch * config.epochs;
}

std::optional<double> logged_lambda(const TrainConfig& config, long step) {
  switch (config.objective) {
    case ObjectiveKind::Dpo: return std::nullopt;
    case ObjectiveKind::Ppo: return 1.0;
    default: return lambda_at(config.schedule, static_cast<double>(step));
  }
}

LossResult offline_objective(const TrainConfig& config, const ParamVector& params,
                             const ParamVector& ref_params, std::span<const PreferencePair> batch,
                             long step) {
  switch (config.objective) {
    case ObjectiveKind::Dpo:
      return dpo_loss(config.policy, params, ref_params, batch, config.beta);
    case ObjectiveKind::Cdpo:
      return cdpo_loss(config.policy, params, ref_params, batch, config.beta,
                       lambda_at(config.schedule, static_cast<double>(step)));
    default:
      throw ContractError(std::string(to_string(config.objective)) + " is not an offline objective");
  }
}

LossResult online_objective(const TrainConfig& config, const ParamVector& params,
                            std::span<const Rollout> rollouts, long step) {
  switch (config.objective) {
    case ObjectiveKind::Ppo:
      return ppo_loss(config.policy, params, rollouts, config.epsilon);
    case ObjectiveKind::Cppo:
      return cppo_loss(config.policy, params, rollouts, config.epsilon,
                       lambda_at(config.schedule, static_cast<double>(step)), config.cppo_target);
    case ObjectiveKind::Hppo:
      return hppo_loss(config.policy, params, rollouts, config.epsilon,
                       lambda_at(config.schedule, static_cast<double>(step)));
    default:
      throw ContractError(std::string(to_string(config.objective)) + " is not an online objective");
  }
}

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, long step) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_%06ld.bin", step);
  return out_dir / "checkpoints" / name;
}

TrainResult train_offline(const TrainConfig& config, std::span<const PreferencePair> pairs,
                          const TrainHooks& hooks, const Checkpoint* resume) {
  config.validate();
  if (is_online(config.objective)) {
    throw ConfigError("objective.id", "train_offline needs dpo or cdpo");
  }
  if (pairs.empty()) throw ConfigError("data.pairs", "no preference pairs");
  const auto& spec = config.policy;
  const long total = offline_total_steps(config, pairs.size());
  const auto bs = static_cast<std::size_t>(config.batch_size);

  TrainResult result;
  Emitter emit{config, hooks, result};
  long start = 0;
  double prev_loss = std::numeric_limits<double>::quiet_NaN();

  if (resume) {
    check_resume(config, *resume, total);
    result.params = resume->params;
    result.ref_params = extra_params(*resume, "ref_params");
    result.optimizer = resume->optimizer;
    start = resume->step;
    if (auto it = resume->scalars.find("loss"); it != resume->scalars.end()) prev_loss = it->second;
  } else {
    result.params = init_params(spec, config.init_scale);
    if (config.sft_steps > 0) {
      OptimizerConfig sft_cfg = config.optimizer;
      sft_cfg.lr = config.sft_lr;
      auto sft_opt = OptimizerState::create(sft_cfg, result.params);
      for (long s = 0; s < config.sft_steps; ++s) {
        const auto idx = batch_at(pairs.size(), bs, config.seed, kSaltSft, s);
        GradVector g = zeros_like(result.params);
        double loss = 0.0;
        const double n = static_cast<double>(idx.size());
        for (auto i : idx) {
          const auto& p = pairs[i];
          loss -= log_prob(result.params, spec, p.x, p.y_plus) / n;
          const std::vector<double> w(p.y_plus.size(), -1.0 / n);
          accumulate_grad_log_prob(result.params, spec, p.x, p.y_plus, w, g);
        }
        if (!std::isfinite(loss) || !g.all_finite()) throw TrainingAbort(s, "non-finite SFT loss");
        apply_update(config, sft_opt, result.params, g, config.sft_lr);
      }
    }
    result.ref_params = result.params;
    result.optimizer = OptimizerState::create(config.optimizer, result.params);
    if (!config.out_dir.empty()) {
      Checkpoint ref;
      ref.spec = spec;
      ref.params = result.ref_params;
      ref.optimizer = OptimizerState::create(config.optimizer, result.params);
      ref.config_hash = config.config_hash;
      save_checkpoint(ref, config.out_dir / "ref.bin");
    }
  }

  const auto make_ckpt = [&](long step) {
    Checkpoint c;
    c.step = step;
    c.spec = spec;
    c.params = result.params;
    c.optimizer = result.optimizer;
    c.extras["ref_params"] = result.ref_params.values;
    return c;
  };

  MetricsSink sink(config.out_dir, start);
  if (!resume) emit.checkpoint(make_ckpt(0));
  const auto t0 = std::chrono::steady_clock::now();

  for (long step = start; step < total; ++step) {
    const auto idx = batch_at(pairs.size(), bs, config.seed, kSaltEpoch, step);
    const auto batch = gather(pairs, idx);
    const LossResult r = guard_step(step, [&] { return offline_objective(config, result.params, result.ref_params, batch, step); });
    StepMetrics m;
    m.step = step;
    m.loss = r.value;
    m.lr = lr_at(step, total, config.lr_schedule, config.warmup_ratio, config.optimizer.lr);
    m.lambda = logged_lambda(config, step);
    m.grad_norm_pre_clip = apply_update(config, result.optimizer, result.params, r.grad, m.lr);
    m.wall_ms = elapsed_ms(config, t0);
    emit.step(m, sink);

    if (checkpoint_due(config, step + 1, total)) {
      auto c = make_ckpt(step + 1);
      c.scalars["loss"] = r.value;
      c.scalars["loss_delta"] = std::isnan(prev_loss) ? 0.0 : r.value - prev_loss;
      emit.checkpoint(std::move(c));
    }
    prev_loss = r.value;
  }
  return result;
}

TrainResult train_online(const TrainConfig& config, const SyntheticTask& task,
                         std::span<const TokenSequence> prompts, const TrainHooks& hooks,
                         const Checkpoint* resume) {
  config.validate();
  if (!is_online(config.objective)) {
    throw ConfigError("objective.id", "train_online needs ppo, cppo or hppo");
  }
  if (prompts.empty()) throw ConfigError("data.prompts", "no training prompts");
  if (task.vocab_size != config.policy.vocab_size) {
    throw ConfigError("policy.vocab_size", "does not match task.vocab_size");
  }
  const auto& spec = config.policy;
  const long total = config.steps;

  TrainResult result;
  Emitter emit{config, hooks, result};
  ParamVector old_params;
  PositionBaseline baseline;
  long start = 0;
  double prev_loss = std::numeric_limits<double>::quiet_NaN();

  if (resume) {
    check_resume(config, *resume, total);
    if (resume->step % config.ppo_epochs != 0) {
      throw CheckpointError("online runs resume only at rollout-batch boundaries");
    }
    result.params = resume->params;
    result.optimizer = resume->optimizer;
    old_params = extra_params(*resume, "old_params");
    if (auto it = resume->extras.find("baseline"); it != resume->extras.end()) {
      baseline = PositionBaseline::from_vector(
          std::span<const double>(it->second.data(), static_cast<std::size_t>(it->second.size())));
    }
    start = resume->step;
    if (auto it = resume->scalars.find("loss"); it != resume->scalars.end()) prev_loss = it->second;
  } else {
    result.params = init_params(spec, config.init_scale);
    result.optimizer = OptimizerState::create(config.optimizer, result.params);
    old_params = result.params;
  }
  result.ref_params = result.params;

  const auto make_ckpt = [&](long step) {
    Checkpoint c;
    c.step = step;
    c.spec = spec;
    c.params = result.params;
    c.optimizer = result.optimizer;
    c.extras["old_params"] = old_params.values;
    const auto b = baseline.to_vector();
    c.extras["baseline"] = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
    return c;
  };

  MetricsSink sink(config.out_dir, start);
  if (!resume) emit.checkpoint(make_ckpt(0));
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<Rollout> rollouts;
  for (long step = start; step < total; ++step) {
    const long iteration = step / config.ppo_epochs;
    if (step % config.ppo_epochs == 0) {
      if (iteration % config.refresh_every == 0) old_params = result.params;
      std::mt19937_64 rng(derive_seed(config.seed, kSaltPrompts, static_cast<std::uint64_t>(iteration)));
      std::uniform_int_distribution<std::size_t> pick(0, prompts.size() - 1);
      std::vector<TokenSequence> batch(static_cast<std::size_t>(config.rollouts_per_step));
      for (auto& x : batch) x = prompts[pick(rng)];
      try {
        rollouts = gen_rollouts(old_params, spec, task, batch, config.sampler,
                                derive_seed(config.seed, kSaltRollouts, static_cast<std::uint64_t>(iteration)),
                                config.gamma, config.position_baseline ? &baseline : nullptr);
      } catch (const NumericError& e) {
        throw TrainingAbort(step, e.what());
      }
    }
    const LossResult r = guard_step(step, [&] { return online_objective(config, result.params, rollouts, step); });
    StepMetrics m;
    m.step = step;
    m.loss = r.value;
    m.lr = lr_at(step, total, config.lr_schedule, config.warmup_ratio, config.optimizer.lr);
    m.lambda = logged_lambda(config, step);
    m.grad_norm_pre_clip = apply_update(config, result.optimizer, result.params, r.grad, m.lr);
    m.wall_ms = elapsed_ms(config, t0);
    emit.step(m, sink);

    if (checkpoint_due(config, step + 1, total)) {
      auto c = make_ckpt(step + 1);
      c.scalars["loss"] = r.value;
      c.scalars["loss_delta"] = std::isnan(prev_loss) ? 0.0 : r.value - prev_loss;
      emit.checkpoint(std::move(c));
    }
    prev_loss = r.value;
  }
  return result;
}

}  // namespace podyn
