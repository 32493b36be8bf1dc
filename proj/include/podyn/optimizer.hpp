#pragma once

#include "podyn/params.hpp"

#include <Eigen/Dense>

#include <string>

namespace podyn {

enum class OptimizerKind { Sgd, AdamW };

const char* to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::AdamW;
  double lr = 1e-2;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

/// Optimizer hyperparameters plus AdamW moments laid out like the parameters.
struct OptimizerState {
  OptimizerConfig config;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long t = 0;

  static OptimizerState create(const OptimizerConfig& config, const ParamVector& params);

  bool operator==(const OptimizerState&) const = default;
};

/// One update with learning rate `lr`. SGD: theta -= lr (g + wd theta) with
/// the decay term skipped at wd = 0. AdamW uses decoupled weight decay.
void optimizer_step(OptimizerState& state, ParamVector& params, const GradVector& grad, double lr);

/// Diagonal preconditioner the current AdamW state applies to a gradient,
/// 1 / (sqrt(v_hat) + eps); all ones of length `size` for SGD or before the
/// first step.
Eigen::VectorXd preconditioner(const OptimizerState& state, Eigen::Index size);

/// Rescales to max_norm when ||grad|| exceeds it.
GradVector clip_grad_norm(const GradVector& grad, double max_norm);

enum class LrSchedule { LinearWarmupDecay, Constant };

const char* to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& s);

/// Warmup covers ceil(warmup_ratio * total_steps) steps, rising linearly from
/// 0 to lr_base; afterwards lr decays linearly to 0 at total_steps.
double lr_at(long step, long total_steps, LrSchedule schedule, double warmup_ratio,
             double lr_base);

}  // namespace podyn
