#include "podyn/optimizer.hpp"

#include "podyn/errors.hpp"

#include <algorithm>
#include <cmath>

namespace podyn {

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adamw"; }

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adamw" || s == "adam") return OptimizerKind::AdamW;
  throw ConfigError("optimizer.kind", "unknown optimizer '" + s + "'");
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0 && std::isfinite(lr))) throw ConfigError("optimizer.lr", "must be finite and > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer.weight_decay", "must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optimizer.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer.beta2", "must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optimizer.eps", "must be > 0");
}

OptimizerState OptimizerState::create(const OptimizerConfig& config, const ParamVector& params) {
  OptimizerState s;
  s.config = config;
  if (config.kind == OptimizerKind::AdamW) {
    s.m = Eigen::VectorXd::Zero(params.size());
    s.v = Eigen::VectorXd::Zero(params.size());
  }
  return s;
}

void optimizer_step(OptimizerState& state, ParamVector& params, const GradVector& grad,
                    double lr) {
  const auto& c = state.config;
  ++state.t;
  if (c.kind == OptimizerKind::Sgd) {
    if (c.weight_decay != 0.0) params.values *= 1.0 - lr * c.weight_decay;
    params.values -= lr * grad.values;
    return;
  }
  state.m = c.beta1 * state.m + (1.0 - c.beta1) * grad.values;
  state.v = c.beta2 * state.v + (1.0 - c.beta2) * grad.values.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  if (c.weight_decay != 0.0) params.values *= 1.0 - lr * c.weight_decay;
  params.values.array() -=
      lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + c.eps);
}

Eigen::VectorXd preconditioner(const OptimizerState& state, Eigen::Index size) {
  if (state.config.kind == OptimizerKind::Sgd || state.t == 0) return Eigen::VectorXd::Ones(size);
  if (state.v.size() != size) throw std::invalid_argument("preconditioner size mismatch");
  const double bc2 = 1.0 - std::pow(state.config.beta2, static_cast<double>(state.t));
  return ((state.v.array() / bc2).sqrt() + state.config.eps).inverse().matrix();
}

GradVector clip_grad_norm(const GradVector& grad, double max_norm) {
  if (!(max_norm > 0.0)) throw std::domain_error("max_norm must be > 0");
  const double n = norm(grad);
  if (n <= max_norm) return grad;
  GradVector out = grad;
  out.values *= max_norm / n;
  return out;
}

const char* to_string(LrSchedule s) {
  return s == LrSchedule::Constant ? "constant" : "linear_warmup_decay";
}

LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "linear_warmup_decay" || s == "linear") return LrSchedule::LinearWarmupDecay;
  throw ConfigError("optimizer.schedule", "unknown learning-rate schedule '" + s + "'");
}

double lr_at(long step, long total_steps, LrSchedule schedule, double warmup_ratio,
             double lr_base) {
  if (step < 0 || step > total_steps) throw std::domain_error("step outside [0, total_steps]");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) {
    throw std::domain_error("warmup_ratio must lie in [0, 1)");
  }
  if (schedule == LrSchedule::Constant) return lr_base;
  const auto warmup =
      static_cast<long>(std::ceil(warmup_ratio * static_cast<double>(total_steps) - 1e-9));
  if (step < warmup) {
    return lr_base * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total_steps == warmup) return lr_base;
  return lr_base * std::max(0.0, static_cast<double>(total_steps - step) /
                                     static_cast<double>(total_steps - warmup));
}

}  // namespace podyn
