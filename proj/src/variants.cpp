#include "podyn/variants.hpp"

#include "podyn/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace podyn {
namespace {

void require_unit(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::domain_error("lambda must lie in [0, 1]");
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

const char* to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::CdpoRamp: return "cdpo_ramp";
    case ScheduleKind::HppoSine: return "hppo_sine";
    case ScheduleKind::Constant: return "constant";
  }
  return "constant";
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "cdpo_ramp") return ScheduleKind::CdpoRamp;
  if (s == "hppo_sine") return ScheduleKind::HppoSine;
  if (s == "constant") return ScheduleKind::Constant;
  throw ConfigError("objective.schedule.kind", "unknown schedule '" + s + "'");
}

void ScheduleSpec::validate() const {
  switch (kind) {
    case ScheduleKind::CdpoRamp:
      if (!(t1 < t2)) throw ConfigError("objective.schedule.t2", "t1 < t2 required");
      break;
    case ScheduleKind::HppoSine:
      if (!(t3 >= 1.0)) throw ConfigError("objective.schedule.t3", "must be >= 1");
      if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("objective.schedule.tau", "must lie in [0, 1)");
      break;
    case ScheduleKind::Constant:
      if (!(value >= 0.0 && value <= 1.0)) {
        throw ConfigError("objective.schedule.value", "must lie in [0, 1]");
      }
      break;
  }
}

double cdpo_lambda(double t, double t1, double t2) {
  if (!(t1 < t2)) throw std::domain_error("cdpo_lambda requires t1 < t2");
  return std::max(std::min((t - t1) / (t2 - t1), 1.0), 0.0);
}

double hppo_lambda(double t, double t3, double tau) {
  if (!(t3 >= 1.0)) throw std::domain_error("hppo_lambda requires t3 >= 1");
  if (!(tau >= 0.0 && tau < 1.0)) throw std::domain_error("hppo_lambda requires tau in [0, 1)");
  double phase = std::fmod(t, 2.0 * t3);
  if (phase < 0.0) phase += 2.0 * t3;
  // sin(pi) evaluates to +1.2e-16, so the first half-period stays exactly 1.
  return std::max(std::min(std::sin(std::numbers::pi * phase / t3), 0.0), -tau) + 1.0;
}

double lambda_at(const ScheduleSpec& schedule, double t) {
  switch (schedule.kind) {
    case ScheduleKind::CdpoRamp: return cdpo_lambda(t, schedule.t1, schedule.t2);
    case ScheduleKind::HppoSine: return hppo_lambda(t, schedule.t3, schedule.tau);
    case ScheduleKind::Constant: return schedule.value;
  }
  return schedule.value;
}

LossResult cdpo_loss(const PolicySpec& spec, const ParamVector& params,
                     const ParamVector& ref_params, std::span<const PreferencePair> batch,
                     double beta, double lambda) {
  require_unit(lambda);
  if (!(beta > 0.0)) throw std::domain_error("beta must be > 0");
  if (batch.empty()) throw std::invalid_argument("preference batch is empty");
  const auto lps = pair_log_probs(spec, params, ref_params, batch);
  const double n = static_cast<double>(batch.size());
  LossResult r{0.0, zeros_like(params)};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double ratio_plus = lps[i].policy_plus - lps[i].ref_plus;
    const double ratio_minus = lps[i].policy_minus - lps[i].ref_minus;
    const double z = beta * ((1.0 - lambda) * ratio_plus - lambda * ratio_minus);
    r.value += neg_log_sigmoid(z);
    const double c = beta * sigmoid(-z) / n;
    const auto& pr = batch[i];
    if (lambda != 1.0) {
      const std::vector<double> wp(pr.y_plus.size(), -c * (1.0 - lambda));
      accumulate_grad_log_prob(params, spec, pr.x, pr.y_plus, wp, r.grad);
    }
    if (lambda != 0.0) {
      const std::vector<double> wm(pr.y_minus.size(), c * lambda);
      accumulate_grad_log_prob(params, spec, pr.x, pr.y_minus, wm, r.grad);
    }
  }
  r.value /= n;
  return r;
}

const char* to_string(CppoTarget target) { return target == CppoTarget::Top ? "top" : "mid"; }

LossResult cppo_loss(const PolicySpec& spec, const ParamVector& params,
                     std::span<const Rollout> rollouts, double epsilon, double lambda,
                     CppoTarget target) {
  require_unit(lambda);
  const auto adv = flat_advantages(rollouts);
  std::vector<double> abs_adv(adv.size());
  std::transform(adv.begin(), adv.end(), abs_adv.begin(), [](double a) { return std::abs(a); });
  const auto part = quantile_partition(abs_adv);
  std::vector<double> w(adv.size(), 1.0);
  const auto& scaled = target == CppoTarget::Top ? part.top_idx : part.mid_idx;
  for (auto k : scaled) w[k] = lambda;
  return ppo_weighted(spec, params, rollouts, epsilon, w);
}

LossResult hppo_loss(const PolicySpec& spec, const ParamVector& params,
                     std::span<const Rollout> rollouts, double epsilon, double lambda) {
  if (!(lambda > 0.0 && lambda <= 1.0)) throw std::domain_error("lambda must lie in (0, 1]");
  const auto adv = flat_advantages(rollouts);
  std::vector<double> w(adv.size(), 1.0);
  for (std::size_t k = 0; k < adv.size(); ++k) {
    if (adv[k] < 0.0) w[k] = lambda;
  }
  return ppo_weighted(spec, params, rollouts, epsilon, w);
}

}  // namespace podyn
