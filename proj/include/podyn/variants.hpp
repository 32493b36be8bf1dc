#pragma once

#include "podyn/objectives.hpp"

#include <span>
#include <string>

namespace podyn {

enum class ScheduleKind { CdpoRamp, HppoSine, Constant };

/// lambda schedule. Steps count optimizer steps.
struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::Constant;
  double t1 = 0.0;
  double t2 = 1.0;
  double t3 = 1.0;
  double tau = 0.0;
  double value = 1.0;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ScheduleSpec&) const = default;
};

const char* to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& s);

/// max(min((t - t1) / (t2 - t1), 1), 0). Requires t1 < t2.
double cdpo_lambda(double t, double t1, double t2);

/// max(min(sin(pi t / t3), 0), -tau) + 1. Equals 1 on [0, t3], dips to 1 - tau
/// on (t3, 2 t3), period 2 t3. The phase is reduced modulo 2 t3 before the
/// sine so integer steps repeat exactly.
double hppo_lambda(double t, double t3, double tau);

double lambda_at(const ScheduleSpec& schedule, double t);

/// -mean log sigmoid(beta [(1 - lambda)(lp - ref)(y+) - lambda (lp - ref)(y-)]).
LossResult cdpo_loss(const PolicySpec& spec, const ParamVector& params,
                     const ParamVector& ref_params, std::span<const PreferencePair> batch,
                     double beta, double lambda);

enum class CppoTarget { Top, Mid };

const char* to_string(CppoTarget target);

/// PPO with the targeted |A|-tertile's summands scaled by lambda.
LossResult cppo_loss(const PolicySpec& spec, const ParamVector& params,
                     std::span<const Rollout> rollouts, double epsilon, double lambda,
                     CppoTarget target);

/// PPO with negative-advantage summands scaled by lambda.
LossResult hppo_loss(const PolicySpec& spec, const ParamVector& params,
                     std::span<const Rollout> rollouts, double epsilon, double lambda);

}  // namespace podyn
