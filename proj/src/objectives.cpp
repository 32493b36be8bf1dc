#include "podyn/objectives.hpp"

#include "podyn/errors.hpp"
#include "podyn/stats.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace podyn {
namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void require_nonempty(std::span<const PreferencePair> batch) {
  if (batch.empty()) throw std::invalid_argument("preference batch is empty");
}

void require_beta(double beta) {
  if (!(beta > 0.0)) throw std::domain_error("beta must be > 0");
}

void check_rollouts(std::span<const Rollout> rollouts) {
  if (rollouts.empty()) throw std::invalid_argument("rollout batch is empty");
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const auto& r = rollouts[i];
    if (r.old_logps.size() != r.y.size()) {
      throw ContractError("rollout " + std::to_string(i) + " is missing old_logps");
    }
    if (r.advantages.size() != r.y.size()) {
      throw ContractError("rollout " + std::to_string(i) + " is missing advantages");
    }
  }
}

}  // namespace

TertilePartition quantile_partition(std::span<const double> weights, double alpha_low,
                                    double alpha_high) {
  if (weights.empty()) throw PartitionError("cannot partition an empty batch");
  if (weights.size() < 3) {
    throw PartitionError("tertile partition needs at least 3 items, got " +
                         std::to_string(weights.size()));
  }
  const double alphas[] = {alpha_low, alpha_high};
  const auto q = quantiles(weights, alphas);
  TertilePartition p;
  p.q13 = q[0];
  p.q23 = q[1];
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double w = weights[i];
    // top > bot > mid when the closed intervals overlap (q13 == q23).
    if (w >= p.q23) {
      p.top_idx.push_back(i);
    } else if (w <= p.q13) {
      p.bot_idx.push_back(i);
    } else {
      p.mid_idx.push_back(i);
    }
  }
  return p;
}

std::vector<double> indicator(std::size_t n, std::span<const std::size_t> members) {
  std::vector<double> out(n, 0.0);
  for (auto i : members) out.at(i) = 1.0;
  return out;
}

// ---------------------------------------------------------------------- DPO

double neg_log_sigmoid(double z) {
  if (z > 0.0) return std::log1p(std::exp(-z));
  return -z + std::log1p(std::exp(z));
}

double implicit_reward_weight(double policy_margin, double ref_margin, double beta) {
  double omega = beta * sigmoid(-beta * policy_margin + beta * ref_margin);
  if (omega >= beta) omega = std::nextafter(beta, 0.0);
  if (omega <= 0.0) omega = std::numeric_limits<double>::denorm_min();
  return omega;
}

std::vector<PairLogProbs> pair_log_probs(const PolicySpec& spec, const ParamVector& params,
                                         const ParamVector& ref_params,
                                         std::span<const PreferencePair> batch) {
  std::vector<PairLogProbs> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& pr = batch[i];
    PairLogProbs lp{log_prob(params, spec, pr.x, pr.y_plus),
                    log_prob(params, spec, pr.x, pr.y_minus),
                    log_prob(ref_params, spec, pr.x, pr.y_plus),
                    log_prob(ref_params, spec, pr.x, pr.y_minus)};
    if (!std::isfinite(lp.policy_plus) || !std::isfinite(lp.policy_minus) ||
        !std::isfinite(lp.ref_plus) || !std::isfinite(lp.ref_minus)) {
      throw NumericError("non-finite log-prob in preference pair " + std::to_string(i),
                         static_cast<std::ptrdiff_t>(i));
    }
    out.push_back(lp);
  }
  return out;
}

LossResult dpo_loss(const PolicySpec& spec, const ParamVector& params,
                    const ParamVector& ref_params, std::span<const PreferencePair> batch,
                    double beta) {
  require_beta(beta);
  require_nonempty(batch);
  const auto lps = pair_log_probs(spec, params, ref_params, batch);
  const double n = static_cast<double>(batch.size());
  LossResult r{0.0, zeros_like(params)};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double z = beta * ((lps[i].policy_plus - lps[i].ref_plus) -
                             (lps[i].policy_minus - lps[i].ref_minus));
    r.value += neg_log_sigmoid(z);
    // d/dz[-log sigmoid(z)] = -sigmoid(-z); dz/dlp(y+) = beta, dz/dlp(y-) = -beta.
    const double c = beta * sigmoid(-z) / n;
    const auto& pr = batch[i];
    const std::vector<double> wp(pr.y_plus.size(), -c);
    const std::vector<double> wm(pr.y_minus.size(), c);
    accumulate_grad_log_prob(params, spec, pr.x, pr.y_plus, wp, r.grad);
    accumulate_grad_log_prob(params, spec, pr.x, pr.y_minus, wm, r.grad);
  }
  r.value /= n;
  return r;
}

ImplicitReward implicit_reward(const PolicySpec& spec, const ParamVector& params,
                               const ParamVector& ref_params, const PreferencePair& pair,
                               double beta) {
  require_beta(beta);
  const auto lp = pair_log_probs(spec, params, ref_params, std::span(&pair, 1)).front();
  return {implicit_reward_weight(lp.policy_margin(), lp.ref_margin(), beta)};
}

LossResult dpo_weighted(const PolicySpec& spec, const ParamVector& params,
                        const ParamVector& ref_params, std::span<const PreferencePair> batch,
                        double beta, std::span<const double> plus_w,
                        std::span<const double> minus_w) {
  require_beta(beta);
  require_nonempty(batch);
  if (plus_w.size() != batch.size() || minus_w.size() != batch.size()) {
    throw std::invalid_argument("one weight per pair required");
  }
  const auto lps = pair_log_probs(spec, params, ref_params, batch);
  const double n = static_cast<double>(batch.size());
  LossResult r{0.0, zeros_like(params)};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double omega =
        implicit_reward_weight(lps[i].policy_margin(), lps[i].ref_margin(), beta);
    r.value += -omega * (plus_w[i] * lps[i].policy_plus - minus_w[i] * lps[i].policy_minus);
    const auto& pr = batch[i];
    if (plus_w[i] != 0.0) {
      const std::vector<double> wp(pr.y_plus.size(), -omega * plus_w[i] / n);
      accumulate_grad_log_prob(params, spec, pr.x, pr.y_plus, wp, r.grad);
    }
    if (minus_w[i] != 0.0) {
      const std::vector<double> wm(pr.y_minus.size(), omega * minus_w[i] / n);
      accumulate_grad_log_prob(params, spec, pr.x, pr.y_minus, wm, r.grad);
    }
  }
  r.value /= n;
  return r;
}

LossResult dpo_hat_loss(const PolicySpec& spec, const ParamVector& params,
                        const ParamVector& ref_params, std::span<const PreferencePair> batch,
                        double beta, bool omega_detached) {
  if (!omega_detached) {
    throw ContractError("gradient-equivalent DPO requires the implicit reward to be detached");
  }
  const std::vector<double> ones(batch.size(), 1.0);
  return dpo_weighted(spec, params, ref_params, batch, beta, ones, ones);
}

ComponentLosses dpo_component_losses(const PolicySpec& spec, const ParamVector& params,
                                     const ParamVector& ref_params,
                                     std::span<const PreferencePair> batch, double beta) {
  require_beta(beta);
  require_nonempty(batch);
  const auto lps = pair_log_probs(spec, params, ref_params, batch);
  std::vector<double> omegas;
  omegas.reserve(lps.size());
  for (const auto& lp : lps) {
    omegas.push_back(implicit_reward_weight(lp.policy_margin(), lp.ref_margin(), beta));
  }
  ComponentLosses c;
  c.partition = quantile_partition(omegas);

  const std::size_t n = batch.size();
  const std::vector<double> ones(n, 1.0);
  const std::vector<double> zeros(n, 0.0);
  c.pos = dpo_weighted(spec, params, ref_params, batch, beta, ones, zeros);
  c.neg = dpo_weighted(spec, params, ref_params, batch, beta, zeros, ones);
  const auto top = indicator(n, c.partition.top_idx);
  const auto mid = indicator(n, c.partition.mid_idx);
  const auto bot = indicator(n, c.partition.bot_idx);
  c.top = dpo_weighted(spec, params, ref_params, batch, beta, top, top);
  c.mid = dpo_weighted(spec, params, ref_params, batch, beta, mid, mid);
  c.bot = dpo_weighted(spec, params, ref_params, batch, beta, bot, bot);
  return c;
}

// ---------------------------------------------------------------------- PPO

double clip_op(double ratio, double advantage_sign, double epsilon) {
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::domain_error("epsilon must lie in (0, 1)");
  if (!(ratio > 0.0)) throw std::domain_error("ratio must be > 0");
  return advantage_sign >= 0.0 ? std::min(ratio, 1.0 + epsilon) : std::max(ratio, 1.0 - epsilon);
}

double PositionBaseline::value(std::size_t position) const {
  return position < mean_.size() ? mean_[position] : 0.0;
}

void PositionBaseline::update(std::size_t position, double ret) {
  if (position >= mean_.size()) {
    mean_.resize(position + 1, 0.0);
    count_.resize(position + 1, 0.0);
  }
  count_[position] += 1.0;
  mean_[position] += (ret - mean_[position]) / count_[position];
}

std::vector<double> PositionBaseline::to_vector() const {
  std::vector<double> v(mean_);
  v.insert(v.end(), count_.begin(), count_.end());
  return v;
}

PositionBaseline PositionBaseline::from_vector(std::span<const double> v) {
  if (v.size() % 2 != 0) throw std::invalid_argument("baseline vector has odd length");
  PositionBaseline b;
  const auto half = v.size() / 2;
  b.mean_.assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(half));
  b.count_.assign(v.begin() + static_cast<std::ptrdiff_t>(half), v.end());
  return b;
}

void advantage_estimate(std::span<Rollout> rollouts, double gamma, bool whiten,
                        PositionBaseline* baseline) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::domain_error("gamma must lie in (0, 1]");
  std::vector<std::vector<double>> returns(rollouts.size());
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    auto& r = rollouts[i];
    if (r.rewards.size() != r.y.size()) {
      throw ContractError("rollout " + std::to_string(i) + " has no per-token rewards");
    }
    auto& ret = returns[i];
    ret.assign(r.y.size(), 0.0);
    double acc = 0.0;
    for (std::size_t t = r.y.size(); t-- > 0;) {
      acc = r.rewards[t] + gamma * acc;
      ret[t] = acc;
    }
    r.advantage_raw.resize(r.y.size());
    for (std::size_t t = 0; t < r.y.size(); ++t) {
      r.advantage_raw[t] = ret[t] - (baseline ? baseline->value(t) : 0.0);
    }
  }
  if (baseline) {
    for (const auto& ret : returns) {
      for (std::size_t t = 0; t < ret.size(); ++t) baseline->update(t, ret[t]);
    }
  }

  if (!whiten) {
    for (auto& r : rollouts) r.advantages = r.advantage_raw;
    return;
  }
  std::vector<double> flat;
  for (const auto& r : rollouts) flat.insert(flat.end(), r.advantage_raw.begin(), r.advantage_raw.end());
  if (flat.size() < 2) {
    throw NumericError("cannot whiten advantages over fewer than 2 tokens");
  }
  const auto m = moments(flat);
  for (auto& r : rollouts) {
    r.advantages.resize(r.y.size());
    for (std::size_t t = 0; t < r.y.size(); ++t) {
      // Constant batches carry no signal; centred values are all zero.
      r.advantages[t] = m.stddev > 0.0 ? (r.advantage_raw[t] - m.mean) / m.stddev : 0.0;
    }
  }
}

std::size_t token_count(std::span<const Rollout> rollouts) {
  std::size_t n = 0;
  for (const auto& r : rollouts) n += r.y.size();
  return n;
}

std::vector<double> flat_advantages(std::span<const Rollout> rollouts) {
  std::vector<double> out;
  out.reserve(token_count(rollouts));
  for (const auto& r : rollouts) out.insert(out.end(), r.advantages.begin(), r.advantages.end());
  return out;
}

LossResult ppo_weighted(const PolicySpec& spec, const ParamVector& params,
                        std::span<const Rollout> rollouts, double epsilon,
                        std::span<const double> token_weights) {
  check_rollouts(rollouts);
  const std::size_t total = token_count(rollouts);
  if (token_weights.size() != total) {
    throw std::invalid_argument("one weight per token required");
  }
  const double n = static_cast<double>(total);
  LossResult r{0.0, zeros_like(params)};
  std::size_t k = 0;
  std::vector<double> coeff;
  for (const auto& ro : rollouts) {
    const auto lps = token_log_probs(params, spec, ro.x, ro.y);
    coeff.assign(ro.y.size(), 0.0);
    bool any = false;
    for (std::size_t t = 0; t < ro.y.size(); ++t, ++k) {
      const double a = ro.advantages[t];
      const double ratio = std::exp(lps[t] - ro.old_logps[t]);
      const double clipped = clip_op(ratio, a, epsilon);
      r.value += -token_weights[k] * clipped * a;
      // Only the unclipped branch depends on the parameters.
      const bool active = a >= 0.0 ? ratio > 1.0 + epsilon : ratio < 1.0 - epsilon;
      if (!active && token_weights[k] != 0.0) {
        coeff[t] = -token_weights[k] * ratio * a / n;
        any = true;
      }
    }
    if (any) accumulate_grad_log_prob(params, spec, ro.x, ro.y, coeff, r.grad);
  }
  if (!std::isfinite(r.value)) throw NumericError("non-finite PPO loss");
  r.value /= n;
  return r;
}

LossResult ppo_loss(const PolicySpec& spec, const ParamVector& params,
                    std::span<const Rollout> rollouts, double epsilon) {
  const std::vector<double> ones(token_count(rollouts), 1.0);
  return ppo_weighted(spec, params, rollouts, epsilon, ones);
}

ComponentLosses ppo_component_losses(const PolicySpec& spec, const ParamVector& params,
                                     std::span<const Rollout> rollouts, double epsilon) {
  check_rollouts(rollouts);
  const auto adv = flat_advantages(rollouts);
  const std::size_t n = adv.size();
  std::vector<double> abs_adv(n), pos_w(n), neg_w(n);
  for (std::size_t k = 0; k < n; ++k) {
    abs_adv[k] = std::abs(adv[k]);
    pos_w[k] = adv[k] >= 0.0 ? 1.0 : 0.0;
    neg_w[k] = adv[k] < 0.0 ? 1.0 : 0.0;
  }
  ComponentLosses c;
  c.partition = quantile_partition(abs_adv);
  c.pos = ppo_weighted(spec, params, rollouts, epsilon, pos_w);
  c.neg = ppo_weighted(spec, params, rollouts, epsilon, neg_w);
  c.top = ppo_weighted(spec, params, rollouts, epsilon, indicator(n, c.partition.top_idx));
  c.mid = ppo_weighted(spec, params, rollouts, epsilon, indicator(n, c.partition.mid_idx));
  c.bot = ppo_weighted(spec, params, rollouts, epsilon, indicator(n, c.partition.bot_idx));
  return c;
}

}  // namespace podyn
