#include "catch_amalgamated.hpp"

#include "podyn/errors.hpp"
#include "podyn/objectives.hpp"
#include "podyn/stats.hpp"
#include "support.hpp"

#include <cmath>
#include <set>

using namespace podyn;
using Catch::Approx;

namespace {

// V = 3, context_len = 1. With an empty prompt the first response token is
// scored by the all-padding row, whose logits are set to log(p).
PolicySpec tiny() {
  PolicySpec s;
  s.vocab_size = 3;
  s.context_len = 1;
  return s;
}

ParamVector with_logprobs(double lp0, double lp1) {
  const auto spec = tiny();
  auto p = zero_params(spec);
  const Eigen::Index row = 3 * 3;
  p.values[row + 0] = lp0;
  p.values[row + 1] = lp1;
  p.values[row + 2] = std::log(1.0 - std::exp(lp0) - std::exp(lp1));
  return p;
}

const PreferencePair kPair{{}, {0}, {1}};

void check_partition_exhaustive(const TertilePartition& p, std::size_t n) {
  std::set<std::size_t> all;
  for (auto i : p.top_idx) all.insert(i);
  for (auto i : p.mid_idx) all.insert(i);
  for (auto i : p.bot_idx) all.insert(i);
  CHECK(all.size() == n);
  CHECK(p.top_idx.size() + p.mid_idx.size() + p.bot_idx.size() == n);
  CHECK(p.q13 <= p.q23);
}

}  // namespace

TEST_CASE("dpo loss scalar oracles") {
  const auto spec = tiny();
  const auto theta = with_logprobs(-1.0, -2.0);
  const auto ref = with_logprobs(-1.5, -2.5);
  REQUIRE(log_prob(theta, spec, {}, {0}) == Approx(-1.0).epsilon(1e-14));
  REQUIRE(log_prob(ref, spec, {}, {1}) == Approx(-2.5).epsilon(1e-14));
  const PreferencePair batch[] = {kPair};
  CHECK(std::abs(dpo_loss(spec, theta, ref, batch, 0.1).value - 0.693147180559945) <= 1e-12);
  CHECK(kDefaultBeta == 0.1);

  SECTION("zero margin when params equal the reference") {
    CHECK(dpo_loss(spec, ref, ref, batch).value == Approx(std::log(2.0)).epsilon(1e-15));
  }
  SECTION("raising log pi(y+) lowers the loss") {
    const auto better = with_logprobs(-0.9, -2.0);
    CHECK(dpo_loss(spec, better, ref, batch).value < dpo_loss(spec, theta, ref, batch).value);
  }
  SECTION("swapping y+ and y- flips the margin sign") {
    const auto other = with_logprobs(-0.5, -2.2);
    const PreferencePair swapped[] = {{{}, {1}, {0}}};
    const double l = dpo_loss(spec, other, ref, batch).value;
    const double ls = dpo_loss(spec, other, ref, swapped).value;
    // -log s(z) - (-log s(-z)) = -z
    const double z = 0.1 * ((-0.5 + 1.5) - (-2.2 + 2.5));
    CHECK(l - ls == Approx(-z).epsilon(1e-12));
  }
}

TEST_CASE("implicit reward") {
  CHECK(implicit_reward_weight(1.0, 0.0, 0.1) == Approx(0.1 * support::sigmoid(-0.1)).epsilon(1e-15));
  CHECK(implicit_reward_weight(1.0, 0.0, 0.1) == Approx(0.047502).margin(5e-7));
  CHECK(implicit_reward_weight(0.3, 0.3, 0.1) == 0.05);
  CHECK(implicit_reward_weight(1e6, 0.0, 0.1) > 0.0);
  CHECK(implicit_reward_weight(1e6, 0.0, 0.1) < 1e-100);
  CHECK(implicit_reward_weight(-1e6, 0.0, 0.1) < 0.1);

  const auto spec = tiny();
  const auto ref = with_logprobs(-1.5, -2.5);
  CHECK(implicit_reward(spec, ref, ref, kPair).omega == 0.05);

  support::Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    const double beta = support::uniform(rng, 0.01, 2.0);
    const double pm = 50.0 * support::normal(rng);
    const double rm = 50.0 * support::normal(rng);
    const double w = implicit_reward_weight(pm, rm, beta);
    CHECK(w > 0.0);
    CHECK(w < beta);
  }
}

TEST_CASE("gradient-equivalent dpo") {
  const auto spec = tiny();
  const auto ref = with_logprobs(-1.0, -2.0);
  const PreferencePair batch[] = {kPair};
  CHECK(dpo_hat_loss(spec, ref, ref, batch, 0.1, true).value == Approx(-0.05).epsilon(1e-14));
  CHECK_THROWS_AS(dpo_hat_loss(spec, ref, ref, batch, 0.1, false), ContractError);

  support::Rng rng(32);
  for (int i = 0; i < 50; ++i) {
    const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
    const auto p = support::random_params(s, rng);
    const auto r = support::random_params(s, rng);
    const auto pairs = support::random_pairs(rng, s, support::uniform_int(rng, 1, 8));
    const double beta = support::uniform(rng, 0.05, 1.0);
    const auto a = dpo_loss(s, p, r, pairs, beta);
    const auto b = dpo_hat_loss(s, p, r, pairs, beta, true);
    CHECK(support::rel_diff(b.grad.values, a.grad.values) <= 1e-10);
  }
}

TEST_CASE("dpo gradients match finite differences") {
  support::Rng rng(33);
  for (int i = 0; i < 40; ++i) {
    const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
    const auto p = support::random_params(s, rng);
    const auto r = support::random_params(s, rng);
    const auto pairs = support::random_pairs(rng, s, 4);
    const auto a = dpo_loss(s, p, r, pairs, 0.5);
    const auto fd = support::fd_gradient([&](const ParamVector& q) { return dpo_loss(s, q, r, pairs, 0.5).value; }, p);
    CHECK(support::max_rel_err(a.grad.values, fd) <= 1e-4);
  }
}

TEST_CASE("quantile partition") {
  SECTION("1..9") {
    const std::vector<double> w{1, 2, 3, 4, 5, 6, 7, 8, 9};
    const auto p = quantile_partition(w);
    CHECK(p.q13 == Approx(11.0 / 3.0));
    CHECK(p.q23 == Approx(19.0 / 3.0));
    CHECK(p.top_idx.size() == 3);
    CHECK(p.mid_idx.size() == 3);
    CHECK(p.bot_idx.size() == 3);
  }
  SECTION("[0, 0, 1]") {
    const std::vector<double> w{0, 0, 1};
    const auto p = quantile_partition(w);
    CHECK(p.q13 == 0.0);
    CHECK(p.q23 == Approx(1.0 / 3.0));
    CHECK(p.bot_idx == std::vector<std::size_t>{0, 1});
    CHECK(p.top_idx == std::vector<std::size_t>{2});
    CHECK(p.mid_idx.empty());
  }
  SECTION("all equal lands in top") {
    const std::vector<double> w(7, 0.25);
    const auto p = quantile_partition(w);
    CHECK(p.q13 == 0.25);
    CHECK(p.q23 == 0.25);
    CHECK(p.top_idx.size() == 7);
    CHECK(p.mid_idx.empty());
    CHECK(p.bot_idx.empty());
  }
  SECTION("too few items") {
    CHECK_THROWS_AS(quantile_partition(std::vector<double>{}), PartitionError);
    CHECK_THROWS_AS(quantile_partition(std::vector<double>{1.0, 2.0}), PartitionError);
  }
  SECTION("random weights follow the indicator conditions") {
    support::Rng rng(34);
    for (int i = 0; i < 200; ++i) {
      std::vector<double> w(static_cast<std::size_t>(support::uniform_int(rng, 3, 30)));
      for (auto& x : w) x = support::uniform_int(rng, 0, 2) == 0 ? 0.5 : support::uniform(rng, 0.0, 1.0);
      const auto p = quantile_partition(w);
      check_partition_exhaustive(p, w.size());
      const double alphas[] = {1.0 / 3.0, 2.0 / 3.0};
      const auto q = quantiles(w, alphas);
      CHECK(p.q13 == q[0]);
      CHECK(p.q23 == q[1]);
      for (auto k : p.top_idx) CHECK(w[k] >= p.q23);
      for (auto k : p.bot_idx) CHECK(w[k] <= p.q13);
      for (auto k : p.mid_idx) CHECK((w[k] > p.q13 && w[k] < p.q23));
    }
  }
}

TEST_CASE("dpo components") {
  support::Rng rng(35);
  SECTION("9 pairs with distinct omega split 3/3/3") {
    const auto s = support::random_spec(rng, PolicyKind::LinearSoftmax);
    const auto p = support::random_params(s, rng);
    const auto r = support::random_params(s, rng);
    const auto pairs = support::random_pairs(rng, s, 9);
    const auto c = dpo_component_losses(s, p, r, pairs, 0.5);
    std::set<double> omegas;
    for (const auto& pr : pairs) omegas.insert(implicit_reward(s, p, r, pr, 0.5).omega);
    REQUIRE(omegas.size() == 9);
    CHECK(c.partition.top_idx.size() == 3);
    CHECK(c.partition.mid_idx.size() == 3);
    CHECK(c.partition.bot_idx.size() == 3);
  }
  SECTION("identical omegas leave the middle empty") {
    const auto s = support::random_spec(rng, PolicyKind::Tabular);
    const auto p = support::random_params(s, rng);
    const auto pairs = support::random_pairs(rng, s, 6);
    const auto c = dpo_component_losses(s, p, p, pairs);
    CHECK(c.partition.mid_idx.empty());
    CHECK(c.partition.top_idx.size() == 6);
  }
  SECTION("pieces add up to the total") {
    for (int i = 0; i < 50; ++i) {
      const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
      const auto p = support::random_params(s, rng);
      const auto r = support::random_params(s, rng);
      const auto pairs = support::random_pairs(rng, s, support::uniform_int(rng, 3, 10));
      const auto tot = dpo_hat_loss(s, p, r, pairs, 0.3, true);
      const auto c = dpo_component_losses(s, p, r, pairs, 0.3);
      CHECK(c.pos.value + c.neg.value == Approx(tot.value).margin(1e-15));
      CHECK(support::rel_diff(c.pos.grad.values + c.neg.grad.values, tot.grad.values) <= 1e-10);
      CHECK(support::rel_diff(c.top.grad.values + c.mid.grad.values + c.bot.grad.values, tot.grad.values) <= 1e-10);
      check_partition_exhaustive(c.partition, pairs.size());
    }
  }
  SECTION("component gradients match finite differences with omega frozen") {
    for (int i = 0; i < 10; ++i) {
      const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
      const auto p = support::random_params(s, rng);
      const auto r = support::random_params(s, rng);
      const auto pairs = support::random_pairs(rng, s, 5);
      std::vector<double> omega;
      for (const auto& pr : pairs) omega.push_back(implicit_reward(s, p, r, pr, 0.4).omega);
      const auto c = dpo_component_losses(s, p, r, pairs, 0.4);
      const auto pos_fd = support::fd_gradient(
          [&](const ParamVector& q) {
            double v = 0.0;
            for (std::size_t k = 0; k < pairs.size(); ++k) v -= omega[k] * log_prob(q, s, pairs[k].x, pairs[k].y_plus);
            return v / static_cast<double>(pairs.size());
          },
          p);
      CHECK(support::max_rel_err(c.pos.grad.values, pos_fd) <= 1e-4);
    }
  }
}

TEST_CASE("clip operator") {
  CHECK(clip_op(1.5, 1.0, 0.2) == Approx(1.2));
  CHECK(clip_op(0.5, -1.0, 0.2) == Approx(0.8));
  CHECK(clip_op(1.0, 1.0, 0.3) == 1.0);
  CHECK(clip_op(1.0, -1.0, 0.05) == 1.0);
  CHECK(clip_op(0.5, 1.0, 0.2) == 0.5);
  CHECK(clip_op(1.5, -1.0, 0.2) == 1.5);
  CHECK_THROWS_AS(clip_op(1.0, 1.0, 0.0), std::domain_error);
  CHECK_THROWS_AS(clip_op(0.0, 1.0, 0.2), std::domain_error);
  CHECK(kDefaultClipEpsilon == 0.2);
}

TEST_CASE("advantage estimation") {
  SECTION("whitening [1, 2, 3]") {
    std::vector<Rollout> rs(1);
    rs[0].y = {1, 2, 3};
    rs[0].rewards = {1.0, 1.0, 1.0};
    advantage_estimate(rs, 1.0, true);
    // returns-to-go are [3, 2, 1]
    CHECK(rs[0].advantages[0] == Approx(1.224745).margin(1e-6));
    CHECK(rs[0].advantages[1] == Approx(0.0).margin(1e-15));
    CHECK(rs[0].advantages[2] == Approx(-1.224745).margin(1e-6));
  }
  SECTION("terminal reward with gamma 1") {
    std::vector<Rollout> rs(1);
    rs[0].y = {1, 2, 3, 4};
    rs[0].rewards = {0.0, 0.0, 0.0, 0.7};
    advantage_estimate(rs, 1.0, false);
    for (double a : rs[0].advantage_raw) CHECK(a == 0.7);
  }
  SECTION("random batches are standardized") {
    support::Rng rng(36);
    for (int i = 0; i < 50; ++i) {
      std::vector<Rollout> rs(static_cast<std::size_t>(support::uniform_int(rng, 2, 10)));
      for (auto& r : rs) {
        r.y.assign(static_cast<std::size_t>(support::uniform_int(rng, 1, 4)), 1);
        r.rewards.clear();
        for (std::size_t t = 0; t < r.y.size(); ++t) r.rewards.push_back(support::normal(rng));
      }
      PositionBaseline b;
      advantage_estimate(rs, support::uniform(rng, 0.5, 1.0), true, &b);
      double sum = 0.0, n = 0.0;
      for (const auto& r : rs) for (double a : r.advantages) { sum += a; n += 1.0; }
      const double mean = sum / n;
      double ss = 0.0;
      for (const auto& r : rs) for (double a : r.advantages) ss += (a - mean) * (a - mean);
      CHECK(std::abs(mean) <= 1e-10);
      CHECK(std::abs(std::sqrt(ss / n) - 1.0) <= 1e-10);
    }
  }
  SECTION("baseline is read before it is updated") {
    PositionBaseline b;
    std::vector<Rollout> rs(2);
    for (auto& r : rs) r.y = {1};
    rs[0].rewards = {1.0};
    rs[1].rewards = {3.0};
    advantage_estimate(rs, 1.0, false, &b);
    CHECK(rs[0].advantage_raw[0] == 1.0);
    CHECK(b.value(0) == 2.0);
    advantage_estimate(rs, 1.0, false, &b);
    CHECK(rs[1].advantage_raw[0] == 1.0);
    const auto v = b.to_vector();
    CHECK(PositionBaseline::from_vector(v) == b);
  }
  SECTION("constant batches whiten to zero") {
    std::vector<Rollout> rs(3);
    for (auto& r : rs) {
      r.y = {1};
      r.rewards = {0.5};
    }
    advantage_estimate(rs, 1.0, true);
    for (const auto& r : rs) CHECK(r.advantages[0] == 0.0);
  }
  SECTION("one token cannot be whitened") {
    std::vector<Rollout> rs(1);
    rs[0].y = {1};
    rs[0].rewards = {1.0};
    CHECK_THROWS_AS(advantage_estimate(rs, 1.0, true), NumericError);
  }
}

TEST_CASE("ppo loss") {
  support::Rng rng(37);
  SECTION("ratio one reduces to minus the mean advantage, which whitening zeroes") {
    for (int i = 0; i < 20; ++i) {
      const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
      const auto p = support::random_params(s, rng);
      auto rs = support::random_rollouts(rng, s, p, 8);
      const auto adv = flat_advantages(rs);
      double mean = 0.0;
      for (double a : adv) mean += a;
      mean /= static_cast<double>(adv.size());
      const auto l = ppo_loss(s, p, rs);
      CHECK(l.value == Approx(-mean).margin(1e-12));
      CHECK(std::abs(l.value) <= 1e-10);
    }
  }
  SECTION("missing old log-probs violate the contract") {
    const auto s = support::random_spec(rng, PolicyKind::Tabular);
    const auto p = support::random_params(s, rng);
    auto rs = support::random_rollouts(rng, s, p, 3);
    rs[1].old_logps.clear();
    CHECK_THROWS_AS(ppo_loss(s, p, rs), ContractError);
  }
  SECTION("gradients match finite differences off the clip boundary") {
    for (int i = 0; i < 40; ++i) {
      const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
      const auto old = support::random_params(s, rng);
      auto p = old;
      p.values += 0.3 * support::random_params(s, rng).values;
      const auto rs = support::random_rollouts(rng, s, old, 6);
      const auto l = ppo_loss(s, p, rs, 0.2);
      const auto fd = support::fd_gradient([&](const ParamVector& q) { return ppo_loss(s, q, rs, 0.2).value; }, p);
      CHECK(support::max_rel_err(l.grad.values, fd) <= 1e-4);
    }
  }
  SECTION("a clipped token contributes no gradient") {
    // One token with A > 0 whose ratio is 1.5.
    const auto spec = tiny();
    const auto p = with_logprobs(std::log(0.6), std::log(0.2));
    std::vector<Rollout> rs(1);
    rs[0].y = {0};
    rs[0].old_logps = {std::log(0.4)};
    rs[0].advantages = {1.0};
    const auto l = ppo_loss(spec, p, rs, 0.2);
    CHECK(l.value == Approx(-1.2));
    CHECK(l.grad.values.cwiseAbs().maxCoeff() == 0.0);
    const Eigen::Index row = 9;
    for (int k = 0; k < 3; ++k) {
      auto q = p;
      q.values[row + k] += 1e-6;
      CHECK(std::abs(ppo_loss(spec, q, rs, 0.2).value - l.value) <= 1e-8 * 1e-6);
    }
  }
}

TEST_CASE("ppo components") {
  support::Rng rng(38);
  SECTION("|A| tertiles on [0.1, 0.5, 0.9]") {
    const std::vector<double> w{0.1, 0.5, 0.9};
    const auto part = quantile_partition(w);
    CHECK(part.bot_idx == std::vector<std::size_t>{0});
    CHECK(part.mid_idx == std::vector<std::size_t>{1});
    CHECK(part.top_idx == std::vector<std::size_t>{2});
  }
  SECTION("all non-negative advantages give an empty negative piece") {
    const auto s = support::random_spec(rng, PolicyKind::Tabular);
    const auto p = support::random_params(s, rng);
    auto rs = support::random_rollouts(rng, s, p, 4);
    for (auto& r : rs) for (auto& a : r.advantages) a = std::abs(a);
    const auto c = ppo_component_losses(s, p, rs);
    CHECK(c.neg.value == 0.0);
    CHECK(c.neg.grad.values.cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("pieces add up to the total") {
    for (int i = 0; i < 50; ++i) {
      const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
      const auto old = support::random_params(s, rng);
      auto p = old;
      p.values += 0.2 * support::random_params(s, rng).values;
      const auto rs = support::random_rollouts(rng, s, old, 6);
      const auto tot = ppo_loss(s, p, rs);
      const auto c = ppo_component_losses(s, p, rs);
      CHECK(c.pos.value + c.neg.value == Approx(tot.value).margin(1e-14));
      CHECK(support::rel_diff(c.pos.grad.values + c.neg.grad.values, tot.grad.values) <= 1e-10);
      CHECK(support::rel_diff(c.top.grad.values + c.mid.grad.values + c.bot.grad.values, tot.grad.values) <= 1e-10);
      check_partition_exhaustive(c.partition, token_count(rs));
    }
  }
}
