#include "catch_amalgamated.hpp"

#include "podyn/errors.hpp"
#include "podyn/variants.hpp"
#include "support.hpp"

#include <cmath>
#include <numbers>

using namespace podyn;
using Catch::Approx;

TEST_CASE("cdpo ramp") {
  CHECK(cdpo_lambda(2500, 2500, 5500) == 0.0);
  CHECK(cdpo_lambda(0, 2500, 5500) == 0.0);
  CHECK(cdpo_lambda(4000, 2500, 5500) == 0.5);
  CHECK(cdpo_lambda(5500, 2500, 5500) == 1.0);
  CHECK(cdpo_lambda(9000, 2500, 5500) == 1.0);
  CHECK_THROWS(cdpo_lambda(1.0, 3.0, 3.0));
  for (int t = 2400; t <= 5600; t += 7) {
    CHECK(cdpo_lambda(t, 2500, 5500) <= cdpo_lambda(t + 7, 2500, 5500));
  }
}

TEST_CASE("hppo sine schedule") {
  CHECK(hppo_lambda(3, 2, 0.08) == Approx(0.92).epsilon(1e-14));
  CHECK(hppo_lambda(0, 2, 0.08) == 1.0);
  for (int t = 0; t <= 100; ++t) CHECK(hppo_lambda(t, 100, 0.3) == 1.0);
  for (int t = 0; t < 1000; ++t) {
    const double l = hppo_lambda(t, 50, 0.4);
    CHECK(l >= 0.6);
    CHECK(l <= 1.0);
    CHECK(hppo_lambda(t + 100, 50, 0.4) == l);
    // oracle written directly from the closed form
    const double ref = std::max(std::min(std::sin(std::numbers::pi * t / 50.0), 0.0), -0.4) + 1.0;
    CHECK(l == Approx(ref).margin(1e-12));
  }
  CHECK(hppo_lambda(75, 50, 0.01) == Approx(0.99));
  for (int t = 0; t < 400; ++t) CHECK(hppo_lambda(t, 50, 0.0) == 1.0);
  CHECK_THROWS(hppo_lambda(1, 50, 1.0));
}

TEST_CASE("schedule specs") {
  ScheduleSpec s;
  s.kind = ScheduleKind::CdpoRamp;
  s.t1 = 10;
  s.t2 = 20;
  CHECK(lambda_at(s, 15) == 0.5);
  s.t2 = 10;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.value = 0.25;
  CHECK(lambda_at(s, 123) == 0.25);
  CHECK(schedule_kind_from_string(to_string(ScheduleKind::HppoSine)) == ScheduleKind::HppoSine);
  CHECK_THROWS_AS(schedule_kind_from_string("bogus"), ConfigError);
}

TEST_CASE("cdpo loss against the closed form") {
  support::Rng rng(41);
  for (int i = 0; i < 40; ++i) {
    const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
    const auto p = support::random_params(s, rng);
    const auto r = support::random_params(s, rng);
    const auto pairs = support::random_pairs(rng, s, 4);
    const double beta = support::uniform(rng, 0.05, 1.0);
    for (double lambda : {0.0, 0.5, 1.0, support::uniform(rng, 0.0, 1.0)}) {
      double oracle = 0.0;
      for (const auto& pr : pairs) {
        const double up = support::dense_log_prob(p, s, pr.x, pr.y_plus) - support::dense_log_prob(r, s, pr.x, pr.y_plus);
        const double um = support::dense_log_prob(p, s, pr.x, pr.y_minus) - support::dense_log_prob(r, s, pr.x, pr.y_minus);
        oracle -= std::log(support::sigmoid(beta * ((1.0 - lambda) * up - lambda * um)));
      }
      oracle /= static_cast<double>(pairs.size());
      const auto l = cdpo_loss(s, p, r, pairs, beta, lambda);
      CHECK(l.value == Approx(oracle).epsilon(1e-12));
      const auto fd = support::fd_gradient([&](const ParamVector& q) { return cdpo_loss(s, q, r, pairs, beta, lambda).value; }, p);
      CHECK(support::max_rel_err(l.grad.values, fd) <= 1e-4);
    }
  }
}

TEST_CASE("cdpo at lambda one half is dpo at half beta") {
  support::Rng rng(42);
  for (int i = 0; i < 20; ++i) {
    const auto s = support::random_spec(rng, PolicyKind::LinearSoftmax);
    const auto p = support::random_params(s, rng);
    const auto r = support::random_params(s, rng);
    const auto pairs = support::random_pairs(rng, s, 5);
    const auto a = cdpo_loss(s, p, r, pairs, 0.4, 0.5);
    const auto b = dpo_loss(s, p, r, pairs, 0.2);
    CHECK(a.value == Approx(b.value).epsilon(1e-14));
    CHECK(support::rel_diff(a.grad.values, b.grad.values) <= 1e-12);
  }
}

TEST_CASE("cppo scales one advantage tertile") {
  support::Rng rng(43);
  for (int i = 0; i < 30; ++i) {
    const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
    const auto old = support::random_params(s, rng);
    auto p = old;
    p.values += 0.2 * support::random_params(s, rng).values;
    const auto rs = support::random_rollouts(rng, s, old, 6);
    const auto c = ppo_component_losses(s, p, rs);
    const auto full = ppo_loss(s, p, rs);

    const auto one = cppo_loss(s, p, rs, kDefaultClipEpsilon, 1.0, CppoTarget::Top);
    CHECK(one.value == full.value);
    CHECK(one.grad.values == full.grad.values);

    const auto zero_top = cppo_loss(s, p, rs, kDefaultClipEpsilon, 0.0, CppoTarget::Top);
    CHECK(zero_top.value == Approx(c.mid.value + c.bot.value).margin(1e-14));
    CHECK(support::rel_diff(zero_top.grad.values, c.mid.grad.values + c.bot.grad.values) <= 1e-10);

    const auto part_top = cppo_loss(s, p, rs, kDefaultClipEpsilon, 0.3, CppoTarget::Top);
    CHECK(support::rel_diff(part_top.grad.values, 0.3 * c.top.grad.values + c.mid.grad.values + c.bot.grad.values) <= 1e-10);

    const auto part_mid = cppo_loss(s, p, rs, kDefaultClipEpsilon, 0.3, CppoTarget::Mid);
    CHECK(part_mid.value == Approx(c.top.value + 0.3 * c.mid.value + c.bot.value).margin(1e-14));
  }
}

TEST_CASE("hppo scales negative advantages") {
  support::Rng rng(44);
  for (int i = 0; i < 30; ++i) {
    const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
    const auto old = support::random_params(s, rng);
    auto p = old;
    p.values += 0.2 * support::random_params(s, rng).values;
    const auto rs = support::random_rollouts(rng, s, old, 6);
    const auto c = ppo_component_losses(s, p, rs);
    const double lambda = support::uniform(rng, 0.5, 1.0);
    const auto h = hppo_loss(s, p, rs, kDefaultClipEpsilon, lambda);
    CHECK(h.value == Approx(c.pos.value + lambda * c.neg.value).margin(1e-14));
    CHECK(support::rel_diff(h.grad.values, c.pos.grad.values + lambda * c.neg.grad.values) <= 1e-10);
    const auto one = hppo_loss(s, p, rs, kDefaultClipEpsilon, 1.0);
    CHECK(one.grad.values == ppo_loss(s, p, rs).grad.values);
  }
}
