#include "catch_amalgamated.hpp"

#include "podyn/errors.hpp"
#include "podyn/probe.hpp"
#include "podyn/stats.hpp"
#include "podyn/synth.hpp"
#include "support.hpp"

#include <cmath>

using namespace podyn;
using Catch::Approx;

namespace {

FinalResponseSet random_dprime(support::Rng& rng, const PolicySpec& spec, int n) {
  FinalResponseSet d;
  d.provenance = "random";
  for (int i = 0; i < n; ++i) d.items.emplace_back(support::random_prompt(rng, spec), support::random_response(rng, spec));
  return d;
}

Eigen::VectorXd nll_fd(const PolicySpec& spec, const ParamVector& p, const FinalResponseSet& d) {
  return support::fd_gradient(
      [&](const ParamVector& q) {
        double s = 0.0;
        for (const auto& [x, y] : d.items) s -= support::dense_log_prob(q, spec, x, y);
        return s / static_cast<double>(d.items.size());
      },
      p);
}

GradVector as_grad(const ParamVector& p, Eigen::VectorXd v) { return GradVector(std::move(v), p.layout); }

// Batch gradients of similar norm so none is an outlier on its own.
std::vector<GradVector> tame_batches(support::Rng& rng, const ParamVector& p, int n) {
  std::vector<GradVector> out;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd v(p.size());
    for (auto& x : v) x = support::normal(rng);
    v *= support::uniform(rng, 1.0, 1.2) / v.norm();
    out.push_back(as_grad(p, v));
  }
  return out;
}

}  // namespace

TEST_CASE("target gradient") {
  support::Rng rng(51);
  for (int i = 0; i < 20; ++i) {
    const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
    const auto p = support::random_params(s, rng);

    const auto one = random_dprime(rng, s, 1);
    const auto t1 = target_gradient(s, p, one);
    CHECK(t1.values == -grad_log_prob(p, s, one.items[0].first, one.items[0].second).values);

    auto dup = one;
    dup.items.push_back(dup.items[0]);
    dup.items.push_back(dup.items[0]);
    CHECK(support::rel_diff(target_gradient(s, p, dup).values, t1.values) <= 1e-15);

    const auto ten = random_dprime(rng, s, 10);
    const auto t10 = target_gradient(s, p, ten);
    Eigen::VectorXd avg = Eigen::VectorXd::Zero(p.size());
    for (const auto& [x, y] : ten.items) {
      FinalResponseSet single{{{x, y}}, "one"};
      avg += target_gradient(s, p, single).values;
    }
    avg /= 10.0;
    CHECK((t10.values - avg).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(support::max_rel_err(t10.values, nll_fd(s, p, ten)) <= 1e-4);
    CHECK(final_response_nll(s, p, ten) > 0.0);
  }
  const auto s = support::random_spec(rng, PolicyKind::Tabular);
  CHECK_THROWS_AS(target_gradient(s, zero_params(s), FinalResponseSet{}), ProbeError);
}

TEST_CASE("alignment sign conventions") {
  support::Rng rng(52);
  const auto s = support::random_spec(rng, PolicyKind::LinearSoftmax);
  const auto p = support::random_params(s, rng);
  const auto t = target_gradient(s, p, random_dprime(rng, s, 5));
  const double n2 = t.values.squaredNorm();
  CHECK(gradient_alignment(t, t) == Approx(n2).epsilon(1e-14));
  CHECK(gradient_alignment(as_grad(p, -t.values), t) == Approx(-n2).epsilon(1e-14));

  Eigen::VectorXd a = Eigen::VectorXd::Zero(p.size()), b = Eigen::VectorXd::Zero(p.size());
  a[0] = 1.0;
  b[1] = 3.0;
  CHECK(gradient_alignment(as_grad(p, a), as_grad(p, b)) == 0.0);

  double sum = 0.0;
  for (const auto& g : p.layout.groups()) sum += gradient_alignment(as_grad(p, a + b), t, g.name);
  CHECK(sum == Approx(gradient_alignment(as_grad(p, a + b), t)).margin(1e-10));

  const auto other = zero_params(support::random_spec(rng, PolicyKind::Tabular));
  CHECK_THROWS_AS(gradient_alignment(zeros_like(other), t), std::invalid_argument);
}

TEST_CASE("group decomposition on random gradients") {
  support::Rng rng(53);
  for (int i = 0; i < 50; ++i) {
    const auto s = support::random_spec(rng, i % 2 ? PolicyKind::Tabular : PolicyKind::LinearSoftmax);
    const auto p = support::random_params(s, rng);
    const auto g = as_grad(p, support::random_params(s, rng).values);
    const auto t = as_grad(p, support::random_params(s, rng).values);
    double sum = 0.0;
    for (const auto& grp : p.layout.groups()) sum += gradient_alignment(g, t, grp.name);
    CHECK(std::abs(sum - gradient_alignment(g, t)) <= 1e-10);
  }
}

TEST_CASE("iqr filter") {
  SECTION("one large outlier") {
    const std::vector<double> norms{1, 2, 3, 4, 100};
    const auto r = iqr_filter(norms);
    const double alphas[] = {0.25, 0.75};
    const auto q = quantiles(norms, alphas);
    CHECK(r.q1 == 2.0);
    CHECK(r.q3 == 4.0);
    CHECK(r.threshold == q[1] + 1.5 * (q[1] - q[0]));
    CHECK(r.threshold == 7.0);
    CHECK(r.kept_indices == std::vector<std::size_t>{0, 1, 2, 3});

    std::vector<double> kept;
    for (auto k : r.kept_indices) kept.push_back(norms[k]);
    const auto again = iqr_filter(kept);
    CHECK(again.threshold > 4.0);
    CHECK(again.kept_indices.size() == kept.size());
  }
  SECTION("four evenly spaced values") {
    const std::vector<double> norms{1, 2, 3, 4};
    const auto r = iqr_filter(norms);
    CHECK(r.q1 == Approx(1.75));
    CHECK(r.q3 == Approx(3.25));
    CHECK(r.threshold == Approx(5.5));
    CHECK(r.kept_indices.size() == 4);
    std::vector<double> kept;
    for (auto k : r.kept_indices) kept.push_back(norms[k]);
    CHECK(iqr_filter(kept).kept_indices.size() == 4);
  }
  SECTION("all equal") {
    const std::vector<double> norms(6, 2.5);
    const auto r = iqr_filter(norms);
    CHECK(r.threshold == 2.5);
    CHECK(r.kept_indices.size() == 6);
  }
  SECTION("too few values") {
    CHECK_THROWS_AS(iqr_filter(std::vector<double>{1, 2, 3}), PartitionError);
  }
  SECTION("kept iff below the oracle threshold") {
    support::Rng rng(54);
    for (int i = 0; i < 200; ++i) {
      std::vector<double> norms(static_cast<std::size_t>(support::uniform_int(rng, 4, 40)));
      for (auto& x : norms) x = std::exp(2.0 * support::normal(rng));
      const auto r = iqr_filter(norms);
      const double alphas[] = {0.25, 0.75};
      const auto q = quantiles(norms, alphas);
      const double thr = q[1] + 1.5 * (q[1] - q[0]);
      std::size_t expected = 0;
      for (double x : norms) expected += x <= thr ? 1 : 0;
      CHECK(r.kept_indices.size() == expected);
      for (auto k : r.kept_indices) CHECK(norms[k] <= thr);
    }
  }
}

TEST_CASE("aggregation drops an injected outlier batch") {
  support::Rng rng(55);
  for (int i = 0; i < 20; ++i) {
    const auto s = support::random_spec(rng, PolicyKind::LinearSoftmax);
    const auto p = support::random_params(s, rng);
    const auto t = as_grad(p, support::random_params(s, rng).values);
    auto batches = tame_batches(rng, p, 30);
    const auto clean = aggregate_alignment(batches, t);
    CHECK(clean.n_filtered == 0);
    auto injected = batches;
    injected.insert(injected.begin() + 7, as_grad(p, 1000.0 * batches[3].values));
    const auto dirty = aggregate_alignment(injected, t);
    CHECK(dirty.n_filtered == 1);
    CHECK(dirty.n_used == 30);
    CHECK(std::abs(dirty.g_value - clean.g_value) <= 1e-10 * std::max(1.0, std::abs(clean.g_value)));
    const auto unfiltered = aggregate_alignment(injected, t, false);
    CHECK(unfiltered.n_filtered == 0);
    CHECK(std::abs(unfiltered.g_value - clean.g_value) > 1e-3);
  }
}

TEST_CASE("aggregation is linear without filtering") {
  support::Rng rng(56);
  for (int i = 0; i < 30; ++i) {
    const auto s = support::random_spec(rng, PolicyKind::Tabular);
    const auto p = support::random_params(s, rng);
    const auto t = as_grad(p, support::random_params(s, rng).values);
    const auto g1 = tame_batches(rng, p, 5);
    const auto g2 = tame_batches(rng, p, 5);
    const double a = support::normal(rng), b = support::normal(rng);
    std::vector<GradVector> mix;
    for (int k = 0; k < 5; ++k) mix.push_back(as_grad(p, a * g1[k].values + b * g2[k].values));
    const double lhs = aggregate_alignment(mix, t, false).g_value;
    const double rhs = a * aggregate_alignment(g1, t, false).g_value + b * aggregate_alignment(g2, t, false).g_value;
    CHECK(lhs == Approx(rhs).margin(1e-10));
  }
}

TEST_CASE("probe checkpoint on preference data") {
  support::Rng rng(57);
  PolicySpec s;
  s.kind = PolicyKind::LinearSoftmax;
  s.vocab_size = 5;
  s.context_len = 2;
  s.embed_dim = 3;
  s.seed = 3;
  const auto p = support::random_params(s, rng);
  DpoProbeData data{support::random_params(s, rng), support::random_pairs(rng, s, 60), 0.1};
  const auto dprime = random_dprime(rng, s, 8);
  const auto suite = parse_suite("TOT,POS,NEG,TOP,MID,BOT");
  REQUIRE(suite.size() == 6);

  ProbeOptions opt;
  opt.iqr = false;
  const auto recs = probe_checkpoint(s, p, 40, suite, data, dprime, opt);
  REQUIRE(recs.size() == 6);
  for (const auto& r : recs) {
    CHECK(r.step == 40);
    CHECK(r.n_batches_used == 15);
    CHECK(r.n_batches_filtered == 0);
    CHECK(r.obj_grad_norm >= 0.0);
    CHECK(r.target_grad_norm >= 0.0);
    CHECK(r.g_preconditioned == r.g_value);
    double sum = 0.0;
    for (const auto& [name, g] : r.group_g) sum += g;
    CHECK(sum == Approx(r.g_value).margin(1e-10));
  }
  CHECK(recs[1].g_value + recs[2].g_value == Approx(recs[0].g_value).margin(1e-10));
  CHECK(recs[3].g_value + recs[4].g_value + recs[5].g_value == Approx(recs[0].g_value).margin(1e-10));

  SECTION("default batch size and sample count") {
    DpoProbeData big{data.ref_params, support::random_pairs(rng, s, 700), 0.1};
    const auto r = probe_checkpoint(s, p, 0, std::vector<ObjectiveId>{ObjectiveId::TOT}, big, dprime);
    REQUIRE(r.size() == 1);
    CHECK(r[0].n_batches_used + r[0].n_batches_filtered == 125);
  }
  SECTION("preconditioned alignment") {
    ProbeOptions o2 = opt;
    o2.preconditioner = Eigen::VectorXd::Constant(p.size(), 2.0);
    const auto r = probe_checkpoint(s, p, 0, std::vector<ObjectiveId>{ObjectiveId::TOT}, data, dprime, o2);
    CHECK(r[0].g_preconditioned == Approx(2.0 * r[0].g_value).epsilon(1e-12));
  }
  SECTION("too few items") {
    DpoProbeData tiny{data.ref_params, support::random_pairs(rng, s, 3), 0.1};
    CHECK_THROWS_AS(probe_checkpoint(s, p, 0, suite, tiny, dprime), ProbeError);
  }
  SECTION("same seed, same records") {
    DpoProbeData big{data.ref_params, support::random_pairs(rng, s, 600), 0.1};
    ProbeOptions o;
    o.seed = 99;
    const auto a = probe_checkpoint(s, p, 0, suite, big, dprime, o);
    const auto b = probe_checkpoint(s, p, 0, suite, big, dprime, o);
    for (std::size_t k = 0; k < a.size(); ++k) CHECK(a[k].g_value == b[k].g_value);
  }
}

TEST_CASE("probe checkpoint on rollouts") {
  support::Rng rng(58);
  PolicySpec s;
  s.vocab_size = 4;
  s.context_len = 2;
  const auto p = support::random_params(s, rng);
  PpoProbeData data{support::random_rollouts(rng, s, p, 60), 0.2};
  const auto dprime = random_dprime(rng, s, 5);
  ProbeOptions opt;
  opt.iqr = false;
  const auto recs = probe_checkpoint(s, p, 1, parse_suite("TOT,POS,NEG"), data, dprime, opt);
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].n_batches_used == 10);
  CHECK(recs[1].g_value + recs[2].g_value == Approx(recs[0].g_value).margin(1e-10));
}

TEST_CASE("objective batch gradient of TOT is the loss gradient") {
  support::Rng rng(59);
  const auto s = support::random_spec(rng, PolicyKind::LinearSoftmax);
  const auto p = support::random_params(s, rng);
  DpoProbeData data{support::random_params(s, rng), support::random_pairs(rng, s, 8), 0.3};
  const std::vector<std::size_t> idx{1, 4, 6, 7};
  std::vector<PreferencePair> sub;
  for (auto k : idx) sub.push_back(data.items[k]);
  const auto g = objective_batch_gradient(s, p, data, idx, ObjectiveId::TOT);
  CHECK(support::rel_diff(g.values, dpo_loss(s, p, data.ref_params, sub, 0.3).grad.values) <= 1e-12);
}

TEST_CASE("suite parsing") {
  CHECK(parse_suite("TOT, NEG").size() == 2);
  CHECK(objective_id_from_string("MID") == ObjectiveId::MID);
  CHECK_THROWS_AS(parse_suite("TOT,XYZ"), ConfigError);
  CHECK_THROWS_AS(parse_suite(""), ConfigError);
}

TEST_CASE("taylor validator") {
  support::Rng rng(60);
  PolicySpec s;
  s.vocab_size = 4;
  s.context_len = 2;
  const auto p = support::random_params(s, rng);
  const auto dprime = random_dprime(rng, s, 6);
  const auto target = target_gradient(s, p, dprime);

  SECTION("zero step") {
    const auto r = taylor_validate(s, p, target, dprime, 0.0);
    CHECK(r.predicted_delta == 0.0);
    CHECK(r.actual_delta == 0.0);
  }
  SECTION("descent on the final-response NLL itself") {
    const auto r = taylor_validate(s, p, target, dprime, 1e-3);
    CHECK(r.actual_delta < 0.0);
    CHECK(r.predicted_delta == Approx(-1e-3 * target.values.squaredNorm()).epsilon(1e-12));
  }
  SECTION("residual is second order") {
    for (int i = 0; i < 10; ++i) {
      const auto pairs = support::random_pairs(rng, s, 6);
      const auto ref = support::random_params(s, rng);
      const auto obj = dpo_loss(s, p, ref, pairs, 1.0).grad;
      const double eta = 1e-2;
      const auto big = taylor_validate(s, p, obj, dprime, eta);
      const auto half = taylor_validate(s, p, obj, dprime, eta / 2.0);
      const double factor = big.residual / half.residual;
      CHECK(factor >= 3.0);
      CHECK(factor <= 5.0);
    }
  }
  SECTION("sign contract") {
    int checked = 0;
    for (int i = 0; i < 40; ++i) {
      const auto pairs = support::random_pairs(rng, s, 6);
      const auto ref = support::random_params(s, rng);
      const auto obj = dpo_loss(s, p, ref, pairs, 1.0).grad;
      const double G = gradient_alignment(obj, target);
      const auto r = taylor_validate(s, p, obj, dprime, 1e-3);
      if (std::abs(G) * 1e-3 > 10.0 * r.residual) {
        ++checked;
        CHECK((r.actual_delta < 0.0) == (G > 0.0));
      }
    }
    CHECK(checked > 20);
  }
}
