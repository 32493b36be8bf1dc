#include "podyn/probe.hpp"

#include "podyn/errors.hpp"
#include "podyn/stats.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

namespace podyn {
namespace {

constexpr std::size_t kDpoProbeBatch = 4;
constexpr std::size_t kPpoProbeBatch = 6;

template <typename T>
std::vector<T> gather(const std::vector<T>& items, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items.at(i));
  return out;
}

const LossResult& pick(const ComponentLosses& c, ObjectiveId id) {
  switch (id) {
    case ObjectiveId::POS: return c.pos;
    case ObjectiveId::NEG: return c.neg;
    case ObjectiveId::TOP: return c.top;
    case ObjectiveId::MID: return c.mid;
    case ObjectiveId::BOT: return c.bot;
    case ObjectiveId::TOT: break;
  }
  throw std::logic_error("TOT is not a component");
}

// Gradients of every suite entry on one batch, computing components once.
std::vector<GradVector> suite_gradients(const PolicySpec& spec, const ParamVector& params,
                                        const ProbeData& data,
                                        std::span<const std::size_t> batch,
                                        std::span<const ObjectiveId> suite) {
  const bool need_components = std::any_of(suite.begin(), suite.end(),
                                           [](ObjectiveId id) { return id != ObjectiveId::TOT; });
  const bool need_total = std::find(suite.begin(), suite.end(), ObjectiveId::TOT) != suite.end();
  std::optional<LossResult> total;
  std::optional<ComponentLosses> comps;
  if (const auto* dpo = std::get_if<DpoProbeData>(&data)) {
    const auto items = gather(dpo->items, batch);
    if (need_total) total = dpo_loss(spec, params, dpo->ref_params, items, dpo->beta);
    if (need_components) {
      comps = dpo_component_losses(spec, params, dpo->ref_params, items, dpo->beta);
    }
  } else {
    const auto& ppo = std::get<PpoProbeData>(data);
    const auto items = gather(ppo.items, batch);
    if (need_total) total = ppo_loss(spec, params, items, ppo.epsilon);
    if (need_components) comps = ppo_component_losses(spec, params, items, ppo.epsilon);
  }
  std::vector<GradVector> out;
  out.reserve(suite.size());
  for (auto id : suite) out.push_back(id == ObjectiveId::TOT ? total->grad : pick(*comps, id).grad);
  return out;
}

}  // namespace

const char* to_string(ObjectiveId id) {
  switch (id) {
    case ObjectiveId::TOT: return "TOT";
    case ObjectiveId::POS: return "POS";
    case ObjectiveId::NEG: return "NEG";
    case ObjectiveId::TOP: return "TOP";
    case ObjectiveId::MID: return "MID";
    case ObjectiveId::BOT: return "BOT";
  }
  return "TOT";
}

ObjectiveId objective_id_from_string(const std::string& s) {
  for (auto id : {ObjectiveId::TOT, ObjectiveId::POS, ObjectiveId::NEG, ObjectiveId::TOP,
                  ObjectiveId::MID, ObjectiveId::BOT}) {
    if (s == to_string(id)) return id;
  }
  throw ConfigError("probe.suite", "unknown objective id '" + s + "'");
}

std::vector<ObjectiveId> parse_suite(const std::string& comma_separated) {
  std::vector<ObjectiveId> out;
  std::stringstream ss(comma_separated);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = item.find_last_not_of(" \t");
    out.push_back(objective_id_from_string(item.substr(b, e - b + 1)));
  }
  if (out.empty()) throw ConfigError("probe.suite", "empty suite");
  return out;
}

double final_response_nll(const PolicySpec& spec, const ParamVector& params,
                          const FinalResponseSet& dprime) {
  if (dprime.items.empty()) throw ProbeError("final response set is empty");
  double sum = 0.0;
  for (const auto& [x, y] : dprime.items) sum += -log_prob(params, spec, x, y);
  return sum / static_cast<double>(dprime.items.size());
}

GradVector target_gradient(const PolicySpec& spec, const ParamVector& params,
                           const FinalResponseSet& dprime) {
  if (dprime.items.empty()) throw ProbeError("final response set is empty");
  GradVector g = zeros_like(params);
  const double w = -1.0 / static_cast<double>(dprime.items.size());
  for (const auto& [x, y] : dprime.items) {
    const std::vector<double> weights(y.size(), w);
    accumulate_grad_log_prob(params, spec, x, y, weights, g);
  }
  return g;
}

double gradient_alignment(const GradVector& obj_grad, const GradVector& target_grad,
                          const std::optional<std::string>& group) {
  return dot(obj_grad, target_grad, group);
}

IqrFilterResult iqr_filter(std::span<const double> batch_grad_norms) {
  if (batch_grad_norms.size() < 4) {
    throw PartitionError("IQR filter needs at least 4 batch norms, got " +
                         std::to_string(batch_grad_norms.size()));
  }
  const double alphas[] = {0.25, 0.75};
  const auto q = quantiles(batch_grad_norms, alphas);
  IqrFilterResult r;
  r.q1 = q[0];
  r.q3 = q[1];
  r.threshold = r.q3 + 1.5 * (r.q3 - r.q1);
  for (std::size_t i = 0; i < batch_grad_norms.size(); ++i) {
    if (batch_grad_norms[i] <= r.threshold) r.kept_indices.push_back(i);
  }
  return r;
}

AggregatedAlignment aggregate_alignment(std::span<const GradVector> batch_grads,
                                        const GradVector& target_grad, bool filter) {
  if (batch_grads.empty()) throw ProbeError("no probe batches");
  std::vector<std::size_t> kept(batch_grads.size());
  std::iota(kept.begin(), kept.end(), std::size_t{0});
  if (filter && batch_grads.size() >= 4) {
    std::vector<double> norms;
    norms.reserve(batch_grads.size());
    for (const auto& g : batch_grads) norms.push_back(norm(g));
    kept = iqr_filter(norms).kept_indices;
  }
  if (kept.empty()) throw ProbeError("every probe batch was filtered as an outlier");

  AggregatedAlignment a;
  a.mean_grad = GradVector(target_grad.layout);
  for (auto i : kept) a.mean_grad.values += batch_grads[i].values;
  a.mean_grad.values /= static_cast<double>(kept.size());
  a.g_value = gradient_alignment(a.mean_grad, target_grad);
  a.n_used = static_cast<int>(kept.size());
  a.n_filtered = static_cast<int>(batch_grads.size() - kept.size());
  return a;
}

GradVector objective_batch_gradient(const PolicySpec& spec, const ParamVector& params,
                                    const ProbeData& data, std::span<const std::size_t> batch,
                                    ObjectiveId id) {
  const ObjectiveId suite[] = {id};
  return std::move(suite_gradients(spec, params, data, batch, suite).front());
}

std::vector<std::vector<std::size_t>> probe_batches(std::size_t n_items,
                                                    const ProbeOptions& options,
                                                    std::size_t default_batch_size) {
  const std::size_t bs = options.batch_size ? options.batch_size : default_batch_size;
  std::vector<std::size_t> idx(n_items);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n_items > options.sample_count) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(options.sample_count);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start + bs <= idx.size(); start += bs) {
    batches.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                         idx.begin() + static_cast<std::ptrdiff_t>(start + bs));
  }
  return batches;
}

std::vector<AlignmentRecord> probe_checkpoint(const PolicySpec& spec, const ParamVector& params,
                                              long step, std::span<const ObjectiveId> suite,
                                              const ProbeData& data,
                                              const FinalResponseSet& dprime,
                                              const ProbeOptions& options) {
  if (suite.empty()) throw ProbeError("empty objective suite");
  const bool is_dpo = std::holds_alternative<DpoProbeData>(data);
  const std::size_t n_items = is_dpo ? std::get<DpoProbeData>(data).items.size()
                                     : std::get<PpoProbeData>(data).items.size();
  const auto batches = probe_batches(n_items, options, is_dpo ? kDpoProbeBatch : kPpoProbeBatch);
  if (batches.empty()) throw ProbeError("not enough probe items for a single batch");

  const GradVector target = target_gradient(spec, params, dprime);
  std::vector<std::vector<GradVector>> per_objective(suite.size());
  for (const auto& b : batches) {
    auto grads = suite_gradients(spec, params, data, b, suite);
    for (std::size_t k = 0; k < suite.size(); ++k) per_objective[k].push_back(std::move(grads[k]));
  }

  std::vector<AlignmentRecord> records;
  records.reserve(suite.size());
  for (std::size_t k = 0; k < suite.size(); ++k) {
    const auto agg = aggregate_alignment(per_objective[k], target, options.iqr);
    AlignmentRecord rec;
    rec.step = step;
    rec.objective = suite[k];
    rec.g_value = agg.g_value;
    rec.n_batches_used = agg.n_used;
    rec.n_batches_filtered = agg.n_filtered;
    rec.obj_grad_norm = norm(agg.mean_grad);
    rec.target_grad_norm = norm(target);
    rec.g_preconditioned =
        options.preconditioner
            ? target.values.dot(options.preconditioner->cwiseProduct(agg.mean_grad.values))
            : agg.g_value;
    for (const auto& g : params.layout.groups()) {
      rec.group_g.emplace_back(g.name, gradient_alignment(agg.mean_grad, target, g.name));
    }
    rec.family = is_dpo ? "dpo" : "ppo";
    records.push_back(std::move(rec));
  }
  return records;
}

TaylorCheck taylor_validate(const PolicySpec& spec, const ParamVector& params,
                            const GradVector& objective_grad, const FinalResponseSet& dprime,
                            double eta) {
  if (!(eta >= 0.0)) throw std::domain_error("eta must be >= 0");
  TaylorCheck c;
  const double g = gradient_alignment(objective_grad, target_gradient(spec, params, dprime));
  c.predicted_delta = -eta * g;
  ParamVector stepped = params;
  stepped.values -= eta * objective_grad.values;
  c.actual_delta = final_response_nll(spec, stepped, dprime) - final_response_nll(spec, params, dprime);
  c.residual = std::abs(c.actual_delta - c.predicted_delta);
  return c;
}

}  // namespace podyn
