#include "podyn/config.hpp"

#include "podyn/errors.hpp"
#include "podyn/probe.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace podyn {
namespace {

using nlohmann::json;

/// Reads one JSON object, tracking which keys were consumed so leftovers can
/// be reported as unknown fields.
class Section {
 public:
  Section(json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (j_.is_null()) j_ = json::object();
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  void get(const std::string& key, int& out) { out = static_cast<int>(integer(key, out)); }
  void get(const std::string& key, long& out) { out = integer(key, out); }

  void get(const std::string& key, std::uint64_t& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<long long>() < 0)) {
      throw ConfigError(field(key), "expected a non-negative integer");
    }
    out = v->get<std::uint64_t>();
  }

  void get(const std::string& key, double& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_number()) throw ConfigError(field(key), "expected a number");
    out = v->get<double>();
  }

  void get(const std::string& key, bool& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
    out = v->get<bool>();
  }

  void get(const std::string& key, std::string& out) {
    const json* v = take(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError(field(key), "expected a string");
    out = v->get<std::string>();
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : json::object(), field(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(field(k), "unknown field");
    }
  }

 private:
  const json* take(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  long integer(const std::string& key, long fallback) {
    const json* v = take(key);
    if (!v) return fallback;
    if (v->is_number_integer()) return v->get<long>();
    if (v->is_number_float()) {
      const double d = v->get<double>();
      if (d == static_cast<double>(static_cast<long>(d))) return static_cast<long>(d);
    }
    throw ConfigError(field(key), "expected an integer");
  }

  json j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto parse_enum(const std::string& field, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(field, e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version", "expected " + std::to_string(kConfigSchemaVersion));
  }
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
  if (task.vocab_size < 2) throw ConfigError("task.vocab_size", "must be >= 2");
  if (task.prompt_len < 1) throw ConfigError("task.prompt_len", "must be >= 1");
  if (task.resp_len < 1) throw ConfigError("task.resp_len", "must be >= 1");
  if (task.feature_dim < 1) throw ConfigError("task.feature_dim", "must be >= 1");
  if (task.reward_levels < 0) throw ConfigError("task.reward_levels", "must be >= 0");
  if (task.n_train_prompts < 1) throw ConfigError("task.n_train_prompts", "must be >= 1");
  if (task.n_eval_prompts < 1) throw ConfigError("task.n_eval_prompts", "must be >= 1");
  if (task.n_pairs < 1) throw ConfigError("task.n_pairs", "must be >= 1");
  if (!(task.overlap_fraction >= 0.0 && task.overlap_fraction <= 1.0)) {
    throw ConfigError("task.overlap_fraction", "must lie in [0, 1]");
  }
  if (train.policy.vocab_size != task.vocab_size) {
    throw ConfigError("policy.vocab_size", "must equal task.vocab_size");
  }
  if (task.prompt_len > train.policy.context_len) {
    throw ConfigError("policy.context_len", "must be >= task.prompt_len");
  }
  if (train.sampler.max_len != task.resp_len) {
    throw ConfigError("sampler.max_len", "must equal task.resp_len");
  }
  train.validate();
  if (!(train.sampler.top_p > 0.0 && train.sampler.top_p <= 1.0)) {
    throw ConfigError("sampler.top_p", "must lie in (0, 1]");
  }
  if (!(train.sampler.temperature >= 0.0)) throw ConfigError("sampler.temperature", "must be >= 0");
  parse_enum("probe.suite", [&] { return parse_suite(probe.suite); });
  if (probe.sample_count < 1) throw ConfigError("probe.sample_count", "must be >= 1");
  if (probe.batch_size < 0) throw ConfigError("probe.batch_size", "must be >= 0");
  if (probe.every < 0) throw ConfigError("probe.every", "must be >= 0");
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "");
  if (!root.has("schema_version")) throw ConfigError("schema_version", "missing");
  root.get("schema_version", c.schema_version);
  if (c.schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version", "expected " + std::to_string(kConfigSchemaVersion) +
                                            ", got " + std::to_string(c.schema_version));
  }
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);

  auto task = root.sub("task");
  task.get("vocab_size", c.task.vocab_size);
  task.get("prompt_len", c.task.prompt_len);
  task.get("resp_len", c.task.resp_len);
  task.get("feature_dim", c.task.feature_dim);
  task.get("reward_levels", c.task.reward_levels);
  task.get("n_train_prompts", c.task.n_train_prompts);
  task.get("n_eval_prompts", c.task.n_eval_prompts);
  task.get("n_pairs", c.task.n_pairs);
  task.get("overlap_fraction", c.task.overlap_fraction);
  task.finish();

  auto& t = c.train;
  t.seed = c.seed;
  t.policy.seed = c.seed;
  t.policy.vocab_size = c.task.vocab_size;
  auto policy = root.sub("policy");
  std::string kind = to_string(t.policy.kind);
  policy.get("kind", kind);
  t.policy.kind = parse_enum("policy.kind", [&] { return policy_kind_from_string(kind); });
  policy.get("context_len", t.policy.context_len);
  policy.get("embed_dim", t.policy.embed_dim);
  policy.get("init_scale", t.init_scale);
  policy.finish();

  auto sampler = root.sub("sampler");
  sampler.get("temperature", t.sampler.temperature);
  sampler.get("top_p", t.sampler.top_p);
  sampler.finish();
  t.sampler.max_len = c.task.resp_len;

  auto obj = root.sub("objective");
  std::string id = to_string(t.objective);
  obj.get("id", id);
  t.objective = objective_kind_from_string(id);
  obj.get("beta", t.beta);
  obj.get("epsilon", t.epsilon);
  std::string target = to_string(t.cppo_target);
  obj.get("cppo_target", target);
  if (target == "top") {
    t.cppo_target = CppoTarget::Top;
  } else if (target == "mid") {
    t.cppo_target = CppoTarget::Mid;
  } else {
    throw ConfigError("objective.cppo_target", "expected 'top' or 'mid'");
  }
  auto sched = obj.sub("schedule");
  if (sched.has("kind")) {
    std::string sk;
    sched.get("kind", sk);
    t.schedule.kind = parse_enum("objective.schedule.kind", [&] { return schedule_kind_from_string(sk); });
  } else if (t.objective == ObjectiveKind::Cdpo) {
    t.schedule.kind = ScheduleKind::CdpoRamp;
  } else if (t.objective == ObjectiveKind::Hppo) {
    t.schedule.kind = ScheduleKind::HppoSine;
  }
  sched.get("t1", t.schedule.t1);
  sched.get("t2", t.schedule.t2);
  sched.get("t3", t.schedule.t3);
  sched.get("tau", t.schedule.tau);
  sched.get("value", t.schedule.value);
  sched.finish();
  obj.finish();

  auto opt = root.sub("optimizer");
  std::string okind = to_string(t.optimizer.kind);
  opt.get("kind", okind);
  t.optimizer.kind = optimizer_kind_from_string(okind);
  opt.get("lr", t.optimizer.lr);
  opt.get("weight_decay", t.optimizer.weight_decay);
  opt.get("beta1", t.optimizer.beta1);
  opt.get("beta2", t.optimizer.beta2);
  opt.get("eps", t.optimizer.eps);
  std::string lrs = to_string(t.lr_schedule);
  opt.get("schedule", lrs);
  t.lr_schedule = lr_schedule_from_string(lrs);
  opt.get("warmup_ratio", t.warmup_ratio);
  opt.get("clip_norm", t.clip_norm);
  opt.finish();

  auto tr = root.sub("training");
  tr.get("steps", t.steps);
  tr.get("epochs", t.epochs);
  tr.get("batch_size", t.batch_size);
  tr.get("sft_steps", t.sft_steps);
  tr.get("sft_lr", t.sft_lr);
  tr.get("refresh_every", t.refresh_every);
  tr.get("ppo_epochs", t.ppo_epochs);
  tr.get("rollouts_per_step", t.rollouts_per_step);
  tr.get("gamma", t.gamma);
  tr.get("position_baseline", t.position_baseline);
  tr.get("checkpoint_every", t.checkpoint_every);
  tr.get("wall_clock", t.wall_clock);
  tr.finish();

  auto pr = root.sub("probe");
  pr.get("suite", c.probe.suite);
  pr.get("sample_count", c.probe.sample_count);
  pr.get("batch_size", c.probe.batch_size);
  pr.get("every", c.probe.every);
  pr.get("iqr", c.probe.iqr);
  pr.get("precondition", c.probe.precondition);
  pr.finish();
  root.finish();

  c.validate();
  c.train.config_hash = config_hash(c);
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  return json{
      {"schema_version", c.schema_version},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"task",
       {{"vocab_size", c.task.vocab_size},
        {"prompt_len", c.task.prompt_len},
        {"resp_len", c.task.resp_len},
        {"feature_dim", c.task.feature_dim},
        {"reward_levels", c.task.reward_levels},
        {"n_train_prompts", c.task.n_train_prompts},
        {"n_eval_prompts", c.task.n_eval_prompts},
        {"n_pairs", c.task.n_pairs},
        {"overlap_fraction", c.task.overlap_fraction}}},
      {"policy",
       {{"kind", to_string(t.policy.kind)},
        {"context_len", t.policy.context_len},
        {"embed_dim", t.policy.embed_dim},
        {"init_scale", t.init_scale}}},
      {"sampler", {{"temperature", t.sampler.temperature}, {"top_p", t.sampler.top_p}}},
      {"objective",
       {{"id", to_string(t.objective)},
        {"beta", t.beta},
        {"epsilon", t.epsilon},
        {"cppo_target", to_string(t.cppo_target)},
        {"schedule",
         {{"kind", to_string(t.schedule.kind)},
          {"t1", t.schedule.t1},
          {"t2", t.schedule.t2},
          {"t3", t.schedule.t3},
          {"tau", t.schedule.tau},
          {"value", t.schedule.value}}}}},
      {"optimizer",
       {{"kind", to_string(t.optimizer.kind)},
        {"lr", t.optimizer.lr},
        {"weight_decay", t.optimizer.weight_decay},
        {"beta1", t.optimizer.beta1},
        {"beta2", t.optimizer.beta2},
        {"eps", t.optimizer.eps},
        {"schedule", to_string(t.lr_schedule)},
        {"warmup_ratio", t.warmup_ratio},
        {"clip_norm", t.clip_norm}}},
      {"training",
       {{"steps", t.steps},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"sft_steps", t.sft_steps},
        {"sft_lr", t.sft_lr},
        {"refresh_every", t.refresh_every},
        {"ppo_epochs", t.ppo_epochs},
        {"rollouts_per_step", t.rollouts_per_step},
        {"gamma", t.gamma},
        {"position_baseline", t.position_baseline},
        {"checkpoint_every", t.checkpoint_every},
        {"wall_clock", t.wall_clock}}},
      {"probe",
       {{"suite", c.probe.suite},
        {"sample_count", c.probe.sample_count},
        {"batch_size", c.probe.batch_size},
        {"every", c.probe.every},
        {"iqr", c.probe.iqr},
        {"precondition", c.probe.precondition}}},
  };
}

void set_path(json& doc, const std::string& path, json value) {
  json* node = &doc;
  std::size_t pos = 0;
  while (true) {
    const auto dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw ConfigError(path, "empty path component");
    if (node->is_null()) *node = json::object();
    if (!node->is_object()) throw ConfigError(path, "parent is not an object");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key.path=value");
  }
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw;
  set_path(doc, assignment.substr(0, eq), std::move(value));
}

ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config", "cannot open " + path.string());
  json doc = json::parse(f, nullptr, /*allow_exceptions=*/false, /*ignore_comments=*/true);
  if (doc.is_discarded()) throw ConfigError("config", path.string() + " is not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

std::string config_hash(const ExperimentConfig& c) {
  json j = config_to_json(c);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

std::filesystem::path output_root(const ExperimentConfig& c) {
  std::filesystem::path p(c.output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("PODYN_OUTPUT_ROOT"); root && *root) return std::filesystem::path(root) / p;
  }
  return p;
}

SyntheticTask make_task(const ExperimentConfig& c) {
  return SyntheticTask::make(c.seed, c.task.vocab_size, c.task.prompt_len, c.task.resp_len,
                             c.task.feature_dim, c.task.reward_levels);
}

}  // namespace podyn
