#include "podyn/cli.hpp"

#include "podyn/errors.hpp"
#include "podyn/probe.hpp"
#include "podyn/report.hpp"
#include "podyn/synth.hpp"

#include "CLI11.hpp"

#include <glob.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

namespace podyn::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr std::uint64_t kSaltTrainPrompts = 0xD1;
constexpr std::uint64_t kSaltEvalPrompts = 0xD2;
constexpr std::uint64_t kSaltPairs = 0xD3;
constexpr std::uint64_t kSaltProbe = 0x9B;

void note(const std::string& cmd, const std::string& msg) { std::cerr << "podyn " << cmd << ": " << msg << '\n'; }

template <typename F>
int guarded(const std::string& cmd, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    note(cmd, std::string("config error: ") + e.what());
    return kExitConfig;
  } catch (const TrainingAbort& e) {
    note(cmd, std::string("training aborted at ") + e.what());
    return kExitAbort;
  } catch (const CheckpointError& e) {
    note(cmd, std::string("checkpoint error: ") + e.what());
    return kExitProbeLoad;
  } catch (const std::exception& e) {
    note(cmd, std::string("error: ") + e.what());
    return kExitFailure;
  }
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("data", "cannot open " + p.string() + " (run gen-data first)");
  std::vector<json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) {
      throw ConfigError("data", p.string() + ":" + std::to_string(lineno) + " is not valid JSON");
    }
    out.push_back(std::move(j));
  }
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

TokenSequence tokens(const json& j, const char* key) {
  try {
    return j.at(key).get<TokenSequence>();
  } catch (const json::exception&) {
    throw ConfigError("data", std::string("record lacks token list '") + key + "'");
  }
}

TrainResult run_training(const ExperimentConfig& c, const fs::path& data_dir, const fs::path& run_dir,
                         const Checkpoint* resume) {
  TrainConfig tc = c.train;
  tc.out_dir = run_dir;
  if (!resume) fs::remove_all(run_dir / "checkpoints");
  if (is_online(tc.objective)) {
    const auto prompts = read_prompts(data_dir / "prompts_train.jsonl");
    return train_online(tc, make_task(c), prompts, {}, resume);
  }
  const auto pairs = read_pairs(data_dir / "pairs.jsonl");
  return train_offline(tc, pairs, {}, resume);
}

std::vector<fs::path> expand_glob(const std::string& pattern) {
  glob_t g{};
  std::vector<fs::path> out;
  if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

}  // namespace

void write_pairs(const fs::path& p, std::span<const PreferencePair> pairs) {
  std::ostringstream os;
  for (const auto& pr : pairs) os << json{{"x", pr.x}, {"y_plus", pr.y_plus}, {"y_minus", pr.y_minus}}.dump() << '\n';
  write_text(p, os.str());
}

std::vector<PreferencePair> read_pairs(const fs::path& p) {
  std::vector<PreferencePair> out;
  for (const auto& j : read_jsonl(p)) out.push_back({tokens(j, "x"), tokens(j, "y_plus"), tokens(j, "y_minus")});
  return out;
}

void write_prompts(const fs::path& p, std::span<const TokenSequence> prompts) {
  std::ostringstream os;
  for (const auto& x : prompts) os << json{{"x", x}}.dump() << '\n';
  write_text(p, os.str());
}

std::vector<TokenSequence> read_prompts(const fs::path& p) {
  std::vector<TokenSequence> out;
  for (const auto& j : read_jsonl(p)) out.push_back(tokens(j, "x"));
  return out;
}

int cmd_gen_data(const ExperimentConfig& c) {
  return guarded("gen-data", [&] {
    c.validate();
    const Paths paths{output_root(c)};
    const auto task = make_task(c);
    const auto train = make_train_prompts(task, static_cast<std::size_t>(c.task.n_train_prompts),
                                          derive_seed(c.seed, kSaltTrainPrompts));
    const auto eval = make_eval_prompts(task, static_cast<std::size_t>(c.task.n_eval_prompts), train,
                                        c.task.overlap_fraction, derive_seed(c.seed, kSaltEvalPrompts));
    std::vector<TokenSequence> pair_prompts(static_cast<std::size_t>(c.task.n_pairs));
    for (std::size_t i = 0; i < pair_prompts.size(); ++i) pair_prompts[i] = train[i % train.size()];
    const auto behavior = init_params(c.train.policy, c.train.init_scale);
    const auto pairs = gen_pairs(task, c.train.policy, behavior, pair_prompts, c.train.sampler,
                                 derive_seed(c.seed, kSaltPairs));

    write_prompts(paths.data() / "prompts_train.jsonl", train);
    write_prompts(paths.data() / "prompts_eval.jsonl", eval);
    write_pairs(paths.data() / "pairs.jsonl", pairs);

    json files = json::array();
    const std::pair<const char*, std::size_t> written[] = {
        {"pairs.jsonl", pairs.size()}, {"prompts_eval.jsonl", eval.size()}, {"prompts_train.jsonl", train.size()}};
    for (const auto& [name, n] : written) {
      files.push_back({{"path", name}, {"records", n}, {"sha256", file_sha256(paths.data() / name)}});
    }
    const json manifest = {{"schema_version", kConfigSchemaVersion},
                           {"seed", c.seed},
                           {"config_hash", config_hash(c)},
                           {"task", config_to_json(c).at("task")},
                           {"files", files}};
    write_text(paths.data() / "manifest.json", manifest.dump(2) + "\n");
    note("gen-data", std::to_string(pairs.size()) + " pairs, " + std::to_string(train.size()) +
                         " train / " + std::to_string(eval.size()) + " eval prompts in " + paths.data().string());
    return kExitOk;
  });
}

int cmd_train(const ExperimentConfig& c, const std::optional<fs::path>& resume,
              const std::optional<fs::path>& data_dir) {
  return guarded("train", [&] {
    c.validate();
    const Paths paths{output_root(c)};
    std::optional<Checkpoint> from;
    if (resume) from = load_checkpoint(*resume);
    const auto result = run_training(c, data_dir.value_or(paths.data()), paths.run(), from ? &*from : nullptr);
    std::ostringstream msg;
    msg << to_string(c.train.objective) << ": " << result.metrics.size() << " steps";
    if (!result.metrics.empty()) msg << ", final loss " << result.metrics.back().loss;
    msg << ", " << result.checkpoint_paths.size() << " checkpoints in " << paths.run().string();
    note("train", msg.str());
    return kExitOk;
  });
}

int cmd_probe(const ExperimentConfig& c, const std::string& pattern, const std::optional<fs::path>& out) {
  return guarded("probe", [&]() -> int {
    c.validate();
    const Paths paths{output_root(c)};
    const auto files = expand_glob(pattern);
    if (files.empty()) throw ConfigError("checkpoints", "no files match '" + pattern + "'");

    std::vector<std::pair<Checkpoint, fs::path>> ckpts;
    for (const auto& f : files) {
      try {
        ckpts.emplace_back(load_checkpoint(f), f);
      } catch (const std::exception& e) {
        note("probe", std::string("cannot load checkpoint: ") + e.what());
        return kExitProbeLoad;
      }
      if (!(ckpts.back().first.spec == c.train.policy)) {
        note("probe", f.string() + ": policy does not match the config");
        return kExitProbeLoad;
      }
    }
    std::stable_sort(ckpts.begin(), ckpts.end(),
                     [](const auto& a, const auto& b) { return a.first.step < b.first.step; });

    const auto suite = parse_suite(c.probe.suite);
    const auto eval = read_prompts(paths.data() / "prompts_eval.jsonl");
    const auto& last = ckpts.back();
    const auto dprime = build_final_responses(last.first.params, c.train.policy, eval, c.task.resp_len,
                                              last.second.filename().string());
    const bool online = is_online(c.train.objective);
    std::vector<PreferencePair> pairs;
    std::vector<TokenSequence> train_prompts;
    if (online) {
      train_prompts = read_prompts(paths.data() / "prompts_train.jsonl");
    } else {
      pairs = read_pairs(paths.data() / "pairs.jsonl");
    }
    const auto task = make_task(c);

    std::ostringstream trace;
    std::size_t n_records = 0;
    for (const auto& [ck, path] : ckpts) {
      if (c.probe.every > 0 && ck.step % c.probe.every != 0) continue;
      const std::uint64_t seed = derive_seed(c.seed, kSaltProbe, static_cast<std::uint64_t>(ck.step));
      ProbeData data;
      if (online) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> pick(0, train_prompts.size() - 1);
        std::vector<TokenSequence> xs(static_cast<std::size_t>(c.probe.sample_count));
        for (auto& x : xs) x = train_prompts[pick(rng)];
        data = PpoProbeData{gen_rollouts(ck.params, c.train.policy, task, xs, c.train.sampler,
                                         derive_seed(seed, 1), c.train.gamma),
                            c.train.epsilon};
      } else {
        const auto it = ck.extras.find("ref_params");
        if (it == ck.extras.end()) {
          note("probe", path.string() + ": no reference parameters stored");
          return kExitProbeLoad;
        }
        data = DpoProbeData{ParamVector(it->second, ck.params.layout), pairs, c.train.beta};
      }
      ProbeOptions opt;
      opt.sample_count = static_cast<std::size_t>(c.probe.sample_count);
      opt.batch_size = static_cast<std::size_t>(c.probe.batch_size);
      opt.seed = seed;
      opt.iqr = c.probe.iqr;
      if (c.probe.precondition) opt.preconditioner = preconditioner(ck.optimizer, ck.params.size());
      auto records = probe_checkpoint(c.train.policy, ck.params, ck.step, suite, data, dprime, opt);
      const auto delta = ck.scalars.find("loss_delta");
      for (auto& r : records) {
        r.checkpoint = path.filename().string();
        r.family = to_string(c.train.objective);
        r.loss_increased = delta != ck.scalars.end() && delta->second > 0.0;
        trace << record_to_json(r).dump() << '\n';
        ++n_records;
      }
    }
    const fs::path target = out.value_or(paths.trace());
    write_text(target, trace.str());
    note("probe", std::to_string(n_records) + " records from " + std::to_string(ckpts.size()) +
                      " checkpoints -> " + target.string());
    return kExitOk;
  });
}

int cmd_report(const std::vector<fs::path>& traces, const fs::path& out_dir) {
  return guarded("report", [&]() -> int {
    if (traces.empty()) throw ConfigError("trace", "no trace files given");
    // family -> records
    std::map<std::string, std::vector<AlignmentRecord>> by_family;
    std::size_t total = 0;
    for (const auto& t : traces) {
      for (const auto& j : read_jsonl(t)) {
        auto r = record_from_json(j);
        by_family[r.family].push_back(std::move(r));
        ++total;
      }
    }
    if (total == 0) throw ConfigError("trace", "no records");
    fs::create_directories(out_dir);
    std::size_t n_csv = 0;
    for (auto& [family, recs] : by_family) {
      std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
      std::map<ObjectiveId, std::vector<AlignmentRecord>> by_obj;
      for (const auto& r : recs) by_obj[r.objective].push_back(r);
      SeriesMap series;
      for (const auto& [id, rs] : by_obj) {
        write_text(out_dir / (family + "_" + to_string(id) + ".csv"), render_alignment_csv(rs, recs));
        ++n_csv;
        auto& s = series[to_string(id)];
        for (const auto& r : rs) s.emplace_back(r.step, r.g_value);
      }
      write_text(out_dir / (family + "_alignment.svg"),
                 render_alignment_svg(family + ": gradient alignment G vs step", series));
    }
    note("report", std::to_string(n_csv) + " CSV files and " + std::to_string(by_family.size()) +
                       " SVG plots in " + out_dir.string());
    return kExitOk;
  });
}

int cmd_ablate(const json& base_doc, const json& matrix) {
  return guarded("ablate", [&]() -> int {
    const auto base = config_from_json(base_doc);
    const Paths bp{output_root(base)};
    if (!matrix.is_object()) throw ConfigError("matrix", "expected an object");
    if (matrix.value("schema_version", 0) != kConfigSchemaVersion) {
      throw ConfigError("matrix.schema_version", "expected " + std::to_string(kConfigSchemaVersion));
    }
    const double step_scale = matrix.value("step_scale", 1.0);
    if (!(step_scale > 0.0)) throw ConfigError("matrix.step_scale", "must be > 0");
    if (!matrix.contains("variants") || !matrix.at("variants").is_array() || matrix.at("variants").empty()) {
      throw ConfigError("matrix.variants", "expected a non-empty list");
    }

    // Validate every variant before running any of them.
    std::vector<std::pair<std::string, json>> variants;
    for (std::size_t i = 0; i < matrix.at("variants").size(); ++i) {
      const auto& v = matrix.at("variants")[i];
      const std::string field = "matrix.variants[" + std::to_string(i) + "]";
      if (!v.is_object() || !v.contains("name") || !v.at("name").is_string()) {
        throw ConfigError(field + ".name", "missing");
      }
      const auto name = v.at("name").get<std::string>();
      if (name.empty() || name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-") != std::string::npos) {
        throw ConfigError(field + ".name", "use letters, digits, '_', '.' or '-'");
      }
      for (const auto& [n, _] : variants) {
        if (n == name) throw ConfigError(field + ".name", "duplicate variant '" + name + "'");
      }
      json doc = base_doc;
      if (v.contains("set")) {
        if (!v.at("set").is_object()) throw ConfigError(field + ".set", "expected an object");
        for (const auto& [k, val] : v.at("set").items()) {
          if (k.rfind("task.", 0) == 0 || k == "seed" || k == "output_dir") {
            throw ConfigError(field + ".set." + k, "variants share data, seed and output root");
          }
          set_path(doc, k, val);
        }
      }
      if (step_scale != 1.0 && doc.contains("objective") && doc["objective"].contains("schedule")) {
        auto& s = doc["objective"]["schedule"];
        for (const char* key : {"t1", "t2", "t3"}) {
          if (s.contains(key) && s[key].is_number()) s[key] = s[key].get<double>() * step_scale;
        }
      }
      doc["output_dir"] = (bp.root / "ablate" / name).string();
      try {
        config_from_json(doc);
      } catch (const ConfigError& e) {
        throw ConfigError(field + "." + e.field(), e.what());
      }
      variants.emplace_back(name, std::move(doc));
    }

    if (!fs::exists(bp.data() / "manifest.json")) {
      if (const int rc = cmd_gen_data(base); rc != kExitOk) return rc;
    }
    const auto eval = read_prompts(bp.data() / "prompts_eval.jsonl");
    const auto task = make_task(base);

    const fs::path summary_path = bp.root / "ablate" / "summary.csv";
    std::ostringstream summary;
    summary << "variant,objective,status,exit_code,peak_synthetic_oracle_reward,peak_step,"
               "final_synthetic_oracle_reward,final_step,metrics_sha256\n";
    int first_failure = kExitOk;
    for (const auto& [name, doc] : variants) {
      const auto cfg = config_from_json(doc);
      const Paths vp{output_root(cfg)};
      std::string status = "ok";
      int code = kExitOk;
      std::vector<std::pair<long, double>> rewards;
      try {
        const auto result = run_training(cfg, bp.data(), vp.run(), nullptr);
        for (const auto& ck : result.checkpoints) {
          rewards.emplace_back(ck.step, mean_greedy_reward(task, ck.params, cfg.train.policy, eval, cfg.task.resp_len));
        }
      } catch (const TrainingAbort& e) {
        status = "aborted";
        code = kExitAbort;
        note("ablate", name + ": " + e.what());
      } catch (const std::exception& e) {
        status = "failed";
        code = kExitFailure;
        note("ablate", name + ": " + e.what());
      }
      if (code != kExitOk && first_failure == kExitOk) first_failure = code;

      std::ostringstream per;
      per << "step,synthetic_oracle_reward\n";
      for (const auto& [s, r] : rewards) per << s << ',' << format_double(r) << '\n';
      write_text(vp.root / "synthetic_oracle_reward.csv", per.str());

      summary << csv_field(name) << ',' << to_string(cfg.train.objective) << ',' << status << ',' << code << ',';
      if (!rewards.empty()) {
        const auto peak = std::max_element(rewards.begin(), rewards.end(),
                                           [](const auto& a, const auto& b) { return a.second < b.second; });
        summary << format_double(peak->second) << ',' << peak->first << ','
                << format_double(rewards.back().second) << ',' << rewards.back().first;
      } else {
        summary << ",,,";
      }
      const auto metrics = vp.run() / "metrics.jsonl";
      summary << ',' << (fs::exists(metrics) ? file_sha256(metrics) : std::string()) << '\n';
      write_text(summary_path, summary.str());
    }
    note("ablate", std::to_string(variants.size()) + " variants, summary in " + summary_path.string());
    return first_failure;
  });
}

int run(int argc, char** argv) {
  CLI::App app{"Preference-optimization learning dynamics on toy policies"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  const auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--set", overrides, "override a config field, e.g. --set training.steps=100");
  };

  auto* gen = app.add_subcommand("gen-data", "write prompts, preference pairs and a manifest");
  add_config(gen);

  auto* train = app.add_subcommand("train", "train the configured objective");
  add_config(train);
  std::string resume;
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* probe = app.add_subcommand("probe", "measure gradient alignment on checkpoints");
  add_config(probe);
  std::string pattern, probe_out;
  probe->add_option("--checkpoints", pattern, "checkpoint glob")->required();
  probe->add_option("--out", probe_out, "trace file (default <root>/probe/alignment.jsonl)");

  auto* report = app.add_subcommand("report", "CSV tables and SVG plots from alignment traces");
  std::vector<std::string> traces;
  std::string report_out;
  report->add_option("--trace", traces, "alignment trace (repeatable)")->required();
  report->add_option("--out", report_out, "output directory")->required();

  auto* ablate = app.add_subcommand("ablate", "run a variant matrix with shared seeds");
  add_config(ablate);
  std::string matrix_path;
  ablate->add_option("--matrix", matrix_path, "variant matrix (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (report->parsed()) {
    std::vector<fs::path> paths(traces.begin(), traces.end());
    return cmd_report(paths, report_out);
  }

  const auto read_doc = [&](const std::string& p, const std::string& what) {
    std::ifstream f(p);
    if (!f) throw ConfigError(what, "cannot open " + p);
    json doc = json::parse(f, nullptr, /*allow_exceptions=*/false, /*ignore_comments=*/true);
    if (doc.is_discarded()) throw ConfigError(what, p + " is not valid JSON");
    return doc;
  };

  if (ablate->parsed()) {
    return guarded("ablate", [&] {
      json base = read_doc(config_path, "config");
      for (const auto& o : overrides) apply_override(base, o);
      return cmd_ablate(base, read_doc(matrix_path, "matrix"));
    });
  }

  std::optional<ExperimentConfig> cfg;
  const int rc = guarded(app.get_subcommands().front()->get_name(), [&] {
    cfg = load_config(config_path, overrides);
    return kExitOk;
  });
  if (rc != kExitOk) return rc;

  if (gen->parsed()) return cmd_gen_data(*cfg);
  if (train->parsed()) {
    return cmd_train(*cfg, resume.empty() ? std::nullopt : std::optional<fs::path>(resume));
  }
  return cmd_probe(*cfg, pattern, probe_out.empty() ? std::nullopt : std::optional<fs::path>(probe_out));
}

}  // namespace podyn::cli
