#pragma once

#include "podyn/config.hpp"

#include "json.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace podyn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitAbort = 3;
inline constexpr int kExitProbeLoad = 4;

/// Artifact locations under an experiment's output root.
struct Paths {
  std::filesystem::path root;
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path run() const { return root / "run"; }
  std::filesystem::path trace() const { return root / "probe" / "alignment.jsonl"; }
  std::filesystem::path report() const { return root / "report"; }
};

// Data files: one JSON object per line.
void write_pairs(const std::filesystem::path& p, std::span<const PreferencePair> pairs);
std::vector<PreferencePair> read_pairs(const std::filesystem::path& p);
void write_prompts(const std::filesystem::path& p, std::span<const TokenSequence> prompts);
std::vector<TokenSequence> read_prompts(const std::filesystem::path& p);

// Each command returns a process exit code and reports errors on stderr.

/// prompts_train.jsonl, prompts_eval.jsonl, pairs.jsonl and manifest.json
/// under <root>/data.
int cmd_gen_data(const ExperimentConfig& config);

/// Trains into <root>/run, reading data from `data_dir` (default <root>/data).
int cmd_train(const ExperimentConfig& config,
              const std::optional<std::filesystem::path>& resume = std::nullopt,
              const std::optional<std::filesystem::path>& data_dir = std::nullopt);

/// Probes every checkpoint matching `pattern` and writes an alignment trace.
int cmd_probe(const ExperimentConfig& config, const std::string& pattern,
              const std::optional<std::filesystem::path>& out = std::nullopt);

/// <family>_<ID>.csv per suite member and <family>_alignment.svg per family.
int cmd_report(const std::vector<std::filesystem::path>& traces, const std::filesystem::path& out_dir);

/// Runs each variant of `matrix` on top of `base_doc` with shared data and
/// seeds; writes <root>/ablate/summary.csv after every variant.
int cmd_ablate(const nlohmann::json& base_doc, const nlohmann::json& matrix);

/// Parses argv and dispatches.
int run(int argc, char** argv);

}  // namespace podyn::cli
