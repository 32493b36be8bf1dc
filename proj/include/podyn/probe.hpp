#pragma once

#include "podyn/objectives.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace podyn {

/// Which piece of an objective a probe measures.
enum class ObjectiveId { TOT, POS, NEG, TOP, MID, BOT };

const char* to_string(ObjectiveId id);
/// Throws ConfigError on an unknown label.
ObjectiveId objective_id_from_string(const std::string& s);
std::vector<ObjectiveId> parse_suite(const std::string& comma_separated);

/// One gradient-alignment measurement at one checkpoint.
struct AlignmentRecord {
  long step = 0;
  ObjectiveId objective = ObjectiveId::TOT;
  /// dot(mean kept batch gradient, target gradient).
  double g_value = 0.0;
  int n_batches_used = 0;
  int n_batches_filtered = 0;
  double obj_grad_norm = 0.0;
  double target_grad_norm = 0.0;
  /// Same dot product after the optimizer's diagonal preconditioner; equals
  /// g_value when no preconditioner is supplied.
  double g_preconditioned = 0.0;
  /// Set when the training loss rose on the step that produced the checkpoint.
  bool loss_increased = false;
  /// Group-restricted alignment for every parameter group, in layout order.
  std::vector<std::pair<std::string, double>> group_g;
  std::string family;
  std::string checkpoint;
};

/// Greedy final responses (x', y') and the checkpoint they were decoded from.
struct FinalResponseSet {
  std::vector<std::pair<TokenSequence, TokenSequence>> items;
  std::string provenance;
};

/// Mean NLL over the final responses.
double final_response_nll(const PolicySpec& spec, const ParamVector& params,
                          const FinalResponseSet& dprime);

/// mean over D' of -grad log pi(y'|x'). Throws ProbeError on an empty set.
GradVector target_gradient(const PolicySpec& spec, const ParamVector& params,
                           const FinalResponseSet& dprime);

/// Dot product of the objective and target gradients, optionally restricted
/// to one parameter group. Positive values mean a descent step on the
/// objective lowers the NLL of the final responses to first order.
double gradient_alignment(const GradVector& obj_grad, const GradVector& target_grad,
                          const std::optional<std::string>& group = std::nullopt);

struct IqrFilterResult {
  std::vector<std::size_t> kept_indices;
  double threshold = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

/// Keeps batches whose norm is <= Q3 + 1.5 (Q3 - Q1). Needs at least 4 values.
IqrFilterResult iqr_filter(std::span<const double> batch_grad_norms);

struct AggregatedAlignment {
  GradVector mean_grad;
  double g_value = 0.0;
  int n_used = 0;
  int n_filtered = 0;
};

/// IQR-filters per-batch gradients by norm (when `filter` is set and there are
/// at least 4 batches), averages the kept ones and dots with the target.
/// Throws ProbeError when nothing survives.
AggregatedAlignment aggregate_alignment(std::span<const GradVector> batch_grads,
                                        const GradVector& target_grad, bool filter = true);

struct DpoProbeData {
  ParamVector ref_params;
  std::vector<PreferencePair> items;
  double beta = kDefaultBeta;
};

struct PpoProbeData {
  std::vector<Rollout> items;
  double epsilon = kDefaultClipEpsilon;
};

using ProbeData = std::variant<DpoProbeData, PpoProbeData>;

struct ProbeOptions {
  std::size_t sample_count = 500;
  /// 0 selects 4 for DPO data and 6 for PPO data.
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  bool iqr = true;
  /// Optional diagonal preconditioner (e.g. 1 / (sqrt(v_hat) + eps)).
  std::optional<Eigen::VectorXd> preconditioner;
};

/// Per-batch gradient of one objective piece.
GradVector objective_batch_gradient(const PolicySpec& spec, const ParamVector& params,
                                    const ProbeData& data, std::span<const std::size_t> batch,
                                    ObjectiveId id);

/// Samples up to sample_count items, splits them into probe batches (a
/// trailing partial batch is dropped), and emits one record per suite entry.
std::vector<AlignmentRecord> probe_checkpoint(const PolicySpec& spec, const ParamVector& params,
                                              long step, std::span<const ObjectiveId> suite,
                                              const ProbeData& data,
                                              const FinalResponseSet& dprime,
                                              const ProbeOptions& options = {});

/// Item index batches used by probe_checkpoint.
std::vector<std::vector<std::size_t>> probe_batches(std::size_t n_items,
                                                    const ProbeOptions& options,
                                                    std::size_t default_batch_size);

struct TaylorCheck {
  double predicted_delta = 0.0;
  double actual_delta = 0.0;
  double residual = 0.0;
};

/// Compares NLL(theta - eta grad L) - NLL(theta) over D' with its
/// first-order prediction -eta * dot(target_grad, grad L).
TaylorCheck taylor_validate(const PolicySpec& spec, const ParamVector& params,
                            const GradVector& objective_grad, const FinalResponseSet& dprime,
                            double eta);

}  // namespace podyn
