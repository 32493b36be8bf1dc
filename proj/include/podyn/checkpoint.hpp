#pragma once

#include "podyn/optimizer.hpp"
#include "podyn/params.hpp"
#include "podyn/policy.hpp"

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <string>

namespace podyn {

/// Training snapshot.
///
/// Binary layout (all integers and floats little-endian):
///
///   offset 0   8 bytes   magic "PODYNCK1"
///   offset 8   u64       header length H
///   offset 16  H bytes   header, compact JSON with sorted keys:
///                          format, step, policy{kind, vocab_size, context_len,
///                          embed_dim, seed}, groups[[name, start, size]...],
///                          optimizer{kind, lr, weight_decay, beta1, beta2, eps,
///                          t}, rng_state, config_hash, scalars{...},
///                          blocks[[name, length]...]
///   offset 16+H          payload: each block of `blocks` in order as IEEE-754
///                        binary64 values. "params" always comes first, then
///                        "adam_m" / "adam_v" for AdamW, then `extras`.
///
/// Optimizer hyperparameters and scalars sit in the header as 16-digit hex bit
/// patterns, so every double round-trips exactly.
struct Checkpoint {
  long step = 0;
  PolicySpec spec;
  ParamVector params;
  OptimizerState optimizer;
  std::string rng_state;
  std::string config_hash;
  /// Named auxiliary vectors (reference params, old policy, baseline...).
  std::map<std::string, Eigen::VectorXd> extras;
  /// Scalar metadata such as the loss of the producing step.
  std::map<std::string, double> scalars;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws CheckpointError on malformed input.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace podyn
