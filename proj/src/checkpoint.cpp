#include "podyn/checkpoint.hpp"

#include "podyn/errors.hpp"

#include "json.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace podyn {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'O', 'D', 'Y', 'N', 'C', 'K', '1'};
constexpr int kFormat = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

// Scalars are stored as raw bit patterns so NaN and -0.0 survive the header.
std::string bits_hex(double d) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << std::bit_cast<std::uint64_t>(d);
  return os.str();
}

double hex_bits(const std::string& s) {
  return std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(s, nullptr, 16)));
}

void put_block(std::string& out, const Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(v[i]));
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.params.size() != ckpt.params.layout.size()) {
    throw CheckpointError("params do not match their layout");
  }
  json groups = json::array();
  for (const auto& g : ckpt.params.layout.groups()) groups.push_back({g.name, g.start, g.size});

  const auto& oc = ckpt.optimizer.config;
  std::vector<std::pair<std::string, const Eigen::VectorXd*>> blocks{{"params", &ckpt.params.values}};
  if (oc.kind == OptimizerKind::AdamW) {
    if (ckpt.optimizer.m.size() != ckpt.params.size() ||
        ckpt.optimizer.v.size() != ckpt.params.size()) {
      throw CheckpointError("optimizer moments do not match the parameter layout");
    }
    blocks.emplace_back("adam_m", &ckpt.optimizer.m);
    blocks.emplace_back("adam_v", &ckpt.optimizer.v);
  }
  for (const auto& [name, v] : ckpt.extras) {
    if (name == "params" || name == "adam_m" || name == "adam_v") {
      throw CheckpointError("reserved block name '" + name + "'");
    }
    blocks.emplace_back(name, &v);
  }
  json block_table = json::array();
  for (const auto& [name, v] : blocks) block_table.push_back({name, v->size()});

  json scalars = json::object();
  for (const auto& [k, v] : ckpt.scalars) scalars[k] = bits_hex(v);

  const json header = {
      {"format", kFormat},
      {"step", ckpt.step},
      {"policy",
       {{"kind", to_string(ckpt.spec.kind)},
        {"vocab_size", ckpt.spec.vocab_size},
        {"context_len", ckpt.spec.context_len},
        {"embed_dim", ckpt.spec.embed_dim},
        {"seed", ckpt.spec.seed}}},
      {"groups", groups},
      {"optimizer",
       {{"kind", to_string(oc.kind)},
        {"lr", bits_hex(oc.lr)},
        {"weight_decay", bits_hex(oc.weight_decay)},
        {"beta1", bits_hex(oc.beta1)},
        {"beta2", bits_hex(oc.beta2)},
        {"eps", bits_hex(oc.eps)},
        {"t", ckpt.optimizer.t}}},
      {"rng_state", ckpt.rng_state},
      {"config_hash", ckpt.config_hash},
      {"scalars", scalars},
      {"blocks", block_table},
  };
  const std::string head = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u64(out, head.size());
  out += head;
  for (const auto& [name, v] : blocks) put_block(out, *v);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  const std::uint64_t head_len = get_u64(bytes, 8);
  if (head_len > bytes.size() - 16) throw CheckpointError("truncated header");
  Checkpoint c;
  try {
    const json h = json::parse(bytes.substr(16, head_len));
    if (h.at("format").get<int>() != kFormat) throw CheckpointError("unsupported format version");
    c.step = h.at("step").get<long>();
    const auto& p = h.at("policy");
    c.spec.kind = policy_kind_from_string(p.at("kind").get<std::string>());
    c.spec.vocab_size = p.at("vocab_size").get<int>();
    c.spec.context_len = p.at("context_len").get<int>();
    c.spec.embed_dim = p.at("embed_dim").get<int>();
    c.spec.seed = p.at("seed").get<std::uint64_t>();

    std::vector<ParamGroup> groups;
    for (const auto& g : h.at("groups")) {
      groups.push_back({g.at(0).get<std::string>(), g.at(1).get<Eigen::Index>(),
                        g.at(2).get<Eigen::Index>()});
    }
    Layout layout(std::move(groups));
    if (!(layout == make_layout(c.spec))) {
      throw CheckpointError("group table does not match the policy spec");
    }

    const auto& o = h.at("optimizer");
    c.optimizer.config.kind = optimizer_kind_from_string(o.at("kind").get<std::string>());
    c.optimizer.config.lr = hex_bits(o.at("lr").get<std::string>());
    c.optimizer.config.weight_decay = hex_bits(o.at("weight_decay").get<std::string>());
    c.optimizer.config.beta1 = hex_bits(o.at("beta1").get<std::string>());
    c.optimizer.config.beta2 = hex_bits(o.at("beta2").get<std::string>());
    c.optimizer.config.eps = hex_bits(o.at("eps").get<std::string>());
    c.optimizer.t = o.at("t").get<long>();
    c.rng_state = h.at("rng_state").get<std::string>();
    c.config_hash = h.at("config_hash").get<std::string>();
    for (const auto& [k, v] : h.at("scalars").items()) c.scalars[k] = hex_bits(v.get<std::string>());

    std::size_t pos = 16 + head_len;
    bool have_params = false;
    for (const auto& b : h.at("blocks")) {
      const auto name = b.at(0).get<std::string>();
      const auto n = b.at(1).get<std::uint64_t>();
      if (n > (bytes.size() - pos) / 8) throw CheckpointError("truncated block '" + name + "'");
      Eigen::VectorXd v(static_cast<Eigen::Index>(n));
      for (std::uint64_t i = 0; i < n; ++i, pos += 8) {
        v[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(get_u64(bytes, pos));
      }
      if (name == "params") {
        if (v.size() != layout.size()) throw CheckpointError("params block has the wrong length");
        c.params = ParamVector(std::move(v), layout);
        have_params = true;
      } else if (name == "adam_m") {
        c.optimizer.m = std::move(v);
      } else if (name == "adam_v") {
        c.optimizer.v = std::move(v);
      } else {
        c.extras[name] = std::move(v);
      }
    }
    if (!have_params) throw CheckpointError("missing params block");
    if (pos != bytes.size()) throw CheckpointError("trailing bytes after payload");
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("malformed header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("malformed header: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + tmp + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  try {
    return deserialize_checkpoint(os.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(md[i]);
  return os.str();
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return sha256_hex(os.str());
}

}  // namespace podyn
