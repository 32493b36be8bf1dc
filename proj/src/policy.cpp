#include "podyn/policy.hpp"

#include "podyn/errors.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <stdexcept>

namespace podyn {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Context window, most recent token first. Missing positions hold the pad id V.
std::vector<int> window(const PolicySpec& spec, std::span<const Token> context) {
  std::vector<int> w(static_cast<std::size_t>(spec.context_len), spec.vocab_size);
  const auto n = static_cast<int>(context.size());
  for (int j = 0; j < spec.context_len && j < n; ++j) w[j] = context[n - 1 - j];
  return w;
}

Eigen::Index table_row(const PolicySpec& spec, const std::vector<int>& w) {
  Eigen::Index row = 0;
  Eigen::Index mult = 1;
  for (int tok : w) {
    row += tok * mult;
    mult *= spec.vocab_size + 1;
  }
  return row;
}

Eigen::Index num_states(const PolicySpec& spec) {
  Eigen::Index n = 1;
  for (int j = 0; j < spec.context_len; ++j) n *= spec.vocab_size + 1;
  return n;
}

// Views into the linear-softmax parameter blocks.
struct LinearView {
  Eigen::Map<const RowMajor> embed;  // (V+1) x d
  const double* mix;                 // context_len blocks of d x d, row-major
  Eigen::Map<const RowMajor> head;   // V x d
  Eigen::Map<const Eigen::VectorXd> bias;
  int d;

  Eigen::Map<const RowMajor> mix_block(int j) const {
    return Eigen::Map<const RowMajor>(mix + static_cast<std::ptrdiff_t>(j) * d * d, d, d);
  }
};

LinearView linear_view(const ParamVector& params, const PolicySpec& spec) {
  const int v = spec.vocab_size;
  const int d = spec.embed_dim;
  const auto& emb = params.layout.group("embed");
  const auto& mix = params.layout.group("mix");
  const auto& head = params.layout.group("head");
  const double* base = params.values.data();
  return LinearView{Eigen::Map<const RowMajor>(base + emb.start, v + 1, d), base + mix.start,
                    Eigen::Map<const RowMajor>(base + head.start, v, d),
                    Eigen::Map<const Eigen::VectorXd>(base + head.start + v * d, v), d};
}

Eigen::VectorXd linear_hidden(const LinearView& lv, const std::vector<int>& w) {
  Eigen::VectorXd h = Eigen::VectorXd::Zero(lv.d);
  for (std::size_t j = 0; j < w.size(); ++j) {
    h.noalias() += lv.mix_block(static_cast<int>(j)) * lv.embed.row(w[j]).transpose();
  }
  return h;
}

void check_tokens(const PolicySpec& spec, const TokenSequence& seq, const char* what) {
  for (Token t : seq) {
    if (t < 0 || t >= spec.vocab_size) {
      throw std::domain_error(std::string(what) + " token " + std::to_string(t) +
                              " outside vocabulary of size " + std::to_string(spec.vocab_size));
    }
  }
}

void check_inputs(const PolicySpec& spec, const TokenSequence& x, const TokenSequence& y) {
  if (y.empty()) throw std::domain_error("response must be non-empty");
  if (static_cast<int>(x.size()) > spec.context_len) {
    throw std::domain_error("prompt length " + std::to_string(x.size()) +
                            " exceeds context_len " + std::to_string(spec.context_len));
  }
  check_tokens(spec, x, "prompt");
  check_tokens(spec, y, "response");
}

// Walks the response, handing each (context, target) pair to `fn`.
template <typename Fn>
void for_each_step(const TokenSequence& x, const TokenSequence& y, Fn&& fn) {
  TokenSequence ctx = x;
  ctx.reserve(x.size() + y.size());
  for (std::size_t t = 0; t < y.size(); ++t) {
    fn(t, std::span<const Token>(ctx), y[t]);
    ctx.push_back(y[t]);
  }
}

Token argmax_lowest(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < v.size(); ++k) {
    if (v[k] > v[best]) best = k;
  }
  return static_cast<Token>(best);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

const char* to_string(PolicyKind kind) {
  return kind == PolicyKind::Tabular ? "tabular" : "linear-softmax";
}

PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "tabular") return PolicyKind::Tabular;
  if (s == "linear-softmax") return PolicyKind::LinearSoftmax;
  throw ConfigError("policy.kind", "unknown policy kind '" + s + "'");
}

void PolicySpec::validate() const {
  if (vocab_size < 2) throw ConfigError("policy.vocab_size", "must be >= 2");
  if (context_len < 1) throw ConfigError("policy.context_len", "must be >= 1");
  if (kind == PolicyKind::LinearSoftmax && embed_dim < 1) {
    throw ConfigError("policy.embed_dim", "must be >= 1");
  }
  if (kind == PolicyKind::Tabular && num_states(*this) * vocab_size > (Eigen::Index{1} << 26)) {
    throw ConfigError("policy.context_len", "tabular table too large");
  }
}

Layout make_layout(const PolicySpec& spec) {
  spec.validate();
  const Eigen::Index v = spec.vocab_size;
  if (spec.kind == PolicyKind::Tabular) {
    return Layout({{"table", 0, num_states(spec) * v}});
  }
  const Eigen::Index d = spec.embed_dim;
  const Eigen::Index emb = (v + 1) * d;
  const Eigen::Index mix = spec.context_len * d * d;
  const Eigen::Index head = v * d + v;
  return Layout({{"embed", 0, emb}, {"mix", emb, mix}, {"head", emb + mix, head}});
}

ParamVector zero_params(const PolicySpec& spec) { return ParamVector(make_layout(spec)); }

ParamVector init_params(const PolicySpec& spec, double scale) {
  ParamVector p(make_layout(spec));
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.values[i] = normal(rng);
  return p;
}

Eigen::VectorXd next_token_logits(const ParamVector& params, const PolicySpec& spec,
                                  std::span<const Token> context) {
  const auto w = window(spec, context);
  if (spec.kind == PolicyKind::Tabular) {
    const Eigen::Index row = table_row(spec, w);
    return params.values.segment(row * spec.vocab_size, spec.vocab_size);
  }
  const auto lv = linear_view(params, spec);
  return lv.head * linear_hidden(lv, w) + lv.bias;
}

Eigen::VectorXd next_token_probs(const ParamVector& params, const PolicySpec& spec,
                                 std::span<const Token> context) {
  return softmax(next_token_logits(params, spec, context));
}

std::vector<double> token_log_probs(const ParamVector& params, const PolicySpec& spec,
                                    const TokenSequence& x, const TokenSequence& y) {
  check_inputs(spec, x, y);
  std::vector<double> out(y.size());
  for_each_step(x, y, [&](std::size_t t, std::span<const Token> ctx, Token target) {
    const Eigen::VectorXd logits = next_token_logits(params, spec, ctx);
    out[t] = std::min(0.0, logits[target] - log_sum_exp(logits));
  });
  return out;
}

double log_prob(const ParamVector& params, const PolicySpec& spec, const TokenSequence& x,
                const TokenSequence& y) {
  const auto lps = token_log_probs(params, spec, x, y);
  return std::accumulate(lps.begin(), lps.end(), 0.0);
}

void accumulate_grad_log_prob(const ParamVector& params, const PolicySpec& spec,
                              const TokenSequence& x, const TokenSequence& y,
                              std::span<const double> weights, GradVector& grad) {
  check_inputs(spec, x, y);
  if (weights.size() != y.size()) {
    throw std::invalid_argument("one weight per response token required");
  }
  const int v = spec.vocab_size;
  for_each_step(x, y, [&](std::size_t t, std::span<const Token> ctx, Token target) {
    const double wt = weights[t];
    if (wt == 0.0) return;
    const auto w = window(spec, ctx);
    if (spec.kind == PolicyKind::Tabular) {
      const Eigen::Index row = table_row(spec, w);
      auto slot = grad.values.segment(row * v, v);
      const Eigen::VectorXd p = softmax(params.values.segment(row * v, v));
      slot -= wt * p;
      slot[target] += wt;
      return;
    }
    const auto lv = linear_view(params, spec);
    const int d = lv.d;
    const Eigen::VectorXd h = linear_hidden(lv, w);
    Eigen::VectorXd dlogits = -wt * softmax(lv.head * h + lv.bias);
    dlogits[target] += wt;

    const auto& emb = grad.layout.group("embed");
    const auto& mix = grad.layout.group("mix");
    const auto& head = grad.layout.group("head");
    double* g = grad.values.data();
    Eigen::Map<RowMajor> g_head(g + head.start, v, d);
    Eigen::Map<Eigen::VectorXd> g_bias(g + head.start + static_cast<std::ptrdiff_t>(v) * d, v);
    Eigen::Map<RowMajor> g_embed(g + emb.start, v + 1, d);

    g_head.noalias() += dlogits * h.transpose();
    g_bias += dlogits;
    const Eigen::VectorXd dh = lv.head.transpose() * dlogits;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const int jj = static_cast<int>(j);
      Eigen::Map<RowMajor> g_mix(g + mix.start + static_cast<std::ptrdiff_t>(jj) * d * d, d, d);
      g_mix.noalias() += dh * lv.embed.row(w[j]);
      g_embed.row(w[j]).noalias() += (lv.mix_block(jj).transpose() * dh).transpose();
    }
  });
}

GradVector grad_log_prob(const ParamVector& params, const PolicySpec& spec,
                         const TokenSequence& x, const TokenSequence& y) {
  GradVector g = zeros_like(params);
  const std::vector<double> ones(y.size(), 1.0);
  accumulate_grad_log_prob(params, spec, x, y, ones, g);
  return g;
}

TokenSequence greedy_decode(const ParamVector& params, const PolicySpec& spec,
                            const TokenSequence& x, int max_len) {
  if (max_len < 1) throw std::domain_error("max_len must be >= 1");
  check_tokens(spec, x, "prompt");
  TokenSequence ctx = x;
  TokenSequence out;
  while (static_cast<int>(out.size()) < max_len) {
    const Token tok = argmax_lowest(next_token_logits(params, spec, ctx));
    out.push_back(tok);
    ctx.push_back(tok);
    if (tok == kEos) break;
  }
  return out;
}

SampledResponse sample_response(const ParamVector& params, const PolicySpec& spec,
                                const TokenSequence& x, const SamplerParams& sampler,
                                std::uint64_t seed) {
  if (!(sampler.temperature > 0.0)) throw std::domain_error("temperature must be > 0");
  if (!(sampler.top_p > 0.0 && sampler.top_p <= 1.0)) {
    throw std::domain_error("top_p must lie in (0, 1]");
  }
  if (sampler.max_len < 1) throw std::domain_error("max_len must be >= 1");
  check_tokens(spec, x, "prompt");

  SampledResponse out;
  if (sampler.temperature < 1e-6) {
    out.tokens = greedy_decode(params, spec, x, sampler.max_len);
    out.log_probs = token_log_probs(params, spec, x, out.tokens);
    return out;
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  TokenSequence ctx = x;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(spec.vocab_size));
  while (static_cast<int>(out.tokens.size()) < sampler.max_len) {
    const Eigen::VectorXd logits = next_token_logits(params, spec, ctx);
    const Eigen::VectorXd probs = softmax((logits / sampler.temperature).eval());

    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return probs[a] > probs[b]; });
    double kept = 0.0;
    std::size_t n_keep = 0;
    while (n_keep < order.size()) {
      kept += probs[order[n_keep++]];
      if (kept >= sampler.top_p) break;
    }
    const double u = unif(rng) * kept;
    double acc = 0.0;
    Token tok = static_cast<Token>(order[n_keep - 1]);
    for (std::size_t i = 0; i < n_keep; ++i) {
      acc += probs[order[i]];
      if (u < acc) {
        tok = static_cast<Token>(order[i]);
        break;
      }
    }
    out.tokens.push_back(tok);
    out.log_probs.push_back(std::min(0.0, logits[tok] - log_sum_exp(logits)));
    ctx.push_back(tok);
    if (tok == kEos) break;
  }
  return out;
}

TokenSequence sample(const ParamVector& params, const PolicySpec& spec, const TokenSequence& x,
                     const SamplerParams& sampler, std::uint64_t seed) {
  return sample_response(params, spec, x, sampler, seed).tokens;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(splitmix64(base) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

}  // namespace podyn
