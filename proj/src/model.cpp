#include "sisda/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sisda/error.hpp"
#include "sisda/kernels.hpp"
#include "sisda/rng.hpp"

namespace sisda {

// ---- vocab ----

Vocab::Vocab(std::vector<std::string> task_tags, std::vector<std::string> symbols)
    : tag_count_(task_tags.size()) {
  tokens_ = {"<pad>", "<bos>", "<eos>"};
  tokens_.insert(tokens_.end(), task_tags.begin(), task_tags.end());
  tokens_.insert(tokens_.end(), symbols.begin(), symbols.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty() || tokens_[i].find_first_of(" \t\n") != std::string::npos) {
      throw Error(ErrorKind::invalid_config, "vocab token '" + tokens_[i] + "' is empty or has whitespace");
    }
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw Error(ErrorKind::invalid_config, "duplicate vocab token '" + tokens_[i] + "'");
    }
  }
  if (tag_count_ == 0) throw Error(ErrorKind::invalid_config, "vocab needs at least one task tag");
}

TokenId Vocab::task_tag(std::size_t i) const {
  if (i >= tag_count_) throw Error(ErrorKind::invalid_argument, "task tag index out of range");
  return static_cast<TokenId>(3 + i);
}

TokenId Vocab::symbol(std::size_t i) const {
  if (i >= symbol_count()) throw Error(ErrorKind::invalid_argument, "symbol index out of range");
  return static_cast<TokenId>(3 + tag_count_ + i);
}

std::size_t Vocab::symbol_index(TokenId id) const {
  if (!is_symbol(id)) throw Error(ErrorKind::invalid_argument, "token " + std::to_string(id) + " is not a symbol");
  return id - 3 - tag_count_;
}

TokenId Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw Error(ErrorKind::out_of_vocab, "unknown token '" + std::string(token) + "'");
  return it->second;
}

const std::string& Vocab::text(TokenId id) const {
  if (id >= tokens_.size()) throw Error(ErrorKind::out_of_vocab, "token id " + std::to_string(id) + " out of range");
  return tokens_[id];
}

TokenSeq Vocab::encode(std::span<const std::string> tokens) const {
  TokenSeq out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId t : ids) out.push_back(text(t));
  return out;
}

std::string Vocab::join(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += text(ids[i]);
  }
  return out;
}

// ---- layout / context ----

void SequenceLayout::validate(std::size_t token_count) const {
  const bool ordered = prompt.begin == 0 && prompt.end == input.begin && input.end == output.begin &&
                       prompt.begin <= prompt.end && input.begin <= input.end &&
                       output.begin <= output.end;
  if (!ordered) throw Error(ErrorKind::invalid_argument, "layout spans must be contiguous and ordered");
  if (output.end != token_count) {
    throw Error(ErrorKind::invalid_argument, "layout covers " + std::to_string(output.end) +
                                                 " positions but sequence has " +
                                                 std::to_string(token_count));
  }
}

ContextSpec default_context(const Vocab& vocab, std::size_t input_slots, std::size_t tag) {
  return ContextSpec{{vocab.bos(), vocab.task_tag(tag)}, input_slots, vocab.pad(), vocab.eos()};
}

Context build_context(const ContextSpec& spec, std::span<const TokenId> input,
                      std::span<const TokenId> output) {
  if (spec.prompt.empty()) throw Error(ErrorKind::invalid_argument, "context needs a nonempty prompt");
  if (spec.input_slots != 0 && input.size() > spec.input_slots) {
    throw Error(ErrorKind::length_overflow, "input of " + std::to_string(input.size()) +
                                                " tokens exceeds " +
                                                std::to_string(spec.input_slots) + " input slots");
  }
  Context ctx;
  ctx.tokens = spec.prompt;
  ctx.tokens.insert(ctx.tokens.end(), input.begin(), input.end());
  if (spec.input_slots != 0) ctx.tokens.resize(spec.prompt.size() + spec.input_slots, spec.pad);
  const std::size_t input_end = ctx.tokens.size();
  ctx.tokens.insert(ctx.tokens.end(), output.begin(), output.end());
  ctx.layout.prompt = {0, spec.prompt.size()};
  ctx.layout.input = {spec.prompt.size(), input_end};
  ctx.layout.output = {input_end, ctx.tokens.size()};
  return ctx;
}

// ---- params ----

void ModelConfig::validate() const {
  if (vocab_size == 0) throw Error(ErrorKind::invalid_config, "vocab_size must be positive");
  if (dim == 0 || heads == 0 || layers == 0 || ffn_dim == 0 || max_len == 0) {
    throw Error(ErrorKind::invalid_config, "model dimensions must be positive");
  }
  if (dim % heads != 0) {
    throw Error(ErrorKind::invalid_config, "dim " + std::to_string(dim) +
                                               " not divisible by heads " + std::to_string(heads));
  }
}

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.dim, f = c.ffn_dim, v = c.vocab_size;
  const std::size_t per_layer = 2 * d + 4 * d * d + 2 * d + d * f + f + f * d + d;
  return v * d + c.max_len * d + c.layers * per_layer + 2 * d + d * v;
}

std::string layer_param(std::size_t layer, std::string_view part) {
  return "l" + std::to_string(layer) + "." + std::string(part);
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorKind::invalid_argument, "no parameter '" + name + "'");
  return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error(ErrorKind::invalid_argument, "no parameter '" + name + "'");
  return it->second;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

namespace {

enum class InitKind { weight, gain, bias };

struct ParamShape {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  InitKind init;
};

std::vector<ParamShape> param_shapes(const ModelConfig& c) {
  const std::size_t d = c.dim, f = c.ffn_dim;
  std::vector<ParamShape> out = {
      {"tok_emb", c.vocab_size, d, InitKind::weight},
      {"pos_emb", c.max_len, d, InitKind::weight},
  };
  for (std::size_t l = 0; l < c.layers; ++l) {
    out.push_back({layer_param(l, "ln1.gain"), 1, d, InitKind::gain});
    out.push_back({layer_param(l, "ln1.bias"), 1, d, InitKind::bias});
    out.push_back({layer_param(l, "wq"), d, d, InitKind::weight});
    out.push_back({layer_param(l, "wk"), d, d, InitKind::weight});
    out.push_back({layer_param(l, "wv"), d, d, InitKind::weight});
    out.push_back({layer_param(l, "wo"), d, d, InitKind::weight});
    out.push_back({layer_param(l, "ln2.gain"), 1, d, InitKind::gain});
    out.push_back({layer_param(l, "ln2.bias"), 1, d, InitKind::bias});
    out.push_back({layer_param(l, "ff1.w"), d, f, InitKind::weight});
    out.push_back({layer_param(l, "ff1.b"), 1, f, InitKind::bias});
    out.push_back({layer_param(l, "ff2.w"), f, d, InitKind::weight});
    out.push_back({layer_param(l, "ff2.b"), 1, d, InitKind::bias});
  }
  out.push_back({"lnf.gain", 1, d, InitKind::gain});
  out.push_back({"lnf.bias", 1, d, InitKind::bias});
  out.push_back({"unembed", d, c.vocab_size, InitKind::weight});
  return out;
}

}  // namespace

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.dim));
  ModelParams p;
  p.config = config;
  for (const auto& s : param_shapes(config)) {
    Tensor t = Tensor::zeros({s.rows, s.cols});
    switch (s.init) {
      case InitKind::weight:
        for (double& v : t.values()) v = rng.uniform(-scale, scale);
        break;
      case InitKind::gain: t.fill(1.0); break;
      case InitKind::bias: break;
    }
    p.tensors.emplace(s.name, std::move(t));
  }
  return p;
}

ModelParams zero_params(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config = config;
  for (const auto& s : param_shapes(config)) p.tensors.emplace(s.name, Tensor::zeros({s.rows, s.cols}));
  return p;
}

// ---- adapters ----

std::vector<std::string> default_adapter_targets(const ModelConfig& config) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < config.layers; ++l) {
    for (const char* part : {"wq", "wk", "wv", "wo"}) out.push_back(layer_param(l, part));
  }
  return out;
}

void AdapterParams::validate(const ModelParams& base) const {
  const std::size_t d = base.config.dim;
  if (rank < 1 || rank > d) {
    throw Error(ErrorKind::invalid_config, "adapter rank must be in [1, D]");
  }
  for (const auto& target : targets) {
    const Tensor& w = base.at(target);
    auto u = factors.find(target + ".lora_u");
    auto v = factors.find(target + ".lora_v");
    if (u == factors.end() || v == factors.end()) {
      throw Error(ErrorKind::shape_mismatch, "missing adapter factors for '" + target + "'");
    }
    if (u->second.shape() != std::vector<std::size_t>{w.rows(), rank} ||
        v->second.shape() != std::vector<std::size_t>{rank, w.cols()}) {
      throw Error(ErrorKind::shape_mismatch, "adapter factors for '" + target + "' are " +
                                                 shape_string(u->second.shape()) + " and " +
                                                 shape_string(v->second.shape()) + ", base is " +
                                                 shape_string(w.shape()));
    }
  }
}

AdapterParams init_adapters(const ModelParams& base, std::size_t rank, double scaling,
                            std::vector<std::string> targets, std::uint64_t seed) {
  AdapterParams a;
  a.rank = rank;
  a.scaling = scaling;
  a.targets = std::move(targets);
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(base.config.dim));
  for (const auto& target : a.targets) {
    const Tensor& w = base.at(target);
    Tensor u = Tensor::zeros({w.rows(), rank});
    for (double& x : u.values()) x = rng.uniform(-scale, scale);
    a.factors.emplace(target + ".lora_u", std::move(u));
    a.factors.emplace(target + ".lora_v", Tensor::zeros({rank, w.cols()}));
  }
  a.validate(base);
  return a;
}

ModelParams apply_adapter(const ModelParams& base, const AdapterParams& adapters) {
  adapters.validate(base);
  ModelParams out = base;
  for (const auto& target : adapters.targets) {
    const Tensor& u = adapters.factors.at(target + ".lora_u");
    const Tensor& v = adapters.factors.at(target + ".lora_v");
    Tensor delta = Tensor::zeros({u.rows(), v.cols()});
    kernels::matmul_acc(u.values(), v.values(), delta.values(), u.rows(), u.cols(), v.cols());
    Tensor& w = out.at(target);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] += adapters.scaling * delta[i];
  }
  return out;
}

// ---- taped forward ----

namespace {

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw Error(ErrorKind::invalid_argument, "empty token sequence");
  if (tokens.size() > config.max_len) {
    throw Error(ErrorKind::length_overflow, "sequence of " + std::to_string(tokens.size()) +
                                                " tokens exceeds max_len " +
                                                std::to_string(config.max_len));
  }
  for (TokenId t : tokens) {
    if (t >= config.vocab_size) {
      throw Error(ErrorKind::out_of_vocab, "token id " + std::to_string(t) + " outside vocab of " +
                                               std::to_string(config.vocab_size));
    }
  }
}

// Final layer-normed hidden states, T x D.
Var hidden_states(Graph& g, const BoundParams& p, std::span<const TokenId> tokens,
                  std::vector<AttentionHandle>* attention) {
  const ModelConfig& c = p.config;
  const std::size_t t = tokens.size();
  const std::size_t dh = c.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto w = [&](const std::string& name) { return p.vars.at(name); };

  Var x = g.add(g.gather_rows(w("tok_emb"), std::vector<std::size_t>(tokens.begin(), tokens.end())),
                g.slice_rows(w("pos_emb"), 0, t));
  for (std::size_t l = 0; l < c.layers; ++l) {
    Var h = g.layer_norm(x, w(layer_param(l, "ln1.gain")), w(layer_param(l, "ln1.bias")));
    Var q = g.matmul(h, w(layer_param(l, "wq")));
    Var k = g.matmul(h, w(layer_param(l, "wk")));
    Var v = g.matmul(h, w(layer_param(l, "wv")));
    std::vector<Var> heads;
    for (std::size_t hh = 0; hh < c.heads; ++hh) {
      Var qh = g.slice_cols(q, hh * dh, (hh + 1) * dh);
      Var kh = g.slice_cols(k, hh * dh, (hh + 1) * dh);
      Var vh = g.slice_cols(v, hh * dh, (hh + 1) * dh);
      Var scores = g.scale(g.matmul_transposed(qh, kh), inv_sqrt);
      Var probs = g.softmax_rows(scores, /*causal=*/true);
      g.retain_grad(probs);
      if (attention) attention->push_back({l, hh, probs});
      heads.push_back(g.matmul(probs, vh));
    }
    x = g.add(x, g.matmul(g.concat_cols(heads), w(layer_param(l, "wo"))));
    Var h2 = g.layer_norm(x, w(layer_param(l, "ln2.gain")), w(layer_param(l, "ln2.bias")));
    Var f = g.gelu(g.add_row(g.matmul(h2, w(layer_param(l, "ff1.w"))), w(layer_param(l, "ff1.b"))));
    x = g.add(x, g.add_row(g.matmul(f, w(layer_param(l, "ff2.w"))), w(layer_param(l, "ff2.b"))));
  }
  return g.layer_norm(x, w("lnf.gain"), w("lnf.bias"));
}

}  // namespace

BoundParams bind_params(Graph& graph, const ModelParams& params, Trainable trainable,
                        const AdapterParams* adapters) {
  params.config.validate();
  BoundParams bp;
  bp.config = params.config;
  const bool base_grad = trainable == Trainable::base || trainable == Trainable::all;
  const bool adapter_grad = trainable == Trainable::adapters || trainable == Trainable::all;
  for (const auto& [name, t] : params.tensors) {
    Var v = graph.leaf(name, t, base_grad);
    bp.leaves.emplace(name, v);
    bp.vars.emplace(name, v);
  }
  if (adapters) {
    adapters->validate(params);
    for (const auto& target : adapters->targets) {
      Var u = graph.leaf(target + ".lora_u", adapters->factors.at(target + ".lora_u"), adapter_grad);
      Var v = graph.leaf(target + ".lora_v", adapters->factors.at(target + ".lora_v"), adapter_grad);
      bp.leaves.emplace(target + ".lora_u", u);
      bp.leaves.emplace(target + ".lora_v", v);
      bp.vars[target] = graph.add(bp.vars.at(target), graph.scale(graph.matmul(u, v), adapters->scaling));
    }
  }
  return bp;
}

SequenceTape tape_sequence(Graph& graph, const BoundParams& params,
                           std::span<const TokenId> tokens, const SequenceLayout& layout) {
  check_tokens(params.config, tokens);
  layout.validate(tokens.size());
  if (layout.output.empty()) throw Error(ErrorKind::invalid_argument, "empty output span");
  if (layout.output.begin == 0) throw Error(ErrorKind::invalid_argument, "output span needs a preceding position");
  SequenceTape tape;
  tape.layout = layout;
  Var hidden = hidden_states(graph, params, tokens, &tape.attention);
  // Row i predicts token i+1.
  Var rows = graph.slice_rows(hidden, layout.output.begin - 1, layout.output.end - 1);
  Var logp = graph.log_softmax_rows(graph.matmul(rows, params.vars.at("unembed")));
  tape.token_logprobs = graph.pick(
      logp, std::vector<std::size_t>(tokens.begin() + layout.output.begin, tokens.end()));
  tape.total = graph.sum(tape.token_logprobs);
  return tape;
}

Var nll_from_tape(Graph& graph, const SequenceTape& tape) {
  return graph.scale(tape.total, -1.0 / static_cast<double>(tape.layout.output.size()));
}

std::vector<AttentionRecord> collect_attention(const Graph& graph, const SequenceTape& tape,
                                               std::optional<std::size_t> layer) {
  std::vector<AttentionRecord> out;
  for (const auto& h : tape.attention) {
    if (layer && h.layer != *layer) continue;
    AttentionRecord r{h.layer, h.head, graph.value(h.probs), std::nullopt};
    if (graph.has_gradients() && graph.requires_grad(h.probs)) r.grad = graph.grad(h.probs);
    out.push_back(std::move(r));
  }
  return out;
}

std::map<std::string, Tensor> leaf_gradients(const Graph& graph, const BoundParams& params) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : params.leaves) {
    if (graph.requires_grad(v)) out.emplace(name, graph.grad(v));
  }
  return out;
}

LossTape nll_loss(const ModelParams& params, std::span<const TokenId> tokens,
                  const SequenceLayout& layout, Trainable trainable, const AdapterParams* adapters) {
  LossTape t;
  t.params = bind_params(t.graph, params, trainable, adapters);
  t.sequence = tape_sequence(t.graph, t.params, tokens, layout);
  t.loss = nll_from_tape(t.graph, t.sequence);
  return t;
}

ForwardOutput forward_logits(const ModelParams& params, std::span<const TokenId> tokens,
                             const SequenceLayout& layout, bool capture) {
  check_tokens(params.config, tokens);
  layout.validate(tokens.size());
  Graph g;
  BoundParams bp = bind_params(g, params, Trainable::none);
  std::vector<AttentionHandle> attention;
  Var hidden = hidden_states(g, bp, tokens, &attention);
  Var logits = g.matmul(hidden, bp.vars.at("unembed"));
  ForwardOutput out;
  out.logits = g.value(logits);
  if (capture) {
    for (const auto& h : attention) out.records.push_back({h.layer, h.head, g.value(h.probs), std::nullopt});
  }
  return out;
}

SequenceScore sequence_logprob(const ModelParams& params, std::span<const TokenId> tokens,
                               const SequenceLayout& layout) {
  Graph g;
  BoundParams bp = bind_params(g, params, Trainable::none);
  SequenceTape tape = tape_sequence(g, bp, tokens, layout);
  SequenceScore s;
  const Tensor& per = g.value(tape.token_logprobs);
  s.per_token.assign(per.values().begin(), per.values().end());
  s.total = g.value(tape.total).item();
  return s;
}

// ---- cached decoder ----

DecoderState::DecoderState(const ModelParams& params)
    : params_(&params), keys_(params.config.layers), values_(params.config.layers) {
  params.config.validate();
}

void DecoderState::push(std::span<const TokenId> tokens) {
  for (TokenId t : tokens) push(t);
}

void DecoderState::push(TokenId token) {
  const ModelParams& p = *params_;
  const ModelConfig& c = p.config;
  if (token >= c.vocab_size) {
    throw Error(ErrorKind::out_of_vocab, "token id " + std::to_string(token) + " outside vocab");
  }
  if (length_ >= c.max_len) throw Error(ErrorKind::length_overflow, "decoder state is at max_len");
  const std::size_t d = c.dim, dh = c.head_dim(), f = c.ffn_dim;
  const std::size_t pos = length_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> x(d), h(d), q(d), k(d), v(d), attn(d), proj(d), ff(f), out(d);
  {
    auto te = p.at("tok_emb").row(token);
    auto pe = p.at("pos_emb").row(pos);
    for (std::size_t j = 0; j < d; ++j) x[j] = te[j] + pe[j];
  }
  double mean = 0.0, rstd = 0.0;
  for (std::size_t l = 0; l < c.layers; ++l) {
    kernels::layer_norm_row(x, p.at(layer_param(l, "ln1.gain")).values(),
                            p.at(layer_param(l, "ln1.bias")).values(), h, mean, rstd);
    std::fill(q.begin(), q.end(), 0.0);
    std::fill(k.begin(), k.end(), 0.0);
    std::fill(v.begin(), v.end(), 0.0);
    kernels::matmul_acc(h, p.at(layer_param(l, "wq")).values(), q, 1, d, d);
    kernels::matmul_acc(h, p.at(layer_param(l, "wk")).values(), k, 1, d, d);
    kernels::matmul_acc(h, p.at(layer_param(l, "wv")).values(), v, 1, d, d);
    auto& keys = keys_[l];
    auto& vals = values_[l];
    keys.insert(keys.end(), k.begin(), k.end());
    vals.insert(vals.end(), v.begin(), v.end());
    const std::size_t n = pos + 1;

    std::vector<double> kh(n * dh), vh(n * dh), scores(n), oh(dh);
    for (std::size_t hh = 0; hh < c.heads; ++hh) {
      for (std::size_t j = 0; j < n; ++j) {
        std::copy_n(keys.begin() + j * d + hh * dh, dh, kh.begin() + j * dh);
        std::copy_n(vals.begin() + j * d + hh * dh, dh, vh.begin() + j * dh);
      }
      std::fill(scores.begin(), scores.end(), 0.0);
      kernels::matmul_bt_acc(std::span<const double>(q).subspan(hh * dh, dh), kh, scores, 1, dh, n);
      for (double& s : scores) s *= inv_sqrt;
      kernels::softmax_row(scores, n);
      std::fill(oh.begin(), oh.end(), 0.0);
      kernels::matmul_acc(scores, vh, oh, 1, n, dh);
      std::copy(oh.begin(), oh.end(), attn.begin() + hh * dh);
    }
    std::fill(proj.begin(), proj.end(), 0.0);
    kernels::matmul_acc(attn, p.at(layer_param(l, "wo")).values(), proj, 1, d, d);
    for (std::size_t j = 0; j < d; ++j) x[j] += proj[j];

    kernels::layer_norm_row(x, p.at(layer_param(l, "ln2.gain")).values(),
                            p.at(layer_param(l, "ln2.bias")).values(), h, mean, rstd);
    std::fill(ff.begin(), ff.end(), 0.0);
    kernels::matmul_acc(h, p.at(layer_param(l, "ff1.w")).values(), ff, 1, d, f);
    auto b1 = p.at(layer_param(l, "ff1.b")).values();
    for (std::size_t j = 0; j < f; ++j) ff[j] = kernels::gelu(ff[j] + b1[j]);
    std::fill(out.begin(), out.end(), 0.0);
    kernels::matmul_acc(ff, p.at(layer_param(l, "ff2.w")).values(), out, 1, f, d);
    auto b2 = p.at(layer_param(l, "ff2.b")).values();
    for (std::size_t j = 0; j < d; ++j) x[j] += out[j] + b2[j];
  }
  last_hidden_.assign(d, 0.0);
  kernels::layer_norm_row(x, p.at("lnf.gain").values(), p.at("lnf.bias").values(), last_hidden_,
                          mean, rstd);
  ++length_;
}

std::vector<double> DecoderState::next_log_probs() const {
  if (length_ == 0) throw Error(ErrorKind::state, "decoder state is empty");
  const ModelConfig& c = params_->config;
  std::vector<double> logits(c.vocab_size, 0.0);
  kernels::matmul_acc(last_hidden_, params_->at("unembed").values(), logits, 1, c.dim, c.vocab_size);
  const double lse = kernels::log_sum_exp(logits);
  for (double& v : logits) v -= lse;
  return logits;
}

// ---- checkpoints ----
//
// Binary, little-endian:
//   "SISDACKP" | u32 version=1 | 6 x u64 config (vocab, dim, heads, layers, ffn, max_len)
//   | u64 tensor count | per tensor: u32 name length, name, u32 rank, rank x u64 dims,
//   IEEE-754 doubles.

namespace {

constexpr char kMagic[8] = {'S', 'I', 'S', 'D', 'A', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw Error(ErrorKind::parse, "truncated checkpoint " + path.string());
  }
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  const auto& c = params.config;
  for (std::size_t v : {c.vocab_size, c.dim, c.heads, c.layers, c.ffn_dim, c.max_len}) {
    put<std::uint64_t>(out, v);
  }
  put<std::uint64_t>(out, params.tensors.size());
  for (const auto& [name, t] : params.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) put<std::uint64_t>(out, dim);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw Error(ErrorKind::io, "failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorKind::parse, "not a checkpoint: " + path.string());
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) {
    throw Error(ErrorKind::parse, "unsupported checkpoint version " + std::to_string(version));
  }
  ModelParams p;
  p.config.vocab_size = get<std::uint64_t>(in, path);
  p.config.dim = get<std::uint64_t>(in, path);
  p.config.heads = get<std::uint64_t>(in, path);
  p.config.layers = get<std::uint64_t>(in, path);
  p.config.ffn_dim = get<std::uint64_t>(in, path);
  p.config.max_len = get<std::uint64_t>(in, path);
  p.config.validate();
  const auto count = get<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error(ErrorKind::parse, "truncated checkpoint " + path.string());
    const auto rank = get<std::uint32_t>(in, path);
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& dim : shape) {
      dim = get<std::uint64_t>(in, path);
      n *= dim;
    }
    std::vector<double> values(n);
    if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw Error(ErrorKind::parse, "truncated checkpoint " + path.string());
    }
    p.tensors.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  for (const auto& s : zero_params(p.config).tensors) {
    if (!p.tensors.contains(s.first) || p.tensors.at(s.first).shape() != s.second.shape()) {
      throw Error(ErrorKind::parse, "checkpoint missing or misshaped tensor '" + s.first + "'");
    }
  }
  return p;
}

}  // namespace sisda
