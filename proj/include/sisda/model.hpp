#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sisda/graph.hpp"
#include "sisda/tensor.hpp"

namespace sisda {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

// Token inventory. Layout: <pad>, <bos>, <eos>, task tags..., symbols...
class Vocab {
 public:
  Vocab(std::vector<std::string> task_tags, std::vector<std::string> symbols);

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId pad() const noexcept { return 0; }
  TokenId bos() const noexcept { return 1; }
  TokenId eos() const noexcept { return 2; }
  TokenId task_tag(std::size_t i = 0) const;
  std::size_t task_tag_count() const noexcept { return tag_count_; }
  std::size_t symbol_count() const noexcept { return tokens_.size() - 3 - tag_count_; }
  TokenId symbol(std::size_t i) const;  // i-th non-special symbol
  std::size_t symbol_index(TokenId id) const;
  bool is_symbol(TokenId id) const noexcept { return id >= 3 + tag_count_ && id < size(); }

  TokenId id(std::string_view token) const;  // throws out-of-vocab
  const std::string& text(TokenId id) const;
  TokenSeq encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const TokenId> ids) const;
  std::string join(std::span<const TokenId> ids) const;  // space separated

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t tag_count_ = 0;
};

// Half-open position range.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
  bool empty() const noexcept { return end == begin; }
  bool contains(std::size_t i) const noexcept { return i >= begin && i < end; }
  bool operator==(const Span&) const = default;
};

// Context partition: prompt, then input X, then output Y.
struct SequenceLayout {
  Span prompt;
  Span input;
  Span output;

  std::size_t total() const noexcept { return output.end; }
  void validate(std::size_t token_count) const;
  bool operator==(const SequenceLayout&) const = default;
};

// How a context is assembled from an input and an output sequence. The input
// region is padded to `input_slots` positions when that is nonzero.
struct ContextSpec {
  TokenSeq prompt;
  std::size_t input_slots = 0;
  TokenId pad = 0;
  TokenId eos = 2;
};

ContextSpec default_context(const Vocab& vocab, std::size_t input_slots, std::size_t tag = 0);

struct Context {
  TokenSeq tokens;
  SequenceLayout layout;
};

Context build_context(const ContextSpec& spec, std::span<const TokenId> input,
                      std::span<const TokenId> output);

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 32;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_len = 64;

  void validate() const;
  std::size_t head_dim() const { return dim / heads; }
  bool operator==(const ModelConfig&) const = default;
};

std::size_t expected_parameter_count(const ModelConfig& config);

// Named tensors; names follow "l<k>.<part>" for per-layer weights.
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  std::size_t parameter_count() const;
  bool operator==(const ModelParams&) const = default;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);
ModelParams zero_params(const ModelConfig& config);

std::string layer_param(std::size_t layer, std::string_view part);

// Low-rank additive deltas W + scaling * U * V on selected square matrices.
struct AdapterParams {
  std::size_t rank = 0;
  double scaling = 1.0;
  std::vector<std::string> targets;
  std::map<std::string, Tensor> factors;  // "<target>.lora_u" (D x r), "<target>.lora_v" (r x D)

  void validate(const ModelParams& base) const;
};

// Attention projections of every layer.
std::vector<std::string> default_adapter_targets(const ModelConfig& config);

// U drawn uniform(+-1/sqrt(D)), V zero so the initial delta vanishes.
AdapterParams init_adapters(const ModelParams& base, std::size_t rank, double scaling,
                            std::vector<std::string> targets, std::uint64_t seed);

ModelParams apply_adapter(const ModelParams& base, const AdapterParams& adapters);

struct AttentionRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  Tensor probs;               // T_ctx x T_ctx, causal
  std::optional<Tensor> grad; // dL/dA after backward
};

struct ForwardOutput {
  Tensor logits;  // T_ctx x |V|
  std::vector<AttentionRecord> records;
};

ForwardOutput forward_logits(const ModelParams& params, std::span<const TokenId> tokens,
                             const SequenceLayout& layout, bool capture);

struct SequenceScore {
  double total = 0.0;
  std::vector<double> per_token;
};

SequenceScore sequence_logprob(const ModelParams& params, std::span<const TokenId> tokens,
                               const SequenceLayout& layout);

// ---- taped (differentiable) forward ----

enum class Trainable { none, base, adapters, all };

// Parameter leaves bound into one graph. With adapters, adapted matrices are
// W + s*U*V nodes and `vars` maps the base name to that node.
struct BoundParams {
  ModelConfig config;
  std::map<std::string, Var> vars;
  std::map<std::string, Var> leaves;
};

BoundParams bind_params(Graph& graph, const ModelParams& params, Trainable trainable,
                        const AdapterParams* adapters = nullptr);

struct AttentionHandle {
  std::size_t layer = 0;
  std::size_t head = 0;
  Var probs;
};

struct SequenceTape {
  SequenceLayout layout;
  Var token_logprobs;  // |output| x 1
  Var total;           // scalar
  std::vector<AttentionHandle> attention;
};

SequenceTape tape_sequence(Graph& graph, const BoundParams& params,
                           std::span<const TokenId> tokens, const SequenceLayout& layout);

// -(1/|output|) * total log-probability.
Var nll_from_tape(Graph& graph, const SequenceTape& tape);

std::vector<AttentionRecord> collect_attention(const Graph& graph, const SequenceTape& tape,
                                               std::optional<std::size_t> layer = std::nullopt);

std::map<std::string, Tensor> leaf_gradients(const Graph& graph, const BoundParams& params);

// A self-contained loss graph for one sequence.
struct LossTape {
  Graph graph;
  BoundParams params;
  SequenceTape sequence;
  Var loss;
};

LossTape nll_loss(const ModelParams& params, std::span<const TokenId> tokens,
                  const SequenceLayout& layout, Trainable trainable = Trainable::base,
                  const AdapterParams* adapters = nullptr);

// ---- cached incremental forward for decoding ----

// Appends one token at a time; per-layer keys/values are kept so each step
// costs one position. Matches forward_logits on the same prefix.
class DecoderState {
 public:
  explicit DecoderState(const ModelParams& params);

  void push(TokenId token);
  void push(std::span<const TokenId> tokens);
  std::size_t length() const noexcept { return length_; }
  std::vector<double> next_log_probs() const;

 private:
  const ModelParams* params_;
  std::size_t length_ = 0;
  std::vector<std::vector<double>> keys_;    // per layer, length x D
  std::vector<std::vector<double>> values_;  // per layer, length x D
  std::vector<double> last_hidden_;          // final-normed hidden of last position
};

// ---- checkpoints ----

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace sisda
