#include "sisda/adaptation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sisda/error.hpp"
#include "sisda/metrics.hpp"
#include "sisda/rng.hpp"

namespace sisda {

// ---- advantages and losses ----

AdvantageSet compute_advantages(std::span<const double> rewards) {
  if (rewards.empty()) throw Error(ErrorKind::invalid_argument, "compute_advantages: empty reward list");
  AdvantageSet out;
  out.rewards.assign(rewards.begin(), rewards.end());
  const double n = static_cast<double>(rewards.size());
  out.baseline = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  out.advantages.reserve(rewards.size());
  for (double qn : rewards) {
    double s = 0.0;
    for (double qm : rewards) s += qm - qn;
    out.advantages.push_back(s / n);
  }
  return out;
}

Var rl_loss(Graph& graph, const AdvantageSet& advantages, std::span<const Var> logprobs) {
  if (logprobs.size() != advantages.advantages.size()) {
    throw Error(ErrorKind::invalid_argument, "rl_loss: " + std::to_string(advantages.advantages.size()) +
                                                 " advantages for " + std::to_string(logprobs.size()) +
                                                 " log-probabilities");
  }
  if (logprobs.empty()) throw Error(ErrorKind::invalid_argument, "rl_loss: no hypotheses");
  Var loss = graph.scale(logprobs[0], -advantages.advantages[0]);
  for (std::size_t n = 1; n < logprobs.size(); ++n) {
    loss = graph.add(loss, graph.scale(logprobs[n], -advantages.advantages[n]));
  }
  return loss;
}

double rl_loss(const AdvantageSet& advantages, std::span<const double> logprobs) {
  if (logprobs.size() != advantages.advantages.size()) {
    throw Error(ErrorKind::invalid_argument, "rl_loss: " + std::to_string(advantages.advantages.size()) +
                                                 " advantages for " + std::to_string(logprobs.size()) +
                                                 " log-probabilities");
  }
  double s = 0.0;
  for (std::size_t n = 0; n < logprobs.size(); ++n) s += advantages.advantages[n] * logprobs[n];
  return -s;
}

Var dpo_loss(Graph& graph, Var chosen, Var rejected, double chosen_ref, double rejected_ref, double beta) {
  Var margin = graph.add(graph.add(chosen, graph.scale(rejected, -1.0)),
                         graph.constant(Tensor::scalar(rejected_ref - chosen_ref)));
  return graph.scale(graph.log_sigmoid(graph.scale(margin, beta)), -1.0);
}

Var weighted_nll(Graph& graph, const SequenceTape& tape, std::span<const double> weights) {
  const std::size_t n = tape.layout.output.size();
  if (weights.empty()) return nll_from_tape(graph, tape);
  if (weights.size() != n) {
    throw Error(ErrorKind::invalid_argument, "weighted_nll: " + std::to_string(weights.size()) +
                                                 " weights for " + std::to_string(n) + " output tokens");
  }
  Var w = graph.constant(Tensor({n, 1}, std::vector<double>(weights.begin(), weights.end())));
  return graph.scale(graph.sum(graph.mul(tape.token_logprobs, w)), -1.0 / static_cast<double>(n));
}

// ---- configuration ----

std::string method_name(Method m) {
  switch (m) {
    case Method::zero_shot: return "zero-shot";
    case Method::self_train: return "self-train";
    case Method::filtering: return "filtering";
    case Method::conf: return "conf";
    case Method::min_q: return "min-q";
    case Method::dpo: return "dpo";
    case Method::si_sda: return "si-sda";
    case Method::sft: return "sft";
  }
  return "zero-shot";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::zero_shot, Method::self_train, Method::filtering, Method::conf, Method::min_q,
                   Method::dpo, Method::si_sda, Method::sft}) {
    if (method_name(m) == name) return m;
  }
  throw Error(ErrorKind::invalid_config, "unknown method '" + name + "'");
}

bool is_unsupervised(Method m) { return m != Method::sft; }

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorKind::invalid_config, "learning_rate must be > 0");
  if (epochs < 1) throw Error(ErrorKind::invalid_config, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorKind::invalid_config, "batch_size must be >= 1");
  if (beam_size < 1) throw Error(ErrorKind::invalid_config, "beam_size must be >= 1");
  if (keep < 1) throw Error(ErrorKind::invalid_config, "keep must be >= 1");
  if (max_output < 1) throw Error(ErrorKind::invalid_config, "max_output must be >= 1");
  if (!(tau >= 0.0 && tau <= 1.0)) throw Error(ErrorKind::invalid_config, "tau must be in [0,1]");
  if (dpo_beta < 0.0) throw Error(ErrorKind::invalid_config, "dpo_beta must be >= 0");
  if (!(filter_fraction >= 0.0 && filter_fraction < 1.0)) {
    throw Error(ErrorKind::invalid_config, "filter_fraction must be in [0,1)");
  }
  if (grad_clip < 0.0) throw Error(ErrorKind::invalid_config, "grad_clip must be >= 0");
  if (adapter && adapter->rank < 1) throw Error(ErrorKind::invalid_config, "adapter rank must be >= 1");
}

// ---- trainer plumbing ----

namespace {

AdamConfig adam_config(const TrainConfig& c) {
  AdamConfig a;
  a.lr = c.learning_rate;
  a.grad_clip = c.grad_clip;
  return a;
}

// Owns the trainable tensors (base weights or adapter factors) and the
// optimizer; `current()` is what decoding and scoring see.
class Learner {
 public:
  Learner(ModelParams base, const std::optional<AdapterConfig>& adapter, Adam adam, std::uint64_t seed)
      : base_(std::move(base)), adam_(std::move(adam)) {
    if (adapter) {
      adapters_ = init_adapters(base_, adapter->rank, adapter->scaling, default_adapter_targets(base_.config),
                                derive_seed(seed, "adapter"));
    }
    refresh();
  }

  const ModelParams& current() const { return adapters_ ? merged_ : base_; }

  BoundParams bind(Graph& g) const {
    if (adapters_) return bind_params(g, base_, Trainable::adapters, &*adapters_);
    return bind_params(g, base_, Trainable::base);
  }

  // Returns false (and leaves everything untouched) for an all-zero gradient.
  bool step(const std::map<std::string, Tensor>& grads) {
    if (global_norm(grads) == 0.0) return false;
    adam_.step(adapters_ ? adapters_->factors : base_.tensors, grads);
    refresh();
    return true;
  }

  ModelParams result() const { return current(); }
  ModelParams& base() { return base_; }
  Adam& optimizer() { return adam_; }

 private:
  void refresh() {
    if (adapters_) merged_ = apply_adapter(base_, *adapters_);
  }

  ModelParams base_;
  std::optional<AdapterParams> adapters_;
  ModelParams merged_;
  Adam adam_;
};

void accumulate(std::map<std::string, Tensor>& acc, const std::map<std::string, Tensor>& g) {
  for (const auto& [name, t] : g) {
    auto [it, fresh] = acc.try_emplace(name, t);
    if (!fresh) {
      for (std::size_t i = 0; i < t.size(); ++i) it->second[i] += t[i];
    }
  }
}

void scale_all(std::map<std::string, Tensor>& m, double factor) {
  for (auto& [name, t] : m) {
    for (double& x : t.values()) x *= factor;
  }
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (!shuffle) return order;
  Rng rng(derive_seed(seed, "shuffle/" + std::to_string(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

TokenSeq with_eos(const TokenSeq& target, TokenId eos, bool append) {
  TokenSeq out = target;
  if (append) out.push_back(eos);
  return out;
}

// One epoch of (weighted) cross-entropy. Gradients are averaged over
// `batch_size` utterances per optimizer step.
EpochMetrics ce_epoch(Learner& learner, std::span<const SupervisedExample> examples,
                      const std::vector<bool>& append_eos, const ContextSpec& spec, std::size_t batch_size,
                      std::uint64_t seed, std::size_t epoch, bool shuffle, const std::string& method,
                      AdaptResult* result) {
  EpochMetrics m;
  m.epoch = epoch;
  const auto order = epoch_order(examples.size(), seed, epoch, shuffle);
  std::map<std::string, Tensor> acc;
  std::size_t in_batch = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  auto flush = [&] {
    if (in_batch == 0) return;
    scale_all(acc, 1.0 / static_cast<double>(in_batch));
    if (learner.step(acc)) ++m.steps;
    acc.clear();
    in_batch = 0;
  };
  for (std::size_t idx : order) {
    const SupervisedExample& ex = examples[idx];
    try {
      Graph g;
      const BoundParams bp = learner.bind(g);
      const Context ctx = build_context(spec, ex.input, with_eos(ex.target, spec.eos, append_eos[idx]));
      const SequenceTape tape = tape_sequence(g, bp, ctx.tokens, ctx.layout);
      const Var loss = weighted_nll(g, tape, ex.weights);
      g.backward(loss);
      accumulate(acc, leaf_gradients(g, bp));
      ++in_batch;
      const double l = g.value(loss).item();
      loss_sum += l;
      ++loss_count;
      if (result) result->trace.push_back({epoch, ex.id, method, std::nullopt, l, true});
    } catch (const Error& e) {
      ++m.failed;
      if (result) result->warnings.push_back(ex.id + ": " + e.what());
    }
    if (in_batch == batch_size) flush();
  }
  flush();
  m.mean_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
  return m;
}

AdaptResult run_cross_entropy(const ModelParams& params, std::vector<SupervisedExample> examples,
                              std::vector<bool> append_eos, const ContextSpec& spec, const TrainConfig& config,
                              const EpochCallback& on_epoch, AdaptResult result) {
  Learner learner(params, config.adapter, Adam(adam_config(config)), config.seed);
  const std::string name = method_name(config.method);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    if (examples.empty()) {
      result.epochs.push_back({e, 0.0, 0.0, 0, 0, 0});
    } else {
      result.epochs.push_back(ce_epoch(learner, examples, append_eos, spec,
                                       config.batch_size, config.seed, e, config.shuffle, name, &result));
    }
    if (on_epoch) on_epoch(e, learner.current());
  }
  result.params = learner.result();
  return result;
}

std::vector<Hypothesis> decode_nbest(const ModelParams& params, std::span<const TokenId> input,
                                     const ContextSpec& spec, const TrainConfig& config) {
  BeamSet beams = beam_search(params, input, spec, config.beam_size, config.max_output);
  return dedupe_and_truncate(std::move(beams), config.keep, config.dedupe).hypotheses;
}

void score(const ModelParams& params, std::span<const TokenId> input, const ContextSpec& spec,
           const TrainConfig& config, std::vector<Hypothesis>& hyps) {
  for (auto& h : hyps) {
    // An empty hypothesis has no decoding step to score; treat it as fully
    // prompt-reliant so it is never preferred.
    h.quality = h.tokens.empty() ? 1.0 : hypothesis_quality(params, input, h, spec, config.saliency).q;
  }
}

SupervisedExample pseudo_example(const std::string& id, const TokenSeq& input, const Hypothesis& h,
                                 bool with_weights) {
  SupervisedExample ex{id, input, h.tokens, {}};
  if (with_weights) {
    for (double lp : h.token_logprobs) ex.weights.push_back(std::exp(lp));
  }
  return ex;
}

}  // namespace

std::vector<Hypothesis> scored_nbest(const ModelParams& params, std::span<const TokenId> input,
                                     const ContextSpec& spec, const TrainConfig& config) {
  auto hyps = decode_nbest(params, input, spec, config);
  score(params, input, spec, config, hyps);
  return hyps;
}

// ---- supervised training with resumable state ----

TrainingState start_training(const ModelParams& params, const AdamConfig& adam) {
  return {params, Adam(adam), 0};
}

std::vector<double> train_supervised(TrainingState& state, std::span<const SupervisedExample> examples,
                                     const ContextSpec& spec, std::size_t epochs, std::size_t batch_size,
                                     std::uint64_t seed, bool shuffle, const EpochCallback& on_epoch) {
  if (batch_size < 1) throw Error(ErrorKind::invalid_config, "batch_size must be >= 1");
  if (examples.empty() && epochs > 0) throw Error(ErrorKind::invalid_argument, "train_supervised: no examples");
  Learner learner(std::move(state.params), std::nullopt, std::move(state.optimizer), seed);
  const std::vector<bool> eos(examples.size(), true);
  std::vector<double> losses;
  for (std::size_t e = 0; e < epochs; ++e) {
    const std::size_t epoch = state.epochs_done + e;
    const EpochMetrics m = ce_epoch(learner, examples, eos, spec,
                                    batch_size, seed, epoch, shuffle, "train-base", nullptr);
    if (m.failed > 0) {
      throw Error(ErrorKind::state, "train_supervised: " + std::to_string(m.failed) + " examples failed");
    }
    losses.push_back(m.mean_loss);
    if (on_epoch) on_epoch(epoch, learner.current());
  }
  state.params = std::move(learner.base());
  state.optimizer = std::move(learner.optimizer());
  state.epochs_done += epochs;
  return losses;
}

void save_training_state(const std::filesystem::path& path, const TrainingState& state) {
  save_checkpoint(path, state.params);
  state.optimizer.save(path.string() + ".opt", state.epochs_done);
}

TrainingState load_training_state(const std::filesystem::path& path) {
  TrainingState s{load_checkpoint(path), Adam(), 0};
  std::uint64_t epochs = 0;
  s.optimizer = Adam::load(path.string() + ".opt", &epochs);
  s.epochs_done = epochs;
  return s;
}

// ---- SI-SDA ----

AdaptResult adapt_si_sda(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                         const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (corpus.empty()) throw Error(ErrorKind::invalid_argument, "adapt_si_sda: empty corpus");
  Learner learner(params, config.adapter, Adam(adam_config(config)), config.seed);
  AdaptResult result;
  const std::string name = method_name(Method::si_sda);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e;
    double q_sum = 0.0, loss_sum = 0.0;
    std::size_t q_count = 0;
    for (std::size_t idx : epoch_order(corpus.size(), config.seed, e, config.shuffle)) {
      const UnlabeledUtterance& u = corpus[idx];
      try {
        const ModelParams& current = learner.current();
        auto hyps = scored_nbest(current, u.input, spec, config);
        if (config.tau < 1.0) hyps = threshold_filter(hyps, config.tau);
        TraceRecord rec{e, u.id, name, std::nullopt, 0.0, false};
        if (hyps.empty()) {
          ++m.skipped;
          result.trace.push_back(rec);
          continue;
        }
        std::vector<double> q;
        for (const auto& h : hyps) q.push_back(*h.quality);
        const AdvantageSet adv = compute_advantages(q);
        rec.mean_q = adv.baseline;
        q_sum += std::accumulate(q.begin(), q.end(), 0.0);
        q_count += q.size();
        const bool all_zero = std::all_of(adv.advantages.begin(), adv.advantages.end(),
                                          [](double a) { return a == 0.0; });
        if (all_zero) {
          ++m.skipped;
          result.trace.push_back(rec);
          continue;
        }
        Graph g;
        const BoundParams bp = learner.bind(g);
        std::vector<Var> logps;
        for (const auto& h : hyps) {
          const Context ctx = build_context(spec, u.input, h.scored_tokens(spec.eos));
          logps.push_back(tape_sequence(g, bp, ctx.tokens, ctx.layout).total);
        }
        const Var loss = rl_loss(g, adv, logps);
        g.backward(loss);
        rec.loss = g.value(loss).item();
        rec.stepped = learner.step(leaf_gradients(g, bp));
        if (rec.stepped) {
          ++m.steps;
          loss_sum += rec.loss;
        } else {
          ++m.skipped;
        }
        result.trace.push_back(rec);
      } catch (const Error& err) {
        ++m.failed;
        result.warnings.push_back(u.id + ": " + err.what());
      }
    }
    m.mean_q = q_count ? q_sum / static_cast<double>(q_count) : 0.0;
    m.mean_loss = m.steps ? loss_sum / static_cast<double>(m.steps) : 0.0;
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(e, learner.current());
  }
  result.params = learner.result();
  return result;
}

// ---- pseudo-label baselines ----
// Pseudo labels are decoded once from the initial model and then used as
// fixed cross-entropy targets for every epoch.

namespace {

struct PseudoSet {
  std::vector<SupervisedExample> examples;
  std::vector<bool> append_eos;
  AdaptResult result;
};

template <typename Pick>
PseudoSet build_pseudo(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                       const ContextSpec& spec, const TrainConfig& config, bool need_quality, Pick&& pick) {
  PseudoSet out;
  for (const auto& u : corpus) {
    try {
      auto hyps = decode_nbest(params, u.input, spec, config);
      if (need_quality) score(params, u.input, spec, config, hyps);
      pick(u, hyps, out);
    } catch (const Error& e) {
      out.result.warnings.push_back(u.id + ": " + e.what());
    }
  }
  return out;
}

void add_example(PseudoSet& set, const UnlabeledUtterance& u, const Hypothesis& h, bool weights) {
  set.examples.push_back(pseudo_example(u.id, u.input, h, weights));
  set.append_eos.push_back(h.finished);
}

void check_corpus(std::span<const UnlabeledUtterance> corpus, const TrainConfig& config) {
  config.validate();
  if (corpus.empty()) throw Error(ErrorKind::invalid_argument, "adaptation corpus is empty");
}

}  // namespace

AdaptResult baseline_self_train(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                                const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch) {
  check_corpus(corpus, config);
  auto set = build_pseudo(params, corpus, spec, config, false,
                          [](const UnlabeledUtterance& u, const std::vector<Hypothesis>& h, PseudoSet& s) {
                            add_example(s, u, h.front(), false);
                          });
  return run_cross_entropy(params, std::move(set.examples), std::move(set.append_eos), spec, config, on_epoch,
                           std::move(set.result));
}

AdaptResult baseline_conf(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                          const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch) {
  check_corpus(corpus, config);
  auto set = build_pseudo(params, corpus, spec, config, false,
                          [](const UnlabeledUtterance& u, const std::vector<Hypothesis>& h, PseudoSet& s) {
                            add_example(s, u, h.front(), true);
                          });
  return run_cross_entropy(params, std::move(set.examples), std::move(set.append_eos), spec, config, on_epoch,
                           std::move(set.result));
}

double beam_diversity(std::span<const Hypothesis> hypotheses) {
  const std::size_t n = hypotheses.size();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      s += static_cast<double>(edit_distance(hypotheses[i].tokens, hypotheses[j].tokens));
    }
  }
  return s / static_cast<double>(n * (n - 1) / 2);
}

std::vector<std::string> filtered_ids(std::span<const std::pair<std::string, double>> diversity, double fraction) {
  std::vector<std::pair<std::string, double>> ranked(diversity.begin(), diversity.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const auto drop = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ranked.size())));
  std::vector<std::string> out;
  for (std::size_t i = 0; i < drop; ++i) out.push_back(ranked[i].first);
  return out;
}

AdaptResult baseline_filtering(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                               const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch) {
  check_corpus(corpus, config);
  std::vector<std::pair<std::string, double>> diversity;
  auto set = build_pseudo(params, corpus, spec, config, false,
                          [&](const UnlabeledUtterance& u, const std::vector<Hypothesis>& h, PseudoSet& s) {
                            diversity.emplace_back(u.id, beam_diversity(h));
                            add_example(s, u, h.front(), false);
                          });
  const auto dropped = filtered_ids(diversity, config.filter_fraction);
  PseudoSet kept;
  kept.result = std::move(set.result);
  for (std::size_t i = 0; i < set.examples.size(); ++i) {
    if (std::find(dropped.begin(), dropped.end(), set.examples[i].id) != dropped.end()) continue;
    kept.examples.push_back(std::move(set.examples[i]));
    kept.append_eos.push_back(set.append_eos[i]);
  }
  return run_cross_entropy(params, std::move(kept.examples), std::move(kept.append_eos), spec, config, on_epoch,
                           std::move(kept.result));
}

std::size_t argmin_quality(std::span<const Hypothesis> hypotheses) {
  if (hypotheses.empty()) throw Error(ErrorKind::invalid_argument, "argmin_quality: no hypotheses");
  std::size_t best = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    if (!hypotheses[i].quality) throw Error(ErrorKind::invalid_argument, "argmin_quality: unscored hypothesis");
    if (*hypotheses[i].quality < *hypotheses[best].quality) best = i;
  }
  return best;
}

std::size_t argmax_quality(std::span<const Hypothesis> hypotheses) {
  if (hypotheses.empty()) throw Error(ErrorKind::invalid_argument, "argmax_quality: no hypotheses");
  std::size_t best = 0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    if (!hypotheses[i].quality) throw Error(ErrorKind::invalid_argument, "argmax_quality: unscored hypothesis");
    if (*hypotheses[i].quality >= *hypotheses[best].quality) best = i;
  }
  return best;
}

AdaptResult baseline_min_q(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                           const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch) {
  check_corpus(corpus, config);
  auto set = build_pseudo(params, corpus, spec, config, true,
                          [](const UnlabeledUtterance& u, const std::vector<Hypothesis>& h, PseudoSet& s) {
                            add_example(s, u, h[argmin_quality(h)], false);
                          });
  return run_cross_entropy(params, std::move(set.examples), std::move(set.append_eos), spec, config, on_epoch,
                           std::move(set.result));
}

AdaptResult baseline_dpo(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                         const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch) {
  check_corpus(corpus, config);
  struct Pair {
    std::string id;
    Context chosen, rejected;
    double chosen_ref = 0.0, rejected_ref = 0.0;
  };
  std::vector<Pair> pairs;
  AdaptResult result;
  std::size_t skipped_pairs = 0;
  for (const auto& u : corpus) {
    try {
      auto hyps = scored_nbest(params, u.input, spec, config);
      const std::size_t c = argmin_quality(hyps);
      const std::size_t r = argmax_quality(hyps);
      if (c == r || *hyps[c].quality == *hyps[r].quality) {
        ++skipped_pairs;
        continue;
      }
      Pair p{u.id, build_context(spec, u.input, hyps[c].scored_tokens(spec.eos)),
             build_context(spec, u.input, hyps[r].scored_tokens(spec.eos))};
      p.chosen_ref = sequence_logprob(params, p.chosen.tokens, p.chosen.layout).total;
      p.rejected_ref = sequence_logprob(params, p.rejected.tokens, p.rejected.layout).total;
      pairs.push_back(std::move(p));
    } catch (const Error& e) {
      result.warnings.push_back(u.id + ": " + e.what());
    }
  }

  Learner learner(params, config.adapter, Adam(adam_config(config)), config.seed);
  const std::string name = method_name(Method::dpo);
  for (std::size_t e = 0; e < config.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e;
    m.skipped = skipped_pairs;
    double loss_sum = 0.0;
    for (std::size_t idx : epoch_order(pairs.size(), config.seed, e, config.shuffle)) {
      const Pair& p = pairs[idx];
      try {
        Graph g;
        const BoundParams bp = learner.bind(g);
        const Var c = tape_sequence(g, bp, p.chosen.tokens, p.chosen.layout).total;
        const Var r = tape_sequence(g, bp, p.rejected.tokens, p.rejected.layout).total;
        const Var loss = dpo_loss(g, c, r, p.chosen_ref, p.rejected_ref, config.dpo_beta);
        g.backward(loss);
        const double l = g.value(loss).item();
        const bool stepped = learner.step(leaf_gradients(g, bp));
        if (stepped) {
          ++m.steps;
          loss_sum += l;
        } else {
          ++m.skipped;
        }
        result.trace.push_back({e, p.id, name, std::nullopt, l, stepped});
      } catch (const Error& err) {
        ++m.failed;
        result.warnings.push_back(p.id + ": " + err.what());
      }
    }
    m.mean_loss = m.steps ? loss_sum / static_cast<double>(m.steps) : 0.0;
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(e, learner.current());
  }
  result.params = learner.result();
  return result;
}

AdaptResult baseline_sft(const ModelParams& params, std::span<const Utterance> labeled, const ContextSpec& spec,
                         const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (labeled.empty()) throw Error(ErrorKind::invalid_argument, "baseline_sft: empty corpus");
  std::vector<SupervisedExample> examples;
  for (const auto& u : labeled) examples.push_back({u.id, u.input, u.reference, {}});
  std::vector<bool> eos(examples.size(), true);
  return run_cross_entropy(params, std::move(examples), std::move(eos), spec, config, on_epoch, {});
}

AdaptResult adapt_unsupervised(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                               const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch) {
  switch (config.method) {
    case Method::zero_shot: {
      AdaptResult r;
      r.params = params;
      return r;
    }
    case Method::self_train: return baseline_self_train(params, corpus, spec, config, on_epoch);
    case Method::filtering: return baseline_filtering(params, corpus, spec, config, on_epoch);
    case Method::conf: return baseline_conf(params, corpus, spec, config, on_epoch);
    case Method::min_q: return baseline_min_q(params, corpus, spec, config, on_epoch);
    case Method::dpo: return baseline_dpo(params, corpus, spec, config, on_epoch);
    case Method::si_sda: return adapt_si_sda(params, corpus, spec, config, on_epoch);
    case Method::sft: break;
  }
  throw Error(ErrorKind::invalid_argument, "sft needs a labeled corpus");
}

// ---- evaluation ----

EvalResult evaluate(const ModelParams& params, std::span<const Utterance> corpus, const ContextSpec& spec,
                    std::size_t beam_size, std::size_t max_output) {
  if (corpus.empty()) throw Error(ErrorKind::invalid_argument, "evaluate: empty corpus");
  EvalResult out;
  ErrorTally tally;
  for (const auto& u : corpus) {
    Hypothesis hyp = beam_size <= 1
                         ? greedy_decode(params, u.input, spec, max_output)
                         : beam_search(params, u.input, spec, beam_size, max_output).hypotheses.front();
    tally.add(hyp.tokens, u.reference);
    out.ids.push_back(u.id);
    out.utterance_error.push_back(token_error_rate(hyp.tokens, u.reference));
    out.hypotheses.push_back(std::move(hyp));
  }
  out.utterances = tally.utterances;
  out.token_error_rate = tally.rate();
  return out;
}

}  // namespace sisda
