#include "sisda/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "sisda/error.hpp"
#include "sisda/rng.hpp"

namespace sisda {

using nlohmann::json;

namespace {

constexpr Split kSplits[] = {Split::source_train, Split::target_adapt, Split::target_test, Split::source_test};

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

std::size_t SplitSizes::count(Split s) const {
  switch (s) {
    case Split::source_train: return source_train;
    case Split::target_adapt: return target_adapt;
    case Split::target_test: return target_test;
    case Split::source_test: return source_test;
  }
  return 0;
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.source.kind = DomainKind::clean;
  c.source.noise_prob = 0.0;
  c.target.kind = DomainKind::noise;
  c.target.noise_prob = 0.15;
  c.adaptation.learning_rate = 1e-3;
  c.adaptation.epochs = 2;
  return c;
}

void ExperimentConfig::validate() const {
  task.validate();
  model_config().validate();
  source.validate();
  target.validate();
  for (Split s : kSplits) {
    if (splits.count(s) < 1) throw Error(ErrorKind::invalid_config, "split " + split_name(s) + " count must be >= 1");
  }
  if (!(base.learning_rate > 0.0)) throw Error(ErrorKind::invalid_config, "base.learning_rate must be > 0");
  if (base.batch_size < 1) throw Error(ErrorKind::invalid_config, "base.batch_size must be >= 1");
  adaptation.validate();
  if (evaluation.max_output < 1) throw Error(ErrorKind::invalid_config, "evaluation.max_output must be >= 1");
  const std::size_t budget = 2 + task.input_slots() + std::max(evaluation.max_output, adaptation.max_output) + 1;
  if (budget > model.max_len) {
    throw Error(ErrorKind::invalid_config, "context of " + std::to_string(budget) + " positions exceeds model.max_len " +
                                               std::to_string(model.max_len));
  }
  if (std::min(evaluation.max_output, adaptation.max_output) < task.max_len) {
    throw Error(ErrorKind::invalid_config, "max_output must cover the longest reference");
  }
  if (out_dir.empty()) throw Error(ErrorKind::invalid_config, "out_dir must be set");
}

std::filesystem::path ExperimentConfig::data_path() const { return data_dir.empty() ? out_dir / "data" : data_dir; }

std::filesystem::path ExperimentConfig::checkpoint_path() const {
  return checkpoint_dir.empty() ? out_dir / "checkpoints" : checkpoint_dir;
}

std::filesystem::path ExperimentConfig::split_file(Split s) const { return data_path() / (split_name(s) + ".tsv"); }

std::filesystem::path ExperimentConfig::base_checkpoint() const { return checkpoint_path() / "base.ckpt"; }

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m = model;
  m.vocab_size = vocab().size();
  return m;
}

ContextSpec ExperimentConfig::context() const { return default_context(vocab(), task.input_slots()); }

Vocab ExperimentConfig::vocab() const { return task_vocab(task); }

std::uint64_t ExperimentConfig::component_seed(const std::string& component) const {
  return derive_seed(seed, component);
}

// ---- config parsing ----

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorKind::parse, where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw Error(ErrorKind::parse, where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, where + "." + key + ": " + e.what());
  }
}

void read_path(const json& j, const char* key, std::filesystem::path& out, const std::string& where) {
  std::string s = out.string();
  read(j, key, s, where);
  out = s;
}

void read_domain(const json& j, DomainSpec& d, const std::string& where) {
  check_keys(j, {"kind", "noise_prob", "neighbor_offsets", "swap_pairs"}, where);
  if (j.contains("kind")) {
    std::string kind;
    read(j, "kind", kind, where);
    d.kind = parse_domain_kind(kind);
    if (d.kind != DomainKind::noise) d.noise_prob = 0.0;
  }
  read(j, "noise_prob", d.noise_prob, where);
  read(j, "neighbor_offsets", d.neighbor_offsets, where);
  read(j, "swap_pairs", d.swap_pairs, where);
}

json domain_json(const DomainSpec& d) {
  return {{"kind", domain_kind_name(d.kind)},
          {"noise_prob", d.noise_prob},
          {"neighbor_offsets", d.neighbor_offsets},
          {"swap_pairs", d.swap_pairs}};
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("config: ") + e.what());
  }
  ExperimentConfig c = ExperimentConfig::defaults();
  check_keys(j, {"seed", "paths", "task", "model", "domains", "splits", "base_training", "adaptation", "evaluation",
                 "analysis"},
             "config");
  read(j, "seed", c.seed, "config");
  if (j.contains("paths")) {
    const json& p = j["paths"];
    check_keys(p, {"out_dir", "data_dir", "checkpoint_dir"}, "paths");
    read_path(p, "out_dir", c.out_dir, "paths");
    read_path(p, "data_dir", c.data_dir, "paths");
    read_path(p, "checkpoint_dir", c.checkpoint_dir, "paths");
  }
  if (j.contains("task")) {
    const json& t = j["task"];
    check_keys(t, {"alphabet_size", "shift", "min_len", "max_len", "min_frames", "max_frames",
                   "distinct_neighbors", "task_tag"},
               "task");
    read(t, "alphabet_size", c.task.alphabet_size, "task");
    read(t, "shift", c.task.shift, "task");
    read(t, "min_len", c.task.min_len, "task");
    read(t, "max_len", c.task.max_len, "task");
    read(t, "min_frames", c.task.min_frames, "task");
    read(t, "max_frames", c.task.max_frames, "task");
    read(t, "distinct_neighbors", c.task.distinct_neighbors, "task");
    read(t, "task_tag", c.task.task_tag, "task");
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, {"dim", "heads", "layers", "ffn_dim", "max_len"}, "model");
    read(m, "dim", c.model.dim, "model");
    read(m, "heads", c.model.heads, "model");
    read(m, "layers", c.model.layers, "model");
    read(m, "ffn_dim", c.model.ffn_dim, "model");
    read(m, "max_len", c.model.max_len, "model");
  }
  if (j.contains("domains")) {
    const json& d = j["domains"];
    check_keys(d, {"source", "target"}, "domains");
    if (d.contains("source")) read_domain(d["source"], c.source, "domains.source");
    if (d.contains("target")) read_domain(d["target"], c.target, "domains.target");
  }
  if (j.contains("splits")) {
    const json& s = j["splits"];
    check_keys(s, {"source_train", "target_adapt", "target_test", "source_test"}, "splits");
    read(s, "source_train", c.splits.source_train, "splits");
    read(s, "target_adapt", c.splits.target_adapt, "splits");
    read(s, "target_test", c.splits.target_test, "splits");
    read(s, "source_test", c.splits.source_test, "splits");
  }
  if (j.contains("base_training")) {
    const json& b = j["base_training"];
    check_keys(b, {"learning_rate", "epochs", "batch_size"}, "base_training");
    read(b, "learning_rate", c.base.learning_rate, "base_training");
    read(b, "epochs", c.base.epochs, "base_training");
    read(b, "batch_size", c.base.batch_size, "base_training");
  }
  if (j.contains("adaptation")) {
    const json& a = j["adaptation"];
    const std::string w = "adaptation";
    check_keys(a, {"learning_rate", "epochs", "batch_size", "beam_size", "keep", "dedupe", "max_output",
                   "saliency_layer", "tau", "adapter", "dpo_beta", "filter_fraction", "grad_clip", "shuffle"},
               w);
    TrainConfig& t = c.adaptation;
    read(a, "learning_rate", t.learning_rate, w);
    read(a, "epochs", t.epochs, w);
    read(a, "batch_size", t.batch_size, w);
    read(a, "beam_size", t.beam_size, w);
    read(a, "keep", t.keep, w);
    read(a, "dedupe", t.dedupe, w);
    read(a, "max_output", t.max_output, w);
    read(a, "tau", t.tau, w);
    read(a, "dpo_beta", t.dpo_beta, w);
    read(a, "filter_fraction", t.filter_fraction, w);
    read(a, "grad_clip", t.grad_clip, w);
    read(a, "shuffle", t.shuffle, w);
    if (a.contains("saliency_layer")) {
      const json& l = a["saliency_layer"];
      if (l.is_null() || l == "last") {
        t.saliency = {};
      } else if (l == "mean") {
        t.saliency = {std::nullopt, true};
      } else if (l.is_number_unsigned()) {
        t.saliency = {l.get<std::size_t>(), false};
      } else {
        throw Error(ErrorKind::parse, "adaptation.saliency_layer: expected a layer index, \"last\" or \"mean\"");
      }
    }
    if (a.contains("adapter")) {
      const json& ad = a["adapter"];
      if (ad.is_null()) {
        t.adapter.reset();
      } else {
        check_keys(ad, {"rank", "scaling"}, "adaptation.adapter");
        AdapterConfig cfg;
        read(ad, "rank", cfg.rank, "adaptation.adapter");
        read(ad, "scaling", cfg.scaling, "adaptation.adapter");
        t.adapter = cfg;
      }
    }
  }
  if (j.contains("evaluation")) {
    const json& e = j["evaluation"];
    check_keys(e, {"beam_size", "max_output", "mean_q"}, "evaluation");
    read(e, "beam_size", c.evaluation.beam_size, "evaluation");
    read(e, "max_output", c.evaluation.max_output, "evaluation");
    read(e, "mean_q", c.evaluation.mean_q, "evaluation");
  }
  if (j.contains("analysis")) {
    const json& a = j["analysis"];
    check_keys(a, {"split", "max_utterances", "dump_saliency"}, "analysis");
    if (a.contains("split")) {
      std::string s;
      read(a, "split", s, "analysis");
      c.analysis.split = parse_split(s);
    }
    read(a, "max_utterances", c.analysis.max_utterances, "analysis");
    read(a, "dump_saliency", c.analysis.dump_saliency, "analysis");
  }
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string dump_experiment_config(const ExperimentConfig& c) {
  const TrainConfig& t = c.adaptation;
  json sal;
  if (t.saliency.mean_over_layers) {
    sal = "mean";
  } else if (t.saliency.layer) {
    sal = *t.saliency.layer;
  } else {
    sal = "last";
  }
  json adapter = nullptr;
  if (t.adapter) adapter = {{"rank", t.adapter->rank}, {"scaling", t.adapter->scaling}};
  json j = {
      {"seed", c.seed},
      {"paths",
       {{"out_dir", c.out_dir.string()}, {"data_dir", c.data_dir.string()}, {"checkpoint_dir", c.checkpoint_dir.string()}}},
      {"task",
       {{"alphabet_size", c.task.alphabet_size},
        {"shift", c.task.shift},
        {"min_len", c.task.min_len},
        {"max_len", c.task.max_len},
        {"min_frames", c.task.min_frames},
        {"max_frames", c.task.max_frames},
        {"distinct_neighbors", c.task.distinct_neighbors},
        {"task_tag", c.task.task_tag}}},
      {"model",
       {{"dim", c.model.dim},
        {"heads", c.model.heads},
        {"layers", c.model.layers},
        {"ffn_dim", c.model.ffn_dim},
        {"max_len", c.model.max_len}}},
      {"domains", {{"source", domain_json(c.source)}, {"target", domain_json(c.target)}}},
      {"splits",
       {{"source_train", c.splits.source_train},
        {"target_adapt", c.splits.target_adapt},
        {"target_test", c.splits.target_test},
        {"source_test", c.splits.source_test}}},
      {"base_training",
       {{"learning_rate", c.base.learning_rate}, {"epochs", c.base.epochs}, {"batch_size", c.base.batch_size}}},
      {"adaptation",
       {{"learning_rate", t.learning_rate},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"beam_size", t.beam_size},
        {"keep", t.keep},
        {"dedupe", t.dedupe},
        {"max_output", t.max_output},
        {"saliency_layer", sal},
        {"tau", t.tau},
        {"adapter", adapter},
        {"dpo_beta", t.dpo_beta},
        {"filter_fraction", t.filter_fraction},
        {"grad_clip", t.grad_clip},
        {"shuffle", t.shuffle}}},
      {"evaluation",
       {{"beam_size", c.evaluation.beam_size},
        {"max_output", c.evaluation.max_output},
        {"mean_q", c.evaluation.mean_q}}},
      {"analysis",
       {{"split", split_name(c.analysis.split)},
        {"max_utterances", c.analysis.max_utterances},
        {"dump_saliency", c.analysis.dump_saliency}}},
  };
  return j.dump(2) + "\n";
}

void apply_env_overrides(ExperimentConfig& config, const std::function<const char*(const char*)>& lookup) {
  auto get = [&](const char* name) -> std::optional<std::string> {
    const char* v = lookup(name);
    if (!v || !*v) return std::nullopt;
    return std::string(v);
  };
  auto to_u64 = [](const std::string& name, const std::string& v) {
    try {
      std::size_t pos = 0;
      const unsigned long long x = std::stoull(v, &pos);
      if (pos != v.size() || v[0] == '-') throw std::invalid_argument(v);
      return static_cast<std::uint64_t>(x);
    } catch (const std::exception&) {
      throw Error(ErrorKind::parse, name + ": expected a nonnegative integer, got '" + v + "'");
    }
  };
  if (auto v = get("SISDA_SEED")) config.seed = to_u64("SISDA_SEED", *v);
  if (auto v = get("SISDA_OUT_DIR")) config.out_dir = *v;
  if (auto v = get("SISDA_DATA_DIR")) config.data_dir = *v;
  if (auto v = get("SISDA_CHECKPOINT_DIR")) config.checkpoint_dir = *v;
  if (auto v = get("SISDA_ADAPT_EPOCHS")) config.adaptation.epochs = to_u64("SISDA_ADAPT_EPOCHS", *v);
  if (auto v = get("SISDA_BASE_EPOCHS")) config.base.epochs = to_u64("SISDA_BASE_EPOCHS", *v);
  if (auto v = get("SISDA_LEARNING_RATE")) {
    try {
      std::size_t pos = 0;
      config.adaptation.learning_rate = std::stod(*v, &pos);
      if (pos != v->size()) throw std::invalid_argument(*v);
    } catch (const std::exception&) {
      throw Error(ErrorKind::parse, "SISDA_LEARNING_RATE: expected a number, got '" + *v + "'");
    }
  }
}

// ---- metrics records ----

std::string MetricsRecord::to_json_line() const {
  json j = {{"method", method}, {"split", split}, {"token_error_rate", token_error_rate}, {"seed", seed}};
  j["error_rate_reduction"] = error_rate_reduction ? json(*error_rate_reduction) : json(nullptr);
  j["mean_q"] = mean_q ? json(*mean_q) : json(nullptr);
  return j.dump();
}

MetricsRecord MetricsRecord::from_json_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    MetricsRecord r;
    r.method = j.at("method").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.token_error_rate = j.at("token_error_rate").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("error_rate_reduction") && !j["error_rate_reduction"].is_null()) {
      r.error_rate_reduction = j["error_rate_reduction"].get<double>();
    }
    if (j.contains("mean_q") && !j["mean_q"].is_null()) r.mean_q = j["mean_q"].get<double>();
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse, std::string("metrics record: ") + e.what());
  }
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open metrics file " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(MetricsRecord::from_json_line(line));
  }
  return out;
}

namespace {

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create directory " + dir.string() + ": " + ec.message());
}

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error(ErrorKind::io, "cannot append to " + path.string());
  out << line << '\n';
}

void emit_record(const ExperimentConfig& config, const MetricsRecord& r) {
  ensure_dir(config.out_dir);
  append_line(config.out_dir / "metrics.jsonl", r.to_json_line());
  json t = {{"method", r.method}, {"split", r.split}, {"seed", r.seed}, {"seconds", r.seconds}};
  append_line(config.out_dir / "timings.jsonl", t.dump());
}

std::optional<double> zero_shot_anchor(const ExperimentConfig& config, const std::string& split) {
  const auto path = config.out_dir / "metrics.jsonl";
  if (!std::filesystem::exists(path)) return std::nullopt;
  std::optional<double> anchor;
  for (const auto& r : read_metrics(path)) {
    if (r.method == "zero-shot" && r.split == split && r.seed == config.seed) anchor = r.token_error_rate;
  }
  return anchor;
}

std::optional<double> mean_quality(const ModelParams& params, const EvalResult& eval, std::span<const Utterance> corpus,
                                   const ContextSpec& spec, const SaliencyOptions& saliency) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < eval.hypotheses.size(); ++i) {
    const Hypothesis& h = eval.hypotheses[i];
    if (h.tokens.empty()) continue;
    s += hypothesis_quality(params, corpus[i].input, h, spec, saliency).q;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

}  // namespace

// ---- commands ----

GenerateSummary cmd_generate(const ExperimentConfig& config) {
  config.validate();
  const Vocab vocab = config.vocab();
  std::vector<std::pair<Split, DomainCorpus>> corpora;
  for (Split s : kSplits) {
    const bool target = s == Split::target_adapt || s == Split::target_test;
    DomainSpec d = target ? config.target : config.source;
    d.seed = config.component_seed(target ? "corpus/target" : "corpus/source");
    corpora.emplace_back(s, generate_corpus(config.task, d, config.splits.count(s), s));
  }
  ensure_dir(config.data_path());
  GenerateSummary out;
  for (const auto& [s, corpus] : corpora) {
    save_corpus(config.split_file(s), corpus, vocab);
    out.counts[split_name(s)] = corpus.utterances.size();
  }
  return out;
}

namespace {

std::vector<Utterance> load_split(const ExperimentConfig& config, Split s) {
  return load_corpus(config.split_file(s), config.vocab()).utterances;
}

MetricsRecord evaluate_record(const ExperimentConfig& config, const ModelParams& params, const std::string& method,
                              Split split, bool with_q, double* ter_out) {
  const auto start = std::chrono::steady_clock::now();
  const auto corpus = load_split(config, split);
  const ContextSpec spec = config.context();
  const EvalResult eval = evaluate(params, corpus, spec, config.evaluation.beam_size, config.evaluation.max_output);
  MetricsRecord r;
  r.method = method;
  r.split = split_name(split);
  r.token_error_rate = eval.token_error_rate;
  r.seed = config.seed;
  if (with_q && config.evaluation.mean_q) {
    r.mean_q = mean_quality(params, eval, corpus, spec, config.adaptation.saliency);
  }
  r.seconds = seconds_since(start);
  if (ter_out) *ter_out = eval.token_error_rate;
  return r;
}

}  // namespace

TrainBaseSummary cmd_train_base(const ExperimentConfig& config, const std::optional<std::filesystem::path>& resume) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const ContextSpec spec = config.context();
  const auto train = load_split(config, Split::source_train);
  std::vector<SupervisedExample> examples;
  examples.reserve(train.size());
  for (const auto& u : train) examples.push_back({u.id, u.input, u.reference, {}});

  TrainingState state = resume ? load_training_state(*resume)
                               : start_training(init_params(config.model_config(), config.component_seed("model-init")),
                                                AdamConfig{config.base.learning_rate});
  if (state.params.config != config.model_config()) {
    throw Error(ErrorKind::invalid_config, "checkpoint model shape does not match the config");
  }
  TrainBaseSummary out;
  out.epoch_losses = train_supervised(state, examples, spec, config.base.epochs, config.base.batch_size,
                                      config.component_seed("base-train"));
  ensure_dir(config.checkpoint_path());
  out.checkpoint = config.base_checkpoint();
  save_training_state(out.checkpoint, state);
  const double train_seconds = seconds_since(start);

  MetricsRecord src = evaluate_record(config, state.params, "base", Split::source_test, false, &out.source_test_error);
  MetricsRecord tgt = evaluate_record(config, state.params, "base", Split::target_test, false, &out.target_test_error);
  src.seconds += train_seconds;
  emit_record(config, src);
  emit_record(config, tgt);
  return out;
}

AdaptSummary cmd_adapt(const ExperimentConfig& config, Method method,
                       const std::optional<std::filesystem::path>& checkpoint) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const ModelParams base = load_checkpoint(checkpoint.value_or(config.base_checkpoint()));
  if (base.config != config.model_config()) {
    throw Error(ErrorKind::invalid_config, "checkpoint model shape does not match the config");
  }
  const ContextSpec spec = config.context();
  TrainConfig tc = config.adaptation;
  tc.method = method;
  const std::string name = method_name(method);
  tc.seed = config.component_seed("adapt/" + name);

  ensure_dir(config.checkpoint_path());
  ensure_dir(config.out_dir);
  auto on_epoch = [&](std::size_t epoch, const ModelParams& p) {
    save_checkpoint(config.checkpoint_path() / (name + "-epoch" + std::to_string(epoch + 1) + ".ckpt"), p);
  };
  AdaptResult result;
  if (is_unsupervised(method)) {
    // The unlabeled loader never parses the reference column.
    const auto corpus = load_unlabeled(config.split_file(Split::target_adapt), config.vocab());
    result = adapt_unsupervised(base, corpus, spec, tc, on_epoch);
  } else {
    const auto corpus = load_split(config, Split::target_adapt);
    result = baseline_sft(base, corpus, spec, tc, on_epoch);
  }
  AdaptSummary out;
  out.method = method;
  out.epochs = result.epochs;
  out.warnings = result.warnings;
  out.checkpoint = config.checkpoint_path() / (name + ".ckpt");
  save_checkpoint(out.checkpoint, result.params);
  const double train_seconds = seconds_since(start);

  {
    std::ofstream trace(config.out_dir / ("trace-" + name + ".jsonl"), std::ios::trunc);
    if (!trace) throw Error(ErrorKind::io, "cannot write trace file");
    for (const auto& t : result.trace) {
      json j = {{"epoch", t.epoch}, {"id", t.utterance_id}, {"method", t.method}, {"loss", t.loss},
                {"stepped", t.stepped}};
      j["mean_q"] = t.mean_q ? json(*t.mean_q) : json(nullptr);
      trace << j.dump() << '\n';
    }
  }

  const auto anchor = zero_shot_anchor(config, split_name(Split::target_test));
  MetricsRecord tgt = evaluate_record(config, result.params, name, Split::target_test, true, &out.target_test_error);
  MetricsRecord src = evaluate_record(config, result.params, name, Split::source_test, false, &out.source_test_error);
  tgt.seconds += train_seconds;
  if (method != Method::zero_shot && anchor && *anchor > 0.0) {
    tgt.error_rate_reduction = error_rate_reduction(*anchor, tgt.token_error_rate);
    out.error_rate_reduction = tgt.error_rate_reduction;
  }
  if (method != Method::zero_shot) {
    const auto src_anchor = zero_shot_anchor(config, split_name(Split::source_test));
    if (src_anchor && *src_anchor > 0.0) src.error_rate_reduction = error_rate_reduction(*src_anchor, src.token_error_rate);
  }
  emit_record(config, tgt);
  emit_record(config, src);
  return out;
}

// ---- analysis ----

AnalysisSummary analyze_reliance(const ModelParams& params, std::span<const Utterance> corpus,
                                 const ContextSpec& spec, const EvaluationConfig& eval,
                                 const SaliencyOptions& saliency, std::ostream* saliency_dump) {
  AnalysisSummary out;
  const EvalResult decoded = evaluate(params, corpus, spec, eval.beam_size, eval.max_output);
  double sum_c = 0.0, sum_e = 0.0;
  std::vector<double> qs, ters;
  const std::size_t layer = saliency.layer.value_or(params.config.layers - 1);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Hypothesis& h = decoded.hypotheses[i];
    if (h.tokens.empty()) continue;
    const QualityScore score = hypothesis_quality(params, corpus[i].input, h, spec, saliency);
    const RelianceSummary rs = reliance_summary(score.profile, classify_tokens(h.tokens, corpus[i].reference));
    UtteranceAnalysis row;
    row.id = corpus[i].id;
    row.correct_count = rs.correct_count;
    row.error_count = rs.error_count;
    row.mean_correct = rs.mean_correct;
    row.mean_error = rs.mean_error;
    row.q = score.q;
    row.token_error_rate = decoded.utterance_error[i];
    if (rs.mean_correct && rs.mean_error) {
      ++out.both_nonempty;
      sum_c += *rs.mean_correct;
      sum_e += *rs.mean_error;
    }
    qs.push_back(row.q);
    ters.push_back(row.token_error_rate);
    if (saliency_dump) write_saliency_record(*saliency_dump, row.id, saliency, layer, score);
    out.rows.push_back(std::move(row));
  }
  if (out.both_nonempty > 0) {
    out.mean_correct = sum_c / static_cast<double>(out.both_nonempty);
    out.mean_error = sum_e / static_cast<double>(out.both_nonempty);
    out.share_error = normalized_pair(out.mean_correct, out.mean_error).second;
  }
  out.q_vs_error = spearman(qs, ters);
  return out;
}

AnalysisSummary cmd_analyze(const ExperimentConfig& config, const std::optional<std::filesystem::path>& checkpoint) {
  config.validate();
  const ModelParams params = load_checkpoint(checkpoint.value_or(config.base_checkpoint()));
  auto corpus = load_split(config, config.analysis.split);
  if (config.analysis.max_utterances > 0 && corpus.size() > config.analysis.max_utterances) {
    corpus.resize(config.analysis.max_utterances);
  }
  ensure_dir(config.out_dir);
  std::ofstream dump;
  if (config.analysis.dump_saliency) {
    dump.open(config.out_dir / "saliency.jsonl", std::ios::trunc);
    if (!dump) throw Error(ErrorKind::io, "cannot write saliency dump");
  }
  AnalysisSummary s = analyze_reliance(params, corpus, config.context(), config.evaluation, config.adaptation.saliency,
                                       config.analysis.dump_saliency ? &dump : nullptr);
  s.csv = config.out_dir / "analysis.csv";
  std::ofstream csv(s.csv, std::ios::trunc);
  if (!csv) throw Error(ErrorKind::io, "cannot write " + s.csv.string());
  write_analysis_csv(csv, s);
  json summary = {{"utterances", s.rows.size()},
                  {"both_nonempty", s.both_nonempty},
                  {"mean_correct", s.mean_correct},
                  {"mean_error", s.mean_error},
                  {"normalized_correct", 1.0 - s.share_error},
                  {"normalized_error", s.share_error},
                  {"spearman_q_error", s.q_vs_error.rho},
                  {"spearman_p", s.q_vs_error.p_value}};
  std::ofstream sum(config.out_dir / "analysis-summary.json", std::ios::trunc);
  sum << summary.dump(2) << '\n';
  return s;
}

void write_analysis_csv(std::ostream& out, const AnalysisSummary& summary) {
  out << "id,correct_count,error_count,mean_correct,mean_error,norm_correct,norm_error,q,token_error_rate\n";
  for (const auto& r : summary.rows) {
    out << r.id << ',' << r.correct_count << ',' << r.error_count << ',';
    out << (r.mean_correct ? fmt_double(*r.mean_correct) : "") << ',';
    out << (r.mean_error ? fmt_double(*r.mean_error) : "") << ',';
    if (r.mean_correct && r.mean_error) {
      const auto [nc, ne] = normalized_pair(*r.mean_correct, *r.mean_error);
      out << fmt_double(nc) << ',' << fmt_double(ne) << ',';
    } else {
      out << ",,";
    }
    out << fmt_double(r.q) << ',' << fmt_double(r.token_error_rate) << '\n';
  }
}

std::vector<UtteranceAnalysis> read_analysis_csv(std::istream& in) {
  std::vector<UtteranceAnalysis> rows;
  std::string line;
  std::size_t line_no = 0;
  auto opt = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 9) throw Error(ErrorKind::parse, "analysis csv line " + std::to_string(line_no) + ": expected 9 fields");
    try {
      UtteranceAnalysis r;
      r.id = f[0];
      r.correct_count = std::stoul(f[1]);
      r.error_count = std::stoul(f[2]);
      r.mean_correct = opt(f[3]);
      r.mean_error = opt(f[4]);
      r.q = std::stod(f[7]);
      r.token_error_rate = std::stod(f[8]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::parse, "analysis csv line " + std::to_string(line_no) + ": bad number");
    }
  }
  return rows;
}

// ---- report ----

std::vector<ReportRow> cmd_report(const std::filesystem::path& out_dir) {
  if (!std::filesystem::is_directory(out_dir)) throw Error(ErrorKind::io, "no such output directory " + out_dir.string());
  const auto records = read_metrics(out_dir / "metrics.jsonl");

  // Latest record wins per (method, split, seed); first-seen order is kept.
  std::vector<ReportRow> rows;
  for (const auto& r : records) {
    ReportRow row{r.method, r.split, r.seed, r.token_error_rate, std::nullopt, r.mean_q};
    auto it = std::find_if(rows.begin(), rows.end(), [&](const ReportRow& x) {
      return x.method == row.method && x.split == row.split && x.seed == row.seed;
    });
    if (it == rows.end()) {
      rows.push_back(row);
    } else {
      *it = row;
    }
  }
  for (auto& row : rows) {
    if (row.method == "zero-shot") continue;
    for (const auto& a : rows) {
      if (a.method == "zero-shot" && a.split == row.split && a.seed == row.seed && a.token_error_rate > 0.0) {
        row.error_rate_reduction = error_rate_reduction(a.token_error_rate, row.token_error_rate);
      }
    }
  }

  std::ofstream csv(out_dir / "report.csv", std::ios::trunc);
  std::ofstream txt(out_dir / "report.txt", std::ios::trunc);
  if (!csv || !txt) throw Error(ErrorKind::io, "cannot write report files in " + out_dir.string());
  csv << "method,split,seed,token_error_rate,error_rate_reduction,mean_q\n";
  txt << std::left << std::setw(12) << "method" << std::setw(14) << "split" << std::right << std::setw(12) << "seed"
      << std::setw(10) << "TER(%)" << std::setw(10) << "WERR(%)" << std::setw(9) << "mean Q" << '\n';
  for (const auto& r : rows) {
    csv << r.method << ',' << r.split << ',' << r.seed << ',' << fmt_double(r.token_error_rate) << ','
        << (r.error_rate_reduction ? fmt_double(*r.error_rate_reduction) : "") << ','
        << (r.mean_q ? fmt_double(*r.mean_q) : "") << '\n';
    std::ostringstream werr, q;
    werr << std::fixed << std::setprecision(1);
    if (r.error_rate_reduction) werr << 100.0 * *r.error_rate_reduction;
    q << std::fixed << std::setprecision(4);
    if (r.mean_q) q << *r.mean_q;
    txt << std::left << std::setw(12) << r.method << std::setw(14) << r.split << std::right << std::setw(12) << r.seed
        << std::setw(10) << std::fixed << std::setprecision(2) << 100.0 * r.token_error_rate << std::setw(10)
        << werr.str() << std::setw(9) << q.str() << '\n';
  }
  return rows;
}

}  // namespace sisda
