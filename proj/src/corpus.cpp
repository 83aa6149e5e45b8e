#include "sisda/corpus.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "sisda/error.hpp"
#include "sisda/rng.hpp"

namespace sisda {

void TaskConfig::validate() const {
  if (alphabet_size < 2) throw Error(ErrorKind::invalid_config, "alphabet_size must be >= 2");
  if (min_len < 1 || max_len < min_len) {
    throw Error(ErrorKind::invalid_config, "invalid length range [" + std::to_string(min_len) +
                                               ", " + std::to_string(max_len) + "]");
  }
  if (min_frames < 1 || max_frames < min_frames) {
    throw Error(ErrorKind::invalid_config, "invalid frame range [" + std::to_string(min_frames) + ", " +
                                               std::to_string(max_frames) + "]");
  }
  if (distinct_neighbors && alphabet_size < 2) throw Error(ErrorKind::invalid_config, "distinct_neighbors needs 2+ symbols");
}

namespace {

std::string symbol_name(std::size_t i, std::size_t alphabet) {
  if (alphabet <= 26) return std::string(1, static_cast<char>('a' + i));
  return "s" + std::to_string(i);
}

}  // namespace

Vocab task_vocab(const TaskConfig& task) {
  task.validate();
  std::vector<std::string> symbols;
  for (std::size_t i = 0; i < task.alphabet_size; ++i) symbols.push_back(symbol_name(i, task.alphabet_size));
  return Vocab({task.task_tag}, std::move(symbols));
}

std::string domain_kind_name(DomainKind kind) {
  switch (kind) {
    case DomainKind::clean: return "clean";
    case DomainKind::noise: return "noise";
    case DomainKind::accent: return "accent";
  }
  return "clean";
}

DomainKind parse_domain_kind(const std::string& name) {
  if (name == "clean") return DomainKind::clean;
  if (name == "noise") return DomainKind::noise;
  if (name == "accent") return DomainKind::accent;
  throw Error(ErrorKind::invalid_config, "unknown domain kind '" + name + "'");
}

void DomainSpec::validate() const {
  if (noise_prob < 0.0 || noise_prob > 1.0) throw Error(ErrorKind::invalid_config, "noise_prob must be in [0,1]");
  if ((noise_prob == 0.0) != (kind == DomainKind::clean) && kind != DomainKind::accent) {
    throw Error(ErrorKind::invalid_config, "noise_prob is 0 exactly for the clean domain");
  }
  if (kind == DomainKind::accent && noise_prob != 0.0) {
    throw Error(ErrorKind::invalid_config, "accent domain takes no noise_prob");
  }
  if (swap_pairs.empty() == (kind == DomainKind::accent)) {
    throw Error(ErrorKind::invalid_config, "swap_pairs are required for, and only for, the accent domain");
  }
  if (kind == DomainKind::noise && neighbor_offsets.empty()) {
    throw Error(ErrorKind::invalid_config, "noise domain needs neighbor offsets");
  }
}

std::string DomainSpec::tag() const { return domain_kind_name(kind); }

std::string split_name(Split split) {
  switch (split) {
    case Split::source_train: return "source-train";
    case Split::target_adapt: return "target-adapt";
    case Split::target_test: return "target-test";
    case Split::source_test: return "source-test";
  }
  return "source-train";
}

Split parse_split(const std::string& name) {
  if (name == "source-train") return Split::source_train;
  if (name == "target-adapt") return Split::target_adapt;
  if (name == "target-test") return Split::target_test;
  if (name == "source-test") return Split::source_test;
  throw Error(ErrorKind::parse, "unknown split '" + name + "'");
}

std::vector<UnlabeledUtterance> DomainCorpus::unlabeled_view() const {
  std::vector<UnlabeledUtterance> out;
  out.reserve(utterances.size());
  for (const auto& u : utterances) out.push_back({u.id, u.split, u.domain, u.input});
  return out;
}

DomainCorpus generate_corpus(const TaskConfig& task, const DomainSpec& domain, std::size_t count,
                             Split split) {
  task.validate();
  domain.validate();
  if (count < 1) throw Error(ErrorKind::invalid_argument, "corpus count must be >= 1");
  const Vocab vocab = task_vocab(task);
  const std::size_t a = task.alphabet_size;

  std::vector<std::size_t> accent_map(a);
  for (std::size_t i = 0; i < a; ++i) accent_map[i] = i;
  for (const auto& [x, y] : domain.swap_pairs) {
    if (x >= a || y >= a) throw Error(ErrorKind::invalid_config, "swap pair outside alphabet");
    std::swap(accent_map[x], accent_map[y]);
  }

  // Separate streams: the same seed yields the same clean content in every domain.
  Rng rng(derive_seed(domain.seed, split_name(split)));
  Rng noise_rng(derive_seed(domain.seed, split_name(split) + "/corruption"));
  DomainCorpus corpus;
  corpus.utterances.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    const auto len = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(task.min_len),
                                                          static_cast<std::int64_t>(task.max_len)));
    Utterance u;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%05zu", n);
    u.id = split_name(split) + "-" + domain.tag() + "-" + buf;
    u.split = split;
    u.domain = domain.tag();
    std::size_t prev = a;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t s =
          task.distinct_neighbors && prev < a ? (prev + 1 + rng.below(a - 1)) % a : rng.below(a);
      prev = s;
      u.reference.push_back(vocab.symbol((s + task.shift) % a));
      const auto frames = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(task.min_frames),
                                                               static_cast<std::int64_t>(task.max_frames)));
      for (std::size_t f = 0; f < frames; ++f) {
        std::size_t heard = s;
        if (domain.kind == DomainKind::noise && noise_rng.bernoulli(domain.noise_prob)) {
          const int off = domain.neighbor_offsets[noise_rng.below(domain.neighbor_offsets.size())];
          const auto ia = static_cast<std::int64_t>(a);
          heard = static_cast<std::size_t>(((static_cast<std::int64_t>(s) + off) % ia + ia) % ia);
        } else if (domain.kind == DomainKind::accent) {
          heard = accent_map[s];
        }
        u.input.push_back(vocab.symbol(heard));
      }
    }
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

// ---- files ----

void write_corpus(std::ostream& out, const DomainCorpus& corpus, const Vocab& vocab) {
  out << "# id\tsplit\tdomain\tinput\treference\n";
  for (const auto& u : corpus.utterances) {
    out << u.id << '\t' << split_name(u.split) << '\t' << u.domain << '\t' << vocab.join(u.input)
        << '\t' << vocab.join(u.reference) << '\n';
  }
}

void save_corpus(const std::filesystem::path& path, const DomainCorpus& corpus, const Vocab& vocab) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write corpus " + path.string());
  write_corpus(out, corpus, vocab);
  if (!out) throw Error(ErrorKind::io, "failed writing corpus " + path.string());
}

namespace {

std::vector<std::string> split_fields(const std::string& line, std::size_t max_fields) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (fields.size() + 1 < max_fields) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) break;
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  fields.push_back(line.substr(start));
  return fields;
}

TokenSeq parse_tokens(const std::string& field, const Vocab& vocab, std::size_t line_no) {
  TokenSeq out;
  std::istringstream in(field);
  std::string tok;
  try {
    while (in >> tok) out.push_back(vocab.id(tok));
  } catch (const Error& e) {
    throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": " + e.what());
  }
  if (out.empty()) throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": empty token field");
  return out;
}

template <typename Fn>
void for_each_record(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    fn(line, line_no);
  }
}

}  // namespace

DomainCorpus read_corpus(std::istream& in, const Vocab& vocab) {
  DomainCorpus corpus;
  for_each_record(in, [&](const std::string& line, std::size_t line_no) {
    const auto f = split_fields(line, 5);
    if (f.size() != 5) throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": expected 5 tab-separated fields");
    corpus.utterances.push_back(
        {f[0], parse_split(f[1]), f[2], parse_tokens(f[3], vocab, line_no), parse_tokens(f[4], vocab, line_no)});
  });
  return corpus;
}

DomainCorpus load_corpus(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open corpus " + path.string());
  return read_corpus(in, vocab);
}

std::vector<UnlabeledUtterance> read_unlabeled(std::istream& in, const Vocab& vocab) {
  std::vector<UnlabeledUtterance> out;
  for_each_record(in, [&](const std::string& line, std::size_t line_no) {
    const auto f = split_fields(line, 5);
    if (f.size() < 4) throw Error(ErrorKind::parse, "line " + std::to_string(line_no) + ": expected at least 4 fields");
    out.push_back({f[0], parse_split(f[1]), f[2], parse_tokens(f[3], vocab, line_no)});
  });
  return out;
}

std::vector<UnlabeledUtterance> load_unlabeled(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open corpus " + path.string());
  return read_unlabeled(in, vocab);
}

}  // namespace sisda
