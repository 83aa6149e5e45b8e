#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "sisda/model.hpp"

namespace sisda {

// Synthetic transduction task: clean symbols are drawn uniformly, the
// reference is a cyclic shift of each symbol, and the input holds every
// symbol for a random duration of min_frames..max_frames frames (an
// utterance is longer than its text and the alignment is not positional).
struct TaskConfig {
  std::size_t alphabet_size = 26;
  std::size_t shift = 3;
  std::size_t min_len = 4;
  std::size_t max_len = 10;
  std::size_t min_frames = 3;
  std::size_t max_frames = 3;
  bool distinct_neighbors = false;  // adjacent clean symbols differ
  std::string task_tag = "<transcribe>";

  void validate() const;
  std::size_t input_slots() const { return max_len * max_frames; }
};

Vocab task_vocab(const TaskConfig& task);

enum class DomainKind { clean, noise, accent };

struct DomainSpec {
  DomainKind kind = DomainKind::clean;
  double noise_prob = 0.0;
  std::vector<int> neighbor_offsets = {-2, -1, 1, 2};  // cyclic
  std::vector<std::pair<std::size_t, std::size_t>> swap_pairs;  // symbol indices
  std::uint64_t seed = 0;

  void validate() const;
  std::string tag() const;  // "clean", "noise", "accent"
};

std::string domain_kind_name(DomainKind kind);
DomainKind parse_domain_kind(const std::string& name);

enum class Split { source_train, target_adapt, target_test, source_test };

std::string split_name(Split split);
Split parse_split(const std::string& name);

struct Utterance {
  std::string id;
  Split split = Split::source_train;
  std::string domain;
  TokenSeq input;
  TokenSeq reference;
  bool operator==(const Utterance&) const = default;
};

// What unsupervised adaptation is allowed to see: no reference field exists.
struct UnlabeledUtterance {
  std::string id;
  Split split = Split::source_train;
  std::string domain;
  TokenSeq input;
};

struct DomainCorpus {
  std::vector<Utterance> utterances;

  std::vector<UnlabeledUtterance> unlabeled_view() const;
};

DomainCorpus generate_corpus(const TaskConfig& task, const DomainSpec& domain, std::size_t count,
                             Split split);

// ---- corpus files ----
//
//   # comment lines are ignored
//   <id> TAB <split> TAB <domain> TAB <input tokens> TAB <reference tokens>
//
// Token fields are single-space separated vocab tokens.

void write_corpus(std::ostream& out, const DomainCorpus& corpus, const Vocab& vocab);
void save_corpus(const std::filesystem::path& path, const DomainCorpus& corpus, const Vocab& vocab);
DomainCorpus read_corpus(std::istream& in, const Vocab& vocab);
DomainCorpus load_corpus(const std::filesystem::path& path, const Vocab& vocab);

// Reads only the first four fields of each line; the reference field is
// skipped unparsed.
std::vector<UnlabeledUtterance> read_unlabeled(std::istream& in, const Vocab& vocab);
std::vector<UnlabeledUtterance> load_unlabeled(const std::filesystem::path& path, const Vocab& vocab);

}  // namespace sisda
