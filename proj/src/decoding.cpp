#include "sisda/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>

#include "sisda/error.hpp"

namespace sisda {

TokenSeq Hypothesis::scored_tokens(TokenId eos) const {
  TokenSeq out = tokens;
  if (finished) out.push_back(eos);
  return out;
}

std::vector<double> Hypothesis::confidences() const {
  std::vector<double> out;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) out.push_back(std::exp(token_logprobs[i]));
  return out;
}

bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.total_logprob != b.total_logprob) return a.total_logprob > b.total_logprob;
  return std::lexicographical_compare(a.tokens.begin(), a.tokens.end(), b.tokens.begin(), b.tokens.end());
}

std::vector<TokenId> emittable_tokens(const ModelConfig& config, const ContextSpec& spec) {
  std::vector<TokenId> out;
  for (TokenId t = 0; t < config.vocab_size; ++t) {
    if (t == spec.pad) continue;
    if (std::find(spec.prompt.begin(), spec.prompt.end(), t) != spec.prompt.end()) continue;
    out.push_back(t);
  }
  return out;
}

namespace {

void check_decode_args(const ModelParams& params, std::span<const TokenId> input,
                       const ContextSpec& spec, std::size_t max_len) {
  if (input.empty()) throw Error(ErrorKind::invalid_argument, "decode: empty input");
  if (max_len < 1) throw Error(ErrorKind::invalid_argument, "decode: max_len must be >= 1");
  const std::size_t prefix = spec.prompt.size() + std::max(spec.input_slots, input.size());
  if (prefix + max_len > params.config.max_len) {
    throw Error(ErrorKind::length_overflow, "decode: prefix " + std::to_string(prefix) + " + max_len " +
                                                std::to_string(max_len) + " exceeds model max_len " +
                                                std::to_string(params.config.max_len));
  }
}

DecoderState start_state(const ModelParams& params, std::span<const TokenId> input, const ContextSpec& spec) {
  const Context ctx = build_context(spec, input, {});
  DecoderState state(params);
  state.push(ctx.tokens);
  return state;
}

struct LiveBeam {
  DecoderState state;
  Hypothesis hyp;
};

struct Candidate {
  std::size_t beam;
  TokenId token;
  double score;
};

}  // namespace

BeamSet beam_search(const ModelParams& params, std::span<const TokenId> input,
                    const ContextSpec& spec, std::size_t beam_size, std::size_t max_len) {
  if (beam_size < 1) throw Error(ErrorKind::invalid_argument, "beam_search: beam_size must be >= 1");
  check_decode_args(params, input, spec, max_len);
  const auto allowed = emittable_tokens(params.config, spec);

  std::vector<LiveBeam> live;
  live.push_back({start_state(params, input, spec), Hypothesis{}});
  std::vector<Hypothesis> done;

  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<Candidate> cands;
    std::vector<std::vector<double>> logps;
    logps.reserve(live.size());
    for (std::size_t b = 0; b < live.size(); ++b) {
      logps.push_back(live[b].state.next_log_probs());
      for (TokenId t : allowed) cands.push_back({b, t, live[b].hyp.total_logprob + logps[b][t]});
    }
    auto before = [&](const Candidate& x, const Candidate& y) {
      if (x.score != y.score) return x.score > y.score;
      const TokenSeq& tx = live[x.beam].hyp.tokens;
      const TokenSeq& ty = live[y.beam].hyp.tokens;
      // Compare tx+[x.token] with ty+[y.token] lexicographically.
      const std::size_t n = std::min(tx.size(), ty.size());
      for (std::size_t i = 0; i < n; ++i) {
        if (tx[i] != ty[i]) return tx[i] < ty[i];
      }
      const TokenId nx = tx.size() > n ? tx[n] : x.token;
      const TokenId ny = ty.size() > n ? ty[n] : y.token;
      if (nx != ny) return nx < ny;
      return x.token < y.token;
    };
    const std::size_t take = std::min(beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(take), cands.end(), before);

    std::vector<LiveBeam> next;
    for (std::size_t c = 0; c < take; ++c) {
      const Candidate& cand = cands[c];
      const LiveBeam& parent = live[cand.beam];
      Hypothesis h = parent.hyp;
      h.token_logprobs.push_back(logps[cand.beam][cand.token]);
      h.total_logprob = cand.score;
      if (cand.token == spec.eos) {
        h.finished = true;
        done.push_back(std::move(h));
      } else {
        h.tokens.push_back(cand.token);
        LiveBeam nb{parent.state, std::move(h)};
        if (step + 1 < max_len) nb.state.push(cand.token);
        next.push_back(std::move(nb));
      }
    }
    live = std::move(next);

    // Scores only fall as beams extend, so once beam_size finished outputs
    // beat every live beam nothing can change the result.
    if (done.size() >= beam_size && !live.empty()) {
      std::sort(done.begin(), done.end(), ranks_before);
      const double cutoff = done[beam_size - 1].total_logprob;
      const bool any_alive = std::any_of(live.begin(), live.end(),
                                         [&](const LiveBeam& b) { return b.hyp.total_logprob >= cutoff; });
      if (!any_alive) live.clear();
    }
  }

  for (auto& b : live) done.push_back(std::move(b.hyp));  // unfinished at max_len
  std::sort(done.begin(), done.end(), ranks_before);
  if (done.size() > beam_size) done.resize(beam_size);
  BeamSet out;
  out.hypotheses = std::move(done);
  out.beam_size = beam_size;
  return out;
}

Hypothesis greedy_decode(const ModelParams& params, std::span<const TokenId> input,
                         const ContextSpec& spec, std::size_t max_len) {
  check_decode_args(params, input, spec, max_len);
  const auto allowed = emittable_tokens(params.config, spec);
  DecoderState state = start_state(params, input, spec);
  Hypothesis h;
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto logp = state.next_log_probs();
    TokenId best = allowed.front();
    for (TokenId t : allowed) {
      if (logp[t] > logp[best]) best = t;
    }
    h.token_logprobs.push_back(logp[best]);
    h.total_logprob += logp[best];
    if (best == spec.eos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(best);
    if (step + 1 < max_len) state.push(best);
  }
  return h;
}

BeamSet dedupe_and_truncate(BeamSet beams, std::size_t keep, bool dedupe) {
  if (keep < 1) throw Error(ErrorKind::invalid_argument, "dedupe_and_truncate: keep must be >= 1");
  std::vector<Hypothesis> out;
  if (dedupe) {
    std::set<TokenSeq> seen;
    for (auto& h : beams.hypotheses) {
      if (seen.insert(h.tokens).second) out.push_back(std::move(h));
    }
  } else {
    out = std::move(beams.hypotheses);
  }
  if (out.size() > keep) out.resize(keep);
  beams.hypotheses = std::move(out);
  return beams;
}

void write_nbest(std::ostream& out, const BeamSet& beams, const Vocab& vocab) {
  char buf[64];
  for (std::size_t r = 0; r < beams.hypotheses.size(); ++r) {
    const Hypothesis& h = beams.hypotheses[r];
    std::snprintf(buf, sizeof(buf), "%.17g", h.total_logprob);
    out << beams.utterance_id << '\t' << r + 1 << '\t' << buf << '\t';
    if (h.quality) {
      std::snprintf(buf, sizeof(buf), "%.17g", *h.quality);
      out << buf;
    } else {
      out << '-';
    }
    out << '\t' << (h.finished ? 1 : 0) << '\t' << vocab.join(h.tokens) << '\n';
  }
}

}  // namespace sisda
