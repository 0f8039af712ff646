#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mime/config.hpp"
#include "mime/context_encoder.hpp"
#include "mime/corpus.hpp"
#include "mime/layers.hpp"
#include "mime/tensor.hpp"

namespace mime {

// One beam-search hypothesis. The prefix always starts with the start
// token; `key` is the content (plus the end token when one was emitted) and
// provides the deterministic tie-break ordering.
struct DecodeState {
  std::vector<int> prefix;
  double score = 0.0;
  bool finished = false;
  std::vector<int> key;

  std::vector<int> content() const { return {prefix.begin() + 1, prefix.end()}; }
};

struct DecodeOptions {
  int max_len = 30;
  int beam = 5;
  int eos_id = kEos;
  std::vector<int> banned;   // ids never proposed (pad, sos, ctx in the real model)
  double length_norm = 0.0;  // > 0: rank finished hypotheses by score / len^exponent
};

namespace detail {

inline bool better(const DecodeState& a, const DecodeState& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.key < b.key;
}

inline double ranking_score(const DecodeState& s, double length_norm) {
  if (length_norm <= 0.0) return s.score;
  const double len = std::max<size_t>(1, s.prefix.size() - 1);
  return s.score / std::pow(len, length_norm);
}

}  // namespace detail

// Transformer decoder over the encoded context: H rows act as attention
// keys and M_fused rows as the attended values, followed by the vocabulary
// projection.
template <typename S>
class ResponseDecoder {
 public:
  ResponseDecoder() = default;
  ResponseDecoder(ParameterStore<S>& store, const ModelConfig& cfg, int vocab_size, Rng& rng)
      : decoder_(store, "decoder", cfg.dec_layers, cfg.d_h, cfg.heads, cfg.resolved_ffn_dim(),
                 rng),
        out_proj_(store, "output.decode", cfg.d_h, vocab_size, rng) {}

  int vocab_size() const { return out_proj_.out_dim(); }

  // Word + position embedding of a decoder prefix (no speaker component).
  Tensor<S> embed_prefix(Tape<S>& t, const Embeddings<S>& embeds,
                         std::span<const int> ids) const {
    require(!ids.empty(), "decode: empty prefix");
    require(static_cast<int>(ids.size()) <= embeds.pos.count(),
            "decode: prefix longer than the position table");
    std::vector<int> positions(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) positions[i] = static_cast<int>(i);
    return add(embeds.word.lookup(t, ids), embeds.pos.lookup(t, positions));
  }

  // Logits for every prefix position: [t x |V|].
  Tensor<S> forward_logits(Tape<S>& t, const Embeddings<S>& embeds, std::span<const int> prefix,
                           const Tensor<S>& h, const Tensor<S>& m_fused,
                           const std::vector<uint8_t>& memory_keep = {}, double dropout_rate = 0.0,
                           Rng* dropout_rng = nullptr) const {
    require(h.shape().rows == m_fused.shape().rows,
            "decode: key sequence and value sequence lengths differ");
    const int tlen = static_cast<int>(prefix.size());
    const AttentionMask causal = AttentionMask::make_causal(tlen);
    const AttentionMask mem_mask = memory_keep.empty()
                                       ? AttentionMask::all_visible(tlen, h.shape().rows)
                                       : AttentionMask::key_padding(tlen, memory_keep);
    Tensor<S> x = embed_prefix(t, embeds, prefix);
    Tensor<S> o =
        decoder_.forward(t, x, causal, h, m_fused, mem_mask, dropout_rate, dropout_rng);
    return out_proj_.forward(t, o);
  }

  // Per-position response distributions under teacher forcing.
  Tensor<S> teacher_forced_probs(Tape<S>& t, const Embeddings<S>& embeds,
                                 std::span<const int> resp_in, const Tensor<S>& h,
                                 const Tensor<S>& m_fused,
                                 const std::vector<uint8_t>& memory_keep = {}) const {
    return softmax_rows(forward_logits(t, embeds, resp_in, h, m_fused, memory_keep));
  }

  // Mean negative log-likelihood of the gold tokens over non-pad positions.
  Tensor<S> generation_loss(Tape<S>& t, const Embeddings<S>& embeds, std::span<const int> resp_in,
                            std::span<const int> resp_target, const Tensor<S>& h,
                            const Tensor<S>& m_fused, const std::vector<uint8_t>& memory_keep = {},
                            double dropout_rate = 0.0, Rng* dropout_rng = nullptr) const {
    require(resp_in.size() == resp_target.size(),
            "decode: input/target lengths differ (" + std::to_string(resp_in.size()) + " vs " +
                std::to_string(resp_target.size()) + ")");
    Tensor<S> logits =
        forward_logits(t, embeds, resp_in, h, m_fused, memory_keep, dropout_rate, dropout_rng);
    return cross_entropy_with_logits(logits, resp_target, /*mean=*/true, /*ignore_index=*/kPad);
  }

  // Log-probabilities of the next token after `prefix`, computed on a
  // scratch tape from raw copies of H and M_fused.
  std::vector<double> step_logprobs(const Embeddings<S>& embeds, std::span<const int> prefix,
                                    const Tensor<S>& h, const Tensor<S>& m_fused,
                                    const std::vector<uint8_t>& memory_keep = {}) const {
    Tape<S> t;
    Tensor<S> h_in = t.input(h.shape(), h.values());
    Tensor<S> f_in = t.input(m_fused.shape(), m_fused.values());
    Tensor<S> logits = forward_logits(t, embeds, prefix, h_in, f_in, memory_keep);
    const int v = logits.shape().cols;
    const S* row = logits.values().data() + static_cast<size_t>(logits.shape().rows - 1) * v;
    double mx = static_cast<double>(row[0]);
    for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    const double log_z = std::log(sum) + mx;
    std::vector<double> logp(static_cast<size_t>(v));
    for (int j = 0; j < v; ++j) logp[static_cast<size_t>(j)] = static_cast<double>(row[j]) - log_z;
    return logp;
  }

  // Argmax decoding; ties go to the lowest token id. Returns content tokens
  // (no start/end markers).
  std::vector<int> greedy_decode(const Embeddings<S>& embeds, const Tensor<S>& h,
                                 const Tensor<S>& m_fused, const DecodeOptions& opts,
                                 const std::vector<uint8_t>& memory_keep = {}) const {
    require(opts.max_len >= 1, "decode: max_len must be >= 1");
    std::vector<int> prefix = {kSos};
    std::vector<int> out;
    std::vector<bool> banned = banned_set(opts);
    for (int step = 0; step < opts.max_len; ++step) {
      const std::vector<double> logp = step_logprobs(embeds, prefix, h, m_fused, memory_keep);
      int best = -1;
      for (int j = 0; j < static_cast<int>(logp.size()); ++j) {
        if (banned[static_cast<size_t>(j)]) continue;
        if (best < 0 || logp[static_cast<size_t>(j)] > logp[static_cast<size_t>(best)]) best = j;
      }
      require(best >= 0, "decode: every token is banned");
      if (best == opts.eos_id) break;
      out.push_back(best);
      prefix.push_back(best);
    }
    return out;
  }

  // Length-synchronized beam search; finished hypotheses compete with
  // active ones for the beam at every step.
  DecodeState beam_search(const Embeddings<S>& embeds, const Tensor<S>& h,
                          const Tensor<S>& m_fused, const DecodeOptions& opts,
                          const std::vector<uint8_t>& memory_keep = {}) const {
    require(opts.beam >= 1, "decode: beam must be >= 1");
    require(opts.max_len >= 1, "decode: max_len must be >= 1");
    std::vector<bool> banned = banned_set(opts);
    std::vector<DecodeState> states = {DecodeState{{kSos}, 0.0, false, {}}};
    for (int step = 0; step < opts.max_len; ++step) {
      bool any_active = false;
      std::vector<DecodeState> candidates;
      for (const DecodeState& st : states) {
        if (st.finished) {
          candidates.push_back(st);
          continue;
        }
        any_active = true;
        const std::vector<double> logp =
            step_logprobs(embeds, st.prefix, h, m_fused, memory_keep);
        for (int j = 0; j < static_cast<int>(logp.size()); ++j) {
          if (banned[static_cast<size_t>(j)]) continue;
          DecodeState ns = st;
          ns.score += logp[static_cast<size_t>(j)];
          if (j == opts.eos_id) {
            ns.finished = true;
            ns.key.push_back(j);
          } else {
            ns.prefix.push_back(j);
            ns.key.push_back(j);
            if (static_cast<int>(ns.prefix.size()) - 1 >= opts.max_len) ns.finished = true;
          }
          candidates.push_back(std::move(ns));
        }
      }
      if (!any_active) break;
      std::sort(candidates.begin(), candidates.end(), detail::better);
      if (static_cast<int>(candidates.size()) > opts.beam) candidates.resize(static_cast<size_t>(opts.beam));
      states = std::move(candidates);
    }
    DecodeState* best = nullptr;
    for (DecodeState& st : states) {
      st.finished = true;  // length-capped survivors count as finished
      if (best == nullptr) {
        best = &st;
        continue;
      }
      const double a = detail::ranking_score(st, opts.length_norm);
      const double b = detail::ranking_score(*best, opts.length_norm);
      if (a > b || (a == b && st.key < best->key)) best = &st;
    }
    require(best != nullptr, "decode: beam search produced no hypotheses");
    return *best;
  }

 private:
  std::vector<bool> banned_set(const DecodeOptions& opts) const {
    std::vector<bool> banned(static_cast<size_t>(vocab_size()), false);
    for (int id : opts.banned) {
      require(id >= 0 && id < vocab_size(), "decode: banned id out of range");
      banned[static_cast<size_t>(id)] = true;
    }
    require(opts.eos_id >= 0 && opts.eos_id < vocab_size() && !banned[static_cast<size_t>(opts.eos_id)],
            "decode: end token must be a valid, unbanned id");
    return banned;
  }

  TransformerDecoder<S> decoder_;
  FullyConnected<S> out_proj_;
};

}  // namespace mime
