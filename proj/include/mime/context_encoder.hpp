#pragma once

#include <span>
#include <string>
#include <vector>

#include "mime/config.hpp"
#include "mime/corpus.hpp"
#include "mime/emotions.hpp"
#include "mime/layers.hpp"
#include "mime/tensor.hpp"

namespace mime {

// Shared embedding tables: word, position and speaker vectors all of width
// D_h, plus the emotion table used by both the classifier and the mixture.
template <typename S>
struct Embeddings {
  EmbeddingTable<S> word;
  EmbeddingTable<S> pos;
  EmbeddingTable<S> speaker;
  EmbeddingTable<S> emotion;

  Embeddings() = default;
  Embeddings(ParameterStore<S>& store, int vocab_size, int max_positions, int d_h, Rng& rng)
      : word(store, "embed.word", vocab_size, d_h, rng),
        pos(store, "embed.pos", max_positions, d_h, rng),
        speaker(store, "embed.speaker", kNumSpeakers, d_h, rng),
        emotion(store, "embed.emotion", kNumEmotions, d_h, rng) {}
};

// Encodes the flattened dialogue (with the <ctx> summary token at position
// 0) into H, takes c = H_0, and scores the 32 emotions from c.
template <typename S>
class ContextEncoder {
 public:
  ContextEncoder() = default;
  ContextEncoder(ParameterStore<S>& store, const ModelConfig& cfg, Embeddings<S>& embeds,
                 Rng& rng)
      : embeds_(&embeds),
        encoder_(store, "ctx_encoder", cfg.enc_layers, cfg.d_h, cfg.heads, cfg.resolved_ffn_dim(),
                 rng),
        w_emo_(&store.create_uniform("classifier.w_emo", {cfg.d_h, cfg.d_h}, cfg.d_h, rng)) {}

  // E_C = word + position + speaker embedding per token.
  Tensor<S> embed_context(Tape<S>& t, std::span<const int> ids, std::span<const int> speakers,
                          std::span<const int> positions) const {
    require(ids.size() == speakers.size() && ids.size() == positions.size(),
            "embed_context: id/speaker/position lengths differ");
    Tensor<S> e = add(embeds_->word.lookup(t, ids), embeds_->pos.lookup(t, positions));
    return add(e, embeds_->speaker.lookup(t, speakers));
  }

  // H over all positions; c is row 0. keep_keys marks real (unpadded)
  // positions; empty means everything is real. Position 0 must be real.
  Tensor<S> encode(Tape<S>& t, std::span<const int> ids, std::span<const int> speakers,
                   std::span<const int> positions, const std::vector<uint8_t>& keep_keys = {},
                   double dropout_rate = 0.0, Rng* dropout_rng = nullptr) const {
    require(!ids.empty(), "encode: empty context");
    require(ids[0] == kCtx, "encode: context must start with the <ctx> token");
    const int len = static_cast<int>(ids.size());
    AttentionMask mask = keep_keys.empty() ? AttentionMask::all_visible(len, len)
                                           : AttentionMask::key_padding(len, keep_keys);
    if (!keep_keys.empty())
      require(keep_keys[0] != 0, "encode: the <ctx> position cannot be masked");
    Tensor<S> e = embed_context(t, ids, speakers, positions);
    return encoder_.forward(t, e, mask, dropout_rate, dropout_rng);
  }

  static Tensor<S> context_vector(const Tensor<S>& h) { return slice_rows(h, 0, 1); }

  // s = E_emotion * W * c^T, returned as a [1 x 32] logit row.
  Tensor<S> emotion_logits(Tape<S>& t, const Tensor<S>& c) const {
    Tensor<S> cw = matmul(c, t.leaf(*w_emo_), false, true);
    return matmul(cw, embeds_->emotion.rows(t), false, true);
  }

  struct Classification {
    Tensor<S> logits;        // [1 x 32]
    Tensor<S> distribution;  // softmax of logits
    Tensor<S> loss;          // -log P[gold], scalar
  };

  Classification classify(Tape<S>& t, const Tensor<S>& c, int gold_label) const {
    require(gold_label >= 0 && gold_label < kNumEmotions,
            "classify: label " + std::to_string(gold_label) + " out of range");
    Classification out;
    out.logits = emotion_logits(t, c);
    out.distribution = softmax_rows(out.logits);
    const int target[1] = {gold_label};
    out.loss = cross_entropy_with_logits(out.logits, std::span<const int>(target, 1));
    return out;
  }

  const Embeddings<S>& embeddings() const { return *embeds_; }

 private:
  Embeddings<S>* embeds_ = nullptr;
  TransformerEncoder<S> encoder_;
  Parameter<S>* w_emo_ = nullptr;
};

}  // namespace mime
