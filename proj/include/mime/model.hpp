#pragma once

#include <span>
#include <string>
#include <vector>

#include "mime/config.hpp"
#include "mime/context_encoder.hpp"
#include "mime/corpus.hpp"
#include "mime/emotion_mixture.hpp"
#include "mime/emotions.hpp"
#include "mime/layers.hpp"
#include "mime/optim.hpp"
#include "mime/response_decoder.hpp"
#include "mime/tensor.hpp"

namespace mime {

// Weighted combination of the loss components:
// alpha * L_cls + beta * (L_pos + L_neg) + gamma * L_resp.
template <typename S>
Tensor<S> total_loss(const Tensor<S>& l_cls, const Tensor<S>& l_pos_elbo,
                     const Tensor<S>& l_neg_elbo, const Tensor<S>& l_resp, double alpha,
                     double beta, double gamma) {
  Tensor<S> weighted = affine(l_cls, static_cast<S>(alpha), S(0));
  weighted = add(weighted, affine(add(l_pos_elbo, l_neg_elbo), static_cast<S>(beta), S(0)));
  return add(weighted, affine(l_resp, static_cast<S>(gamma), S(0)));
}

// Unpadded view of one sample (spans into Batch rows or EncodedSample).
struct SampleView {
  std::span<const int> ctx_ids;
  std::span<const int> ctx_speakers;
  std::span<const int> ctx_positions;
  std::span<const int> resp_in;
  std::span<const int> resp_target;
  int label = -1;
};

inline SampleView view_of(const EncodedSample& s) {
  return {s.ctx_ids, s.ctx_speakers, s.ctx_positions, s.resp_in, s.resp_target, s.label};
}

inline SampleView view_of(const Batch& b, int i) {
  const size_t cl = static_cast<size_t>(b.ctx_len[static_cast<size_t>(i)]);
  const size_t rl = static_cast<size_t>(b.resp_len[static_cast<size_t>(i)]);
  const size_t idx = static_cast<size_t>(i);
  return {std::span<const int>(b.ctx_ids[idx]).first(cl),
          std::span<const int>(b.ctx_speakers[idx]).first(cl),
          std::span<const int>(b.ctx_positions[idx]).first(cl),
          std::span<const int>(b.resp_in[idx]).first(rl),
          std::span<const int>(b.resp_target[idx]).first(rl),
          b.labels[idx]};
}

template <typename S>
struct SampleLosses {
  Tensor<S> cls;
  Tensor<S> kl_pos;
  Tensor<S> kl_neg;
  Tensor<S> resp;
  Tensor<S> total;
  Polarity polarity = Polarity::positive;
  int predicted = -1;
};

template <typename S>
struct Generation {
  std::vector<int> tokens;
  double score = 0.0;
  int emotion = -1;
  Polarity polarity = Polarity::positive;
  // (label id, probability) pairs, most probable first
  std::vector<std::pair<int, double>> d_pos;
  std::vector<std::pair<int, double>> d_neg;
};

// The full empathetic response generator: context encoding + emotion
// classification, stochastic per-group emotion sampling with mimicry and
// fusion, and the response decoder.
template <typename S>
class MimeModel {
 public:
  MimeModel(const ModelConfig& cfg, int vocab_size, const EmotionGrouping& grouping)
      : cfg_(cfg), grouping_(&grouping) {
    cfg_.validate();
    require(vocab_size > kNumSpecialTokens, "model: vocabulary is empty");
    Rng rng(cfg_.seed);
    const int max_positions = std::max(cfg_.max_ctx_len, cfg_.max_resp_len) + 1;
    embeds_ = Embeddings<S>(store_, vocab_size, max_positions, cfg_.d_h, rng);
    encoder_ = ContextEncoder<S>(store_, cfg_, embeds_, rng);
    mixture_ = EmotionMixture<S>(store_, cfg_, grouping, embeds_, rng);
    decoder_ = ResponseDecoder<S>(store_, cfg_, vocab_size, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const EmotionGrouping& grouping() const { return *grouping_; }
  ParameterStore<S>& params() { return store_; }
  const ParameterStore<S>& params() const { return store_; }
  Embeddings<S>& embeddings() { return embeds_; }
  ContextEncoder<S>& context_encoder() { return encoder_; }
  EmotionMixture<S>& mixture() { return mixture_; }
  ResponseDecoder<S>& decoder() { return decoder_; }
  int vocab_size() const { return decoder_.vocab_size(); }

  // Full training-mode forward for one sample. Dropout runs only when
  // dropout_rng is given; noise_rng = nullptr means deterministic (r = 0)
  // posterior sampling, used for reproducible validation losses.
  SampleLosses<S> training_loss(Tape<S>& t, const SampleView& s, Rng* noise_rng,
                                Rng* dropout_rng) const {
    const double rate = dropout_rng != nullptr ? cfg_.dropout : 0.0;
    Tensor<S> h = encoder_.encode(t, s.ctx_ids, s.ctx_speakers, s.ctx_positions, {}, rate,
                                  dropout_rng);
    Tensor<S> c = ContextEncoder<S>::context_vector(h);
    auto cls = encoder_.classify(t, c, s.label);
    auto mix = mixture_.train_forward(t, c, h, s.label, noise_rng, {}, rate, dropout_rng);
    SampleLosses<S> out;
    out.cls = cls.loss;
    out.kl_pos = mix.kl_pos;
    out.kl_neg = mix.kl_neg;
    out.resp = decoder_.generation_loss(t, embeds_, s.resp_in, s.resp_target, h,
                                        mix.fusion.fused, {}, rate, dropout_rng);
    out.total = total_loss(out.cls, out.kl_pos, out.kl_neg, out.resp, cfg_.alpha, cfg_.beta,
                           cfg_.gamma);
    out.polarity = mix.polarity;
    out.predicted = argmax_label(cls.distribution.values());
    return out;
  }

  // Emotion distribution over the 32 labels for a context.
  std::vector<double> classify_context(const SampleView& s) const {
    Tape<S> t;
    Tensor<S> h = encoder_.encode(t, s.ctx_ids, s.ctx_speakers, s.ctx_positions);
    Tensor<S> c = ContextEncoder<S>::context_vector(h);
    Tensor<S> dist = softmax_rows(encoder_.emotion_logits(t, c));
    std::vector<double> out(kNumEmotions);
    for (int i = 0; i < kNumEmotions; ++i)
      out[static_cast<size_t>(i)] = static_cast<double>(dist.values()[static_cast<size_t>(i)]);
    return out;
  }

  // Inference: classify, draw the per-group emotions from the prior
  // (noise_rng = nullptr uses mu), fuse, and decode. beam = 1 falls back to
  // greedy by construction of the search.
  Generation<S> generate(std::span<const int> ctx_ids, std::span<const int> ctx_speakers,
                         std::span<const int> ctx_positions, Rng* noise_rng, int beam = -1,
                         int max_len = -1, double length_norm = 0.0) const {
    Tape<S> t;
    if (beam <= 0) beam = cfg_.beam;
    if (max_len <= 0) max_len = cfg_.max_resp_len;
    require(max_len <= cfg_.max_resp_len,
            "generate: max_len exceeds the configured response limit");
    Tensor<S> h = encoder_.encode(t, ctx_ids, ctx_speakers, ctx_positions);
    Tensor<S> c = ContextEncoder<S>::context_vector(h);
    Tensor<S> dist = softmax_rows(encoder_.emotion_logits(t, c));
    auto mix = mixture_.infer_forward(t, c, h, dist.values(), noise_rng);

    Generation<S> out;
    out.emotion = argmax_label(dist.values());
    out.polarity = mix.polarity;
    out.d_pos = distribution_entries(mix.pos.d, EmotionMixture<S>::Branch::pos);
    out.d_neg = distribution_entries(mix.neg.d, EmotionMixture<S>::Branch::neg);

    DecodeOptions opts;
    opts.max_len = max_len;
    opts.beam = beam;
    opts.eos_id = kEos;
    opts.banned = {kPad, kSos, kCtx};
    opts.length_norm = length_norm;
    DecodeState best = decoder_.beam_search(embeds_, h, mix.fusion.fused, opts);
    out.tokens = best.content();
    out.score = best.score;
    return out;
  }

 private:
  static int argmax_label(std::span<const S> probs) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(probs.size()); ++i)
      if (probs[static_cast<size_t>(i)] > probs[static_cast<size_t>(best)]) best = i;
    return best;
  }

  std::vector<std::pair<int, double>> distribution_entries(
      const Tensor<S>& d, typename EmotionMixture<S>::Branch b) const {
    const std::vector<int>& ids = mixture_.group_ids(b);
    std::vector<std::pair<int, double>> entries;
    for (size_t i = 0; i < ids.size(); ++i)
      entries.emplace_back(ids[i], static_cast<double>(d.values()[i]));
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b2) {
      if (a.second != b2.second) return a.second > b2.second;
      return a.first < b2.first;
    });
    return entries;
  }

  ModelConfig cfg_;
  const EmotionGrouping* grouping_ = nullptr;
  ParameterStore<S> store_;
  Embeddings<S> embeds_;
  ContextEncoder<S> encoder_;
  EmotionMixture<S> mixture_;
  ResponseDecoder<S> decoder_;
};

}  // namespace mime
