#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mime/tensor.hpp"

namespace mime {

// Key-visibility mask for attention: keep[q * k_len + k] says whether query
// row q may attend to key k. Built through the named constructors so a
// decoder can verify it was handed an actual causal mask.
struct AttentionMask {
  int q_len = 0;
  int k_len = 0;
  std::vector<uint8_t> keep;
  bool causal = false;

  static AttentionMask all_visible(int q_len, int k_len) {
    require(q_len > 0 && k_len > 0, "mask: lengths must be positive");
    AttentionMask m;
    m.q_len = q_len;
    m.k_len = k_len;
    m.keep.assign(static_cast<size_t>(q_len) * k_len, 1);
    return m;
  }

  // query i sees keys 0..i
  static AttentionMask make_causal(int len) {
    AttentionMask m = all_visible(len, len);
    for (int i = 0; i < len; ++i)
      for (int j = i + 1; j < len; ++j) m.keep[static_cast<size_t>(i) * len + j] = 0;
    m.causal = true;
    return m;
  }

  // same key visibility for every query
  static AttentionMask key_padding(int q_len, const std::vector<uint8_t>& keep_keys) {
    require(q_len > 0 && !keep_keys.empty(), "mask: lengths must be positive");
    AttentionMask m;
    m.q_len = q_len;
    m.k_len = static_cast<int>(keep_keys.size());
    m.keep.resize(static_cast<size_t>(q_len) * m.k_len);
    for (int i = 0; i < q_len; ++i)
      for (int j = 0; j < m.k_len; ++j)
        m.keep[static_cast<size_t>(i) * m.k_len + j] = keep_keys[static_cast<size_t>(j)];
    return m;
  }

  void validate(int q, int k) const {
    require(q_len == q && k_len == k,
            "mask: built for " + std::to_string(q_len) + "x" + std::to_string(k_len) +
                ", attention is " + std::to_string(q) + "x" + std::to_string(k));
    for (int i = 0; i < q_len; ++i) {
      bool any = false;
      for (int j = 0; j < k_len; ++j) any = any || keep[static_cast<size_t>(i) * k_len + j];
      require(any, "mask: query " + std::to_string(i) + " has every key masked");
    }
  }
};

// Large negative additive penalty: after the row-max subtraction inside
// softmax, exp underflows to an exact 0, so masked keys contribute nothing
// and their content cannot perturb unmasked outputs even bitwise.
inline constexpr double kMaskPenalty = -1e9;

template <typename S>
class FullyConnected {
 public:
  FullyConnected() = default;
  FullyConnected(ParameterStore<S>& store, const std::string& name, int in_dim, int out_dim,
                 Rng& rng)
      : w_(&store.create_uniform(name + ".w", {in_dim, out_dim}, in_dim, rng)),
        b_(&store.create(name + ".b", {1, out_dim})) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x) const {
    require(x.shape().cols == w_->shape.rows,
            "fc " + w_->name + ": input width " + std::to_string(x.shape().cols) +
                " != " + std::to_string(w_->shape.rows));
    return add(matmul(x, t.leaf(*w_)), t.leaf(*b_));
  }

  int in_dim() const { return w_->shape.rows; }
  int out_dim() const { return w_->shape.cols; }
  Parameter<S>& weight() { return *w_; }
  Parameter<S>& bias() { return *b_; }

 private:
  Parameter<S>* w_ = nullptr;
  Parameter<S>* b_ = nullptr;
};

template <typename S>
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(ParameterStore<S>& store, const std::string& name, int count, int dim, Rng& rng)
      : table_(&store.create_uniform(name, {count, dim}, dim, rng)) {}

  Tensor<S> lookup(Tape<S>& t, std::span<const int> ids) const {
    return embed_lookup(t.leaf(*table_), ids);
  }
  Tensor<S> rows(Tape<S>& t) const { return t.leaf(*table_); }

  int count() const { return table_->shape.rows; }
  int dim() const { return table_->shape.cols; }
  Parameter<S>& param() { return *table_; }
  const Parameter<S>& param() const { return *table_; }

 private:
  Parameter<S>* table_ = nullptr;
};

template <typename S>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<S>& store, const std::string& name, int dim)
      : gain_(&store.create(name + ".gain", {1, dim})), bias_(&store.create(name + ".bias", {1, dim})) {
    std::fill(gain_->value.begin(), gain_->value.end(), S(1));
  }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x) const {
    return add(mul(layer_norm_rows(x), t.leaf(*gain_)), t.leaf(*bias_));
  }

 private:
  Parameter<S>* gain_ = nullptr;
  Parameter<S>* bias_ = nullptr;
};

// Scaled dot-product attention with h heads over a width-D model. Queries,
// keys and values may come from different sources (the response decoder
// attends with one sequence as keys and another as values).
template <typename S>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<S>& store, const std::string& name, int dim, int heads,
                     Rng& rng)
      : dim_(dim),
        heads_(heads),
        q_(store, name + ".q", dim, dim, rng),
        k_(store, name + ".k", dim, dim, rng),
        v_(store, name + ".v", dim, dim, rng),
        out_(store, name + ".out", dim, dim, rng) {
    require(heads > 0 && dim % heads == 0,
            name + ": " + std::to_string(heads) + " heads do not divide width " +
                std::to_string(dim));
  }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& q_src, const Tensor<S>& k_src,
                    const Tensor<S>& v_src, const AttentionMask& mask) const {
    const int lq = q_src.shape().rows;
    const int lk = k_src.shape().rows;
    require(v_src.shape().rows == lk, "attention: key/value length mismatch");
    mask.validate(lq, lk);
    Tensor<S> q = q_.forward(t, q_src);
    Tensor<S> k = k_.forward(t, k_src);
    Tensor<S> v = v_.forward(t, v_src);

    std::vector<S> penalties(static_cast<size_t>(lq) * lk);
    for (size_t i = 0; i < penalties.size(); ++i)
      penalties[i] = mask.keep[i] ? S(0) : static_cast<S>(kMaskPenalty);
    Tensor<S> mask_add = t.input({lq, lk}, penalties);

    const int dh = dim_ / heads_;
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor<S> merged;
    for (int h = 0; h < heads_; ++h) {
      Tensor<S> qh = slice_cols(q, h * dh, (h + 1) * dh);
      Tensor<S> kh = slice_cols(k, h * dh, (h + 1) * dh);
      Tensor<S> vh = slice_cols(v, h * dh, (h + 1) * dh);
      Tensor<S> scores = affine(matmul(qh, kh, false, true), inv_sqrt, S(0));
      Tensor<S> probs = softmax_rows(add(scores, mask_add));
      Tensor<S> ctx = matmul(probs, vh);
      merged = h == 0 ? ctx : concat_cols(merged, ctx);
    }
    return out_.forward(t, merged);
  }

  int dim() const { return dim_; }
  int heads() const { return heads_; }

 private:
  int dim_ = 0;
  int heads_ = 0;
  FullyConnected<S> q_, k_, v_, out_;
};

template <typename S>
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore<S>& store, const std::string& name, int dim, int inner, Rng& rng)
      : fc1_(store, name + ".fc1", dim, inner, rng), fc2_(store, name + ".fc2", inner, dim, rng) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x) const {
    return fc2_.forward(t, relu(fc1_.forward(t, x)));
  }

 private:
  FullyConnected<S> fc1_, fc2_;
};

// Pre-norm residual encoder block:
//   x + Drop(Attn(LN1(x)));  then  x + Drop(FFN(LN2(x)))
template <typename S>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(ParameterStore<S>& store, const std::string& name, int dim, int heads, int ffn_dim,
               Rng& rng)
      : attn_(store, name + ".attn", dim, heads, rng),
        ln1_(store, name + ".ln1", dim),
        ffn_(store, name + ".ffn", dim, ffn_dim, rng),
        ln2_(store, name + ".ln2", dim) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, const AttentionMask& mask,
                    double dropout_rate, Rng* dropout_rng) const {
    Tensor<S> n1 = ln1_.forward(t, x);
    Tensor<S> a = add(x, dropout(attn_.forward(t, n1, n1, n1, mask), dropout_rate, dropout_rng));
    Tensor<S> n2 = ln2_.forward(t, a);
    return add(a, dropout(ffn_.forward(t, n2), dropout_rate, dropout_rng));
  }

 private:
  MultiHeadAttention<S> attn_;
  LayerNorm<S> ln1_;
  FeedForward<S> ffn_;
  LayerNorm<S> ln2_;
};

// Pre-norm residual decoder block: causal self-attention, then cross-attention
// whose keys and values may be distinct sequences, then feed-forward.
template <typename S>
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(ParameterStore<S>& store, const std::string& name, int dim, int heads, int ffn_dim,
               Rng& rng)
      : self_attn_(store, name + ".self", dim, heads, rng),
        cross_attn_(store, name + ".cross", dim, heads, rng),
        ln1_(store, name + ".ln1", dim),
        ln2_(store, name + ".ln2", dim),
        ln3_(store, name + ".ln3", dim),
        ffn_(store, name + ".ffn", dim, ffn_dim, rng) {}

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, const AttentionMask& causal_mask,
                    const Tensor<S>& memory_keys, const Tensor<S>& memory_values,
                    const AttentionMask& memory_mask, double dropout_rate,
                    Rng* dropout_rng) const {
    Tensor<S> n1 = ln1_.forward(t, x);
    Tensor<S> a =
        add(x, dropout(self_attn_.forward(t, n1, n1, n1, causal_mask), dropout_rate, dropout_rng));
    Tensor<S> n2 = ln2_.forward(t, a);
    Tensor<S> b = add(a, dropout(cross_attn_.forward(t, n2, memory_keys, memory_values, memory_mask),
                                 dropout_rate, dropout_rng));
    Tensor<S> n3 = ln3_.forward(t, b);
    return add(b, dropout(ffn_.forward(t, n3), dropout_rate, dropout_rng));
  }

 private:
  MultiHeadAttention<S> self_attn_;
  MultiHeadAttention<S> cross_attn_;
  LayerNorm<S> ln1_, ln2_, ln3_;
  FeedForward<S> ffn_;
};

template <typename S>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(ParameterStore<S>& store, const std::string& name, int layers, int dim,
                     int heads, int ffn_dim, Rng& rng)
      : final_ln_(store, name + ".final_ln", dim) {
    require(layers > 0, name + ": needs at least one layer");
    for (int i = 0; i < layers; ++i)
      blocks_.emplace_back(store, name + ".block" + std::to_string(i), dim, heads, ffn_dim, rng);
  }

  Tensor<S> forward(Tape<S>& t, const Tensor<S>& x, const AttentionMask& mask,
                    double dropout_rate = 0.0, Rng* dropout_rng = nullptr) const {
    require(x.shape().rows > 0, "encoder: empty sequence");
    Tensor<S> h = x;
    for (const auto& b : blocks_) h = b.forward(t, h, mask, dropout_rate, dropout_rng);
    return final_ln_.forward(t, h);
  }

 private:
  std::vector<EncoderBlock<S>> blocks_;
  LayerNorm<S> final_ln_;
};

template <typename S>
class TransformerDecoder {
 public:
  TransformerDecoder() = default;
  TransformerDecoder(ParameterStore<S>& store, const std::string& name, int layers, int dim,
                     int heads, int ffn_dim, Rng& rng)
      : final_ln_(store, name + ".final_ln", dim) {
    require(layers > 0, name + ": needs at least one layer");
    for (int i = 0; i < layers; ++i)
      blocks_.emplace_back(store, name + ".block" + std::to_string(i), dim, heads, ffn_dim, rng);
  }

  // The self-attention mask must have been built causal; anything else is a
  // construction error, not a silent fallback.
  Tensor<S> forward(Tape<S>& t, const Tensor<S>& target_prefix, const AttentionMask& causal_mask,
                    const Tensor<S>& memory_keys, const Tensor<S>& memory_values,
                    const AttentionMask& memory_mask, double dropout_rate = 0.0,
                    Rng* dropout_rng = nullptr) const {
    require(target_prefix.shape().rows > 0, "decoder: empty target prefix");
    require(causal_mask.causal && causal_mask.q_len == target_prefix.shape().rows,
            "decoder: self-attention requires a causal mask for the target length");
    Tensor<S> h = target_prefix;
    for (const auto& b : blocks_)
      h = b.forward(t, h, causal_mask, memory_keys, memory_values, memory_mask, dropout_rate,
                    dropout_rng);
    return final_ln_.forward(t, h);
  }

 private:
  std::vector<DecoderBlock<S>> blocks_;
  LayerNorm<S> final_ln_;
};

}  // namespace mime
