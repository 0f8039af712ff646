#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mime/config.hpp"
#include "mime/context_encoder.hpp"
#include "mime/emotions.hpp"
#include "mime/layers.hpp"
#include "mime/tensor.hpp"

namespace mime {

// Diagonal Gaussian over [1 x D]; sigma = exp(0.5 * logvar) stays positive
// by construction.
template <typename S>
struct GaussianParams {
  Tensor<S> mu;
  Tensor<S> logvar;
  Tensor<S> sigma;
};

// One group's stochastic draw: latent z, distribution d over the group's
// labels, and the pooled emotion vector e.
template <typename S>
struct GroupSample {
  Tensor<S> z;
  Tensor<S> d;
  Tensor<S> e;
};

// Closed-form KL(q || p) between diagonal Gaussians, summed over
// coordinates, built from differentiable ops.
template <typename S>
Tensor<S> kl_term(const GaussianParams<S>& q, const GaussianParams<S>& p) {
  Tensor<S> diff = sub(q.mu, p.mu);
  Tensor<S> var_q = exp_op(q.logvar);
  Tensor<S> inv_var_p = exp_op(affine(p.logvar, S(-1), S(0)));
  Tensor<S> ratio = mul(add(var_q, mul(diff, diff)), inv_var_p);
  Tensor<S> per_coord = add(sub(p.logvar, q.logvar), affine(ratio, S(1), S(-1)));
  return affine(reduce_sum(per_coord), S(0.5), S(0));
}

// z = mu + r (*) sigma with r either standard normal or zero (deterministic
// mode). The noise enters as data, so gradients flow only through mu/sigma.
template <typename S>
Tensor<S> sample_z(Tape<S>& t, const GaussianParams<S>& params, Rng* rng) {
  const int d = params.mu.shape().cols;
  std::vector<S> noise(static_cast<size_t>(d), S(0));
  if (rng != nullptr)
    for (auto& v : noise) v = static_cast<S>(rng->normal());
  Tensor<S> r = t.input({1, d}, noise);
  return add(params.mu, mul(r, params.sigma));
}

// Mimicking / non-mimicking pair: the mimicking vector m matches the
// context's polarity, m-tilde is the opposite group's vector.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> select_mimicry(Polarity polarity, const Tensor<S>& e_pos,
                                               const Tensor<S>& e_neg) {
  if (polarity == Polarity::positive) return {e_pos, e_neg};
  return {e_neg, e_pos};
}

template <typename S>
struct FusionResult {
  Tensor<S> contrib;   // sigmoid gate, [L x 2D]
  Tensor<S> adjusted;  // gate (*) [M | M~]
  Tensor<S> fused;     // [L x D]
};

// Stochastic response-emotion machinery: prior/posterior Gaussian heads per
// polarity group (or one 32-way set when grouping is off), group pooling
// over the shared emotion table, mimicry selection, emotion-refined context
// encoding and the gated fusion producing M_fused.
template <typename S>
class EmotionMixture {
 public:
  enum class Branch { pos, neg };

  EmotionMixture() = default;
  EmotionMixture(ParameterStore<S>& store, const ModelConfig& cfg, const EmotionGrouping& grouping,
                 Embeddings<S>& embeds, Rng& rng)
      : grouped_(cfg.grouping),
        mimicry_(cfg.mimicry),
        explicit_reconstruction_(cfg.explicit_reconstruction),
        grouping_(&grouping),
        embeds_(&embeds),
        prior_trunk_(store, "sampler.prior.trunk", cfg.d_h, cfg.d_h, rng),
        posterior_trunk_(store, "sampler.posterior.trunk", 2 * cfg.d_h, cfg.d_h, rng) {
    pos_ids_ = grouping.positive();
    neg_ids_ = grouping.negative();
    for (int i = 0; i < kNumEmotions; ++i) all_ids_.push_back(i);
    const int d = cfg.d_h;
    if (grouped_) {
      prior_mu_pos_ = FullyConnected<S>(store, "sampler.prior.pos.mu", d, d, rng);
      prior_lv_pos_ = FullyConnected<S>(store, "sampler.prior.pos.logvar", d, d, rng);
      prior_mu_neg_ = FullyConnected<S>(store, "sampler.prior.neg.mu", d, d, rng);
      prior_lv_neg_ = FullyConnected<S>(store, "sampler.prior.neg.logvar", d, d, rng);
      posterior_mu_pos_ = FullyConnected<S>(store, "sampler.posterior.pos.mu", d, d, rng);
      posterior_lv_pos_ = FullyConnected<S>(store, "sampler.posterior.pos.logvar", d, d, rng);
      posterior_mu_neg_ = FullyConnected<S>(store, "sampler.posterior.neg.mu", d, d, rng);
      posterior_lv_neg_ = FullyConnected<S>(store, "sampler.posterior.neg.logvar", d, d, rng);
      d_pos_ = FullyConnected<S>(store, "sampler.d_pos", d, static_cast<int>(pos_ids_.size()), rng);
      d_neg_ = FullyConnected<S>(store, "sampler.d_neg", d, static_cast<int>(neg_ids_.size()), rng);
    } else {
      prior_mu_all_ = FullyConnected<S>(store, "sampler.prior.all.mu", d, d, rng);
      prior_lv_all_ = FullyConnected<S>(store, "sampler.prior.all.logvar", d, d, rng);
      posterior_mu_all_ = FullyConnected<S>(store, "sampler.posterior.all.mu", d, d, rng);
      posterior_lv_all_ = FullyConnected<S>(store, "sampler.posterior.all.logvar", d, d, rng);
      d_all_ = FullyConnected<S>(store, "sampler.d_all", d, kNumEmotions, rng);
    }
    input_proj_ = FullyConnected<S>(store, "resp_encoder.input_proj", 2 * d, d, rng);
    resp_encoder_ = TransformerEncoder<S>(store, "resp_encoder", cfg.enc_layers, d, cfg.heads,
                                          cfg.resolved_ffn_dim(), rng);
    contrib_ = FullyConnected<S>(store, "fusion.contrib", 2 * d, 2 * d, rng);
    fused_ = FullyConnected<S>(store, "fusion.fused", 2 * d, d, rng);
  }

  bool grouped() const { return grouped_; }
  bool mimicry() const { return mimicry_; }

  const std::vector<int>& group_ids(Branch b) const {
    if (!grouped_) return all_ids_;
    return b == Branch::pos ? pos_ids_ : neg_ids_;
  }

  GaussianParams<S> prior_params(Tape<S>& t, const Tensor<S>& c, Branch b) const {
    Tensor<S> trunk = relu(prior_trunk_.forward(t, c));
    return head_params(t, trunk, prior_head(b));
  }

  // Posterior conditions on the context and the gold emotion's embedding
  // row; training only.
  GaussianParams<S> posterior_params(Tape<S>& t, const Tensor<S>& c,
                                     const Tensor<S>& target_emotion_vec, Branch b) const {
    Tensor<S> trunk = relu(posterior_trunk_.forward(t, concat_cols(c, target_emotion_vec)));
    return head_params(t, trunk, posterior_head(b));
  }

  // d = softmax(FC_d(z)) over the branch's labels.
  Tensor<S> emotion_distribution(Tape<S>& t, const Tensor<S>& z, Branch b) const {
    const FullyConnected<S>& head = !grouped_ ? d_all_ : (b == Branch::pos ? d_pos_ : d_neg_);
    return softmax_rows(head.forward(t, z));
  }

  // e = d * (emotion table restricted to the branch's rows).
  Tensor<S> pool_group_emotion(Tape<S>& t, const Tensor<S>& d, Branch b) const {
    const std::vector<int>& ids = group_ids(b);
    require(d.shape().cols == static_cast<int>(ids.size()),
            "pool: distribution width " + std::to_string(d.shape().cols) + " != group size " +
                std::to_string(ids.size()));
    return matmul(d, embeds_->emotion.lookup(t, ids));
  }

  GroupSample<S> draw(Tape<S>& t, const GaussianParams<S>& params, Branch b, Rng* rng) const {
    GroupSample<S> g;
    g.z = sample_z(t, params, rng);
    g.d = emotion_distribution(t, g.z, b);
    g.e = pool_group_emotion(t, g.d, b);
    return g;
  }

  // [H_i (+) e] per row, projected back to width D and re-encoded. Both
  // mimicry branches run through these same weights.
  Tensor<S> refine_context(Tape<S>& t, const Tensor<S>& h, const Tensor<S>& emotion_vec,
                           const std::vector<uint8_t>& keep_keys = {}, double dropout_rate = 0.0,
                           Rng* dropout_rng = nullptr) const {
    const int len = h.shape().rows;
    Tensor<S> cat = concat_cols(h, broadcast_rows(emotion_vec, len));
    Tensor<S> x = input_proj_.forward(t, cat);
    AttentionMask mask = keep_keys.empty() ? AttentionMask::all_visible(len, len)
                                           : AttentionMask::key_padding(len, keep_keys);
    return resp_encoder_.forward(t, x, mask, dropout_rate, dropout_rng);
  }

  FusionResult<S> fuse(Tape<S>& t, const Tensor<S>& m, const Tensor<S>& m_tilde) const {
    require(m.shape() == m_tilde.shape(), "fuse: branch shapes differ");
    FusionResult<S> r;
    Tensor<S> both = concat_cols(m, m_tilde);
    r.contrib = sigmoid(contrib_.forward(t, both));
    r.adjusted = mul(r.contrib, both);
    r.fused = fused_.forward(t, r.adjusted);
    return r;
  }

  struct Outputs {
    GroupSample<S> pos;        // grouping off: the single 32-way draw
    GroupSample<S> neg;        // grouping off: aliases pos
    Tensor<S> kl_pos;          // grouping off: the single KL term
    Tensor<S> kl_neg;          // grouping off: zero
    Tensor<S> m, m_tilde;
    FusionResult<S> fusion;
    Polarity polarity = Polarity::positive;
  };

  // Training path: z from the posterior, ELBO KL against the prior per
  // group, polarity from the gold label.
  Outputs train_forward(Tape<S>& t, const Tensor<S>& c, const Tensor<S>& h, int gold_label,
                        Rng* noise_rng, const std::vector<uint8_t>& keep_keys = {},
                        double dropout_rate = 0.0, Rng* dropout_rng = nullptr) const {
    const int target[1] = {gold_label};
    Tensor<S> target_vec = embeds_->emotion.lookup(t, std::span<const int>(target, 1));
    Outputs out;
    out.polarity = grouping_->polarity_of(gold_label);
    if (grouped_) {
      GaussianParams<S> q_pos = posterior_params(t, c, target_vec, Branch::pos);
      GaussianParams<S> q_neg = posterior_params(t, c, target_vec, Branch::neg);
      GaussianParams<S> p_pos = prior_params(t, c, Branch::pos);
      GaussianParams<S> p_neg = prior_params(t, c, Branch::neg);
      out.pos = draw(t, q_pos, Branch::pos, noise_rng);
      out.neg = draw(t, q_neg, Branch::neg, noise_rng);
      out.kl_pos = kl_term(q_pos, p_pos);
      out.kl_neg = kl_term(q_neg, p_neg);
      if (explicit_reconstruction_) {
        const Branch gold_branch =
            out.polarity == Polarity::positive ? Branch::pos : Branch::neg;
        Tensor<S>& kl = gold_branch == Branch::pos ? out.kl_pos : out.kl_neg;
        const GroupSample<S>& g = gold_branch == Branch::pos ? out.pos : out.neg;
        kl = add(kl, reconstruction_error(g.e, target_vec));
      }
    } else {
      GaussianParams<S> q = posterior_params(t, c, target_vec, Branch::pos);
      GaussianParams<S> p = prior_params(t, c, Branch::pos);
      out.pos = draw(t, q, Branch::pos, noise_rng);
      out.neg = out.pos;
      out.kl_pos = kl_term(q, p);
      out.kl_neg = t.constant({1, 1}, S(0));
      if (explicit_reconstruction_)
        out.kl_pos = add(out.kl_pos, reconstruction_error(out.pos.e, target_vec));
    }
    finish(t, out, h, keep_keys, dropout_rate, dropout_rng);
    return out;
  }

  // Inference path: z from the prior, polarity from the predicted emotion
  // distribution. No KL terms are produced.
  Outputs infer_forward(Tape<S>& t, const Tensor<S>& c, const Tensor<S>& h,
                        std::span<const S> predicted_distribution, Rng* noise_rng,
                        const std::vector<uint8_t>& keep_keys = {}) const {
    Outputs out;
    out.polarity = polarity_from_distribution(predicted_distribution, *grouping_);
    if (grouped_) {
      GaussianParams<S> p_pos = prior_params(t, c, Branch::pos);
      GaussianParams<S> p_neg = prior_params(t, c, Branch::neg);
      out.pos = draw(t, p_pos, Branch::pos, noise_rng);
      out.neg = draw(t, p_neg, Branch::neg, noise_rng);
    } else {
      GaussianParams<S> p = prior_params(t, c, Branch::pos);
      out.pos = draw(t, p, Branch::pos, noise_rng);
      out.neg = out.pos;
    }
    finish(t, out, h, keep_keys, 0.0, nullptr);
    return out;
  }

 private:
  struct HeadPair {
    const FullyConnected<S>* mu;
    const FullyConnected<S>* logvar;
  };

  HeadPair prior_head(Branch b) const {
    if (!grouped_) return {&prior_mu_all_, &prior_lv_all_};
    if (b == Branch::pos) return {&prior_mu_pos_, &prior_lv_pos_};
    return {&prior_mu_neg_, &prior_lv_neg_};
  }
  HeadPair posterior_head(Branch b) const {
    if (!grouped_) return {&posterior_mu_all_, &posterior_lv_all_};
    if (b == Branch::pos) return {&posterior_mu_pos_, &posterior_lv_pos_};
    return {&posterior_mu_neg_, &posterior_lv_neg_};
  }

  GaussianParams<S> head_params(Tape<S>& t, const Tensor<S>& trunk, HeadPair heads) const {
    GaussianParams<S> p;
    p.mu = heads.mu->forward(t, trunk);
    p.logvar = heads.logvar->forward(t, trunk);
    p.sigma = exp_op(affine(p.logvar, S(0.5), S(0)));
    return p;
  }

  // Unit-variance Gaussian negative log-likelihood (without the constant):
  // 0.5 * sum (e - target)^2.
  Tensor<S> reconstruction_error(const Tensor<S>& e, const Tensor<S>& target_vec) const {
    Tensor<S> diff = sub(e, target_vec);
    return affine(reduce_sum(mul(diff, diff)), S(0.5), S(0));
  }

  void finish(Tape<S>& t, Outputs& out, const Tensor<S>& h, const std::vector<uint8_t>& keep_keys,
              double dropout_rate, Rng* dropout_rng) const {
    if (mimicry_ && grouped_) {
      auto [m, m_tilde] = select_mimicry(out.polarity, out.pos.e, out.neg.e);
      out.m = m;
      out.m_tilde = m_tilde;
    } else {
      // selection bypass: the group vectors feed the branches directly
      out.m = out.pos.e;
      out.m_tilde = out.neg.e;
    }
    Tensor<S> refined_m = refine_context(t, h, out.m, keep_keys, dropout_rate, dropout_rng);
    Tensor<S> refined_mt =
        refine_context(t, h, out.m_tilde, keep_keys, dropout_rate, dropout_rng);
    out.fusion = fuse(t, refined_m, refined_mt);
  }

  bool grouped_ = true;
  bool mimicry_ = true;
  bool explicit_reconstruction_ = false;
  const EmotionGrouping* grouping_ = nullptr;
  Embeddings<S>* embeds_ = nullptr;

  std::vector<int> pos_ids_, neg_ids_, all_ids_;

  FullyConnected<S> prior_trunk_, posterior_trunk_;
  FullyConnected<S> prior_mu_pos_, prior_lv_pos_, prior_mu_neg_, prior_lv_neg_;
  FullyConnected<S> posterior_mu_pos_, posterior_lv_pos_, posterior_mu_neg_, posterior_lv_neg_;
  FullyConnected<S> prior_mu_all_, prior_lv_all_, posterior_mu_all_, posterior_lv_all_;
  FullyConnected<S> d_pos_, d_neg_, d_all_;

  FullyConnected<S> input_proj_;
  TransformerEncoder<S> resp_encoder_;
  FullyConnected<S> contrib_;
  FullyConnected<S> fused_;
};

}  // namespace mime
