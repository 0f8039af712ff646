// Tests for corpus-level BLEU, top-k accuracy, the PCA diagnostics, the
// unigram reference model, and the training loop (evaluation, batch steps,
// early stopping, divergence guard, single-batch overfitting).

#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mime/metrics.hpp"
#include "mime/model.hpp"
#include "mime/train.hpp"

namespace {

using namespace mime;

using Sentence = std::vector<std::string>;

Sentence words(const std::string& text) {
  Sentence out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// Keeps MIME_THREADS fixed for the duration of a test and restores the
// previous value afterwards, so thread-count tests cannot leak into the
// deterministic ones.
struct ThreadsEnvGuard {
  std::string saved;
  bool had = false;
  ThreadsEnvGuard() {
    const char* v = std::getenv("MIME_THREADS");
    if (v != nullptr) {
      had = true;
      saved = v;
    }
    unsetenv("MIME_THREADS");
  }
  ~ThreadsEnvGuard() {
    if (had) {
      setenv("MIME_THREADS", saved.c_str(), 1);
    } else {
      unsetenv("MIME_THREADS");
    }
  }
};

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_h = 4;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.heads = 2;
  cfg.ffn_dim = 8;
  cfg.dropout = 0.0;
  cfg.max_ctx_len = 16;
  cfg.max_resp_len = 8;
  cfg.batch_size = 4;
  cfg.max_epochs = 4;
  cfg.patience = 2;
  cfg.lr = 5e-3;
  cfg.beam = 2;
  cfg.seed = 21;
  return cfg;
}

constexpr int kVocab = 12;  // ids 5..11 are usable content tokens

EncodedSample make_sample(int label, const std::vector<int>& ctx_tokens,
                          const std::vector<int>& resp_tokens) {
  EncodedSample s;
  s.ctx_ids.push_back(kCtx);
  s.ctx_speakers.push_back(kSpeakerCtx);
  s.ctx_positions.push_back(0);
  for (size_t i = 0; i < ctx_tokens.size(); ++i) {
    s.ctx_ids.push_back(ctx_tokens[i]);
    s.ctx_speakers.push_back(i % 2 == 0 ? kSpeakerUser : kSpeakerAgent);
    s.ctx_positions.push_back(static_cast<int>(i) + 1);
  }
  s.resp_in.push_back(kSos);
  for (int t : resp_tokens) s.resp_in.push_back(t);
  s.resp_target = resp_tokens;
  s.resp_target.push_back(kEos);
  s.label = label;
  return s;
}

// Fixed synthetic samples; labels cover both polarity groups.
std::vector<EncodedSample> synthetic_samples() {
  return {
      make_sample(1, {5, 6, 7}, {8, 9}),    make_sample(20, {7, 8}, {5, 5, 6}),
      make_sample(4, {9, 10, 11}, {10}),    make_sample(29, {6, 6, 9}, {11, 7}),
      make_sample(12, {5, 11}, {6, 8, 9}),  make_sample(15, {10, 7, 5, 8}, {9}),
      make_sample(2, {8, 9, 10, 6}, {7, 5}), make_sample(25, {11, 5}, {10, 10}),
  };
}

std::vector<EncodedSample> synthetic_valid() {
  return {
      make_sample(3, {6, 7, 8}, {9, 10}),
      make_sample(22, {9, 5}, {6, 7, 7}),
      make_sample(8, {10, 11, 6}, {5}),
      make_sample(30, {7, 9, 11}, {8, 6}),
  };
}

}  // namespace

// ---------------------------------------------------------------------------
// BLEU

TEST_CASE("bleu gives identical corpora a perfect score") {
  std::vector<Sentence> refs = {words("the cat is on the mat"), words("there is a cat here")};
  REQUIRE(evaluate_bleu(refs, refs) == 100.0);
}

TEST_CASE("bleu matches hand-worked examples") {
  // Two-pair corpus. Pooled n-gram counts: 1-grams 9/11, 2-grams 6/9,
  // 3-grams 3/7, 4-grams 1/5; hypothesis length 11 = reference length 11 so
  // no brevity penalty. 100 * (9/11 * 6/9 * 3/7 * 1/5)^(1/4).
  std::vector<Sentence> refs = {words("the cat is on the mat"), words("there is a cat here")};
  std::vector<Sentence> hyps = {words("the cat the cat on the mat"), words("there is a cat")};
  REQUIRE(evaluate_bleu(refs, hyps) == Catch::Approx(46.499999037304740).margin(1e-6));

  // Single pair: precisions 5/7, 3/6, 1/5 and no 4-gram match out of 4, so
  // the smoothed value 1/(4+1) enters the geometric mean.
  REQUIRE(evaluate_bleu({refs[0]}, {hyps[0]}) ==
          Catch::Approx(34.572078464194107).margin(1e-6));

  // Short hypothesis: every produced n-gram matches (the 4-gram row is empty
  // and smooths to 1/(0+1)), so the score is exactly the brevity penalty
  // exp(1 - 6/3).
  REQUIRE(evaluate_bleu({words("the cat sat on the mat")}, {words("the cat sat")}) ==
          Catch::Approx(36.787944117144235).margin(1e-6));
}

TEST_CASE("bleu handles degenerate corpora") {
  REQUIRE(evaluate_bleu({words("cc dd")}, {words("aa bb")}) == 0.0);
  REQUIRE(evaluate_bleu({words("a b"), words("c")}, {Sentence{}, Sentence{}}) == 0.0);
  REQUIRE_THROWS(evaluate_bleu({}, {}));
  REQUIRE_THROWS(evaluate_bleu({words("a")}, {words("a"), words("b")}));
}

// ---------------------------------------------------------------------------
// top-k accuracy

TEST_CASE("topk accuracy follows hand-ranked distributions") {
  const std::vector<double> d = {0.4, 0.3, 0.3};
  // Ranking with ties resolved toward lower ids: 0, then 1, then 2.
  REQUIRE(topk_accuracy({d}, {0}, 1) == 1.0);
  REQUIRE(topk_accuracy({d}, {1}, 1) == 0.0);
  REQUIRE(topk_accuracy({d}, {1}, 2) == 1.0);
  REQUIRE(topk_accuracy({d}, {2}, 2) == 0.0);
  REQUIRE(topk_accuracy({d}, {2}, 3) == 1.0);
  REQUIRE(topk_accuracy({d, d}, {0, 1}, 1) == 0.5);
}

TEST_CASE("topk accuracy validates its inputs") {
  const std::vector<double> d = {0.5, 0.5};
  REQUIRE_THROWS(topk_accuracy({d}, {0}, 0));
  REQUIRE_THROWS(topk_accuracy({d}, {0}, 3));
  REQUIRE_THROWS(topk_accuracy({d}, {2}, 1));
  REQUIRE_THROWS(topk_accuracy({d}, {0, 1}, 1));
  REQUIRE_THROWS(topk_accuracy({}, {}, 1));
}

TEST_CASE("topk accuracy of a uniform random predictor is about k/32") {
  const int n = 10000;
  Rng rng(99);
  std::vector<std::vector<double>> dists(n, std::vector<double>(kNumEmotions));
  std::vector<int> gold(n);
  for (int i = 0; i < n; ++i) {
    for (auto& v : dists[static_cast<size_t>(i)]) v = rng.uniform(0.0, 1.0);
    gold[static_cast<size_t>(i)] = static_cast<int>(rng.next_u64() % kNumEmotions);
  }
  for (int k : {1, 5}) {
    const double p = static_cast<double>(k) / kNumEmotions;
    const double se = std::sqrt(p * (1.0 - p) / n);
    const double acc = topk_accuracy(dists, gold, k);
    INFO("k=" << k << " acc=" << acc);
    REQUIRE(std::abs(acc - p) <= 3.0 * se);
  }
}

// ---------------------------------------------------------------------------
// eigendecomposition and PCA

TEST_CASE("jacobi eigendecomposition solves a hand 2x2 and a random matrix") {
  EigenResult two = jacobi_eigen_symmetric({2.0, 1.0, 1.0, 2.0}, 2);
  REQUIRE(two.values[0] == Catch::Approx(3.0).margin(1e-12));
  REQUIRE(two.values[1] == Catch::Approx(1.0).margin(1e-12));
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  REQUIRE(std::abs(two.vectors[0][0] * inv_sqrt2 + two.vectors[0][1] * inv_sqrt2) ==
          Catch::Approx(1.0).margin(1e-12));

  const int n = 6;
  Rng rng(31);
  std::vector<double> a(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) {
      const double v = rng.uniform(-1.0, 1.0);
      a[static_cast<size_t>(i) * n + j] = v;
      a[static_cast<size_t>(j) * n + i] = v;
    }
  EigenResult eig = jacobi_eigen_symmetric(a, n);

  double trace = 0.0, sum = 0.0;
  for (int i = 0; i < n; ++i) trace += a[static_cast<size_t>(i) * n + i];
  for (double v : eig.values) sum += v;
  REQUIRE(sum == Catch::Approx(trace).margin(1e-10));
  for (int i = 0; i + 1 < n; ++i) REQUIRE(eig.values[i] >= eig.values[i + 1]);

  for (int e = 0; e < n; ++e) {
    const auto& v = eig.vectors[static_cast<size_t>(e)];
    for (int i = 0; i < n; ++i) {
      double av = 0.0;
      for (int j = 0; j < n; ++j) av += a[static_cast<size_t>(i) * n + j] * v[static_cast<size_t>(j)];
      REQUIRE(av == Catch::Approx(eig.values[static_cast<size_t>(e)] * v[static_cast<size_t>(i)])
                        .margin(1e-9));
    }
    for (int f = 0; f < n; ++f) {
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += v[static_cast<size_t>(j)] * eig.vectors[static_cast<size_t>(f)][static_cast<size_t>(j)];
      REQUIRE(dot == Catch::Approx(e == f ? 1.0 : 0.0).margin(1e-10));
    }
  }
}

TEST_CASE("pca recovers a planted rank-2 row set exactly") {
  // Rows are mean + a_i * u + b_i * v with orthonormal u, v and orthogonal
  // centered weights, so the principal coordinates are a and b themselves.
  // Each weight vector has a unique largest-magnitude entry and it is
  // positive, making the component sign convention unambiguous.
  const int rows = 4, cols = 7;
  const std::array<double, 4> a = {4.0, 1.0, -2.0, -3.0};
  const std::array<double, 4> b = {1.0, -4.0 / 3.0, -5.0 / 3.0, 2.0};
  const std::array<double, 7> mean = {0.5, -0.3, 1.0, 2.0, 0.0, -1.5, 1.0};
  std::vector<double> data(rows * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      double v = mean[static_cast<size_t>(j)];
      if (j == 0) v += a[static_cast<size_t>(i)];  // u = e0
      if (j == 1) v += b[static_cast<size_t>(i)];  // v = e1
      data[static_cast<size_t>(i) * cols + j] = v;
    }

  PcaResult pca = pca_top2(data, rows, cols);
  REQUIRE(pca.eigenvalues[0] == Catch::Approx(30.0).margin(1e-8));       // |a|^2
  REQUIRE(pca.eigenvalues[1] == Catch::Approx(86.0 / 9.0).margin(1e-8));  // |b|^2
  REQUIRE(pca.total_variance == Catch::Approx(30.0 + 86.0 / 9.0).margin(1e-8));
  REQUIRE(pca.captured_fraction == Catch::Approx(1.0).margin(1e-9));
  for (int i = 0; i < rows; ++i) {
    REQUIRE(pca.coords[static_cast<size_t>(i)][0] ==
            Catch::Approx(a[static_cast<size_t>(i)]).margin(1e-8));
    REQUIRE(pca.coords[static_cast<size_t>(i)][1] ==
            Catch::Approx(b[static_cast<size_t>(i)]).margin(1e-8));
  }
}

TEST_CASE("pca satisfies variance identities on random data") {
  const int rows = 6, cols = 5;
  Rng rng(77);
  std::vector<double> data(static_cast<size_t>(rows) * cols);
  for (auto& v : data) v = rng.uniform(-2.0, 2.0);

  PcaResult pca = pca_top2(data, rows, cols);

  // Total variance equals the squared Frobenius norm of the centered rows.
  double frob = 0.0;
  for (int j = 0; j < cols; ++j) {
    double mean = 0.0;
    for (int i = 0; i < rows; ++i) mean += data[static_cast<size_t>(i) * cols + j];
    mean /= rows;
    for (int i = 0; i < rows; ++i) {
      const double c = data[static_cast<size_t>(i) * cols + j] - mean;
      frob += c * c;
    }
  }
  REQUIRE(pca.total_variance == Catch::Approx(frob).margin(1e-9));

  // Component coordinates carry exactly their eigenvalue's variance, are
  // mutually orthogonal, and are centered.
  double s00 = 0.0, s11 = 0.0, s01 = 0.0, m0 = 0.0, m1 = 0.0;
  for (const auto& c : pca.coords) {
    s00 += c[0] * c[0];
    s11 += c[1] * c[1];
    s01 += c[0] * c[1];
    m0 += c[0];
    m1 += c[1];
  }
  REQUIRE(s00 == Catch::Approx(pca.eigenvalues[0]).margin(1e-9));
  REQUIRE(s11 == Catch::Approx(pca.eigenvalues[1]).margin(1e-9));
  REQUIRE(s01 == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(m0 == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(m1 == Catch::Approx(0.0).margin(1e-9));
  REQUIRE(pca.captured_fraction ==
          Catch::Approx((pca.eigenvalues[0] + pca.eigenvalues[1]) / pca.total_variance)
              .margin(1e-12));
  REQUIRE(pca.captured_fraction <= 1.0 + 1e-12);
}

TEST_CASE("pca rejects rank-deficient and malformed inputs") {
  // All rows on one line -> rank 1.
  std::vector<double> rank1 = {1.0, 2.0, 2.0, 4.0, 3.0, 6.0};
  REQUIRE_THROWS(pca_top2(rank1, 3, 2));
  REQUIRE_THROWS(pca_top2(std::vector<double>{1.0, 2.0}, 1, 2));
  REQUIRE_THROWS(pca_top2(std::vector<double>{1.0, 2.0, 3.0}, 2, 2));

  ParameterStore<double> store;
  Rng rng(3);
  auto& wrong_rows = store.create_uniform("rows", {kNumEmotions - 1, 4}, 4, rng);
  REQUIRE_THROWS(project_emotion_embeddings(wrong_rows));
  auto& ok = store.create_uniform("ok", {kNumEmotions, 4}, 4, rng);
  REQUIRE_NOTHROW(project_emotion_embeddings(ok));
}

TEST_CASE("centroid separation is the planar distance between group means") {
  EmotionGrouping grouping = EmotionGrouping::standard();
  PcaResult pca;
  pca.coords.assign(kNumEmotions, {0.0, 0.0});
  for (int id : grouping.positive()) pca.coords[static_cast<size_t>(id)] = {1.0, 2.0};
  for (int id : grouping.negative()) pca.coords[static_cast<size_t>(id)] = {4.0, 6.0};
  REQUIRE(centroid_separation(pca, grouping) == Catch::Approx(5.0).margin(1e-12));
}

// ---------------------------------------------------------------------------
// unigram baseline and loop helpers

TEST_CASE("unigram baseline matches hand-computed Laplace estimates") {
  std::vector<EncodedSample> train = {
      make_sample(0, {5}, {5}),      // resp_target 5, eos
      make_sample(1, {5}, {5, 5}),   // resp_target 5, 5, eos
  };
  UnigramBaseline m = fit_unigram(train, 8);
  // counts: token 5 -> 3, eos -> 2, total 5; probabilities (c+1)/(5+8).
  REQUIRE(m.log_prob[5] == Catch::Approx(std::log(4.0 / 13.0)).margin(1e-12));
  REQUIRE(m.log_prob[kEos] == Catch::Approx(std::log(3.0 / 13.0)).margin(1e-12));
  REQUIRE(m.log_prob[0] == Catch::Approx(std::log(1.0 / 13.0)).margin(1e-12));

  const double nll_a = -(std::log(4.0 / 13.0) + std::log(3.0 / 13.0)) / 2.0;
  const double nll_b = -(2.0 * std::log(4.0 / 13.0) + std::log(3.0 / 13.0)) / 3.0;
  REQUIRE(m.mean_nll({train[0]}) == Catch::Approx(nll_a).margin(1e-12));
  REQUIRE(m.mean_nll(train) == Catch::Approx((nll_a + nll_b) / 2.0).margin(1e-12));

  // No data at all: every token gets probability 1/V.
  UnigramBaseline empty = fit_unigram({}, 8);
  REQUIRE(empty.log_prob[3] == Catch::Approx(std::log(1.0 / 8.0)).margin(1e-12));
  REQUIRE_THROWS(m.mean_nll({}));
  REQUIRE_THROWS(fit_unigram(train, 0));
  REQUIRE_THROWS(fit_unigram(train, 4));  // token 5 out of range
}

TEST_CASE("moving average slides a fixed window") {
  const std::vector<double> t = {1.0, 2.0, 3.0, 4.0};
  REQUIRE(moving_average(t, 2) == std::vector<double>{1.5, 2.5, 3.5});
  REQUIRE(moving_average(t, 1) == t);
  REQUIRE(moving_average(t, 4) == std::vector<double>{2.5});
  REQUIRE(moving_average(t, 5).empty());
  REQUIRE_THROWS(moving_average(t, 0));
}

TEST_CASE("chunk bounds partition the index range") {
  for (int n : {1, 2, 7, 10, 16}) {
    for (int t : {1, 2, 3, 5}) {
      int expect_lo = 0;
      for (int w = 0; w < t; ++w) {
        auto [lo, hi] = detail::chunk_bounds(n, t, w);
        REQUIRE(lo == expect_lo);
        REQUIRE(hi >= lo);
        expect_lo = hi;
      }
      REQUIRE(expect_lo == n);
    }
  }
}

TEST_CASE("threads_from_env parses and clamps MIME_THREADS") {
  ThreadsEnvGuard guard;
  unsetenv("MIME_THREADS");
  REQUIRE(threads_from_env() == 1);
  setenv("MIME_THREADS", "", 1);
  REQUIRE(threads_from_env() == 1);
  setenv("MIME_THREADS", "abc", 1);
  REQUIRE(threads_from_env() == 1);
  setenv("MIME_THREADS", "0", 1);
  REQUIRE(threads_from_env() == 1);
  setenv("MIME_THREADS", "-4", 1);
  REQUIRE(threads_from_env() == 1);
  setenv("MIME_THREADS", "2", 1);
  const int hw = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  REQUIRE(threads_from_env() == std::min(2, hw));
  setenv("MIME_THREADS", "999999", 1);
  REQUIRE(threads_from_env() == hw);
}

// ---------------------------------------------------------------------------
// model-level loss plumbing

TEST_CASE("training loss combines components with the configured weights") {
  ModelConfig cfg = tiny_config();
  cfg.alpha = 2.0;
  cfg.beta = 3.0;
  cfg.gamma = 0.5;
  EmotionGrouping grouping = EmotionGrouping::standard();
  MimeModel<double> model(cfg, kVocab, grouping);

  EncodedSample s = synthetic_samples()[0];
  Tape<double> t;
  auto losses = model.training_loss(t, view_of(s), nullptr, nullptr);
  const double expected = 2.0 * losses.cls.item() +
                          3.0 * (losses.kl_pos.item() + losses.kl_neg.item()) +
                          0.5 * losses.resp.item();
  REQUIRE(losses.total.item() == Catch::Approx(expected).margin(1e-12));
  REQUIRE(losses.predicted >= 0);
  REQUIRE(losses.predicted < kNumEmotions);
  REQUIRE(grouping.polarity_of(s.label) == losses.polarity);
}

TEST_CASE("every trainable block receives gradient from the total loss") {
  ModelConfig cfg = tiny_config();
  EmotionGrouping grouping = EmotionGrouping::standard();
  MimeModel<double> model(cfg, kVocab, grouping);

  EncodedSample s = synthetic_samples()[0];
  Rng noise(5);
  Tape<double> t;
  auto losses = model.training_loss(t, view_of(s), &noise, nullptr);
  t.backward(losses.total);

  auto& params = model.params();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.at(i);
    const std::string& name = p.name;
    // Word/position/speaker embeddings receive gradient only on the rows a
    // sample touches; key-projection biases have an exactly-zero gradient
    // because shifting every attention score in a row leaves softmax
    // unchanged. Everything else must see a signal.
    const bool partial = name.rfind("embed.", 0) == 0 && name != "embed.emotion";
    const bool zero_by_structure = name.size() >= 4 && name.compare(name.size() - 4, 4, ".k.b") == 0;
    if (partial || zero_by_structure) continue;
    double norm = 0.0;
    for (double g : p.grad) norm += g * g;
    INFO("parameter " << name);
    REQUIRE(norm > 0.0);
  }
}

// ---------------------------------------------------------------------------
// evaluation and batch steps

TEST_CASE("evaluate_split averages deterministic per-sample losses") {
  ThreadsEnvGuard guard;
  ModelConfig cfg = tiny_config();
  EmotionGrouping grouping = EmotionGrouping::standard();
  MimeModel<double> model(cfg, kVocab, grouping);
  std::vector<EncodedSample> valid = synthetic_valid();

  SplitStats stats = evaluate_split(model, valid, 1);
  REQUIRE(stats.count == static_cast<int>(valid.size()));

  double total = 0.0, resp = 0.0, top1 = 0.0;
  for (const EncodedSample& s : valid) {
    Tape<double> t;
    auto l = model.training_loss(t, view_of(s), nullptr, nullptr);
    total += l.total.item();
    resp += l.resp.item();
    top1 += l.predicted == s.label ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(valid.size());
  REQUIRE(stats.total == Catch::Approx(total / n).margin(1e-15));
  REQUIRE(stats.resp == Catch::Approx(resp / n).margin(1e-15));
  REQUIRE(stats.top1 == Catch::Approx(top1 / n).margin(1e-15));

  // Same numbers regardless of worker count, and bitwise equal on repeat.
  SplitStats again = evaluate_split(model, valid, 1);
  REQUIRE(stats.total == again.total);
  SplitStats threaded = evaluate_split(model, valid, 3);
  REQUIRE(threaded.total == Catch::Approx(stats.total).margin(1e-12));
  REQUIRE(threaded.count == stats.count);
}

TEST_CASE("batch step produces the same update for any worker count") {
  ThreadsEnvGuard guard;
  ModelConfig cfg = tiny_config();
  EmotionGrouping grouping = EmotionGrouping::standard();
  std::vector<EncodedSample> samples = synthetic_samples();
  auto batches = make_batches(samples, static_cast<int>(samples.size()), false, 0);
  const Batch& batch = batches.front();

  std::vector<std::pair<uint64_t, uint64_t>> seeds(static_cast<size_t>(batch.size()));
  Rng master(404);
  for (auto& sp : seeds) sp = {master.next_u64(), master.next_u64()};

  auto run = [&](int threads) {
    MimeModel<double> model(cfg, kVocab, grouping);
    Adam<double> opt(model.params(), AdamConfig{cfg.lr});
    TrainReport report;
    SplitStats stats =
        detail::batch_step(model, opt, batch, seeds, threads, false, report);
    std::vector<std::vector<double>> values;
    for (size_t i = 0; i < model.params().size(); ++i)
      values.push_back(model.params().at(i).value);
    return std::make_pair(stats, values);
  };

  auto [stats1, values1] = run(1);
  auto [stats1b, values1b] = run(1);
  auto [stats3, values3] = run(3);

  // Single-threaded repeats are bitwise identical.
  REQUIRE(stats1.total == stats1b.total);
  REQUIRE(values1 == values1b);

  // Worker counts only change floating-point summation order.
  REQUIRE(stats3.total == Catch::Approx(stats1.total).margin(1e-10));
  double max_diff = 0.0;
  for (size_t p = 0; p < values1.size(); ++p)
    for (size_t j = 0; j < values1[p].size(); ++j)
      max_diff = std::max(max_diff, std::abs(values1[p][j] - values3[p][j]));
  REQUIRE(max_diff < 1e-9);
}

// ---------------------------------------------------------------------------
// the training loop

TEST_CASE("train_model early-stops and restores the best parameters") {
  ThreadsEnvGuard guard;
  ModelConfig cfg = tiny_config();
  EmotionGrouping grouping = EmotionGrouping::standard();
  MimeModel<double> model(cfg, kVocab, grouping);
  std::vector<EncodedSample> train = synthetic_samples();
  std::vector<EncodedSample> valid = synthetic_valid();

  TrainReport report = train_model(model, train, valid, nullptr);

  REQUIRE(!report.epochs.empty());
  REQUIRE(report.epochs.size() <= static_cast<size_t>(cfg.max_epochs));
  REQUIRE(std::isfinite(report.initial_val_total));
  REQUIRE(!report.stop_reason.empty());
  REQUIRE(!report.diverged);

  // best_val_total is the minimum epoch validation loss and best_epoch the
  // first epoch that reached it.
  double min_val = std::numeric_limits<double>::infinity();
  int first_best = -1;
  for (const EpochRow& row : report.epochs) {
    if (row.val.total < min_val) {
      min_val = row.val.total;
      first_best = row.epoch;
    }
  }
  REQUIRE(report.best_val_total == Catch::Approx(min_val).margin(1e-15));
  REQUIRE(report.best_epoch == first_best);

  // The kept parameters reproduce the best validation loss exactly.
  SplitStats after = evaluate_split(model, valid, 1);
  REQUIRE(after.total == Catch::Approx(report.best_val_total).margin(1e-12));
}

TEST_CASE("train_model rejects empty splits") {
  ModelConfig cfg = tiny_config();
  EmotionGrouping grouping = EmotionGrouping::standard();
  MimeModel<double> model(cfg, kVocab, grouping);
  std::vector<EncodedSample> some = synthetic_valid();
  REQUIRE_THROWS(train_model(model, {}, some, nullptr));
  REQUIRE_THROWS(train_model(model, some, {}, nullptr));
}

TEST_CASE("train_model aborts when validation loss explodes") {
  ThreadsEnvGuard guard;
  ModelConfig cfg = tiny_config();
  cfg.lr = 10.0;  // absurd step size
  cfg.max_epochs = 6;
  cfg.patience = 6;
  EmotionGrouping grouping = EmotionGrouping::standard();
  MimeModel<double> model(cfg, kVocab, grouping);

  TrainReport report = train_model(model, synthetic_samples(), synthetic_valid(), nullptr);
  REQUIRE(report.diverged);
  REQUIRE(!report.stop_reason.empty());
  REQUIRE(report.epochs.size() < static_cast<size_t>(cfg.max_epochs));
}

TEST_CASE("report csv round-trips through a file") {
  TrainReport report;
  EpochRow row;
  row.epoch = 1;
  row.train.total = 2.5;
  row.val.total = 2.25;
  row.seconds = 0.125;
  report.epochs.push_back(row);
  row.epoch = 2;
  report.epochs.push_back(row);

  const std::string path = "/tmp/mime_report_test.csv";
  write_report_csv(report, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  REQUIRE(std::getline(in, line));
  REQUIRE(line ==
          "epoch,train_total,train_cls,train_kl_pos,train_kl_neg,train_resp,train_top1,"
          "val_total,val_cls,val_kl_pos,val_kl_neg,val_resp,val_top1,seconds");
  int rows = 0;
  while (std::getline(in, line)) {
    if (!line.empty()) ++rows;
  }
  REQUIRE(rows == 2);
  REQUIRE_THROWS(write_report_csv(report, "/nonexistent-dir/report.csv"));
}

TEST_CASE("overfit_batch drives the loss down on a fixed batch") {
  ThreadsEnvGuard guard;
  ModelConfig cfg = tiny_config();
  cfg.lr = 1e-2;
  EmotionGrouping grouping = EmotionGrouping::standard();
  MimeModel<double> model(cfg, kVocab, grouping);
  std::vector<EncodedSample> samples = synthetic_valid();

  TrainReport report = overfit_batch(model, samples, 4, 60, nullptr);
  REQUIRE(report.step_losses.size() == 60);
  for (double v : report.step_losses) REQUIRE(std::isfinite(v));
  REQUIRE(std::isfinite(report.final_resp_loss));
  REQUIRE(report.final_top1 >= 0.0);
  REQUIRE(report.final_top1 <= 1.0);
  REQUIRE(!report.stop_reason.empty());

  // The smoothed trace must end well below where it started.
  std::vector<double> ma = moving_average(report.step_losses, 10);
  REQUIRE(ma.back() < ma.front());
  REQUIRE_THROWS(overfit_batch(model, {}, 4, 10, nullptr));
  REQUIRE_THROWS(overfit_batch(model, samples, 0, 10, nullptr));
}
