#pragma once

// Training loop: mini-batch Adam over per-sample graphs, early stopping on
// validation loss, divergence guard, optional data-parallel gradient
// computation (MIME_THREADS), plus a single-batch overfit mode and a
// Laplace-smoothed unigram reference model for response-loss sanity checks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mime/corpus.hpp"
#include "mime/model.hpp"
#include "mime/optim.hpp"

namespace mime {

// MIME_THREADS controls data parallelism inside a batch. Unset or empty
// means 1 (single-threaded deterministic mode). Values are clamped to
// [1, hardware_concurrency].
inline int threads_from_env() {
  const char* env = std::getenv("MIME_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || v < 1) return 1;
  const long hw = std::max(1u, std::thread::hardware_concurrency());
  return static_cast<int>(std::min(v, hw));
}

// Laplace-smoothed unigram model over response targets (gold tokens plus the
// closing end-of-sequence token). mean_nll is the same per-sample mean
// negative log-likelihood the decoder loss uses, so the two are comparable.
struct UnigramBaseline {
  std::vector<double> log_prob;  // one entry per vocabulary id

  double mean_nll(const std::vector<EncodedSample>& samples) const {
    require(!samples.empty(), "unigram: no samples to score");
    double sum = 0.0;
    for (const EncodedSample& s : samples) {
      require(!s.resp_target.empty(), "unigram: sample with empty response");
      double nll = 0.0;
      for (int id : s.resp_target) {
        require(id >= 0 && id < static_cast<int>(log_prob.size()),
                "unigram: token id out of range");
        nll -= log_prob[static_cast<size_t>(id)];
      }
      sum += nll / static_cast<double>(s.resp_target.size());
    }
    return sum / static_cast<double>(samples.size());
  }
};

inline UnigramBaseline fit_unigram(const std::vector<EncodedSample>& train, int vocab_size) {
  require(vocab_size > 0, "unigram: vocab_size must be positive");
  std::vector<int64_t> counts(static_cast<size_t>(vocab_size), 0);
  int64_t total = 0;
  for (const EncodedSample& s : train) {
    for (int id : s.resp_target) {
      require(id >= 0 && id < vocab_size, "unigram: token id out of range");
      ++counts[static_cast<size_t>(id)];
      ++total;
    }
  }
  UnigramBaseline m;
  m.log_prob.resize(static_cast<size_t>(vocab_size));
  const double denom = static_cast<double>(total + vocab_size);
  for (size_t i = 0; i < m.log_prob.size(); ++i) {
    m.log_prob[i] = std::log((static_cast<double>(counts[i]) + 1.0) / denom);
  }
  return m;
}

// Mean loss components (unweighted) and emotion top-1 accuracy over a set of
// samples. total is the weighted sum the optimizer sees.
struct SplitStats {
  double total = 0.0;
  double cls = 0.0;
  double kl_pos = 0.0;
  double kl_neg = 0.0;
  double resp = 0.0;
  double top1 = 0.0;
  int count = 0;
};

struct EpochRow {
  int epoch = 0;  // 1-based
  SplitStats train;
  SplitStats val;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRow> epochs;
  double initial_val_total = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = -1;  // 1-based epoch whose parameters were kept
  double best_val_total = std::numeric_limits<double>::infinity();
  bool diverged = false;
  std::string stop_reason;
  int skipped_steps = 0;  // optimizer steps rejected for non-finite gradients

  // Overfit mode only: per-step batch-mean total loss and final metrics.
  std::vector<double> step_losses;
  double final_resp_loss = std::numeric_limits<double>::quiet_NaN();
  double final_top1 = std::numeric_limits<double>::quiet_NaN();
};

inline void write_report_csv(const TrainReport& report, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "report: cannot open " + path);
  out << "epoch,train_total,train_cls,train_kl_pos,train_kl_neg,train_resp,train_top1,"
         "val_total,val_cls,val_kl_pos,val_kl_neg,val_resp,val_top1,seconds\n";
  out << std::setprecision(17);
  for (const EpochRow& row : report.epochs) {
    out << row.epoch << ',' << row.train.total << ',' << row.train.cls << ','
        << row.train.kl_pos << ',' << row.train.kl_neg << ',' << row.train.resp << ','
        << row.train.top1 << ',' << row.val.total << ',' << row.val.cls << ','
        << row.val.kl_pos << ',' << row.val.kl_neg << ',' << row.val.resp << ','
        << row.val.top1 << ',' << row.seconds << '\n';
  }
  require(out.good(), "report: write failed for " + path);
}

namespace detail {

// Accumulates one sample's loss values into per-thread sums.
template <typename S>
inline void add_sample(SplitStats& acc, const SampleLosses<S>& l, int label) {
  acc.total += static_cast<double>(l.total.item());
  acc.cls += static_cast<double>(l.cls.item());
  acc.kl_pos += static_cast<double>(l.kl_pos.item());
  acc.kl_neg += static_cast<double>(l.kl_neg.item());
  acc.resp += static_cast<double>(l.resp.item());
  acc.top1 += l.predicted == label ? 1.0 : 0.0;
  acc.count += 1;
}

inline void merge(SplitStats& into, const SplitStats& part) {
  into.total += part.total;
  into.cls += part.cls;
  into.kl_pos += part.kl_pos;
  into.kl_neg += part.kl_neg;
  into.resp += part.resp;
  into.top1 += part.top1;
  into.count += part.count;
}

inline void finish_means(SplitStats& s) {
  if (s.count == 0) return;
  const double n = static_cast<double>(s.count);
  s.total /= n;
  s.cls /= n;
  s.kl_pos /= n;
  s.kl_neg /= n;
  s.resp /= n;
  s.top1 /= n;
}

// Contiguous chunk bounds for worker w of n items over t workers.
inline std::pair<int, int> chunk_bounds(int n, int t, int w) {
  const int base = n / t, extra = n % t;
  const int lo = w * base + std::min(w, extra);
  return {lo, lo + base + (w < extra ? 1 : 0)};
}

template <typename S>
inline std::vector<std::vector<S>> make_grad_buffer(const ParameterStore<S>& params) {
  std::vector<std::vector<S>> buf(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    buf[i].assign(static_cast<size_t>(params.at(i).shape.numel()), S(0));
  }
  return buf;
}

}  // namespace detail

// Deterministic evaluation over a split: posterior noise r = 0, no dropout.
template <typename S>
SplitStats evaluate_split(const MimeModel<S>& model, const std::vector<EncodedSample>& samples,
                          int threads = 1) {
  SplitStats stats;
  if (samples.empty()) return stats;
  const int n = static_cast<int>(samples.size());
  threads = std::max(1, std::min(threads, n));
  auto work = [&](int lo, int hi, SplitStats& acc) {
    for (int i = lo; i < hi; ++i) {
      Tape<S> t;
      auto losses = model.training_loss(t, view_of(samples[static_cast<size_t>(i)]), nullptr,
                                        nullptr);
      detail::add_sample(acc, losses, samples[static_cast<size_t>(i)].label);
    }
  };
  if (threads == 1) {
    work(0, n, stats);
  } else {
    std::vector<SplitStats> parts(static_cast<size_t>(threads));
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      auto [lo, hi] = detail::chunk_bounds(n, threads, w);
      pool.emplace_back(work, lo, hi, std::ref(parts[static_cast<size_t>(w)]));
    }
    for (auto& th : pool) th.join();
    for (const SplitStats& p : parts) detail::merge(stats, p);
  }
  detail::finish_means(stats);
  return stats;
}

namespace detail {

// One optimizer step on one padded batch. Per-sample seeds are drawn by the
// caller in sample order, so the work split across threads never changes
// which random draws a sample sees. Each worker accumulates gradients into a
// private buffer; buffers are merged in worker order, so results are
// reproducible for a fixed thread count (and bitwise stable single-threaded).
template <typename S>
SplitStats batch_step(MimeModel<S>& model, Adam<S>& opt, const Batch& batch,
                      const std::vector<std::pair<uint64_t, uint64_t>>& seeds, int threads,
                      bool use_dropout, TrainReport& report) {
  auto& params = model.params();
  params.zero_grad();
  const int b = batch.size();
  require(static_cast<int>(seeds.size()) == b, "train: one seed pair per sample required");
  threads = std::max(1, std::min(threads, b));
  const S inv_b = S(1) / static_cast<S>(b);

  SplitStats stats;
  auto work = [&](int lo, int hi, SplitStats& acc, std::vector<std::vector<S>>* sink) {
    for (int i = lo; i < hi; ++i) {
      Tape<S> t;
      t.grad_sink = sink;
      Rng noise(seeds[static_cast<size_t>(i)].first);
      Rng dropout(seeds[static_cast<size_t>(i)].second);
      auto losses = model.training_loss(t, view_of(batch, i), &noise,
                                        use_dropout ? &dropout : nullptr);
      t.backward(affine(losses.total, inv_b, S(0)));
      add_sample(acc, losses, batch.labels[static_cast<size_t>(i)]);
    }
  };

  if (threads == 1) {
    work(0, b, stats, nullptr);
  } else {
    std::vector<SplitStats> parts(static_cast<size_t>(threads));
    std::vector<std::vector<std::vector<S>>> buffers;
    buffers.reserve(static_cast<size_t>(threads));
    for (int w = 0; w < threads; ++w) buffers.push_back(make_grad_buffer(params));
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      auto [lo, hi] = chunk_bounds(b, threads, w);
      pool.emplace_back(work, lo, hi, std::ref(parts[static_cast<size_t>(w)]),
                        &buffers[static_cast<size_t>(w)]);
    }
    for (auto& th : pool) th.join();
    for (size_t w = 0; w < buffers.size(); ++w) {
      for (size_t p = 0; p < params.size(); ++p) {
        S* g = params.at(p).grad.data();
        const auto& src = buffers[w][p];
        for (size_t j = 0; j < src.size(); ++j) g[j] += src[j];
      }
      merge(stats, parts[w]);
    }
  }
  if (model.config().clip_gradients) clip_global_norm(params, 1.0);
  if (!opt.step()) ++report.skipped_steps;
  finish_means(stats);
  return stats;
}

}  // namespace detail

// Full training run with per-epoch validation, early stopping (strict
// improvement of validation total loss, cfg.patience bad epochs allowed),
// best-parameter restore, and a divergence guard that aborts once validation
// loss passes 10x its pre-training value or stops being finite.
template <typename S>
TrainReport train_model(MimeModel<S>& model, const std::vector<EncodedSample>& train_samples,
                        const std::vector<EncodedSample>& valid_samples,
                        std::ostream* log = nullptr) {
  require(!train_samples.empty(), "train: no training samples");
  require(!valid_samples.empty(), "train: no validation samples");
  const ModelConfig& cfg = model.config();
  const int threads = threads_from_env();
  auto& params = model.params();

  Adam<S> opt(params, AdamConfig{cfg.lr});
  Rng master(cfg.seed);
  TrainReport report;

  SplitStats init_val = evaluate_split(model, valid_samples, threads);
  report.initial_val_total = init_val.total;
  if (log) {
    *log << "initial validation loss " << init_val.total << " over " << init_val.count
         << " samples, threads=" << threads << "\n";
  }

  std::vector<std::vector<S>> best;  // parameter values at the best epoch
  int bad_epochs = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto batches = make_batches(train_samples, cfg.batch_size, true,
                                cfg.seed + static_cast<uint64_t>(epoch));
    EpochRow row;
    row.epoch = epoch;
    SplitStats train_sums;
    for (const Batch& batch : batches) {
      std::vector<std::pair<uint64_t, uint64_t>> seeds(static_cast<size_t>(batch.size()));
      for (auto& s : seeds) s = {master.next_u64(), master.next_u64()};
      SplitStats bs = detail::batch_step(model, opt, batch, seeds, threads,
                                         cfg.dropout > 0.0, report);
      // re-weight back to per-sample sums so uneven final batches average right
      bs.total *= bs.count;
      bs.cls *= bs.count;
      bs.kl_pos *= bs.count;
      bs.kl_neg *= bs.count;
      bs.resp *= bs.count;
      bs.top1 *= bs.count;
      detail::merge(train_sums, bs);
    }
    detail::finish_means(train_sums);
    row.train = train_sums;
    row.val = evaluate_split(model, valid_samples, threads);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(row);

    if (log) {
      *log << "epoch " << epoch << ": train " << row.train.total << " val " << row.val.total
           << " (cls " << row.val.cls << ", kl " << row.val.kl_pos + row.val.kl_neg << ", resp "
           << row.val.resp << ") top1 " << row.val.top1 << " in " << row.seconds << "s\n";
    }

    const bool bad_value = !std::isfinite(row.val.total);
    if (bad_value || row.val.total > 10.0 * report.initial_val_total) {
      report.diverged = true;
      report.stop_reason = bad_value ? "validation loss is not finite"
                                     : "validation loss exceeded 10x its initial value";
      break;
    }

    if (row.val.total < report.best_val_total) {
      report.best_val_total = row.val.total;
      report.best_epoch = epoch;
      bad_epochs = 0;
      best.resize(params.size());
      for (size_t p = 0; p < params.size(); ++p) best[p] = params.at(p).value;
    } else {
      ++bad_epochs;
      if (bad_epochs >= cfg.patience) {
        report.stop_reason = "early stopping: no validation improvement for " +
                             std::to_string(cfg.patience) + " epochs";
        break;
      }
    }
  }

  if (report.stop_reason.empty()) report.stop_reason = "reached max_epochs";
  if (!best.empty()) {
    for (size_t p = 0; p < params.size(); ++p) params.at(p).value = best[p];
  }
  if (log) {
    *log << report.stop_reason << "; kept epoch " << report.best_epoch << " (val "
         << report.best_val_total << ")\n";
  }
  return report;
}

// Memorization check: repeat Adam steps on one small fixed batch and record
// the per-step batch-mean total loss. Final response loss and emotion top-1
// are measured afterwards in deterministic mode (r = 0, no dropout).
template <typename S>
TrainReport overfit_batch(MimeModel<S>& model, const std::vector<EncodedSample>& samples,
                          int batch_size = 8, int steps = 500, std::ostream* log = nullptr) {
  require(!samples.empty(), "overfit: no samples");
  require(batch_size >= 1 && steps >= 1, "overfit: batch_size and steps must be >= 1");
  const ModelConfig& cfg = model.config();
  const int threads = threads_from_env();

  std::vector<EncodedSample> subset(
      samples.begin(),
      samples.begin() + std::min(samples.size(), static_cast<size_t>(batch_size)));
  auto batches = make_batches(subset, static_cast<int>(subset.size()), false, 0);
  const Batch& batch = batches.front();

  Adam<S> opt(model.params(), AdamConfig{cfg.lr});
  Rng master(cfg.seed);
  TrainReport report;
  report.step_losses.reserve(static_cast<size_t>(steps));
  for (int step = 0; step < steps; ++step) {
    std::vector<std::pair<uint64_t, uint64_t>> seeds(static_cast<size_t>(batch.size()));
    for (auto& s : seeds) s = {master.next_u64(), master.next_u64()};
    SplitStats bs =
        detail::batch_step(model, opt, batch, seeds, threads, cfg.dropout > 0.0, report);
    report.step_losses.push_back(bs.total);
    if (log && (step + 1) % 50 == 0) {
      *log << "step " << step + 1 << ": batch loss " << bs.total << "\n";
    }
  }

  SplitStats final_stats = evaluate_split(model, subset, threads);
  report.final_resp_loss = final_stats.resp;
  report.final_top1 = final_stats.top1;
  report.best_epoch = 1;
  report.best_val_total = final_stats.total;
  report.stop_reason = "completed " + std::to_string(steps) + " overfit steps";
  if (log) {
    *log << "final deterministic response loss " << final_stats.resp << ", emotion top-1 "
         << final_stats.top1 << "\n";
  }
  return report;
}

// Moving average of a loss trace with the given window; entry i averages
// trace[i .. i+window-1].
inline std::vector<double> moving_average(const std::vector<double>& trace, int window) {
  require(window >= 1, "moving_average: window must be >= 1");
  std::vector<double> out;
  if (static_cast<int>(trace.size()) < window) return out;
  double sum = 0.0;
  for (int i = 0; i < window; ++i) sum += trace[static_cast<size_t>(i)];
  out.push_back(sum / window);
  for (size_t i = static_cast<size_t>(window); i < trace.size(); ++i) {
    sum += trace[i] - trace[i - static_cast<size_t>(window)];
    out.push_back(sum / window);
  }
  return out;
}

}  // namespace mime
