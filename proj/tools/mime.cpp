// mime — train, evaluate, and probe the empathetic response generator.
//
// Subcommands:
//   train            fit a model on an EmpatheticDialogues-style directory
//   generate         decode one response for a "u1 || u2 || ..." context
//   eval             BLEU and emotion top-k accuracy on a data split
//   inspect-emotions 2-D principal-component projection of the emotion table
//   chat             interactive REPL that keeps the running dialogue context

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mime/checkpoint.hpp"
#include "mime/corpus.hpp"
#include "mime/metrics.hpp"
#include "mime/model.hpp"
#include "mime/train.hpp"

namespace {

using Scalar = float;

// Outputs are written to a temp file and renamed so a failure never leaves
// a partially written file behind.
void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    mime::require(out.good(), "cannot open " + tmp);
    out << content;
    out.flush();
    mime::require(out.good(), "write failed for " + tmp);
  }
  mime::require(std::rename(tmp.c_str(), path.c_str()) == 0,
                "cannot rename " + tmp + " into " + path);
}

std::string join_tokens(const std::vector<int>& ids, const mime::Vocabulary& vocab) {
  std::string s;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) s += ' ';
    s += vocab.token(ids[i]);
  }
  return s;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// "u1 || u2 || u3" -> {"u1", "u2", "u3"}
std::vector<std::string> split_context_arg(const std::string& arg) {
  std::vector<std::string> parts;
  size_t at = 0;
  while (true) {
    const size_t bar = arg.find("||", at);
    parts.push_back(trim(bar == std::string::npos ? arg.substr(at) : arg.substr(at, bar - at)));
    if (bar == std::string::npos) break;
    at = bar + 2;
  }
  return parts;
}

// A checkpoint rebuilt into a usable model. The grouping lives here because
// the model keeps a pointer to it, so bundles must stay where they are.
struct ModelBundle {
  mime::ModelConfig cfg;
  mime::Vocabulary vocab;
  mime::EmotionGrouping grouping = mime::EmotionGrouping::standard();
  std::unique_ptr<mime::MimeModel<Scalar>> model;

  ModelBundle() = default;
  ModelBundle(const ModelBundle&) = delete;
  ModelBundle& operator=(const ModelBundle&) = delete;
};

void load_bundle(const std::string& ckpt_path, ModelBundle& b) {
  auto loaded = mime::load_checkpoint<Scalar>(ckpt_path);
  b.cfg = loaded.meta.config;
  b.vocab = loaded.meta.vocab;
  b.grouping = loaded.grouping();
  b.model = std::make_unique<mime::MimeModel<Scalar>>(b.cfg, b.vocab.size(), b.grouping);
  loaded.apply(b.model->params());
}

// Encode an ad-hoc context so the final utterance is the user's.
mime::EncodedSample encode_context_only(const std::vector<std::string>& utterances,
                                        const mime::Vocabulary& vocab,
                                        const mime::ModelConfig& cfg) {
  mime::require(!utterances.empty(), "context: no utterances given");
  mime::DialogueSample s;
  for (const std::string& text : utterances) s.context.push_back(mime::tokenize(text));
  s.emotion = 0;  // placeholder; generation never reads the gold label
  const int first =
      (utterances.size() % 2 == 1) ? mime::kSpeakerUser : mime::kSpeakerAgent;
  return mime::encode_sample(s, vocab, cfg.max_ctx_len, cfg.max_resp_len, first);
}

void print_generation(const mime::Generation<Scalar>& gen, const mime::Vocabulary& vocab,
                      bool grouped) {
  std::cout << "response: " << join_tokens(gen.tokens, vocab) << "\n";
  std::cout << "emotion: " << mime::emotion_names()[static_cast<size_t>(gen.emotion)] << " ("
            << mime::polarity_name(gen.polarity) << ")\n";
  auto print_top = [&](const char* tag, const std::vector<std::pair<int, double>>& d) {
    std::cout << tag << ":";
    for (size_t i = 0; i < d.size() && i < 3; ++i) {
      std::cout << (i > 0 ? ", " : " ")
                << mime::emotion_names()[static_cast<size_t>(d[i].first)] << " " << d[i].second;
    }
    std::cout << "\n";
  };
  if (grouped) {
    print_top("sampled d (positive group)", gen.d_pos);
    print_top("sampled d (negative group)", gen.d_neg);
  } else {
    print_top("sampled d (all emotions)", gen.d_pos);
  }
}

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out_path, const std::string& embeddings_path, bool seed_given,
              uint64_t seed, bool no_mimicry, bool no_grouping, bool overfit) {
  mime::ModelConfig cfg;
  if (!config_path.empty()) cfg = mime::ModelConfig::load(config_path);
  if (seed_given) cfg.seed = seed;
  if (no_mimicry) cfg.mimicry = false;
  if (no_grouping) cfg.grouping = false;
  cfg.validate();

  auto train_raw = mime::load_dataset(data_dir, "train");
  mime::require(!train_raw.samples.empty(), "train split has no samples");
  std::cout << "train: " << train_raw.samples.size() << " samples from "
            << train_raw.conversations << " conversations (" << train_raw.skipped_rows
            << " rows skipped)\n";

  mime::Vocabulary vocab = mime::build_vocab(train_raw.samples, cfg.min_freq);
  std::cout << "vocabulary: " << vocab.size() << " entries\n";

  std::vector<mime::EncodedSample> train_samples;
  train_samples.reserve(train_raw.samples.size());
  for (const auto& s : train_raw.samples)
    train_samples.push_back(mime::encode_sample(s, vocab, cfg.max_ctx_len, cfg.max_resp_len));

  mime::EmotionGrouping grouping = mime::EmotionGrouping::standard();
  mime::MimeModel<Scalar> model(cfg, vocab.size(), grouping);
  std::cout << "model: " << model.params().total_elements() << " parameters\n";

  if (!embeddings_path.empty()) {
    auto stats = mime::load_pretrained_embeddings(embeddings_path, vocab,
                                                  model.embeddings().word.param());
    std::cout << "pretrained vectors: matched " << stats.matched << " tokens, coverage "
              << stats.coverage << "\n";
  }

  mime::TrainReport report;
  if (overfit) {
    report = mime::overfit_batch(model, train_samples, 8, 500, &std::cout);
  } else {
    auto valid_raw = mime::load_dataset(data_dir, "valid");
    mime::require(!valid_raw.samples.empty(), "valid split has no samples");
    std::vector<mime::EncodedSample> valid_samples;
    valid_samples.reserve(valid_raw.samples.size());
    for (const auto& s : valid_raw.samples)
      valid_samples.push_back(mime::encode_sample(s, vocab, cfg.max_ctx_len, cfg.max_resp_len));
    report = mime::train_model(model, train_samples, valid_samples, &std::cout);
  }

  mime::CheckpointMeta meta{cfg, vocab, grouping.positive(), grouping.negative()};
  mime::save_checkpoint(out_path, meta, model.params());
  std::cout << "checkpoint written to " << out_path << "\n";

  const std::string metrics_path = out_path + ".metrics.csv";
  const std::string metrics_tmp = metrics_path + ".tmp";
  mime::write_report_csv(report, metrics_tmp);
  mime::require(std::rename(metrics_tmp.c_str(), metrics_path.c_str()) == 0,
                "cannot rename " + metrics_tmp + " into " + metrics_path);
  std::cout << "metrics written to " << metrics_path << "\n";

  if (overfit) {
    std::ostringstream steps;
    steps << "step,loss\n" << std::setprecision(17);
    for (size_t i = 0; i < report.step_losses.size(); ++i)
      steps << i + 1 << ',' << report.step_losses[i] << '\n';
    write_file_atomic(out_path + ".steps.csv", steps.str());
  }
  if (report.diverged) {
    std::cerr << "training diverged: " << report.stop_reason << "\n";
    return 1;
  }
  return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& context, int beam,
                 bool deterministic, bool seed_given, uint64_t seed) {
  ModelBundle b;
  load_bundle(ckpt, b);
  auto enc = encode_context_only(split_context_arg(context), b.vocab, b.cfg);
  mime::Rng rng(seed_given ? seed : b.cfg.seed);
  mime::Rng* noise = (deterministic || b.cfg.deterministic_inference) ? nullptr : &rng;
  auto gen = b.model->generate(enc.ctx_ids, enc.ctx_speakers, enc.ctx_positions, noise, beam);
  print_generation(gen, b.vocab, b.cfg.grouping);
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             const std::string& metrics_arg, const std::string& out_path, int64_t limit) {
  ModelBundle b;
  load_bundle(ckpt, b);
  mime::require(b.model->vocab_size() == b.vocab.size(),
                "vocabulary mismatch: checkpoint holds " + std::to_string(b.vocab.size()) +
                    " entries, model tensors expect " + std::to_string(b.model->vocab_size()));

  auto raw = mime::load_dataset(data_dir, split);
  mime::require(!raw.samples.empty(), "split \"" + split + "\" has no samples");
  if (limit > 0 && static_cast<int64_t>(raw.samples.size()) > limit)
    raw.samples.resize(static_cast<size_t>(limit));

  std::vector<mime::EncodedSample> samples;
  samples.reserve(raw.samples.size());
  for (const auto& s : raw.samples)
    samples.push_back(mime::encode_sample(s, b.vocab, b.cfg.max_ctx_len, b.cfg.max_resp_len));

  bool want_bleu = false, want_topk = false;
  {
    std::stringstream ss(metrics_arg);
    std::string m;
    while (std::getline(ss, m, ',')) {
      m = trim(m);
      if (m == "bleu") want_bleu = true;
      else if (m == "topk") want_topk = true;
      else if (!m.empty()) mime::fail("unknown metric \"" + m + "\" (use bleu,topk)");
    }
  }
  mime::require(want_bleu || want_topk, "no metrics requested");

  std::ostringstream csv;
  csv << "metric,value\n" << std::setprecision(17);

  if (want_topk) {
    std::vector<std::vector<double>> dists;
    std::vector<int> golds;
    dists.reserve(samples.size());
    for (const auto& e : samples) {
      dists.push_back(b.model->classify_context(mime::view_of(e)));
      golds.push_back(e.label);
    }
    for (int k : {1, 2, 5}) {
      const double acc = mime::topk_accuracy(dists, golds, k);
      std::cout << "top-" << k << " emotion accuracy: " << acc << "\n";
      csv << "top" << k << ',' << acc << '\n';
    }
  }

  if (want_bleu) {
    std::vector<std::vector<std::string>> refs, hyps;
    refs.reserve(samples.size());
    hyps.reserve(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
      const auto& e = samples[i];
      // deterministic decoding (prior mean) so repeated runs agree exactly
      auto gen = b.model->generate(e.ctx_ids, e.ctx_speakers, e.ctx_positions, nullptr);
      std::vector<std::string> hyp;
      for (int id : gen.tokens) hyp.push_back(b.vocab.token(id));
      hyps.push_back(std::move(hyp));
      refs.push_back(raw.samples[i].gold_response);
    }
    const double bleu = mime::evaluate_bleu(refs, hyps);
    std::cout << "BLEU: " << bleu << "\n";
    csv << "bleu," << bleu << '\n';
  }

  write_file_atomic(out_path, csv.str());
  std::cout << "metrics written to " << out_path << "\n";
  return 0;
}

int cmd_inspect_emotions(const std::string& ckpt, const std::string& out_path) {
  ModelBundle b;
  load_bundle(ckpt, b);
  auto pca = mime::project_emotion_embeddings(b.model->embeddings().emotion.param());
  std::ostringstream csv;
  csv << "label,x,y,group\n" << std::setprecision(17);
  for (int i = 0; i < mime::kNumEmotions; ++i) {
    csv << mime::emotion_names()[static_cast<size_t>(i)] << ','
        << pca.coords[static_cast<size_t>(i)][0] << ',' << pca.coords[static_cast<size_t>(i)][1]
        << ',' << mime::polarity_name(b.grouping.polarity_of(i)) << '\n';
  }
  write_file_atomic(out_path, csv.str());
  std::cout << "wrote " << mime::kNumEmotions << " projected emotions to " << out_path
            << " (top-2 components capture " << pca.captured_fraction * 100.0
            << "% of variance)\n";
  std::cout << "group centroid separation: " << mime::centroid_separation(pca, b.grouping)
            << "\n";
  return 0;
}

int cmd_chat(const std::string& ckpt, bool deterministic, bool seed_given, uint64_t seed) {
  ModelBundle b;
  load_bundle(ckpt, b);
  mime::Rng rng(seed_given ? seed : b.cfg.seed);
  mime::Rng* noise = (deterministic || b.cfg.deterministic_inference) ? nullptr : &rng;
  std::vector<std::string> history;
  std::string line;
  std::cout << "(empty line or end-of-input ends the chat)\n";
  while (true) {
    std::cout << "you> " << std::flush;
    if (!std::getline(std::cin, line)) break;
    line = trim(line);
    if (line.empty()) break;
    history.push_back(line);
    auto enc = encode_context_only(history, b.vocab, b.cfg);
    auto gen = b.model->generate(enc.ctx_ids, enc.ctx_speakers, enc.ctx_positions, noise);
    const std::string reply = join_tokens(gen.tokens, b.vocab);
    std::cout << "mime[" << mime::emotion_names()[static_cast<size_t>(gen.emotion)] << "/"
              << mime::polarity_name(gen.polarity) << "]> " << reply << "\n";
    history.push_back(reply);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"empathetic response generation with emotion mimicry"};
  app.require_subcommand(1);

  // train
  std::string tr_data, tr_config, tr_out, tr_embeddings;
  uint64_t tr_seed = 0;
  bool tr_no_mimicry = false, tr_no_grouping = false, tr_overfit = false;
  auto* train = app.add_subcommand("train", "fit a model and write a checkpoint");
  train->add_option("--data", tr_data, "directory with train/valid/test.csv")->required();
  train->add_option("--config", tr_config, "flat key = value config file");
  train->add_option("--out", tr_out, "checkpoint output path")->required();
  auto* tr_seed_opt = train->add_option("--seed", tr_seed, "overrides the config seed");
  train->add_flag("--no-mimicry", tr_no_mimicry, "disable emotion mimicry (ablation)");
  train->add_flag("--no-grouping", tr_no_grouping,
                  "single 32-way emotion head instead of polarity groups (ablation)");
  train->add_flag("--overfit-batch", tr_overfit, "memorize one batch of 8 for 500 steps");
  train->add_option("--embeddings", tr_embeddings,
                    "pretrained word vectors (text format) to initialize the word table");

  // generate
  std::string g_ckpt, g_context;
  int g_beam = -1;
  uint64_t g_seed = 0;
  bool g_deterministic = false;
  auto* gen = app.add_subcommand("generate", "decode one response for a context");
  gen->add_option("--ckpt", g_ckpt, "checkpoint path")->required();
  gen->add_option("--context", g_context, "utterances separated by \"||\", last is the user's")
      ->required();
  gen->add_option("--beam", g_beam, "beam width (default: from the checkpoint config)");
  gen->add_flag("--deterministic", g_deterministic, "use the prior mean instead of sampling");
  auto* g_seed_opt = gen->add_option("--seed", g_seed, "sampling seed");

  // eval
  std::string e_ckpt, e_data, e_split = "test", e_metrics = "bleu,topk",
              e_out = "eval_metrics.csv";
  int64_t e_limit = 0;
  auto* ev = app.add_subcommand("eval", "score a data split");
  ev->add_option("--ckpt", e_ckpt, "checkpoint path")->required();
  ev->add_option("--data", e_data, "dataset directory")->required();
  ev->add_option("--split", e_split, "train, valid, or test (default test)");
  ev->add_option("--metrics", e_metrics, "comma list: bleu,topk");
  ev->add_option("--out", e_out, "metrics csv output path");
  ev->add_option("--limit", e_limit, "score at most this many samples (0 = all)");

  // inspect-emotions
  std::string i_ckpt, i_out;
  auto* insp = app.add_subcommand("inspect-emotions",
                                  "project the emotion embeddings to 2-D for plotting");
  insp->add_option("--ckpt", i_ckpt, "checkpoint path")->required();
  insp->add_option("--out", i_out, "csv output path (label,x,y,group)")->required();

  // chat
  std::string c_ckpt;
  uint64_t c_seed = 0;
  bool c_deterministic = false;
  auto* chat = app.add_subcommand("chat", "interactive dialogue loop");
  chat->add_option("--ckpt", c_ckpt, "checkpoint path")->required();
  chat->add_flag("--deterministic", c_deterministic, "use the prior mean instead of sampling");
  auto* c_seed_opt = chat->add_option("--seed", c_seed, "sampling seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      return cmd_train(tr_data, tr_config, tr_out, tr_embeddings, tr_seed_opt->count() > 0,
                       tr_seed, tr_no_mimicry, tr_no_grouping, tr_overfit);
    }
    if (gen->parsed()) {
      return cmd_generate(g_ckpt, g_context, g_beam, g_deterministic, g_seed_opt->count() > 0,
                          g_seed);
    }
    if (ev->parsed()) return cmd_eval(e_ckpt, e_data, e_split, e_metrics, e_out, e_limit);
    if (insp->parsed()) return cmd_inspect_emotions(i_ckpt, i_out);
    if (chat->parsed()) return cmd_chat(c_ckpt, c_deterministic, c_seed_opt->count() > 0, c_seed);
  } catch (const std::exception& e) {
    std::cerr << "mime: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
