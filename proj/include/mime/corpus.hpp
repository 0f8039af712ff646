#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mime/emotions.hpp"
#include "mime/random.hpp"
#include "mime/tensor.hpp"

namespace mime {

// Reserved vocabulary ids.
enum SpecialToken : int { kPad = 0, kUnk = 1, kSos = 2, kEos = 3, kCtx = 4 };
inline constexpr int kNumSpecialTokens = 5;

// Speaker-embedding rows.
enum SpeakerId : int { kSpeakerCtx = 0, kSpeakerUser = 1, kSpeakerAgent = 2 };
inline constexpr int kNumSpeakers = 3;

// Lowercase, split on whitespace, then peel leading/trailing punctuation
// into separate tokens ("great!" -> ["great", "!"]). Interior punctuation
// (don't, e-mail) is left alone.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush_word = [&out](std::string w) {
    if (w.empty()) return;
    std::vector<std::string> prefix, suffix;
    size_t a = 0, b = w.size();
    while (a < b && std::ispunct(static_cast<unsigned char>(w[a]))) {
      prefix.emplace_back(1, w[a]);
      ++a;
    }
    while (b > a && std::ispunct(static_cast<unsigned char>(w[b - 1]))) {
      suffix.emplace_back(1, w[b - 1]);
      --b;
    }
    out.insert(out.end(), prefix.begin(), prefix.end());
    if (b > a) out.push_back(w.substr(a, b - a));
    out.insert(out.end(), suffix.rbegin(), suffix.rend());
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush_word(word);
      word.clear();
    } else {
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush_word(word);
  return out;
}

// One training/evaluation instance: the dialogue so far (ending on a user
// turn) and the agent's gold reply, tagged with the conversation's emotion.
struct DialogueSample {
  std::vector<std::vector<std::string>> context;  // utterances, first is user, alternating
  int emotion = -1;
  std::vector<std::string> gold_response;
};

struct Vocabulary {
  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  Vocabulary() {
    for (const char* s : {"<pad>", "<unk>", "<sos>", "<eos>", "<ctx>"}) add(s);
  }

  int add(const std::string& token) {
    auto it = token_to_id.find(token);
    if (it != token_to_id.end()) return it->second;
    const int id = static_cast<int>(id_to_token.size());
    id_to_token.push_back(token);
    token_to_id.emplace(token, id);
    return id;
  }

  int id(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    require(id >= 0 && id < size(), "vocab: id " + std::to_string(id) + " out of range");
    return id_to_token[static_cast<size_t>(id)];
  }

  int size() const { return static_cast<int>(id_to_token.size()); }
};

// Frequency >= min_freq over the training split, ordered by
// (frequency desc, token asc) after the reserved entries.
inline Vocabulary build_vocab(const std::vector<DialogueSample>& train_samples, int min_freq = 1) {
  std::map<std::string, int64_t> freq;
  for (const auto& s : train_samples) {
    for (const auto& utt : s.context)
      for (const auto& tok : utt) ++freq[tok];
    for (const auto& tok : s.gold_response) ++freq[tok];
  }
  std::vector<std::pair<std::string, int64_t>> entries(freq.begin(), freq.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  for (const auto& [tok, n] : entries)
    if (n >= min_freq) v.add(tok);
  return v;
}

namespace detail {

inline std::string decode_escapes(const std::string& field) {
  static const std::string kEscape = "_comma_";
  std::string out;
  size_t pos = 0;
  while (pos < field.size()) {
    const size_t hit = field.find(kEscape, pos);
    if (hit == std::string::npos) {
      out.append(field, pos, field.size() - pos);
      break;
    }
    out.append(field, pos, hit - pos);
    out.push_back(',');
    pos = hit + kEscape.size();
  }
  return out;
}

inline std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace detail

struct LoadResult {
  std::vector<DialogueSample> samples;
  int64_t conversations = 0;
  int64_t skipped_rows = 0;
  std::set<int> labels_seen;
};

// EmpatheticDialogues CSV: header row naming at least conv_id,
// utterance_idx, context (the emotion label) and utterance; "_comma_"
// inside utterance text decodes to a comma. Odd utterance_idx rows are the
// user speaking, even rows the agent; each agent turn closes one sample.
inline LoadResult load_dataset_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "dataset: cannot open " + path);
  std::string header;
  require(static_cast<bool>(std::getline(in, header)), "dataset: " + path + " is empty");
  const std::vector<std::string> names = detail::split_csv_row(header);
  auto column = [&names, &path](const std::string& want) {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == want) return static_cast<int>(i);
    fail("dataset: " + path + " header lacks column \"" + want + "\"");
  };
  const int col_conv = column("conv_id");
  const int col_idx = column("utterance_idx");
  const int col_label = column("context");
  const int col_text = column("utterance");
  const int need = std::max({col_conv, col_idx, col_label, col_text}) + 1;

  struct Row {
    int idx;
    std::string text;
  };
  struct Conversation {
    int label = -1;
    std::vector<Row> rows;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Conversation> convs;

  LoadResult result;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = detail::split_csv_row(line);
    if (static_cast<int>(f.size()) < need) {
      ++result.skipped_rows;
      continue;
    }
    int idx = 0;
    try {
      size_t pos = 0;
      idx = std::stoi(f[static_cast<size_t>(col_idx)], &pos);
      if (pos != f[static_cast<size_t>(col_idx)].size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      ++result.skipped_rows;
      continue;
    }
    if (idx < 1) {
      ++result.skipped_rows;
      continue;
    }
    const std::string& label_name = f[static_cast<size_t>(col_label)];
    const int label = emotion_id(label_name);
    require(label >= 0, "dataset: " + path + ": unknown emotion label \"" + label_name + "\"");
    const std::string& conv_id = f[static_cast<size_t>(col_conv)];
    auto it = convs.find(conv_id);
    if (it == convs.end()) {
      it = convs.emplace(conv_id, Conversation{}).first;
      order.push_back(conv_id);
      it->second.label = label;
    }
    it->second.rows.push_back({idx, detail::decode_escapes(f[static_cast<size_t>(col_text)])});
    result.labels_seen.insert(label);
  }

  result.conversations = static_cast<int64_t>(order.size());
  for (const std::string& conv_id : order) {
    Conversation& conv = convs[conv_id];
    std::stable_sort(conv.rows.begin(), conv.rows.end(),
                     [](const Row& a, const Row& b) { return a.idx < b.idx; });
    std::vector<std::vector<std::string>> utterances;
    for (const Row& r : conv.rows) utterances.push_back(tokenize(r.text));
    // agent turns are the even 1-based positions; each yields one sample
    for (size_t i = 1; i < utterances.size(); i += 2) {
      DialogueSample s;
      s.context.assign(utterances.begin(), utterances.begin() + static_cast<long>(i));
      s.emotion = conv.label;
      s.gold_response = utterances[i];
      result.samples.push_back(std::move(s));
    }
  }
  return result;
}

inline std::string split_path(const std::string& directory, const std::string& split) {
  require(split == "train" || split == "valid" || split == "test",
          "dataset: unknown split \"" + split + "\"");
  return directory + "/" + split + ".csv";
}

inline LoadResult load_dataset(const std::string& directory, const std::string& split) {
  return load_dataset_file(split_path(directory, split));
}

// Flattened context: utterance tokens concatenated in order, each token
// tagged with its utterance's speaker. Speakers alternate starting from
// first_speaker (dataset contexts always start with the user; ad-hoc
// contexts may need to anchor parity so the final utterance is the user's).
struct FlatContext {
  std::vector<std::string> tokens;
  std::vector<int> speakers;
};

inline FlatContext flatten_context(const std::vector<std::vector<std::string>>& utterances,
                                   int first_speaker = kSpeakerUser) {
  require(first_speaker == kSpeakerUser || first_speaker == kSpeakerAgent,
          "context: first speaker must be user or agent");
  FlatContext flat;
  for (size_t u = 0; u < utterances.size(); ++u) {
    const bool even = u % 2 == 0;
    const int spk = (even == (first_speaker == kSpeakerUser)) ? kSpeakerUser : kSpeakerAgent;
    for (const auto& tok : utterances[u]) {
      flat.tokens.push_back(tok);
      flat.speakers.push_back(spk);
    }
  }
  return flat;
}

// Model-ready encoding of one sample. Context ids start with <ctx> at
// position 0; decoder input is <sos> + gold, target is gold + <eos>.
struct EncodedSample {
  std::vector<int> ctx_ids;
  std::vector<int> ctx_speakers;
  std::vector<int> ctx_positions;
  std::vector<int> resp_in;
  std::vector<int> resp_target;
  int label = -1;
};

inline EncodedSample encode_sample(const DialogueSample& s, const Vocabulary& vocab,
                                   int max_ctx_len, int max_resp_len,
                                   int first_speaker = kSpeakerUser) {
  require(!s.context.empty(), "encode: sample has no context");
  EncodedSample e;
  e.label = s.emotion;

  FlatContext flat = flatten_context(s.context, first_speaker);
  // truncate to the most recent max_ctx_len tokens; the final utterance is
  // the most recent so it survives (clipped to its own tail if oversized)
  size_t start = 0;
  if (static_cast<int>(flat.tokens.size()) > max_ctx_len)
    start = flat.tokens.size() - static_cast<size_t>(max_ctx_len);
  e.ctx_ids.push_back(kCtx);
  e.ctx_speakers.push_back(kSpeakerCtx);
  e.ctx_positions.push_back(0);
  for (size_t i = start; i < flat.tokens.size(); ++i) {
    e.ctx_ids.push_back(vocab.id(flat.tokens[i]));
    e.ctx_speakers.push_back(flat.speakers[i]);
    e.ctx_positions.push_back(static_cast<int>(i - start) + 1);
  }

  std::vector<int> gold;
  for (const auto& tok : s.gold_response) {
    if (static_cast<int>(gold.size()) >= max_resp_len) break;
    gold.push_back(vocab.id(tok));
  }
  e.resp_in.push_back(kSos);
  for (int id : gold) e.resp_in.push_back(id);
  e.resp_target = gold;
  e.resp_target.push_back(kEos);
  return e;
}

// Padded batch. Pad rows use id kPad with speaker/position 0; true lengths
// say how much of each row is real.
struct Batch {
  std::vector<std::vector<int>> ctx_ids;
  std::vector<std::vector<int>> ctx_speakers;
  std::vector<std::vector<int>> ctx_positions;
  std::vector<int> ctx_len;
  std::vector<std::vector<int>> resp_in;
  std::vector<std::vector<int>> resp_target;
  std::vector<int> resp_len;
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
};

inline std::vector<Batch> make_batches(const std::vector<EncodedSample>& samples, int batch_size,
                                       bool shuffle, uint64_t seed) {
  require(batch_size >= 1, "batches: batch_size must be >= 1");
  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order);
  }
  std::vector<Batch> batches;
  for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(order.size(), at + static_cast<size_t>(batch_size));
    Batch b;
    size_t max_ctx = 0, max_resp = 0;
    for (size_t i = at; i < end; ++i) {
      max_ctx = std::max(max_ctx, samples[order[i]].ctx_ids.size());
      max_resp = std::max(max_resp, samples[order[i]].resp_target.size());
    }
    for (size_t i = at; i < end; ++i) {
      const EncodedSample& s = samples[order[i]];
      b.ctx_len.push_back(static_cast<int>(s.ctx_ids.size()));
      b.resp_len.push_back(static_cast<int>(s.resp_target.size()));
      b.labels.push_back(s.label);
      auto pad_to = [](std::vector<int> v, size_t n, int fill) {
        v.resize(n, fill);
        return v;
      };
      b.ctx_ids.push_back(pad_to(s.ctx_ids, max_ctx, kPad));
      b.ctx_speakers.push_back(pad_to(s.ctx_speakers, max_ctx, 0));
      b.ctx_positions.push_back(pad_to(s.ctx_positions, max_ctx, 0));
      b.resp_in.push_back(pad_to(s.resp_in, max_resp, kPad));
      b.resp_target.push_back(pad_to(s.resp_target, max_resp, kPad));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

struct EmbeddingLoadStats {
  int64_t matched = 0;
  int64_t file_entries = 0;
  int64_t skipped_lines = 0;
  double coverage = 0.0;  // matched / non-reserved vocab size
};

// Plain-text pretrained vectors: each line is a token followed by dim
// decimals. Rows for in-vocabulary tokens overwrite the table's random
// initialization; everything else keeps it.
template <typename S>
EmbeddingLoadStats load_pretrained_embeddings(const std::string& path, const Vocabulary& vocab,
                                              Parameter<S>& word_table) {
  std::ifstream in(path);
  require(in.good(), "embeddings: cannot open " + path);
  const int dim = word_table.shape.cols;
  require(word_table.shape.rows == vocab.size(),
          "embeddings: table rows != vocabulary size");
  EmbeddingLoadStats stats;
  std::set<int> matched_ids;
  std::string line;
  int64_t lineno = 0;
  int file_dim = -1;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token;
    if (!(ss >> token)) {
      ++stats.skipped_lines;
      continue;
    }
    values.clear();
    double v;
    while (ss >> v) values.push_back(v);
    bool trailing_junk = !ss.eof();
    if (file_dim < 0 && !values.empty() && !trailing_junk) {
      file_dim = static_cast<int>(values.size());
      require(file_dim == dim, "embeddings: " + path + " has dimension " +
                                   std::to_string(file_dim) + ", expected " +
                                   std::to_string(dim));
    }
    if (trailing_junk || static_cast<int>(values.size()) != dim) {
      ++stats.skipped_lines;
      continue;
    }
    ++stats.file_entries;
    const int id = vocab.id(token);
    if (id == kUnk && token != vocab.token(kUnk)) continue;
    matched_ids.insert(id);
    for (int j = 0; j < dim; ++j)
      word_table.value[static_cast<size_t>(id) * dim + j] = static_cast<S>(values[static_cast<size_t>(j)]);
  }
  stats.matched = static_cast<int64_t>(matched_ids.size());
  const int non_reserved = vocab.size() - kNumSpecialTokens;
  stats.coverage = non_reserved > 0 ? static_cast<double>(stats.matched) / non_reserved : 0.0;
  return stats;
}

}  // namespace mime
