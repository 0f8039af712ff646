#pragma once

#include <array>
#include <fstream>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mime/tensor.hpp"

namespace mime {

inline constexpr int kNumEmotions = 32;

// The 32 EmpatheticDialogues emotion labels, positive block first.
// Index into this array is the label id used everywhere else.
inline const std::array<std::string, kNumEmotions>& emotion_names() {
  static const std::array<std::string, kNumEmotions> names = {
      // positive (13)
      "confident", "joyful", "grateful", "impressed", "proud", "excited", "trusting", "hopeful",
      "faithful", "prepared", "content", "surprised", "caring",
      // negative (19)
      "afraid", "angry", "annoyed", "anticipating", "anxious", "apprehensive", "ashamed",
      "devastated", "disappointed", "disgusted", "embarrassed", "furious", "guilty", "jealous",
      "lonely", "nostalgic", "sad", "sentimental", "terrified"};
  return names;
}

inline int emotion_id(const std::string& name) {
  const auto& names = emotion_names();
  for (int i = 0; i < kNumEmotions; ++i)
    if (names[static_cast<size_t>(i)] == name) return i;
  return -1;
}

enum class Polarity { positive, negative };

inline const char* polarity_name(Polarity p) {
  return p == Polarity::positive ? "positive" : "negative";
}

// Partition of the label ids into a positive and a negative group.
class EmotionGrouping {
 public:
  // 13 positive / 19 negative split used throughout.
  static EmotionGrouping standard() {
    EmotionGrouping g;
    for (int i = 0; i < 13; ++i) g.positive_.push_back(i);
    for (int i = 13; i < kNumEmotions; ++i) g.negative_.push_back(i);
    g.validate(true);
    g.finalize();
    return g;
  }

  // Text format: label names one per line under [positive] / [negative]
  // headers. Any nonempty partition covering all 32 labels is accepted, so
  // regrouping experiments do not require the 13/19 sizes.
  static EmotionGrouping from_file(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "grouping: cannot open " + path);
    EmotionGrouping g;
    std::vector<int>* current = nullptr;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
      size_t start = line.find_first_not_of(" \t");
      if (start == std::string::npos) continue;
      line = line.substr(start);
      if (line[0] == '#') continue;
      if (line == "[positive]") {
        current = &g.positive_;
      } else if (line == "[negative]") {
        current = &g.negative_;
      } else {
        require(current != nullptr,
                "grouping: " + path + ":" + std::to_string(lineno) + ": label before any header");
        const int id = emotion_id(line);
        require(id >= 0, "grouping: " + path + ":" + std::to_string(lineno) +
                             ": unknown emotion \"" + line + "\"");
        current->push_back(id);
      }
    }
    g.validate(false);
    g.finalize();
    return g;
  }

  const std::vector<int>& group(Polarity p) const {
    return p == Polarity::positive ? positive_ : negative_;
  }
  const std::vector<int>& positive() const { return positive_; }
  const std::vector<int>& negative() const { return negative_; }

  Polarity polarity_of(int label) const {
    require(label >= 0 && label < kNumEmotions, "polarity: label " + std::to_string(label) +
                                                    " outside [0, " +
                                                    std::to_string(kNumEmotions) + ")");
    return polarity_[static_cast<size_t>(label)];
  }

  void validate(bool enforce_standard_sizes) const {
    std::set<int> seen;
    for (int id : positive_) {
      require(id >= 0 && id < kNumEmotions, "grouping: bad label id");
      require(seen.insert(id).second, "grouping: label \"" +
                                          emotion_names()[static_cast<size_t>(id)] +
                                          "\" listed twice");
    }
    for (int id : negative_) {
      require(id >= 0 && id < kNumEmotions, "grouping: bad label id");
      require(seen.insert(id).second, "grouping: label \"" +
                                          emotion_names()[static_cast<size_t>(id)] +
                                          "\" listed twice");
    }
    require(static_cast<int>(seen.size()) == kNumEmotions,
            "grouping: covers " + std::to_string(seen.size()) + " of " +
                std::to_string(kNumEmotions) + " labels");
    require(!positive_.empty() && !negative_.empty(), "grouping: a group is empty");
    if (enforce_standard_sizes) {
      require(positive_.size() == 13 && negative_.size() == 19,
              "grouping: expected 13 positive / 19 negative, got " +
                  std::to_string(positive_.size()) + "/" + std::to_string(negative_.size()));
    }
  }

 private:
  EmotionGrouping() = default;
  void finalize() {
    polarity_.assign(kNumEmotions, Polarity::negative);
    for (int id : positive_) polarity_[static_cast<size_t>(id)] = Polarity::positive;
  }

  std::vector<int> positive_;
  std::vector<int> negative_;
  std::vector<Polarity> polarity_;

  friend EmotionGrouping make_grouping(std::vector<int> pos, std::vector<int> neg);
};

inline EmotionGrouping make_grouping(std::vector<int> pos, std::vector<int> neg) {
  EmotionGrouping g;
  g.positive_ = std::move(pos);
  g.negative_ = std::move(neg);
  g.validate(false);
  g.finalize();
  return g;
}

// Gold label during training; argmax of the predicted distribution at
// inference, ties broken by the lowest label id.
inline Polarity polarity_from_label(int gold, const EmotionGrouping& grouping) {
  return grouping.polarity_of(gold);
}

template <typename S>
Polarity polarity_from_distribution(std::span<const S> probs, const EmotionGrouping& grouping) {
  require(static_cast<int>(probs.size()) == kNumEmotions,
          "polarity: distribution has " + std::to_string(probs.size()) + " entries");
  int best = 0;
  for (int i = 1; i < kNumEmotions; ++i)
    if (probs[static_cast<size_t>(i)] > probs[static_cast<size_t>(best)]) best = i;
  return grouping.polarity_of(best);
}

}  // namespace mime
