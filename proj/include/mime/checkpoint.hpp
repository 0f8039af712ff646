#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mime/config.hpp"
#include "mime/corpus.hpp"
#include "mime/emotions.hpp"
#include "mime/tensor.hpp"

namespace mime {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as raw little-endian IEEE-754");

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'M', 'E', 'C', 'K', 'P', 'T'};

template <typename S>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<S, float>) return "f32";
  else if constexpr (std::is_same_v<S, double>) return "f64";
  else static_assert(sizeof(S) == 0, "unsupported scalar type");
}

// Everything a checkpoint stores besides the raw tensors.
struct CheckpointMeta {
  ModelConfig config;
  Vocabulary vocab;
  std::vector<int> grouping_positive;
  std::vector<int> grouping_negative;
};

template <typename S>
struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::vector<std::string> tensor_order;
  std::unordered_map<std::string, Shape> shapes;
  std::unordered_map<std::string, std::vector<S>> tensors;

  EmotionGrouping grouping() const {
    return make_grouping(meta.grouping_positive, meta.grouping_negative);
  }

  // Copies every tensor into the identically named store parameter.
  // The checkpoint and the store must describe exactly the same set.
  void apply(ParameterStore<S>& store) const {
    for (size_t i = 0; i < store.size(); ++i) {
      Parameter<S>& p = store.at(i);
      auto it = tensors.find(p.name);
      require(it != tensors.end(), "checkpoint: missing tensor \"" + p.name + "\"");
      const Shape sh = shapes.at(p.name);
      require(sh == p.shape, "checkpoint: tensor \"" + p.name + "\" has shape " + sh.str() +
                                 ", model expects " + p.shape.str());
      p.value = it->second;
    }
    require(tensors.size() == store.size(),
            "checkpoint: holds " + std::to_string(tensors.size()) + " tensors, model has " +
                std::to_string(store.size()));
  }
};

// Container layout: 8-byte magic "MIMECKPT", a 4-byte little-endian
// manifest length, the UTF-8 JSON manifest (config snapshot, vocabulary,
// emotion grouping, tensor directory with payload-relative offsets), then
// the raw little-endian IEEE-754 payload. Written to a temp file and
// renamed into place so failures never leave a partial checkpoint.
template <typename S>
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParameterStore<S>& store) {
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  nlohmann::json cfg_obj = nlohmann::json::object();
  for (const auto& [k, v] : meta.config.to_map()) cfg_obj[k] = v;
  manifest["config"] = std::move(cfg_obj);
  manifest["vocab"] = meta.vocab.id_to_token;
  manifest["grouping"] = {{"positive", meta.grouping_positive},
                          {"negative", meta.grouping_negative}};

  nlohmann::json tensors = nlohmann::json::array();
  uint64_t offset = 0;
  for (size_t i = 0; i < store.size(); ++i) {
    const Parameter<S>& p = store.at(i);
    const uint64_t bytes = static_cast<uint64_t>(p.shape.numel()) * sizeof(S);
    tensors.push_back({{"name", p.name},
                       {"dtype", dtype_name<S>()},
                       {"shape", {p.shape.rows, p.shape.cols}},
                       {"offset", offset},
                       {"bytes", bytes}});
    offset += bytes;
  }
  manifest["tensors"] = std::move(tensors);

  const std::string manifest_text = manifest.dump();
  require(manifest_text.size() <= 0xFFFFFFFFull, "checkpoint: manifest too large");

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "checkpoint: cannot write " + tmp);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const uint32_t len = static_cast<uint32_t>(manifest_text.size());
    char len_le[4] = {static_cast<char>(len & 0xFF), static_cast<char>((len >> 8) & 0xFF),
                      static_cast<char>((len >> 16) & 0xFF),
                      static_cast<char>((len >> 24) & 0xFF)};
    out.write(len_le, 4);
    out.write(manifest_text.data(), static_cast<std::streamsize>(manifest_text.size()));
    for (size_t i = 0; i < store.size(); ++i) {
      const Parameter<S>& p = store.at(i);
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(S)));
    }
    require(out.good(), "checkpoint: write to " + tmp + " failed");
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0,
          "checkpoint: cannot rename " + tmp + " to " + path);
}

template <typename S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.gcount() == 8 && std::memcmp(magic, kCheckpointMagic, 8) == 0,
          "checkpoint: " + path + " is not a checkpoint file (bad magic)");
  unsigned char len_le[4];
  in.read(reinterpret_cast<char*>(len_le), 4);
  require(in.gcount() == 4, "checkpoint: truncated manifest length");
  const uint32_t manifest_len = static_cast<uint32_t>(len_le[0]) |
                                (static_cast<uint32_t>(len_le[1]) << 8) |
                                (static_cast<uint32_t>(len_le[2]) << 16) |
                                (static_cast<uint32_t>(len_le[3]) << 24);
  std::string manifest_text(manifest_len, '\0');
  in.read(manifest_text.data(), manifest_len);
  require(in.gcount() == static_cast<std::streamsize>(manifest_len),
          "checkpoint: truncated manifest");
  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::exception& e) {
    fail("checkpoint: manifest is not valid JSON: " + std::string(e.what()));
  }

  LoadedCheckpoint<S> ck;
  for (const auto& [k, v] : manifest.at("config").items())
    ck.meta.config.set(k, v.template get<std::string>());
  ck.meta.config.validate();

  const auto& vocab_list = manifest.at("vocab");
  require(vocab_list.is_array() && vocab_list.size() >= kNumSpecialTokens,
          "checkpoint: bad vocabulary");
  ck.meta.vocab.id_to_token.clear();
  ck.meta.vocab.token_to_id.clear();
  for (const auto& tok : vocab_list) ck.meta.vocab.add(tok.template get<std::string>());
  require(static_cast<size_t>(ck.meta.vocab.size()) == vocab_list.size(),
          "checkpoint: vocabulary has duplicate tokens");

  ck.meta.grouping_positive = manifest.at("grouping").at("positive").get<std::vector<int>>();
  ck.meta.grouping_negative = manifest.at("grouping").at("negative").get<std::vector<int>>();
  (void)ck.grouping();  // validates the partition

  struct Extent {
    uint64_t offset, bytes;
  };
  std::vector<Extent> extents;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").template get<std::string>();
    const std::string dtype = entry.at("dtype").template get<std::string>();
    require(dtype == dtype_name<S>(), "checkpoint: tensor \"" + name + "\" is " + dtype +
                                          ", this build reads " + dtype_name<S>());
    Shape sh{entry.at("shape").at(0).template get<int>(),
             entry.at("shape").at(1).template get<int>()};
    require(sh.rows > 0 && sh.cols > 0, "checkpoint: tensor \"" + name + "\" has bad shape");
    const uint64_t offset = entry.at("offset").template get<uint64_t>();
    const uint64_t bytes = entry.at("bytes").template get<uint64_t>();
    require(bytes == static_cast<uint64_t>(sh.numel()) * sizeof(S),
            "checkpoint: tensor \"" + name + "\" byte count disagrees with its shape");
    require(offset + bytes <= payload.size() && offset + bytes >= offset,
            "checkpoint: tensor \"" + name + "\" extends past the payload");
    require(ck.tensors.find(name) == ck.tensors.end(),
            "checkpoint: tensor \"" + name + "\" listed twice");
    extents.push_back({offset, bytes});
    std::vector<S> values(static_cast<size_t>(sh.numel()));
    std::memcpy(values.data(), payload.data() + offset, bytes);
    ck.tensor_order.push_back(name);
    ck.shapes.emplace(name, sh);
    ck.tensors.emplace(name, std::move(values));
  }
  std::sort(extents.begin(), extents.end(),
            [](const Extent& a, const Extent& b) { return a.offset < b.offset; });
  for (size_t i = 1; i < extents.size(); ++i)
    require(extents[i - 1].offset + extents[i - 1].bytes <= extents[i].offset,
            "checkpoint: overlapping tensor extents");
  return ck;
}

}  // namespace mime
