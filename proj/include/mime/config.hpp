#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <string>

#include "mime/tensor.hpp"

namespace mime {

// Flat key=value model/training configuration. Field names double as the
// config-file keys, so everything here is round-trippable through
// load()/save() and the checkpoint manifest.
struct ModelConfig {
  int d_h = 300;            // model width (embeddings share it)
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 2;
  int ffn_dim = 0;          // 0 -> 4 * d_h
  double dropout = 0.1;

  double alpha = 1.0;       // classifier loss weight
  double beta = 1.0;        // ELBO (KL) weight
  double gamma = 1.0;       // generation loss weight

  double lr = 1e-4;
  int batch_size = 16;
  int patience = 2;
  int max_epochs = 50;
  int beam = 5;

  int max_ctx_len = 128;    // flattened context token budget (excluding CTX)
  int max_resp_len = 30;

  uint64_t seed = 7;
  int min_freq = 1;

  bool mimicry = true;
  bool grouping = true;
  bool deterministic_inference = false;   // r = 0 instead of sampled noise
  bool explicit_reconstruction = false;   // add squared-error term to the ELBO
  bool clip_gradients = false;            // global-norm clip at 1.0

  int resolved_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 4 * d_h; }

  void validate() const {
    require(d_h > 0, "config: d_h must be positive");
    require(heads > 0 && d_h % heads == 0,
            "config: heads (" + std::to_string(heads) + ") must divide d_h (" +
                std::to_string(d_h) + ")");
    require(enc_layers > 0 && dec_layers > 0, "config: layer counts must be positive");
    require(alpha >= 0 && beta >= 0 && gamma >= 0, "config: loss weights must be >= 0");
    require(patience >= 1, "config: patience must be >= 1");
    require(batch_size >= 1, "config: batch_size must be >= 1");
    require(max_epochs >= 1, "config: max_epochs must be >= 1");
    require(beam >= 1, "config: beam must be >= 1");
    require(max_ctx_len >= 1 && max_resp_len >= 1, "config: max lengths must be >= 1");
    require(dropout >= 0.0 && dropout < 1.0, "config: dropout must be in [0, 1)");
    require(min_freq >= 1, "config: min_freq must be >= 1");
  }

  std::map<std::string, std::string> to_map() const {
    std::map<std::string, std::string> m;
    // shortest round-trip formatting, so serialize -> parse -> serialize is
    // a fixed point (checkpoint byte-identity depends on this)
    auto put = [&m](const std::string& k, auto v) {
      char buf[64];
      auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      require(ec == std::errc(), "config: cannot format value for " + k);
      m[k] = std::string(buf, end);
    };
    put("d_h", d_h);
    put("enc_layers", enc_layers);
    put("dec_layers", dec_layers);
    put("heads", heads);
    put("ffn_dim", ffn_dim);
    put("dropout", dropout);
    put("alpha", alpha);
    put("beta", beta);
    put("gamma", gamma);
    put("lr", lr);
    put("batch_size", batch_size);
    put("patience", patience);
    put("max_epochs", max_epochs);
    put("beam", beam);
    put("max_ctx_len", max_ctx_len);
    put("max_resp_len", max_resp_len);
    put("seed", seed);
    put("min_freq", min_freq);
    put("mimicry", mimicry ? 1 : 0);
    put("grouping", grouping ? 1 : 0);
    put("deterministic_inference", deterministic_inference ? 1 : 0);
    put("explicit_reconstruction", explicit_reconstruction ? 1 : 0);
    put("clip_gradients", clip_gradients ? 1 : 0);
    return m;
  }

  void set(const std::string& key, const std::string& value) {
    auto as_int = [&] {
      size_t pos = 0;
      const int v = std::stoi(value, &pos);
      require(pos == value.size(), "config: bad integer for " + key + ": \"" + value + "\"");
      return v;
    };
    auto as_u64 = [&] {
      size_t pos = 0;
      const uint64_t v = std::stoull(value, &pos);
      require(pos == value.size(), "config: bad integer for " + key + ": \"" + value + "\"");
      return v;
    };
    auto as_double = [&] {
      size_t pos = 0;
      const double v = std::stod(value, &pos);
      require(pos == value.size(), "config: bad number for " + key + ": \"" + value + "\"");
      return v;
    };
    auto as_bool = [&] {
      if (value == "1" || value == "true") return true;
      if (value == "0" || value == "false") return false;
      fail("config: bad boolean for " + key + ": \"" + value + "\"");
    };
    if (key == "d_h") d_h = as_int();
    else if (key == "enc_layers") enc_layers = as_int();
    else if (key == "dec_layers") dec_layers = as_int();
    else if (key == "heads") heads = as_int();
    else if (key == "ffn_dim") ffn_dim = as_int();
    else if (key == "dropout") dropout = as_double();
    else if (key == "alpha") alpha = as_double();
    else if (key == "beta") beta = as_double();
    else if (key == "gamma") gamma = as_double();
    else if (key == "lr") lr = as_double();
    else if (key == "batch_size") batch_size = as_int();
    else if (key == "patience") patience = as_int();
    else if (key == "max_epochs") max_epochs = as_int();
    else if (key == "beam") beam = as_int();
    else if (key == "max_ctx_len") max_ctx_len = as_int();
    else if (key == "max_resp_len") max_resp_len = as_int();
    else if (key == "seed") seed = as_u64();
    else if (key == "min_freq") min_freq = as_int();
    else if (key == "mimicry") mimicry = as_bool();
    else if (key == "grouping") grouping = as_bool();
    else if (key == "deterministic_inference") deterministic_inference = as_bool();
    else if (key == "explicit_reconstruction") explicit_reconstruction = as_bool();
    else if (key == "clip_gradients") clip_gradients = as_bool();
    else fail("config: unknown key \"" + key + "\"");
  }

  // key = value, one per line; '#' comments and blank lines allowed
  static ModelConfig load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open " + path);
    ModelConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const size_t eq = line.find('=');
      std::string trimmed = line;
      trimmed.erase(0, trimmed.find_first_not_of(" \t"));
      if (trimmed.empty()) continue;
      require(eq != std::string::npos,
              "config: " + path + ":" + std::to_string(lineno) + ": expected key = value");
      auto trim = [](std::string s) {
        const size_t a = s.find_first_not_of(" \t");
        const size_t b = s.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), "config: cannot write " + path);
    for (const auto& [k, v] : to_map()) out << k << " = " << v << "\n";
  }
};

}  // namespace mime
