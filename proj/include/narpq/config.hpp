#pragma once

// Run configuration for the command-line tool: a sectioned key=value file.
//
//   [data]
//   samples=5000
//   ...
//
// Every key is optional; unknown sections and keys are rejected.

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "narpq/image_codec.hpp"
#include "narpq/io.hpp"
#include "narpq/kv.hpp"
#include "narpq/nar_predictor.hpp"
#include "narpq/smart_decoder.hpp"
#include "narpq/synth_data.hpp"

namespace narpq {

struct DataConfig {
  std::size_t samples = 5000;
  std::size_t holdout = 500;  // trailing samples kept out of training
  bool jitter = true;
};

struct EvalConfig {
  std::size_t generations = 200;
  std::size_t quantizer_vectors = 10000;
  std::size_t quantizer_dim = 32;
  std::size_t quantizer_components = 8;
  std::size_t pq_groups = 4;
  std::size_t rq_depth = 2;
  std::size_t quantizer_K = 64;
  std::size_t kmeans_iters = 25;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  CodecConfig codec;
  TrainCodecConfig codec_train;
  PredictorConfig predictor;
  TrainNarConfig nar_train;
  MaskSchedule schedule;
  double temperature = 1.0;
  EvalConfig eval;

  RunConfig() { derive(); }

  // Predictor sizes that must agree with the codec and the caption grammar.
  void derive() {
    predictor.M = codec.groups;
    predictor.K = codec.K;
    predictor.grid_h = codec.grid_h();
    predictor.grid_w = codec.grid_w();
    predictor.text_vocab = synth::caption_vocabulary().size();
  }

  void validate() const {
    codec.validate();
    predictor.validate();
    schedule.validate();
    if (data.samples < 2 || data.holdout >= data.samples) throw ArgumentError("data: need 0 <= holdout < samples, samples >= 2");
    if (codec.image_h != 32 || codec.image_w != 32) throw ArgumentError("codec: the toy dataset is 32x32");
    if (!(temperature > 0.0)) throw ArgumentError("decode: temperature must be > 0");
    if (codec_train.epochs < 1 || codec_train.batch < 1) throw ArgumentError("codec_train: epochs and batch must be >= 1");
    if (nar_train.steps < 1 || nar_train.batch < 1) throw ArgumentError("nar_train: steps and batch must be >= 1");
    if (eval.generations < 1) throw ArgumentError("eval: generations must be >= 1");
  }

  std::string to_text() const;
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path) { return parse(io::read_text(path)); }
};

namespace config_detail {

struct Field {
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

using Section = std::vector<std::pair<std::string, Field>>;

inline Field size_field(std::size_t& x, const std::string& key) {
  return {[&x] { return std::to_string(x); }, [&x, key](const std::string& v) { x = to_size(key, v); }};
}

inline Field u64_field(std::uint64_t& x, const std::string& key) {
  return {[&x] { return std::to_string(x); }, [&x, key](const std::string& v) { x = to_size(key, v); }};
}

inline Field double_field(double& x, const std::string& key) {
  return {[&x] { return from_double(x); }, [&x, key](const std::string& v) { x = to_double(key, v); }};
}

inline Field bool_field(bool& x, const std::string& key) {
  return {[&x] { return std::string(x ? "1" : "0"); },
          [&x, key](const std::string& v) {
            if (v != "0" && v != "1") throw ArgumentError("'" + key + "' expects 0 or 1, got '" + v + "'");
            x = v == "1";
          }};
}

#define NARPQ_SIZE(obj, name) {#name, size_field(obj.name, #name)}
#define NARPQ_DOUBLE(obj, name) {#name, double_field(obj.name, #name)}

// Sections other than [codec] and [predictor], which use their own key sets.
inline std::vector<std::pair<std::string, Section>> plain_sections(RunConfig& c) {
  return {
      {"run", {{"seed", u64_field(c.seed, "seed")}, NARPQ_DOUBLE(c, temperature)}},
      {"data", {NARPQ_SIZE(c.data, samples), NARPQ_SIZE(c.data, holdout), {"jitter", bool_field(c.data.jitter, "jitter")}}},
      {"codec_train",
       {NARPQ_SIZE(c.codec_train, epochs), NARPQ_SIZE(c.codec_train, batch), NARPQ_DOUBLE(c.codec_train, lr),
        NARPQ_DOUBLE(c.codec_train, momentum), NARPQ_SIZE(c.codec_train, warmup_epochs),
        NARPQ_SIZE(c.codec_train, kmeans_iters),
        {"reseed_dead_codes", bool_field(c.codec_train.reseed_dead_codes, "reseed_dead_codes")},
        NARPQ_SIZE(c.codec_train, max_steps)}},
      {"nar_train",
       {NARPQ_SIZE(c.nar_train, steps), NARPQ_SIZE(c.nar_train, batch), NARPQ_DOUBLE(c.nar_train, lr),
        NARPQ_DOUBLE(c.nar_train, momentum), NARPQ_DOUBLE(c.nar_train, clip), NARPQ_SIZE(c.nar_train, log_every)}},
      {"schedule", {NARPQ_DOUBLE(c.schedule, alpha), NARPQ_DOUBLE(c.schedule, beta), NARPQ_SIZE(c.schedule, T)}},
      {"eval",
       {NARPQ_SIZE(c.eval, generations), NARPQ_SIZE(c.eval, quantizer_vectors), NARPQ_SIZE(c.eval, quantizer_dim),
        NARPQ_SIZE(c.eval, quantizer_components), NARPQ_SIZE(c.eval, pq_groups), NARPQ_SIZE(c.eval, rq_depth),
        NARPQ_SIZE(c.eval, quantizer_K), NARPQ_SIZE(c.eval, kmeans_iters)}},
  };
}

#undef NARPQ_SIZE
#undef NARPQ_DOUBLE

inline const std::vector<std::string>& derived_predictor_keys() {
  static const std::vector<std::string> keys{"M", "K", "grid_h", "grid_w", "text_vocab"};
  return keys;
}

}  // namespace config_detail

inline std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  std::string out;
  auto emit = [&](const std::string& name, const KeyValues& kv) {
    out += "[" + name + "]\n";
    out += format_kv(kv);
  };
  for (auto& [name, fields] : config_detail::plain_sections(copy)) {
    KeyValues kv;
    for (auto& [k, f] : fields) kv[k] = f.get();
    emit(name, kv);
  }
  emit("codec", codec.to_kv());
  auto pkv = predictor.to_kv();
  for (const auto& k : config_detail::derived_predictor_keys()) pkv.erase(k);
  emit("predictor", pkv);
  return out;
}

inline RunConfig RunConfig::parse(const std::string& text) {
  std::map<std::string, std::string> sections;
  std::string current;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ArgumentError("config line " + std::to_string(lineno) + ": malformed section header");
      current = trim(std::string_view(t).substr(1, t.size() - 2));
      sections[current];
      continue;
    }
    if (current.empty()) throw ArgumentError("config line " + std::to_string(lineno) + ": key outside a section");
    sections[current] += t + "\n";
  }

  RunConfig c;
  auto plain = config_detail::plain_sections(c);
  for (const auto& [name, body] : sections) {
    const auto kv = parse_kv(body);
    if (name == "codec") {
      c.codec = CodecConfig::from_kv(kv);
      continue;
    }
    if (name == "predictor") continue;  // after [codec], which it depends on
    auto it = std::find_if(plain.begin(), plain.end(), [&](const auto& s) { return s.first == name; });
    if (it == plain.end()) throw ArgumentError("config: unknown section [" + name + "]");
    for (const auto& [k, v] : kv) {
      auto f = std::find_if(it->second.begin(), it->second.end(), [&](const auto& p) { return p.first == k; });
      if (f == it->second.end()) throw ArgumentError("config: unknown key '" + k + "' in [" + name + "]");
      f->second.set(v);
    }
  }
  c.derive();
  if (auto it = sections.find("predictor"); it != sections.end()) {
    auto kv = parse_kv(it->second);
    for (const auto& k : config_detail::derived_predictor_keys()) {
      if (kv.count(k)) throw ArgumentError("config: [predictor] " + k + " is derived from [codec]");
    }
    auto merged = c.predictor.to_kv();
    for (const auto& [k, v] : kv) {
      if (!merged.count(k)) throw ArgumentError("config: unknown key '" + k + "' in [predictor]");
      merged[k] = v;
    }
    c.predictor = PredictorConfig::from_kv(merged);
  }
  c.validate();
  return c;
}

}  // namespace narpq
