#pragma once

// Procedural captioned-pattern images with a closed caption grammar and a
// deterministic attribute classifier.

#include <array>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "narpq/image.hpp"
#include "narpq/manifest.hpp"
#include "narpq/numerics.hpp"

namespace narpq::synth {

enum class Color : std::uint8_t { Red, Green, Blue, Yellow };
enum class Pattern : std::uint8_t { Solid, Stripes, Checker, Dots };

inline constexpr std::size_t kColors = 4;
inline constexpr std::size_t kPatterns = 4;
inline constexpr std::array<std::string_view, kColors> kColorNames{"red", "green", "blue", "yellow"};
inline constexpr std::array<std::string_view, kPatterns> kPatternNames{"solid", "stripes", "checker", "dots"};

inline const std::array<std::array<Scalar, 3>, kColors>& palette() {
  static const std::array<std::array<Scalar, 3>, kColors> p{{
      {Scalar(0.85), Scalar(0.15), Scalar(0.15)},
      {Scalar(0.15), Scalar(0.70), Scalar(0.25)},
      {Scalar(0.15), Scalar(0.25), Scalar(0.85)},
      {Scalar(0.90), Scalar(0.85), Scalar(0.15)},
  }};
  return p;
}

// The accent colour is ignored for solid patterns, both when rendering and
// when comparing specs.
struct AttributeSpec {
  Color base = Color::Red;
  Pattern pattern = Pattern::Solid;
  Color accent = Color::Red;

  bool valid() const { return pattern == Pattern::Solid || accent != base; }

  bool operator==(const AttributeSpec& o) const {
    if (base != o.base || pattern != o.pattern) return false;
    return pattern == Pattern::Solid || accent == o.accent;
  }
};

struct Jitter {
  std::size_t dy = 0;
  std::size_t dx = 0;
};

struct ToySample {
  Image image;
  std::vector<std::string> caption;
  AttributeSpec spec;
  Jitter jitter;
};

// Every stored (base, pattern, accent) tuple the renderer accepts: solid with
// any accent, other patterns with accent != base. 16 + 36 = 52 tuples.
inline std::vector<AttributeSpec> enumerate_specs() {
  std::vector<AttributeSpec> out;
  for (std::size_t b = 0; b < kColors; ++b) {
    for (std::size_t p = 0; p < kPatterns; ++p) {
      for (std::size_t a = 0; a < kColors; ++a) {
        AttributeSpec s{static_cast<Color>(b), static_cast<Pattern>(p), static_cast<Color>(a)};
        if (s.valid()) out.push_back(s);
      }
    }
  }
  return out;
}

// True where the accent colour is drawn. Pattern period is 8 pixels.
inline bool accent_at(Pattern pattern, std::size_t r, std::size_t c, Jitter j) {
  const std::size_t y = r + j.dy, x = c + j.dx;
  switch (pattern) {
    case Pattern::Solid:
      return false;
    case Pattern::Stripes:
      return y % 8 < 3;
    case Pattern::Checker:
      return y % 4 < 3 && x % 4 < 3 && ((y / 4 + x / 4) % 2 == 0);
    case Pattern::Dots: {
      const std::size_t ly = y % 8, lx = x % 8;
      if (ly < 2 || ly > 5 || lx < 2 || lx > 5) return false;
      const bool edge_y = ly == 2 || ly == 5, edge_x = lx == 2 || lx == 5;
      return !(edge_y && edge_x);
    }
  }
  return false;
}

inline Image render(const AttributeSpec& spec, Jitter jitter = {}, std::size_t size = 32) {
  if (!spec.valid()) throw ArgumentError("render: accent must differ from base for patterned specs");
  Image img(size, size);
  const auto& pal = palette();
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const bool acc = accent_at(spec.pattern, r, c, jitter);
      img.set(r, c, pal[static_cast<std::size_t>(acc ? spec.accent : spec.base)]);
    }
  }
  return img;
}

inline const std::vector<std::string>& caption_vocabulary() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> w{"a", "garment", "with", "accents"};
    for (auto c : kColorNames) w.emplace_back(c);
    for (auto p : kPatternNames) w.emplace_back(p);
    return w;
  }();
  return words;
}

inline std::vector<std::string> caption(const AttributeSpec& spec) {
  std::vector<std::string> w{"a", std::string(kColorNames[static_cast<std::size_t>(spec.base)]),
                             std::string(kPatternNames[static_cast<std::size_t>(spec.pattern)]), "garment"};
  if (spec.pattern != Pattern::Solid) {
    w.insert(w.end(), {"with", std::string(kColorNames[static_cast<std::size_t>(spec.accent)]), "accents"});
  }
  return w;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) s += ' ';
    s += words[i];
  }
  return s;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

inline AttributeSpec parse_caption(const std::vector<std::string>& words) {
  auto color_of = [](const std::string& w) {
    for (std::size_t i = 0; i < kColors; ++i) {
      if (kColorNames[i] == w) return static_cast<Color>(i);
    }
    throw ArgumentError("caption: unknown colour '" + w + "'");
  };
  auto pattern_of = [](const std::string& w) {
    for (std::size_t i = 0; i < kPatterns; ++i) {
      if (kPatternNames[i] == w) return static_cast<Pattern>(i);
    }
    throw ArgumentError("caption: unknown pattern '" + w + "'");
  };
  if (words.size() < 4 || words[0] != "a" || words[3] != "garment") throw ArgumentError("caption: malformed");
  AttributeSpec s;
  s.base = color_of(words[1]);
  s.pattern = pattern_of(words[2]);
  s.accent = s.base;
  if (s.pattern == Pattern::Solid) {
    if (words.size() != 4) throw ArgumentError("caption: solid garments take no accent clause");
  } else {
    if (words.size() != 7 || words[4] != "with" || words[6] != "accents") throw ArgumentError("caption: malformed");
    s.accent = color_of(words[5]);
    if (!s.valid()) throw ArgumentError("caption: accent equals base colour");
  }
  return s;
}

inline AttributeSpec parse_caption(std::string_view text) { return parse_caption(split_words(text)); }

inline Color nearest_color(const Scalar* rgb) {
  const auto& pal = palette();
  std::size_t best = 0;
  double best_d = 1e30;
  for (std::size_t i = 0; i < kColors; ++i) {
    double d = 0.0;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double e = static_cast<double>(rgb[ch]) - pal[i][ch];
      d += e * e;
    }
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return static_cast<Color>(best);
}

// Best-guess attributes of an image. Each pixel is snapped to the nearest
// palette colour; the most frequent colour is the base and the runner-up the
// accent. Horizontal stripes show up as rows that are nearly one colour;
// checker and dots are told apart by the share of rows that contain accent.
inline AttributeSpec attribute_oracle(const Image& img) {
  const std::size_t H = img.height, W = img.width;
  std::vector<Color> label(H * W);
  std::array<std::size_t, kColors> counts{};
  for (std::size_t i = 0; i < H * W; ++i) {
    label[i] = nearest_color(img.pixels.data() + 3 * i);
    ++counts[static_cast<std::size_t>(label[i])];
  }
  std::array<std::size_t, kColors> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return counts[a] > counts[b]; });
  AttributeSpec s;
  s.base = static_cast<Color>(order[0]);
  s.accent = s.base;
  const double accent_share = static_cast<double>(counts[order[1]]) / static_cast<double>(H * W);
  if (accent_share < 0.06) {
    s.pattern = Pattern::Solid;
    return s;
  }
  s.accent = static_cast<Color>(order[1]);
  double purity = 0.0;
  std::size_t rows_with_accent = 0;
  for (std::size_t r = 0; r < H; ++r) {
    std::size_t acc = 0;
    for (std::size_t c = 0; c < W; ++c) acc += label[r * W + c] == s.accent;
    const double f = static_cast<double>(acc) / static_cast<double>(W);
    purity += std::max(f, 1.0 - f);
    if (f > 0.1) ++rows_with_accent;
  }
  purity /= static_cast<double>(H);
  const double row_share = static_cast<double>(rows_with_accent) / static_cast<double>(H);
  if (purity > 0.9) {
    s.pattern = Pattern::Stripes;
  } else if (row_share > 0.625) {
    s.pattern = Pattern::Checker;
  } else {
    s.pattern = Pattern::Dots;
  }
  return s;
}

struct DatasetOptions {
  bool jitter = true;
  bool exhaustive = false;  // cycle through enumerate_specs() instead of sampling
  std::size_t size = 32;
};

inline AttributeSpec sample_spec(Rng& rng) {
  AttributeSpec s;
  s.base = static_cast<Color>(rng.index(kColors));
  s.pattern = static_cast<Pattern>(rng.index(kPatterns));
  std::size_t a = rng.index(kColors - 1);
  if (a >= static_cast<std::size_t>(s.base)) ++a;
  s.accent = static_cast<Color>(a);
  return s;
}

inline std::vector<ToySample> generate_dataset(std::size_t n, Rng& rng, const DatasetOptions& opt = {}) {
  if (n < 1) throw ArgumentError("generate_dataset: n must be >= 1");
  const auto all = opt.exhaustive ? enumerate_specs() : std::vector<AttributeSpec>{};
  std::vector<ToySample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ToySample s;
    s.spec = opt.exhaustive ? all[i % all.size()] : sample_spec(rng);
    if (opt.jitter) {
      s.jitter.dy = rng.index(8);
      s.jitter.dx = rng.index(8);
    }
    s.image = render(s.spec, s.jitter, opt.size);
    s.caption = caption(s.spec);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string image_name(std::size_t i) {
  std::ostringstream ss;
  ss << "images/" << std::setw(6) << std::setfill('0') << i << ".ppm";
  return ss.str();
}

// Writes <dir>/images/NNNNNN.ppm and <dir>/manifest.tsv.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<ToySample>& samples,
                          const std::vector<std::string>& header_comments = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::vector<ManifestRecord> records;
  records.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto name = image_name(i);
    write_ppm(dir / name, samples[i].image, header_comments);
    records.push_back({name, join_words(samples[i].caption)});
  }
  write_manifest(dir / "manifest.tsv", records);
}

struct LoadedSample {
  Image image;
  std::vector<std::string> caption;
  AttributeSpec spec;
};

inline std::vector<LoadedSample> load_dataset(const std::filesystem::path& manifest_path) {
  const auto base = manifest_path.parent_path();
  std::vector<LoadedSample> out;
  for (const auto& rec : read_manifest(manifest_path)) {
    LoadedSample s;
    s.image = read_ppm(base / rec.image_path);
    s.caption = split_words(rec.caption);
    s.spec = parse_caption(s.caption);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw ArgumentError("dataset is empty: " + manifest_path.string());
  return out;
}

}  // namespace narpq::synth
