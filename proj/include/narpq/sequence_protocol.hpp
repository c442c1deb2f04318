#pragma once

// Multi-modal token sequence: visual conditions separated by SEP, then EOV,
// caption words, EOT, and the target grid. Also owns the training-time
// sampling of masking strategies and condition combinations.

#include <algorithm>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "narpq/numerics.hpp"
#include "narpq/token_grid.hpp"

namespace narpq {

inline constexpr std::size_t kMaxGroups = 8;

// Unified id space:
//   [0, K)               visual sub-token (per group)
//   K                    visual MASK (shared id, per-group embedding)
//   K+1 .. K+W           caption words
//   K+W+1                text MASK
//   then EOV, EOT, SEP, PAD
struct Vocabulary {
  std::size_t K = 0;
  std::size_t M = 0;
  std::vector<std::string> words;

  Vocabulary() = default;
  Vocabulary(std::size_t K_, std::size_t M_, std::vector<std::string> words_) : K(K_), M(M_), words(std::move(words_)) {
    if (K < 1 || M < 1 || M > kMaxGroups) throw ArgumentError("vocabulary: need K >= 1 and 1 <= M <= 8");
    if (words.empty()) throw ArgumentError("vocabulary: empty word list");
  }

  std::uint32_t visual_mask() const { return static_cast<std::uint32_t>(K); }
  std::uint32_t text_base() const { return static_cast<std::uint32_t>(K + 1); }
  std::uint32_t text_id(std::size_t word) const {
    if (word >= words.size()) throw IndexError("vocabulary: word index out of range");
    return static_cast<std::uint32_t>(text_base() + word);
  }
  std::uint32_t text_mask() const { return static_cast<std::uint32_t>(text_base() + words.size()); }
  std::uint32_t eov() const { return text_mask() + 1; }
  std::uint32_t eot() const { return text_mask() + 2; }
  std::uint32_t sep() const { return text_mask() + 3; }
  std::uint32_t pad() const { return text_mask() + 4; }
  std::size_t size() const { return pad() + 1; }

  bool is_special(std::uint32_t id) const { return id >= eov() && id <= pad(); }

  std::size_t word_index(const std::string& w) const {
    const auto it = std::find(words.begin(), words.end(), w);
    if (it == words.end()) throw ArgumentError("unknown word '" + w + "'");
    return static_cast<std::size_t>(it - words.begin());
  }

  std::vector<std::uint32_t> tokenize(const std::vector<std::string>& text) const {
    std::vector<std::uint32_t> out;
    out.reserve(text.size());
    for (const auto& w : text) out.push_back(static_cast<std::uint32_t>(word_index(w)));
    return out;
  }
};

enum class Segment : std::uint8_t { Visual, Text, Target };
enum class SlotKind : std::uint8_t { Visual, Text, Special };

struct Slot {
  SlotKind kind = SlotKind::Special;
  Segment segment = Segment::Visual;
  std::array<std::uint32_t, kMaxGroups> ids{};  // M used for visual slots, ids[0] otherwise
  std::uint16_t row = 0;                        // grid slots
  std::uint16_t col = 0;
  std::uint16_t pos = 0;        // text slots
  std::uint16_t condition = 0;  // which visual condition a VC slot belongs to
  bool maskable = false;

  bool operator==(const Slot&) const = default;
};

struct ConditionSet {
  std::vector<TokenGrid> visuals;
  std::vector<std::uint32_t> text;  // word indices
  std::optional<std::vector<std::uint8_t>> preservation;  // 1 = known target cell

  bool operator==(const ConditionSet&) const = default;
};

struct ProtocolConfig {
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t max_visuals = 2;
  std::size_t max_text = 16;
  std::size_t crop_min = 2;
  std::size_t crop_max = 4;
};

struct MultiModalSequence {
  std::vector<Slot> slots;
  std::size_t target_begin = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t M = 0;

  std::size_t size() const { return slots.size(); }
  std::size_t target_count() const { return grid_h * grid_w; }
  Slot& target(std::size_t pos) { return slots[target_begin + pos]; }
  const Slot& target(std::size_t pos) const { return slots[target_begin + pos]; }

  bool target_masked(std::size_t pos, const Vocabulary& v) const { return target(pos).ids[0] == v.visual_mask(); }

  void set_target(std::size_t pos, std::span<const std::uint32_t> ids) {
    std::copy(ids.begin(), ids.end(), target(pos).ids.begin());
  }

  void mask_target(std::size_t pos, const Vocabulary& v) {
    auto& s = target(pos);
    std::fill(s.ids.begin(), s.ids.begin() + static_cast<std::ptrdiff_t>(M), v.visual_mask());
  }

  TokenGrid target_grid() const {
    TokenGrid g(grid_h, grid_w, M);
    for (std::size_t p = 0; p < target_count(); ++p) {
      std::copy_n(target(p).ids.begin(), M, g.cell(p).begin());
    }
    return g;
  }
};

namespace protocol_detail {

inline Slot special(std::uint32_t id, Segment seg) {
  Slot s;
  s.kind = SlotKind::Special;
  s.segment = seg;
  s.ids[0] = id;
  return s;
}

inline void check_conditions(const Vocabulary& v, const ConditionSet& c, const ProtocolConfig& cfg) {
  if (c.visuals.size() > cfg.max_visuals) throw ArgumentError("too many visual conditions");
  for (const auto& g : c.visuals) {
    if (g.M != v.M) throw ArgumentError("visual condition has wrong group count");
    if (g.h == 0 || g.w == 0 || g.h > cfg.grid_h || g.w > cfg.grid_w) {
      throw ArgumentError("visual condition larger than the target grid");
    }
    if (!g.all_below(static_cast<std::uint32_t>(v.K))) throw IndexError("visual condition token out of range");
  }
  if (c.text.size() > cfg.max_text) {
    throw TruncationError("caption has " + std::to_string(c.text.size()) + " words, limit is " +
                          std::to_string(cfg.max_text));
  }
  for (auto w : c.text) {
    if (w >= v.words.size()) throw IndexError("caption word id out of range");
  }
  if (c.preservation && c.preservation->size() != cfg.grid_h * cfg.grid_w) {
    throw ArgumentError("preservation mask length does not match target grid");
  }
}

inline MultiModalSequence condition_prefix(const Vocabulary& v, const ConditionSet& c, const ProtocolConfig& cfg) {
  check_conditions(v, c, cfg);
  MultiModalSequence seq;
  seq.grid_h = cfg.grid_h;
  seq.grid_w = cfg.grid_w;
  seq.M = v.M;
  for (std::size_t ci = 0; ci < c.visuals.size(); ++ci) {
    if (ci > 0) seq.slots.push_back(special(v.sep(), Segment::Visual));
    const auto& g = c.visuals[ci];
    for (std::size_t r = 0; r < g.h; ++r) {
      for (std::size_t col = 0; col < g.w; ++col) {
        Slot s;
        s.kind = SlotKind::Visual;
        s.segment = Segment::Visual;
        std::copy_n(g.cell(r, col).begin(), v.M, s.ids.begin());
        s.row = static_cast<std::uint16_t>(r);
        s.col = static_cast<std::uint16_t>(col);
        s.condition = static_cast<std::uint16_t>(ci);
        seq.slots.push_back(s);
      }
    }
  }
  seq.slots.push_back(special(v.eov(), Segment::Visual));
  for (std::size_t i = 0; i < c.text.size(); ++i) {
    Slot s;
    s.kind = SlotKind::Text;
    s.segment = Segment::Text;
    s.ids[0] = v.text_id(c.text[i]);
    s.pos = static_cast<std::uint16_t>(i);
    seq.slots.push_back(s);
  }
  seq.slots.push_back(special(v.eot(), Segment::Text));
  seq.target_begin = seq.slots.size();
  for (std::size_t r = 0; r < cfg.grid_h; ++r) {
    for (std::size_t col = 0; col < cfg.grid_w; ++col) {
      Slot s;
      s.kind = SlotKind::Visual;
      s.segment = Segment::Target;
      s.row = static_cast<std::uint16_t>(r);
      s.col = static_cast<std::uint16_t>(col);
      const std::size_t p = r * cfg.grid_w + col;
      s.maskable = !(c.preservation && (*c.preservation)[p]);
      seq.slots.push_back(s);
    }
  }
  return seq;
}

}  // namespace protocol_detail

// Training layout: every target slot carries its true token.
inline MultiModalSequence assemble(const Vocabulary& v, const ConditionSet& c, const TokenGrid& target,
                                   const ProtocolConfig& cfg) {
  if (target.h != cfg.grid_h || target.w != cfg.grid_w || target.M != v.M) {
    throw ArgumentError("assemble: target grid does not match configuration");
  }
  if (!target.all_below(static_cast<std::uint32_t>(v.K))) throw IndexError("assemble: target token out of range");
  auto seq = protocol_detail::condition_prefix(v, c, cfg);
  for (std::size_t p = 0; p < seq.target_count(); ++p) seq.set_target(p, target.cell(p));
  return seq;
}

// Generation layout: preserved cells carry `known`, everything else is MASK.
inline MultiModalSequence assemble_masked(const Vocabulary& v, const ConditionSet& c, const ProtocolConfig& cfg,
                                          const TokenGrid* known = nullptr) {
  if (c.preservation && !known) throw ArgumentError("assemble: preservation mask given without a source grid");
  if (known && (known->h != cfg.grid_h || known->w != cfg.grid_w || known->M != v.M)) {
    throw ArgumentError("assemble: source grid does not match configuration");
  }
  auto seq = protocol_detail::condition_prefix(v, c, cfg);
  for (std::size_t p = 0; p < seq.target_count(); ++p) {
    if (seq.target(p).maskable) {
      seq.mask_target(p, v);
    } else {
      const auto cell = known->cell(p);
      for (auto id : cell) {
        if (id >= v.K) throw IndexError("assemble: preserved token out of range");
      }
      seq.set_target(p, cell);
    }
  }
  return seq;
}

struct Disassembled {
  ConditionSet conditions;
  TokenGrid target;  // MASK ids at masked cells
  std::vector<std::size_t> masked;
};

// Inverse of assemble/assemble_masked/apply_mask.
inline Disassembled disassemble(const Vocabulary& v, const MultiModalSequence& seq) {
  Disassembled d;
  std::size_t i = 0;
  while (i < seq.target_begin && seq.slots[i].ids[0] != v.eov()) {
    if (seq.slots[i].kind == SlotKind::Special) {  // SEP
      ++i;
      continue;
    }
    const std::uint16_t ci = seq.slots[i].condition;
    std::size_t end = i, h = 0, w = 0;
    while (end < seq.target_begin && seq.slots[end].kind == SlotKind::Visual && seq.slots[end].condition == ci) {
      h = std::max<std::size_t>(h, seq.slots[end].row + 1u);
      w = std::max<std::size_t>(w, seq.slots[end].col + 1u);
      ++end;
    }
    TokenGrid g(h, w, seq.M);
    for (std::size_t k = i; k < end; ++k) {
      std::copy_n(seq.slots[k].ids.begin(), seq.M, g.cell(seq.slots[k].row, seq.slots[k].col).begin());
    }
    d.conditions.visuals.push_back(std::move(g));
    i = end;
  }
  for (++i; i < seq.target_begin && seq.slots[i].ids[0] != v.eot(); ++i) {
    d.conditions.text.push_back(seq.slots[i].ids[0] - v.text_base());
  }
  d.target = seq.target_grid();
  std::vector<std::uint8_t> pres(seq.target_count());
  bool any = false;
  for (std::size_t p = 0; p < seq.target_count(); ++p) {
    pres[p] = !seq.target(p).maskable;
    any |= pres[p] != 0;
    if (seq.target_masked(p, v)) d.masked.push_back(p);
  }
  if (any) d.conditions.preservation = std::move(pres);
  return d;
}

struct Box {
  std::size_t x = 0;  // column of the top-left cell
  std::size_t y = 0;  // row of the top-left cell
  std::size_t w = 0;
  std::size_t h = 0;

  bool contains(std::size_t r, std::size_t c) const { return r >= y && r < y + h && c >= x && c < x + w; }
  bool operator==(const Box&) const = default;
};

struct MaskStrategy {
  enum class Kind : std::uint8_t { Random, All, InsideBoxes, OutsideBoxes };
  Kind kind = Kind::All;
  std::size_t count = 0;  // Random only
  std::vector<Box> boxes;

  bool operator==(const MaskStrategy&) const = default;

  void validate(std::size_t gh, std::size_t gw) const {
    if (kind == Kind::Random && (count < 1 || count > gh * gw)) throw ArgumentError("random mask count out of range");
    for (const auto& b : boxes) {
      if (b.w == 0 || b.h == 0 || b.x + b.w > gw || b.y + b.h > gh) throw ArgumentError("mask box outside the grid");
    }
  }
};

inline constexpr std::array<double, 4> kStrategyProbabilities{0.70, 0.10, 0.10, 0.10};

enum class ConditionCombo : std::uint8_t { VisualText, Visual, Text, None };
inline constexpr std::array<double, 4> kComboProbabilities{0.20, 0.55, 0.20, 0.05};

inline MaskStrategy sample_mask_strategy(Rng& rng, std::size_t gh, std::size_t gw) {
  MaskStrategy s;
  s.kind = static_cast<MaskStrategy::Kind>(rng.categorical(std::span<const double>(kStrategyProbabilities)));
  if (s.kind == MaskStrategy::Kind::Random) {
    s.count = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(gh * gw)));
  } else if (s.kind != MaskStrategy::Kind::All) {
    const auto n = rng.uniform_int(1, 3);
    for (std::int64_t i = 0; i < n; ++i) {
      Box b;
      b.h = static_cast<std::size_t>(rng.uniform_int(2, std::max<std::int64_t>(2, static_cast<std::int64_t>(gh) - 1)));
      b.w = static_cast<std::size_t>(rng.uniform_int(2, std::max<std::int64_t>(2, static_cast<std::int64_t>(gw) - 1)));
      b.h = std::min(b.h, gh);
      b.w = std::min(b.w, gw);
      b.y = rng.index(gh - b.h + 1);
      b.x = rng.index(gw - b.w + 1);
      s.boxes.push_back(b);
    }
  }
  return s;
}

inline ConditionCombo sample_condition_combo(Rng& rng) {
  return static_cast<ConditionCombo>(rng.categorical(std::span<const double>(kComboProbabilities)));
}

inline bool uses_visual(ConditionCombo c) { return c == ConditionCombo::VisualText || c == ConditionCombo::Visual; }
inline bool uses_text(ConditionCombo c) { return c == ConditionCombo::VisualText || c == ConditionCombo::Text; }

struct Crop {
  Box box;
  TokenGrid tokens;
};

// One or two axis-aligned sub-grids of the target.
inline std::vector<Crop> sample_visual_crops(Rng& rng, const TokenGrid& target, const ProtocolConfig& cfg) {
  const auto n = rng.uniform_int(1, static_cast<std::int64_t>(std::max<std::size_t>(1, cfg.max_visuals)));
  std::vector<Crop> out;
  for (std::int64_t i = 0; i < n; ++i) {
    Box b;
    const auto max_h = static_cast<std::int64_t>(std::min(cfg.crop_max, target.h));
    const auto max_w = static_cast<std::int64_t>(std::min(cfg.crop_max, target.w));
    b.h = static_cast<std::size_t>(rng.uniform_int(std::min<std::int64_t>(static_cast<std::int64_t>(cfg.crop_min), max_h), max_h));
    b.w = static_cast<std::size_t>(rng.uniform_int(std::min<std::int64_t>(static_cast<std::int64_t>(cfg.crop_min), max_w), max_w));
    b.y = rng.index(target.h - b.h + 1);
    b.x = rng.index(target.w - b.w + 1);
    out.push_back({b, target.crop(b.y, b.x, b.h, b.w)});
  }
  return out;
}

// Positions selected by a box strategy (or everything for All).
inline std::vector<std::uint8_t> strategy_cover(const MaskStrategy& s, std::size_t gh, std::size_t gw) {
  std::vector<std::uint8_t> cover(gh * gw, 0);
  for (std::size_t r = 0; r < gh; ++r) {
    for (std::size_t c = 0; c < gw; ++c) {
      bool inside = false;
      for (const auto& b : s.boxes) inside |= b.contains(r, c);
      switch (s.kind) {
        case MaskStrategy::Kind::All:
          cover[r * gw + c] = 1;
          break;
        case MaskStrategy::Kind::InsideBoxes:
          cover[r * gw + c] = inside;
          break;
        case MaskStrategy::Kind::OutsideBoxes:
          cover[r * gw + c] = !inside;
          break;
        case MaskStrategy::Kind::Random:
          break;
      }
    }
  }
  return cover;
}

struct MaskOutcome {
  MultiModalSequence sequence;
  std::vector<std::size_t> masked;
  std::vector<std::size_t> unmasked;
  MaskStrategy strategy;  // the strategy that produced a non-empty mask
  std::size_t redraws = 0;
};

// Masks target cells chosen by `strategy`, never touching preserved cells.
// A strategy that selects nothing is replaced by a freshly sampled one.
inline MaskOutcome apply_mask(const Vocabulary& v, const MultiModalSequence& seq, const MaskStrategy& strategy, Rng& rng) {
  const std::size_t gh = seq.grid_h, gw = seq.grid_w, n = seq.target_count();
  strategy.validate(gh, gw);
  std::vector<std::size_t> maskable;
  for (std::size_t p = 0; p < n; ++p) {
    if (seq.target(p).maskable) maskable.push_back(p);
  }
  if (maskable.empty()) throw ArgumentError("apply_mask: every target cell is preserved");

  MaskOutcome out;
  out.strategy = strategy;
  std::vector<std::uint8_t> chosen(n, 0);
  for (;;) {
    std::fill(chosen.begin(), chosen.end(), 0);
    std::size_t count = 0;
    if (out.strategy.kind == MaskStrategy::Kind::Random) {
      std::vector<std::size_t> pool = maskable;
      const std::size_t k = std::min(out.strategy.count, pool.size());
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + rng.index(pool.size() - i);
        std::swap(pool[i], pool[j]);
        chosen[pool[i]] = 1;
      }
      count = k;
    } else {
      const auto cover = strategy_cover(out.strategy, gh, gw);
      for (auto p : maskable) {
        chosen[p] = cover[p];
        count += cover[p];
      }
    }
    if (count > 0) break;
    ++out.redraws;
    out.strategy = sample_mask_strategy(rng, gh, gw);
  }
  out.sequence = seq;
  for (std::size_t p = 0; p < n; ++p) {
    if (chosen[p]) {
      out.sequence.mask_target(p, v);
      out.masked.push_back(p);
    } else {
      out.unmasked.push_back(p);
    }
  }
  return out;
}

struct TrainingExample {
  MultiModalSequence sequence;  // masked
  TokenGrid truth;
  std::vector<std::size_t> masked;
  ConditionCombo combo = ConditionCombo::None;
  MaskStrategy strategy;
};

// Draws a condition combination, crops, and a masking strategy for one target.
inline TrainingExample make_training_example(const Vocabulary& v, const TokenGrid& target,
                                             const std::vector<std::uint32_t>& caption, const ProtocolConfig& cfg,
                                             Rng& rng) {
  TrainingExample ex;
  ex.truth = target;
  ex.combo = sample_condition_combo(rng);
  ConditionSet c;
  if (uses_visual(ex.combo)) {
    for (auto& crop : sample_visual_crops(rng, target, cfg)) c.visuals.push_back(std::move(crop.tokens));
  }
  if (uses_text(ex.combo)) c.text = caption;
  const auto base = assemble(v, c, target, cfg);
  auto m = apply_mask(v, base, sample_mask_strategy(rng, cfg.grid_h, cfg.grid_w), rng);
  ex.sequence = std::move(m.sequence);
  ex.masked = std::move(m.masked);
  ex.strategy = std::move(m.strategy);
  return ex;
}

}  // namespace narpq
