#pragma once

// Iterative mask-and-repredict decoding (SMART) plus a one-slot-per-call
// greedy baseline.

#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "narpq/image.hpp"
#include "narpq/image_codec.hpp"
#include "narpq/kv.hpp"
#include "narpq/nar_predictor.hpp"
#include "narpq/sequence_protocol.hpp"

namespace narpq {

struct MaskSchedule {
  double alpha = 0.8;  // initial mask ratio
  double beta = 0.2;   // minimum mask ratio
  std::size_t T = 10;

  void validate() const {
    if (!(beta >= 0.0 && beta <= alpha && alpha <= 1.0)) throw ArgumentError("schedule: need 0 <= beta <= alpha <= 1");
    if (T < 1) throw ArgumentError("schedule: T must be >= 1");
  }
};

// Number of slots to re-mask at iteration t in [1, T] out of N free slots.
// With T = 1 the ratio is alpha.
inline std::size_t schedule_n(const MaskSchedule& s, std::size_t N, std::size_t t) {
  s.validate();
  if (t < 1 || t > s.T) throw ArgumentError("schedule_n: t must be in [1, T]");
  const double ratio = s.T == 1 ? 1.0 : static_cast<double>(s.T - t) / static_cast<double>(s.T - 1);
  const double frac = s.beta + ratio * (s.alpha - s.beta);
  // The small guard keeps exact products such as 10 * 0.2 from flooring to 1.
  const auto n = static_cast<std::size_t>(std::floor(static_cast<double>(N) * frac + 1e-9));
  return std::min(n, N);
}

struct DecodeSnapshot {
  std::size_t iteration = 0;
  std::size_t n = 0;                  // slots predicted at this iteration
  std::vector<std::size_t> masked;    // which ones
  TokenGrid input;                    // grid fed to the predictor (MASK at `masked`)
  TokenGrid grid;                     // grid after the predict step
  std::vector<double> scores;         // per cell; preserved cells are 1
  double mean_score = 0.0;            // over non-preserved cells
};

struct DecodeTrace {
  std::vector<DecodeSnapshot> snapshots;
  std::size_t calls = 0;
};

struct DecodeResult {
  TokenGrid grid;
  DecodeTrace trace;
};

inline ProtocolConfig protocol_for(const Predictor& p) {
  ProtocolConfig c;
  c.grid_h = p.config().grid_h;
  c.grid_w = p.config().grid_w;
  c.max_text = p.config().max_text;
  return c;
}

namespace smart_detail {

inline std::uint32_t sample_group(std::span<const Scalar> probs, double temperature, Rng& rng) {
  if (temperature == 1.0) return static_cast<std::uint32_t>(rng.categorical(probs));
  std::vector<double> w(probs.size());
  double mx = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    w[k] = std::log(std::max(static_cast<double>(probs[k]), 1e-30)) / temperature;
    mx = k == 0 ? w[k] : std::max(mx, w[k]);
  }
  for (auto& v : w) v = std::exp(v - mx);
  return static_cast<std::uint32_t>(rng.categorical(std::span<const double>(w)));
}

// Forward at `positions`, sample every group, write tokens and scores back.
inline void predict_step(const Predictor& p, MultiModalSequence& seq, const std::vector<std::size_t>& positions,
                         double temperature, Rng& rng, std::vector<double>& scores) {
  const std::size_t M = p.config().M;
  if (positions.empty()) {
    nar_detail::forward_rows(p, seq, {}, nullptr);
    return;
  }
  const auto dist = forward(p, seq, positions);
  std::array<std::uint32_t, kMaxGroups> chosen{};
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (std::size_t m = 0; m < M; ++m) chosen[m] = sample_group(dist.group(r, m), temperature, rng);
    seq.set_target(positions[r], std::span<const std::uint32_t>(chosen.data(), M));
    scores[positions[r]] = dist.score(r, std::span<const std::uint32_t>(chosen.data(), M));
  }
}

inline double mean_over(const std::vector<double>& scores, const std::vector<std::size_t>& free) {
  double s = 0.0;
  for (auto p : free) s += scores[p];
  return free.empty() ? 1.0 : s / static_cast<double>(free.size());
}

}  // namespace smart_detail

// `source` supplies the values of preserved cells (required when the
// conditions carry a preservation mask).
inline DecodeResult decode(const Predictor& p, const Vocabulary& v, const ConditionSet& conditions,
                           const TokenGrid* source, const MaskSchedule& sched, Rng& rng, double temperature = 1.0) {
  sched.validate();
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ArgumentError("decode: temperature must be > 0");
  auto seq = assemble_masked(v, conditions, protocol_for(p), source);
  const std::size_t cells = seq.target_count();
  std::vector<std::size_t> free;
  for (std::size_t pos = 0; pos < cells; ++pos) {
    if (seq.target(pos).maskable) free.push_back(pos);
  }
  DecodeResult out;
  std::vector<double> scores(cells, 1.0);
  auto snapshot = [&](std::size_t t, const std::vector<std::size_t>& masked, TokenGrid input) {
    DecodeSnapshot s;
    s.iteration = t;
    s.n = masked.size();
    s.masked = masked;
    s.input = std::move(input);
    s.grid = seq.target_grid();
    s.scores = scores;
    s.mean_score = smart_detail::mean_over(scores, free);
    out.trace.snapshots.push_back(std::move(s));
  };

  if (free.empty()) {
    out.grid = seq.target_grid();
    snapshot(0, {}, out.grid);
    return out;
  }

  const std::size_t N = free.size();
  {
    TokenGrid input = seq.target_grid();
    smart_detail::predict_step(p, seq, free, temperature, rng, scores);
    ++out.trace.calls;
    snapshot(0, free, std::move(input));
  }
  std::vector<double> w(N);
  for (std::size_t t = 1; t <= sched.T; ++t) {
    const std::size_t n = schedule_n(sched, N, t);
    for (std::size_t i = 0; i < N; ++i) w[i] = scores[free[i]];
    const auto keep = multinomial_without_replacement(std::span<const double>(w), N - n, rng);
    std::vector<std::uint8_t> kept(N, 0);
    for (auto i : keep) kept[i] = 1;
    std::vector<std::size_t> remask;
    for (std::size_t i = 0; i < N; ++i) {
      if (!kept[i]) {
        remask.push_back(free[i]);
        seq.mask_target(free[i], v);
      }
    }
    TokenGrid input = seq.target_grid();
    smart_detail::predict_step(p, seq, remask, temperature, rng, scores);
    ++out.trace.calls;
    snapshot(t, remask, std::move(input));
  }
  out.grid = seq.target_grid();
  return out;
}

struct BaselineResult {
  TokenGrid grid;
  std::size_t calls = 0;
};

// Unmasks the single most confident slot (argmax tokens) per predictor call.
inline BaselineResult decode_greedy_ar_baseline(const Predictor& p, const Vocabulary& v, const ConditionSet& conditions,
                                                const TokenGrid* source) {
  auto seq = assemble_masked(v, conditions, protocol_for(p), source);
  const std::size_t M = p.config().M;
  std::vector<std::size_t> masked;
  for (std::size_t pos = 0; pos < seq.target_count(); ++pos) {
    if (seq.target(pos).maskable) masked.push_back(pos);
  }
  BaselineResult out;
  std::array<std::uint32_t, kMaxGroups> best_ids{}, ids{};
  while (!masked.empty()) {
    const auto dist = forward(p, seq, masked);
    ++out.calls;
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t r = 0; r < masked.size(); ++r) {
      for (std::size_t m = 0; m < M; ++m) {
        const auto g = dist.group(r, m);
        ids[m] = static_cast<std::uint32_t>(std::max_element(g.begin(), g.end()) - g.begin());
      }
      const double s = dist.score(r, std::span<const std::uint32_t>(ids.data(), M));
      if (s > best_score) {
        best_score = s;
        best = r;
        best_ids = ids;
      }
    }
    seq.set_target(masked[best], std::span<const std::uint32_t>(best_ids.data(), M));
    masked.erase(masked.begin() + static_cast<std::ptrdiff_t>(best));
  }
  out.grid = seq.target_grid();
  return out;
}

// Decodes a grid whose cells may hold MASK ids; masked patches become mid-gray.
inline Image render_grid(const CodecParams& codec, const TokenGrid& grid) {
  const auto& cfg = codec.config();
  const auto K = static_cast<std::uint32_t>(cfg.K);
  TokenGrid filled = grid;
  std::vector<std::uint8_t> masked(grid.cells(), 0);
  for (std::size_t pos = 0; pos < grid.cells(); ++pos) {
    for (auto& id : filled.cell(pos)) {
      if (id == K) {
        masked[pos] = 1;
        id = 0;
      }
    }
  }
  Image img = decode(codec, filled);
  for (std::size_t pos = 0; pos < grid.cells(); ++pos) {
    if (!masked[pos]) continue;
    const std::size_t r0 = (pos / grid.w) * cfg.patch, c0 = (pos % grid.w) * cfg.patch;
    for (std::size_t r = 0; r < cfg.patch; ++r) {
      for (std::size_t c = 0; c < cfg.patch; ++c) img.set(r0 + r, c0 + c, {Scalar(0.5), Scalar(0.5), Scalar(0.5)});
    }
  }
  return img;
}

inline std::string trace_metrics(const DecodeTrace& trace) {
  std::ostringstream out;
  for (std::size_t i = 0; i < trace.snapshots.size(); ++i) {
    const auto& s = trace.snapshots[i];
    const std::size_t calls = trace.calls == 0 ? 0 : i + 1;
    out << "iteration=" << s.iteration << " n=" << s.n << " mean_score=" << from_double(s.mean_score)
        << " calls=" << calls << "\n";
  }
  return out.str();
}

// Writes one image per snapshot (the grid after that iteration's predict
// step), one per snapshot input with masked cells in gray, and a metrics file.
inline std::vector<std::filesystem::path> render_trace(const DecodeTrace& trace, const CodecParams& codec,
                                                       const std::filesystem::path& dir,
                                                       const std::vector<std::string>& comments = {}) {
  if (trace.snapshots.empty()) throw ArgumentError("render_trace: empty trace");
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  char name[64];
  for (const auto& s : trace.snapshots) {
    std::snprintf(name, sizeof name, "iter_%02zu.ppm", s.iteration);
    write_ppm(dir / name, render_grid(codec, s.grid), comments);
    written.push_back(dir / name);
  }
  for (const auto& s : trace.snapshots) {
    std::snprintf(name, sizeof name, "iter_%02zu_input.ppm", s.iteration);
    write_ppm(dir / name, render_grid(codec, s.input), comments);
  }
  std::string metrics;
  for (const auto& c : comments) metrics += "# " + c + "\n";
  metrics += trace_metrics(trace);
  io::write_text(dir / "metrics.txt", metrics);
  return written;
}

}  // namespace narpq
