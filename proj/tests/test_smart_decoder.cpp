#include <gtest/gtest.h>

#include <filesystem>

#include "narpq/smart_decoder.hpp"
#include "narpq/synth_data.hpp"

using namespace narpq;

namespace {

Vocabulary vocab() { return Vocabulary(32, 4, synth::caption_vocabulary()); }

PredictorConfig small_config(std::size_t grid = 8) {
  PredictorConfig c;
  c.layers = 1;
  c.hidden = 16;
  c.heads = 2;
  c.ffn = 32;
  c.grid_h = grid;
  c.grid_w = grid;
  c.max_len = grid * grid + 64;
  return c;
}

Predictor random_predictor(std::uint64_t seed, std::size_t grid = 8) {
  Rng rng(seed);
  Predictor p(small_config(grid), rng);
  for (auto& prm : p.params()) {
    for (auto& x : prm.value.values()) x = static_cast<Scalar>(rng.normal() * 0.3);
  }
  return p;
}

TokenGrid random_grid(std::size_t h, std::size_t w, Rng& rng) {
  TokenGrid g(h, w, 4);
  for (auto& v : g.ids) v = static_cast<std::uint32_t>(rng.index(32));
  return g;
}

// n = floor(N * (beta + (T - t) / (T - 1) * (alpha - beta))) with alpha and
// beta given as tenths, in exact integer arithmetic.
std::size_t schedule_oracle(std::size_t N, std::size_t a10, std::size_t b10, std::size_t T, std::size_t t) {
  if (T == 1) return N * a10 / 10;
  return N * (b10 * (T - 1) + (T - t) * (a10 - b10)) / (10 * (T - 1));
}

}  // namespace

TEST(Schedule, DefaultConstants) {
  const MaskSchedule s;
  EXPECT_EQ(schedule_n(s, 256, 1), 204u);
  EXPECT_EQ(schedule_n(s, 256, 10), 51u);
}

TEST(Schedule, MatchesIntegerOracle) {
  for (std::size_t a10 = 0; a10 <= 10; ++a10) {
    for (std::size_t b10 = 0; b10 <= a10; ++b10) {
      for (std::size_t T : {1u, 2u, 3u, 7u, 10u}) {
        const MaskSchedule s{a10 / 10.0, b10 / 10.0, T};
        for (std::size_t N : {0u, 1u, 7u, 10u, 64u, 100u, 256u}) {
          std::size_t prev = N;
          for (std::size_t t = 1; t <= T; ++t) {
            const auto n = schedule_n(s, N, t);
            ASSERT_EQ(n, schedule_oracle(N, a10, b10, T, t)) << a10 << " " << b10 << " T=" << T << " N=" << N << " t=" << t;
            ASSERT_LE(n, prev);
            prev = n;
          }
          ASSERT_EQ(schedule_n(s, N, 1), N * a10 / 10);
          if (T > 1) {
            ASSERT_EQ(schedule_n(s, N, T), N * b10 / 10);
          }
        }
      }
    }
  }
}

TEST(Schedule, ConstantWhenAlphaEqualsBeta) {
  const MaskSchedule s{0.5, 0.5, 10};
  for (std::size_t t = 1; t <= 10; ++t) EXPECT_EQ(schedule_n(s, 64, t), 32u);
}

TEST(Schedule, Errors) {
  const MaskSchedule s;
  EXPECT_THROW(schedule_n(s, 64, 0), ArgumentError);
  EXPECT_THROW(schedule_n(s, 64, 11), ArgumentError);
  EXPECT_THROW(schedule_n(MaskSchedule{0.2, 0.8, 10}, 64, 1), ArgumentError);
  EXPECT_THROW(schedule_n(MaskSchedule{0.8, 0.2, 0}, 64, 1), ArgumentError);
}

TEST(Decode, CallCountAndDeterminism) {
  const auto p = random_predictor(1);
  const auto v = vocab();
  ConditionSet c;
  c.text = v.tokenize(synth::caption({synth::Color::Blue, synth::Pattern::Checker, synth::Color::Red}));
  Rng r1(5), r2(5);
  const auto a = decode(p, v, c, nullptr, MaskSchedule{}, r1);
  const auto b = decode(p, v, c, nullptr, MaskSchedule{}, r2);
  EXPECT_EQ(a.trace.calls, 11u);
  EXPECT_EQ(a.trace.snapshots.size(), 11u);
  EXPECT_EQ(a.grid, b.grid);
  for (std::size_t i = 0; i < a.trace.snapshots.size(); ++i) {
    EXPECT_EQ(a.trace.snapshots[i].grid, b.trace.snapshots[i].grid);
    EXPECT_EQ(a.trace.snapshots[i].scores, b.trace.snapshots[i].scores);
  }
  EXPECT_TRUE(a.grid.all_below(32));
  EXPECT_EQ(a.trace.snapshots.back().grid, a.grid);
}

TEST(Decode, CallCountIndependentOfGridSize) {
  const auto p = random_predictor(2, 16);
  const auto v = vocab();
  Rng rng(6);
  const auto r = decode(p, v, {}, nullptr, MaskSchedule{}, rng);
  EXPECT_EQ(r.trace.calls, 11u);
  const auto base = decode_greedy_ar_baseline(p, v, {}, nullptr);
  EXPECT_EQ(base.calls, 256u);
  EXPECT_GE(double(base.calls) / double(r.trace.calls), 23.0);
}

TEST(Decode, SnapshotsFollowSchedule) {
  const auto p = random_predictor(3);
  const auto v = vocab();
  Rng rng(7);
  const MaskSchedule s;
  const auto r = decode(p, v, {}, nullptr, s, rng);
  EXPECT_EQ(r.trace.snapshots[0].n, 64u);
  for (std::size_t t = 1; t <= 10; ++t) {
    const auto& snap = r.trace.snapshots[t];
    EXPECT_EQ(snap.n, schedule_n(s, 64, t));
    // re-masked cells are MASK in the input, everything else was retained
    std::size_t masked_in_input = 0;
    for (std::size_t pos = 0; pos < 64; ++pos) masked_in_input += snap.input.cell(pos)[0] == 32;
    EXPECT_EQ(masked_in_input, snap.n);
    for (std::size_t pos = 0; pos < 64; ++pos) {
      if (snap.input.cell(pos)[0] != 32) {
        EXPECT_TRUE(std::equal(snap.input.cell(pos).begin(), snap.input.cell(pos).end(),
                               r.trace.snapshots[t - 1].grid.cell(pos).begin()));
        EXPECT_EQ(snap.scores[pos], r.trace.snapshots[t - 1].scores[pos]);
      }
    }
  }
}

TEST(Decode, FullPreservationShortCircuits) {
  const auto p = random_predictor(4);
  const auto v = vocab();
  Rng rng(8);
  const auto src = random_grid(8, 8, rng);
  ConditionSet c;
  c.preservation = std::vector<std::uint8_t>(64, 1);
  const auto r = decode(p, v, c, &src, MaskSchedule{}, rng);
  EXPECT_EQ(r.grid, src);
  EXPECT_EQ(r.trace.calls, 0u);
  EXPECT_EQ(decode_greedy_ar_baseline(p, v, c, &src).calls, 0u);
}

TEST(Decode, DegenerateOneIterationFullRemask) {
  const auto p = random_predictor(5);
  const auto v = vocab();
  Rng rng(9);
  const auto r = decode(p, v, {}, nullptr, MaskSchedule{1.0, 1.0, 1}, rng);
  ASSERT_EQ(r.trace.calls, 2u);
  EXPECT_EQ(r.trace.snapshots[1].n, 64u);
  EXPECT_EQ(r.grid, r.trace.snapshots[1].grid);
}

TEST(Decode, PreservationHoldsAtEverySnapshot) {
  const auto p = random_predictor(6);
  const auto v = vocab();
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto src = random_grid(8, 8, rng);
    ConditionSet c;
    std::vector<std::uint8_t> pres(64);
    for (auto& x : pres) x = rng.uniform() < 0.5;
    c.preservation = pres;
    const auto r = decode(p, v, c, &src, MaskSchedule{}, rng);
    for (const auto& snap : r.trace.snapshots) {
      for (std::size_t pos = 0; pos < 64; ++pos) {
        if (!pres[pos]) continue;
        ASSERT_TRUE(std::equal(src.cell(pos).begin(), src.cell(pos).end(), snap.grid.cell(pos).begin()));
        ASSERT_TRUE(std::equal(src.cell(pos).begin(), src.cell(pos).end(), snap.input.cell(pos).begin()));
      }
    }
  }
}

TEST(Decode, Errors) {
  const auto p = random_predictor(7);
  const auto v = vocab();
  Rng rng(11);
  EXPECT_THROW(decode(p, v, {}, nullptr, MaskSchedule{}, rng, 0.0), ArgumentError);
  ConditionSet c;
  c.preservation = std::vector<std::uint8_t>(64, 1);
  EXPECT_THROW(decode(p, v, c, nullptr, MaskSchedule{}, rng), ArgumentError);
  ConditionSet big;
  big.text.assign(20, 0);
  EXPECT_THROW(decode(p, v, big, nullptr, MaskSchedule{}, rng), TruncationError);
}

TEST(Baseline, OneSlotPerCall) {
  const auto p = random_predictor(8);
  const auto v = vocab();
  EXPECT_EQ(decode_greedy_ar_baseline(p, v, {}, nullptr).calls, 64u);
  Rng rng(12);
  const auto src = random_grid(8, 8, rng);
  ConditionSet c;
  std::vector<std::uint8_t> pres(64, 0);
  for (std::size_t i = 0; i < 32; ++i) pres[i] = 1;
  c.preservation = pres;
  const auto r = decode_greedy_ar_baseline(p, v, c, &src);
  EXPECT_EQ(r.calls, 32u);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_TRUE(std::equal(src.cell(i).begin(), src.cell(i).end(), r.grid.cell(i).begin()));
  EXPECT_TRUE(r.grid.all_below(32));
}

TEST(RenderTrace, OneImagePerSnapshot) {
  const auto p = random_predictor(9);
  const auto v = vocab();
  Rng rng(13);
  CodecParams codec(CodecConfig{}, rng);
  const auto r = decode(p, v, {}, nullptr, MaskSchedule{}, rng);
  const auto dir = std::filesystem::temp_directory_path() / "narpq_trace_test";
  std::filesystem::remove_all(dir);
  const auto files = render_trace(r.trace, codec, dir, {"seed=13"});
  ASSERT_EQ(files.size(), 11u);
  const auto last = read_ppm(files.back());
  EXPECT_LT(mse(last, decode(codec, r.grid)), 1e-5);
  const auto metrics = io::read_text(dir / "metrics.txt");
  EXPECT_NE(metrics.find("iteration=10 n=12"), std::string::npos);
  EXPECT_NE(metrics.find("calls=11"), std::string::npos);
  EXPECT_THROW(render_trace({}, codec, dir), ArgumentError);
}

TEST(RenderTrace, MaskedCellsAreGray) {
  Rng rng(14);
  CodecParams codec(CodecConfig{}, rng);
  TokenGrid g(8, 8, 4);
  for (auto& id : g.cell(9)) id = 32;
  const auto img = render_grid(codec, g);
  for (std::size_t r = 4; r < 8; ++r) {
    for (std::size_t c = 4; c < 8; ++c) EXPECT_EQ(img.at(r, c, 0), Scalar(0.5));
  }
}
