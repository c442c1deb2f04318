// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fail. Trains the codec and predictor once with the
// default run configuration (about 25 minutes on one core).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cli_harness.hpp"
#include "narpq/config.hpp"
#include "narpq/image_codec.hpp"
#include "narpq/nar_predictor.hpp"
#include "narpq/pq_codec.hpp"
#include "narpq/sequence_protocol.hpp"
#include "narpq/smart_decoder.hpp"
#include "narpq/synth_data.hpp"

using namespace narpq;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;
std::map<int, std::string> summary;

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  char line[1024];
  std::snprintf(line, sizeof line, "%s criterion %d (%s): %s [%.1fs]", o.pass ? "PASS" : "FAIL", id, name.c_str(),
                o.detail.c_str(), seconds_since(t0));
  summary[id] = line;
  std::printf("%s\n", line);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---- shared trained models ----------------------------------------------------

struct Trained {
  RunConfig cfg;
  std::vector<synth::ToySample> data;
  std::size_t train_n = 0;
  CodecParams codec;
  Predictor pred;
  Vocabulary vocab{32, 4, synth::caption_vocabulary()};
  double codec_seconds = 0.0;
  double nar_seconds = 0.0;
};

// Same streams as the command-line tool: data 1, codec 2, predictor 3.
void train_codec_stage(Trained& t) {
  auto data_rng = Rng(t.cfg.seed).fork(1);
  t.data = synth::generate_dataset(t.cfg.data.samples, data_rng);
  t.train_n = t.data.size() - t.cfg.data.holdout;
  std::vector<Image> images;
  for (std::size_t i = 0; i < t.train_n; ++i) images.push_back(t.data[i].image);
  auto rng = Rng(t.cfg.seed).fork(2);
  const auto t0 = Clock::now();
  t.codec = train_codec(images, t.cfg.codec, t.cfg.codec_train, rng);
  t.codec_seconds = seconds_since(t0);
}

void train_nar_stage(Trained& t) {
  t.vocab = Vocabulary(t.cfg.codec.K, t.cfg.codec.groups, synth::caption_vocabulary());
  const auto t0 = Clock::now();
  std::vector<TokenGrid> grids(t.train_n);
  std::vector<std::vector<std::uint32_t>> captions(t.train_n);
  parallel_for(t.train_n, [&](std::size_t i) { grids[i] = encode(t.codec, t.data[i].image); });
  for (std::size_t i = 0; i < t.train_n; ++i) captions[i] = t.vocab.tokenize(t.data[i].caption);
  auto rng = Rng(t.cfg.seed).fork(3);
  t.pred = train_predictor(grids, captions, t.vocab, t.cfg.predictor, t.cfg.nar_train, rng, [](const NarLog& l) {
    if (l.step % 500 == 0) std::printf("  predictor step %zu loss %.4f\n", l.step, l.loss);
    std::fflush(stdout);
  });
  t.nar_seconds = seconds_since(t0);
}

// ---- criteria -----------------------------------------------------------------

Outcome c1_schedule() {
  // floor(256 * (0.2 + (10 - t) / 9 * 0.6)) evaluated by hand for t = 1..10
  const std::size_t expected[10] = {204, 187, 170, 153, 136, 119, 102, 85, 68, 51};
  const MaskSchedule s{0.8, 0.2, 10};
  std::string got;
  bool ok = true;
  for (std::size_t t = 1; t <= 10; ++t) {
    const auto n = schedule_n(s, 256, t);
    ok = ok && n == expected[t - 1];
    got += (t > 1 ? "," : "") + std::to_string(n);
  }
  return {ok, "n(t)=" + got};
}

Outcome c2_quantizers() {
  Rng rng(0);
  const auto v = subspace_mixture(10000, 32, 4, 8, rng);
  const auto t = compare_quantizers(v, 4, 64, 2, 25, rng);
  const double other = std::min(t.vq, t.rq);
  const double margin = (other - t.pq) / other;
  std::ostringstream ss;
  ss << "VQ=" << t.vq << " RQ=" << t.rq << " PQ=" << t.pq << " margin=" << margin;
  return {t.pq < other && margin >= 0.05, ss.str()};
}

Outcome c3_kmeans() {
  double worst = -1e300;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto data = subspace_mixture(2000, 8, 1, 12, rng, 2.0, 0.5);
    const auto km = kmeans(data, 16, KMeansOptions{50, 0.0}, rng);
    for (std::size_t i = 1; i < km.history.size(); ++i) worst = std::max(worst, km.history[i] - km.history[i - 1]);
  }
  return {worst <= 1e-9, "max per-iteration increase " + fmt("%.3g", worst)};
}

Outcome c4_bruteforce() {
  Rng rng(4);
  const auto train = subspace_mixture(2000, 6, 3, 5, rng);
  const auto cb = train_pq(train, 3, 8, 20, rng);
  std::size_t agree = 0;
  const std::size_t n = 1000;
  std::vector<Scalar> x(6);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& e : x) e = static_cast<Scalar>(2.0 * rng.normal());
    const auto q = quantize(cb, x);
    double best = 1e300;
    std::array<std::uint32_t, 3> best_ids{};
    for (std::uint32_t a = 0; a < 8; ++a) {
      for (std::uint32_t b = 0; b < 8; ++b) {
        for (std::uint32_t c = 0; c < 8; ++c) {
          const std::array<std::uint32_t, 3> ids{a, b, c};
          const auto rec = dequantize(cb, ids);
          double d = 0.0;
          for (std::size_t j = 0; j < 6; ++j) d += (double(x[j]) - rec[j]) * (double(x[j]) - rec[j]);
          if (d < best) {
            best = d;
            best_ids = ids;
          }
        }
      }
    }
    agree += std::equal(best_ids.begin(), best_ids.end(), q.indices.begin());
  }
  return {agree == n, std::to_string(agree) + "/" + std::to_string(n) + " agree"};
}

double codec_grad_error(CodecParams& codec, const Image& img) {
  const auto anchor = make_anchor(codec, img);
  auto& cs = codec.params();
  return grad_check(
      [&] {
        GradBuffer g = make_grad_buffer(cs);
        const double l = codec_loss(codec, img, &g, &anchor).total();
        for (std::size_t i = 0; i < cs.size(); ++i) cs[i].grad.vector() += g[i].vector();
        return l;
      },
      cs, 1e-2);
}

Outcome c5_gradients(const CodecParams& trained_codec, const Image& holdout_image) {
  PredictorConfig pc;
  pc.layers = 2;
  pc.hidden = 16;
  pc.heads = 2;
  pc.ffn = 32;
  Rng rng(5);
  Predictor p(pc, rng);
  for (auto& prm : p.params()) {
    if (prm.name.ends_with(".g")) continue;
    for (auto& x : prm.value.values()) x = static_cast<Scalar>(0.1 * rng.normal());
  }
  const Vocabulary v(pc.K, pc.M, synth::caption_vocabulary());
  TokenGrid target(pc.grid_h, pc.grid_w, pc.M);
  for (auto& id : target.ids) id = static_cast<std::uint32_t>(rng.index(pc.K));
  const auto ex = make_training_example(v, target, v.tokenize(synth::caption(synth::sample_spec(rng))), ProtocolConfig{}, rng);
  auto& ps = p.params();
  const double pred_err = grad_check(
      [&] {
        GradBuffer g = make_grad_buffer(ps);
        const double l = nar_loss(p, ex.sequence, ex.truth, ex.masked, &g);
        for (std::size_t i = 0; i < ps.size(); ++i) ps[i].grad.vector() += g[i].vector();
        return l;
      },
      ps, 1e-2);

  // Codec: a small configuration at random init, and the full-size codec at
  // its trained weights. At random init the loss of larger codecs is in the
  // hundreds and its float32 evaluation noise dominates the finite differences.
  CodecConfig small;
  small.image_h = small.image_w = 8;
  small.hidden = 8;
  small.n_z = 4;
  small.groups = 2;
  small.K = 4;
  CodecParams init(small, rng);
  const auto small_img = synth::render(synth::sample_spec(rng), {3, 5}, 8);
  init.set_codebook(train_pq(encode_latent(init, small_img).values, small.groups, small.K, 10, rng));
  const double init_err = codec_grad_error(init, small_img);
  CodecParams full = trained_codec;
  const double full_err = codec_grad_error(full, holdout_image);
  return {pred_err < 1e-3 && init_err < 1e-3 && full_err < 1e-3,
          "max rel err: predictor " + fmt("%.3g", pred_err) + ", codec 8x8 init " + fmt("%.3g", init_err) +
              ", codec 32x32 trained " + fmt("%.3g", full_err)};
}

Outcome c6_codec(const Trained& t) {
  Rng rng(Rng(t.cfg.seed).fork(6));
  const CodecParams init(t.cfg.codec, rng);
  const std::size_t n = t.data.size() - t.train_n;
  std::vector<double> trained(n), random(n);
  std::vector<std::uint8_t> ok(n);
  parallel_for(n, [&](std::size_t i) {
    const auto& s = t.data[t.train_n + i];
    const auto rec = reconstruct(t.codec, s.image);
    trained[i] = mse(rec, s.image);
    random[i] = mse(reconstruct(init, s.image), s.image);
    ok[i] = synth::attribute_oracle(rec) == s.spec;
  });
  const double mt = std::accumulate(trained.begin(), trained.end(), 0.0) / double(n);
  const double mr = std::accumulate(random.begin(), random.end(), 0.0) / double(n);
  const double acc = std::accumulate(ok.begin(), ok.end(), 0.0) / double(n);
  std::ostringstream ss;
  ss << "holdout MSE " << mt << " vs random-init " << mr << " (ratio " << mt / mr << "), oracle accuracy " << acc
     << ", train " << fmt("%.0fs", t.codec_seconds);
  return {mt <= mr / 5.0 && acc >= 0.95 && t.codec_seconds < 900.0, ss.str()};
}

Outcome c7_preservation(const Trained& t) {
  Rng rng(7);
  const std::size_t cells = t.cfg.codec.grid_h() * t.cfg.codec.grid_w();
  std::size_t checked = 0, bad = 0;
  for (int call = 0; call < 1000; ++call) {
    const auto& src = t.data[rng.index(t.data.size())];
    const auto source = encode(t.codec, src.image);
    std::vector<std::uint8_t> pres(cells);
    const double p = rng.uniform();
    for (auto& x : pres) x = rng.uniform() < p;
    ConditionSet c;
    c.preservation = pres;
    if (rng.uniform() < 0.5) c.text = t.vocab.tokenize(src.caption);
    const auto res = decode(t.pred, t.vocab, c, &source, t.cfg.schedule, rng);
    for (const auto& snap : res.trace.snapshots) {
      for (std::size_t pos = 0; pos < cells; ++pos) {
        if (!pres[pos]) continue;
        ++checked;
        bad += !std::equal(source.cell(pos).begin(), source.cell(pos).end(), snap.grid.cell(pos).begin());
        bad += !std::equal(source.cell(pos).begin(), source.cell(pos).end(), snap.input.cell(pos).begin());
      }
    }
    bad += res.grid.ids.size() != source.ids.size();
  }
  return {bad == 0 && checked > 0, std::to_string(checked) + " preserved slot-snapshots checked, " +
                                       std::to_string(bad) + " mismatches"};
}

Outcome c8_speed(const Trained& t) {
  Rng rng(8);
  const std::size_t runs = 5;
  std::size_t smart_calls = 0, ar_calls = 0;
  double smart_s = 0.0, ar_s = 0.0;
  for (std::size_t i = 0; i < runs; ++i) {
    ConditionSet c;
    c.text = t.vocab.tokenize(synth::caption(synth::sample_spec(rng)));
    auto t0 = Clock::now();
    smart_calls = decode(t.pred, t.vocab, c, nullptr, t.cfg.schedule, rng).trace.calls;
    smart_s += seconds_since(t0);
    t0 = Clock::now();
    ar_calls = decode_greedy_ar_baseline(t.pred, t.vocab, c, nullptr).calls;
    ar_s += seconds_since(t0);
  }
  auto big_cfg = t.cfg.predictor;
  big_cfg.grid_h = big_cfg.grid_w = 16;
  big_cfg.max_len = 256 + 64;
  const Predictor big(big_cfg, rng);
  const auto big_smart = decode(big, t.vocab, {}, nullptr, t.cfg.schedule, rng).trace.calls;
  const auto big_ar = decode_greedy_ar_baseline(big, t.vocab, {}, nullptr).calls;
  const double ratio = double(ar_calls) / double(smart_calls);
  const double big_ratio = double(big_ar) / double(big_smart);
  const double speedup = ar_s / smart_s;
  std::ostringstream ss;
  ss << "calls SMART=" << smart_calls << " AR=" << ar_calls << " (" << ratio << "x), wall-clock " << speedup
     << "x, 256 positions: " << big_smart << " vs " << big_ar << " (" << big_ratio << "x)";
  return {smart_calls == t.cfg.schedule.T + 1 && ar_calls == 64 && ratio >= 5.8 && speedup >= 4.0 && big_ratio >= 23.0,
          ss.str()};
}

Outcome c9_frequencies() {
  Rng rng(9);
  const std::size_t n = 100000;
  std::array<double, 4> strat{}, combo{};
  for (std::size_t i = 0; i < n; ++i) strat[static_cast<std::size_t>(sample_mask_strategy(rng, 8, 8).kind)] += 1;
  for (std::size_t i = 0; i < n; ++i) combo[static_cast<std::size_t>(sample_condition_combo(rng))] += 1;
  const std::array<double, 4> want_s{0.70, 0.10, 0.10, 0.10}, want_c{0.20, 0.55, 0.20, 0.05};
  double worst = 0.0;
  std::ostringstream ss;
  ss << "strategy";
  for (std::size_t k = 0; k < 4; ++k) {
    strat[k] /= double(n);
    worst = std::max(worst, std::abs(strat[k] - want_s[k]));
    ss << " " << strat[k];
  }
  ss << ", combo";
  for (std::size_t k = 0; k < 4; ++k) {
    combo[k] /= double(n);
    worst = std::max(worst, std::abs(combo[k] - want_c[k]));
    ss << " " << combo[k];
  }
  ss << ", max deviation " << worst;
  return {worst <= 0.01, ss.str()};
}

Outcome c10_text(const Trained& t) {
  std::vector<double> rates;
  for (std::uint64_t seed : {101, 202, 303}) {
    Rng rng(seed);
    std::size_t hit = 0;
    for (int i = 0; i < 200; ++i) {
      const auto spec = synth::sample_spec(rng);
      ConditionSet c;
      c.text = t.vocab.tokenize(synth::caption(spec));
      const auto res = decode(t.pred, t.vocab, c, nullptr, t.cfg.schedule, rng);
      hit += synth::attribute_oracle(decode(t.codec, res.grid)).base == spec.base;
    }
    rates.push_back(double(hit) / 200.0);
  }
  const double mean = (rates[0] + rates[1] + rates[2]) / 3.0;
  const double train_s = t.codec_seconds + t.nar_seconds;
  std::ostringstream ss;
  ss << "base-colour match " << mean << " (per seed " << rates[0] << ", " << rates[1] << ", " << rates[2]
     << "; chance 0.25), training " << fmt("%.0fs", train_s);
  return {mean >= 0.6 && train_s <= 1800.0, ss.str()};
}

Outcome c11_trend(const Trained& t) {
  Rng rng(11);
  std::size_t good = 0;
  const std::size_t n = 100;
  for (std::size_t i = 0; i < n; ++i) {
    ConditionSet c;
    c.text = t.vocab.tokenize(synth::caption(synth::sample_spec(rng)));
    const auto res = decode(t.pred, t.vocab, c, nullptr, t.cfg.schedule, rng);
    const auto& s = res.trace.snapshots;
    std::size_t up = 0;
    for (std::size_t k = 1; k < s.size(); ++k) up += s[k].mean_score >= s[k - 1].mean_score;
    good += up >= 8;
  }
  const double frac = double(good) / double(n);
  return {frac >= 0.8, "non-decreasing in >= 8 of 10 iterations for " + fmt("%.2f", frac) + " of decodes"};
}

Outcome c12_determinism(const std::string& cli) {
  using narpq::testing::run_cli;
  const auto root = narpq::testing::scratch_dir("acceptance_determinism");
  io::write_text(root / "run.ini",
                 "[data]\nsamples=120\nholdout=20\n[codec_train]\nepochs=2\n[nar_train]\nsteps=30\nbatch=4\n"
                 "[predictor]\nlayers=1\nhidden=32\nheads=2\nffn=64\n[eval]\ngenerations=5\nquantizer_vectors=2000\n");
  const std::string ini = "--config '" + (root / "run.ini").string() + "' --seed 5 ";
  const std::string img = (root / "a" / "data" / "images" / "000000.ppm").string();
  const std::string img2 = (root / "a" / "data" / "images" / "000001.ppm").string();
  const std::vector<std::string> commands{
      "gen-data",
      "train-codec",
      "train-nar",
      "generate --task uncond",
      "generate --task text2img --text 'a green checker garment with red accents'",
      "edit --task local-edit --box 1,1,3,3 --ref '" + img + "' --ref '" + img2 + "'",
      "edit --task text-local-edit --box 1,1,3,3 --ref '" + img + "' --text 'a red solid garment'",
      "edit --task inpaint --box 0,0,8,4 --ref '" + img + "'",
      "edit --task outpaint --box 2,2,4,4 --ref '" + img + "'",
      "generate --task style-mix --ref '" + img + "' --ref '" + img2 + "'",
      "eval",
      "eval --quantizers",
      "bench --runs 1",
  };
  std::size_t failed = 0;
  std::string first_failure;
  for (const char* run : {"a", "b"}) {
    for (const auto& cmd : commands) {
      const auto sp = cmd.find(' ');
      const std::string sub = cmd.substr(0, sp), rest = sp == std::string::npos ? "" : cmd.substr(sp);
      const auto r = run_cli(cli, sub + " " + ini + "--out '" + (root / run).string() + "'" + rest);
      if (r.code != 0) {
        ++failed;
        if (first_failure.empty()) first_failure = cmd + " exited " + std::to_string(r.code);
      }
    }
  }
  const auto a = narpq::testing::tree(root / "a");
  const auto b = narpq::testing::tree(root / "b");
  std::size_t differ = 0;
  for (const auto& [path, bytes] : a) {
    auto it = b.find(path);
    differ += it == b.end() || it->second != bytes;
  }
  differ += b.size() - std::min(b.size(), a.size());
  std::ostringstream ss;
  ss << commands.size() << " commands x 2 runs, " << a.size() << " artifacts, " << differ << " differ";
  if (failed) ss << "; " << failed << " command failures (" << first_failure << ")";
  return {failed == 0 && differ == 0 && a.size() == b.size() && !a.empty(), ss.str()};
}

}  // namespace

int main(int argc, char** argv) {
  setvbuf(stdout, nullptr, _IOLBF, 0);
  const std::string cli = argc > 1 ? argv[1] : "narpq";

  report(1, "schedule exactness", c1_schedule);
  report(2, "quantizer comparison", c2_quantizers);
  report(3, "k-means monotonicity", c3_kmeans);
  report(4, "PQ brute-force equivalence", c4_bruteforce);
  report(9, "sampling frequencies", c9_frequencies);
  report(12, "CLI determinism", [&] { return c12_determinism(cli); });

  Trained t;
  bool codec_ok = true, nar_ok = true;
  try {
    train_codec_stage(t);
  } catch (const std::exception& e) {
    std::printf("codec training failed: %s\n", e.what());
    codec_ok = false;
  }
  report(6, "codec training", [&]() -> Outcome {
    if (!codec_ok) return {false, "codec training failed"};
    return c6_codec(t);
  });
  report(5, "gradient correctness", [&]() -> Outcome {
    if (!codec_ok) return {false, "codec training failed"};
    return c5_gradients(t.codec, t.data.back().image);
  });
  if (codec_ok) {
    try {
      train_nar_stage(t);
    } catch (const std::exception& e) {
      std::printf("predictor training failed: %s\n", e.what());
      nar_ok = false;
    }
  }
  const bool models = codec_ok && nar_ok;
  auto with_models = [&](auto fn) {
    return [&, fn]() -> Outcome {
      if (!models) return {false, "models not trained"};
      return fn(t);
    };
  };
  report(7, "preservation exactness", with_models(c7_preservation));
  report(8, "call count and speed", with_models(c8_speed));
  report(10, "text conditioning", with_models(c10_text));
  report(11, "refinement trend", with_models(c11_trend));

  std::printf("\nsummary\n");
  for (const auto& [id, line] : summary) std::printf("%s\n", line.c_str());
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
