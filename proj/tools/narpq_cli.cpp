// narpq: dataset generation, codec and predictor training, guided synthesis,
// evaluation and the decoding benchmark.
//
// All artifacts live under --out:
//   data/manifest.tsv, data/images/   gen-data
//   codec.ckpt                        train-codec
//   predictor.ckpt                    train-nar
//   <task>_seed<N>/                   generate / edit
//   eval.txt, quantizers.txt          eval
//   bench.txt                         bench

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "narpq/checkpoint.hpp"
#include "narpq/config.hpp"
#include "narpq/image_codec.hpp"
#include "narpq/nar_predictor.hpp"
#include "narpq/pq_codec.hpp"
#include "narpq/smart_decoder.hpp"
#include "narpq/synth_data.hpp"

namespace fs = std::filesystem;
using namespace narpq;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kMissing = 3, kNumeric = 4 };

class MissingArtifact : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// Random streams per command, all derived from run.seed.
enum Stream : std::uint64_t { kData = 1, kCodec, kNar, kGenerate, kEval, kBench };

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::string task;
  std::vector<std::string> boxes;
  std::string text;
  std::vector<std::string> refs;
  std::string mix_levels = "0,0.25,0.5,0.75,1";
  bool quantizers = false;
  std::size_t bench_runs = 3;
};

struct Context {
  RunConfig cfg;
  fs::path out;

  Rng rng(Stream s) const { return Rng(cfg.seed).fork(s); }
};

// "section.key=value" lines of the resolved config.
std::vector<std::string> config_lines(const RunConfig& cfg) {
  std::vector<std::string> lines;
  std::istringstream in(cfg.to_text());
  std::string line, section;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    lines.push_back("config." + section + "." + line);
  }
  return lines;
}

std::string config_block(const RunConfig& cfg) {
  std::string s;
  for (const auto& l : config_lines(cfg)) s += l + "\n";
  return s;
}

// Collects key=value output, printed to stdout and optionally saved.
class Report {
 public:
  template <class T>
  void add(const std::string& key, const T& value) {
    std::ostringstream ss;
    if constexpr (std::is_floating_point_v<T>) {
      ss << from_double(value);
    } else {
      ss << value;
    }
    lines_.push_back(key + "=" + ss.str());
  }

  void print() const {
    for (const auto& l : lines_) std::cout << l << "\n";
    std::cout.flush();
  }

  void save(const fs::path& path, const RunConfig& cfg) const {
    std::string text;
    for (const auto& l : lines_) text += l + "\n";
    io::write_text(path, text + config_block(cfg));
  }

 private:
  std::vector<std::string> lines_;
};

fs::path require(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw MissingArtifact("missing " + p.string() + " (run '" + hint + "' first)");
  return p;
}

CheckpointSection config_section(const RunConfig& cfg) { return {"RCFG", cfg.to_text(), {}}; }

CodecParams load_codec(const Context& ctx) {
  const auto sections = read_checkpoint(require(ctx.out / "codec.ckpt", "train-codec"));
  auto codec = CodecParams::from_section(find_section(sections, "CODC"));
  if (codec.config().to_kv() != ctx.cfg.codec.to_kv()) {
    throw UsageError("codec.ckpt was trained with a different [codec] config");
  }
  return codec;
}

Predictor load_predictor(const Context& ctx) {
  const auto sections = read_checkpoint(require(ctx.out / "predictor.ckpt", "train-nar"));
  return Predictor::from_section(find_section(sections, "NARP"));
}

std::vector<synth::LoadedSample> load_data(const Context& ctx) {
  return synth::load_dataset(require(ctx.out / "data" / "manifest.tsv", "gen-data"));
}

Vocabulary vocabulary(const RunConfig& cfg) {
  return Vocabulary(cfg.codec.K, cfg.codec.groups, synth::caption_vocabulary());
}

std::string join_ids(const TokenGrid& g) {
  std::string s;
  for (std::size_t i = 0; i < g.ids.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(g.ids[i]);
  }
  return s;
}

std::string spec_text(const synth::AttributeSpec& s) { return synth::join_words(synth::caption(s)); }

// ---- gen-data ---------------------------------------------------------------

int cmd_gen_data(const Context& ctx) {
  auto rng = ctx.rng(kData);
  synth::DatasetOptions opt;
  opt.jitter = ctx.cfg.data.jitter;
  const auto samples = synth::generate_dataset(ctx.cfg.data.samples, rng, opt);
  synth::write_dataset(ctx.out / "data", samples, config_lines(ctx.cfg));
  io::write_text(ctx.out / "data" / "config.ini", ctx.cfg.to_text());
  Report r;
  r.add("samples", samples.size());
  r.add("manifest", (ctx.out / "data" / "manifest.tsv").string());
  r.print();
  return kOk;
}

// ---- train-codec ------------------------------------------------------------

int cmd_train_codec(const Context& ctx) {
  const auto data = load_data(ctx);
  const std::size_t train_n = data.size() - std::min(ctx.cfg.data.holdout, data.size() - 1);
  std::vector<Image> images;
  for (std::size_t i = 0; i < train_n; ++i) images.push_back(data[i].image);
  auto rng = ctx.rng(kCodec);
  std::string log;
  const auto codec = train_codec(images, ctx.cfg.codec, ctx.cfg.codec_train, rng, [&](const CodecEpochLog& e) {
    std::ostringstream ss;
    ss << "epoch=" << e.epoch << " loss=" << from_double(e.loss) << " recon_mse=" << from_double(e.recon_mse)
       << " used_fraction=" << from_double(e.used_fraction) << "\n";
    std::cout << ss.str() << std::flush;
    log += ss.str();
  });
  write_checkpoint(ctx.out / "codec.ckpt", {codec.to_section(), config_section(ctx.cfg)});
  io::write_text(ctx.out / "codec_log.txt", log + config_block(ctx.cfg));
  Report r;
  r.add("train_images", train_n);
  r.add("checkpoint", (ctx.out / "codec.ckpt").string());
  r.print();
  return kOk;
}

// ---- train-nar --------------------------------------------------------------

int cmd_train_nar(const Context& ctx) {
  const auto codec = load_codec(ctx);
  const auto data = load_data(ctx);
  const auto v = vocabulary(ctx.cfg);
  const std::size_t train_n = data.size() - std::min(ctx.cfg.data.holdout, data.size() - 1);
  std::vector<TokenGrid> grids(train_n);
  std::vector<std::vector<std::uint32_t>> captions(train_n);
  parallel_for(train_n, [&](std::size_t i) { grids[i] = encode(codec, data[i].image); });
  for (std::size_t i = 0; i < train_n; ++i) captions[i] = v.tokenize(data[i].caption);
  auto rng = ctx.rng(kNar);
  std::string log;
  const auto pred = train_predictor(grids, captions, v, ctx.cfg.predictor, ctx.cfg.nar_train, rng, [&](const NarLog& l) {
    std::ostringstream ss;
    ss << "step=" << l.step << " loss=" << from_double(l.loss) << "\n";
    std::cout << ss.str() << std::flush;
    log += ss.str();
  });
  write_checkpoint(ctx.out / "predictor.ckpt", {pred.to_section(), config_section(ctx.cfg)});
  io::write_text(ctx.out / "nar_log.txt", log + config_block(ctx.cfg));
  Report r;
  r.add("train_grids", train_n);
  r.add("checkpoint", (ctx.out / "predictor.ckpt").string());
  r.print();
  return kOk;
}

// ---- generate / edit --------------------------------------------------------

Box parse_box(const std::string& s, std::size_t gh, std::size_t gw) {
  std::vector<std::size_t> v;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) v.push_back(to_size("--box", trim(part)));
  if (v.size() != 4) throw UsageError("--box expects x,y,w,h in grid cells, got '" + s + "'");
  const Box b{v[0], v[1], v[2], v[3]};
  if (b.w == 0 || b.h == 0 || b.x + b.w > gw || b.y + b.h > gh) {
    throw UsageError("--box " + s + " does not fit the " + std::to_string(gh) + "x" + std::to_string(gw) + " grid");
  }
  return b;
}

std::vector<double> parse_levels(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    const double l = to_double("--mix-levels", trim(part));
    if (!(l >= 0.0 && l <= 1.0)) throw UsageError("--mix-levels entries must be in [0, 1]");
    out.push_back(l);
  }
  if (out.empty()) throw UsageError("--mix-levels is empty");
  return out;
}

// Preservation mask: 1 outside every box (inside = false) or inside any box.
std::vector<std::uint8_t> box_mask(const std::vector<Box>& boxes, std::size_t gh, std::size_t gw, bool inside) {
  std::vector<std::uint8_t> m(gh * gw);
  for (std::size_t r = 0; r < gh; ++r) {
    for (std::size_t c = 0; c < gw; ++c) {
      bool in = false;
      for (const auto& b : boxes) in = in || b.contains(r, c);
      m[r * gw + c] = in == inside;
    }
  }
  return m;
}

// Centre crop no larger than the protocol's crop size.
TokenGrid centre_crop(const TokenGrid& g, std::size_t side) {
  const std::size_t h = std::min(side, g.h), w = std::min(side, g.w);
  return g.crop((g.h - h) / 2, (g.w - w) / 2, h, w);
}

struct GenerateInputs {
  std::vector<TokenGrid> refs;
  std::vector<Box> boxes;
  std::vector<std::uint32_t> text;
};

void write_result(const Context& ctx, const fs::path& dir, const CodecParams& codec, const TokenGrid& grid,
                  const std::string& name, Report& r) {
  const auto img = decode(codec, grid);
  write_ppm(dir / (name + ".ppm"), img, config_lines(ctx.cfg));
  const auto est = synth::attribute_oracle(img);
  r.add(name + ".oracle", spec_text(est));
  r.add(name + ".tokens", join_ids(grid));
}

int cmd_generate(const Context& ctx, const Options& o, bool edit) {
  static const std::vector<std::string> tasks{"uncond", "text2img", "local-edit", "text-local-edit",
                                              "inpaint", "outpaint", "style-mix"};
  const std::string task = o.task.empty() ? (edit ? "local-edit" : "uncond") : o.task;
  if (std::find(tasks.begin(), tasks.end(), task) == tasks.end()) throw UsageError("unknown --task '" + task + "'");
  if (edit && (task == "uncond" || task == "text2img")) throw UsageError("edit needs an editing task, got '" + task + "'");

  const auto codec = load_codec(ctx);
  const auto pred = load_predictor(ctx);
  const auto v = vocabulary(ctx.cfg);
  const std::size_t gh = ctx.cfg.codec.grid_h(), gw = ctx.cfg.codec.grid_w();
  const auto proto = protocol_for(pred);

  GenerateInputs in;
  for (const auto& path : o.refs) in.refs.push_back(encode(codec, read_ppm(require(path, "a reference image"))));
  for (const auto& b : o.boxes) in.boxes.push_back(parse_box(b, gh, gw));
  if (!o.text.empty()) {
    try {
      in.text = v.tokenize(synth::split_words(o.text));
    } catch (const Error& e) {
      throw UsageError(std::string("--text: ") + e.what());
    }
  }

  auto need_refs = [&](std::size_t n) {
    if (in.refs.size() < n) throw UsageError("--task " + task + " needs " + std::to_string(n) + " --ref image(s)");
  };
  auto need_boxes = [&] {
    if (in.boxes.empty()) throw UsageError("--task " + task + " needs at least one --box");
  };
  auto need_text = [&] {
    if (in.text.empty()) throw UsageError("--task " + task + " needs --text");
  };

  const fs::path dir = ctx.out / (task + "_seed" + std::to_string(ctx.cfg.seed));
  fs::create_directories(dir);
  auto rng = ctx.rng(kGenerate);
  Report r;
  r.add("task", task);
  r.add("seed", ctx.cfg.seed);

  if (task == "style-mix") {
    need_refs(2);
    const auto levels = parse_levels(o.mix_levels);
    ConditionSet a;
    a.visuals = {centre_crop(in.refs[0], proto.crop_max)};
    a.text = in.text;
    const auto base = decode(pred, v, a, nullptr, ctx.cfg.schedule, rng, ctx.cfg.temperature);
    write_result(ctx, dir, codec, base.grid, "base", r);
    // Nested re-mask sets: level l re-generates the first round(l * N) cells
    // of one random permutation, conditioned on the second reference.
    std::vector<std::size_t> order(gh * gw);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    ConditionSet b;
    b.visuals = {centre_crop(in.refs[1], proto.crop_max)};
    b.text = in.text;
    std::size_t calls = base.trace.calls;
    for (const double level : levels) {
      const auto count = static_cast<std::size_t>(std::llround(level * static_cast<double>(order.size())));
      std::vector<std::uint8_t> pres(order.size(), 1);
      for (std::size_t i = 0; i < count; ++i) pres[order[i]] = 0;
      b.preservation = pres;
      const auto mixed = decode(pred, v, b, &base.grid, ctx.cfg.schedule, rng, ctx.cfg.temperature);
      char name[32];
      std::snprintf(name, sizeof name, "mix_%.2f", level);
      write_result(ctx, dir, codec, mixed.grid, name, r);
      calls += mixed.trace.calls;
    }
    r.add("calls", calls);
    r.print();
    r.save(dir / "result.txt", ctx.cfg);
    return kOk;
  }

  ConditionSet c;
  const TokenGrid* source = nullptr;
  if (task == "uncond") {
    // no conditions
  } else if (task == "text2img") {
    need_text();
    c.text = in.text;
  } else if (task == "local-edit" || task == "text-local-edit") {
    need_boxes();
    if (task == "local-edit") {
      need_refs(2);
    } else {
      need_refs(1);
      need_text();
      c.text = in.text;
    }
    source = &in.refs[0];
    c.preservation = box_mask(in.boxes, gh, gw, false);
    // Visual guidance: the second reference cropped to the first box.
    if (in.refs.size() > 1) {
      const auto& b = in.boxes[0];
      const std::size_t h = std::min(b.h, proto.crop_max), w = std::min(b.w, proto.crop_max);
      c.visuals = {in.refs[1].crop(b.y, b.x, h, w)};
    }
  } else {
    need_refs(1);
    need_boxes();
    source = &in.refs[0];
    c.text = in.text;
    c.preservation = box_mask(in.boxes, gh, gw, task == "outpaint");
  }
  const auto res = decode(pred, v, c, source, ctx.cfg.schedule, rng, ctx.cfg.temperature);
  write_result(ctx, dir, codec, res.grid, "output", r);
  render_trace(res.trace, codec, dir / "trace", config_lines(ctx.cfg));
  r.add("calls", res.trace.calls);
  r.add("final_mean_score", res.trace.snapshots.back().mean_score);
  r.print();
  r.save(dir / "result.txt", ctx.cfg);
  return kOk;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval_quantizers(const Context& ctx) {
  const auto& e = ctx.cfg.eval;
  auto rng = ctx.rng(kEval);
  const auto vectors = subspace_mixture(e.quantizer_vectors, e.quantizer_dim, e.pq_groups, e.quantizer_components, rng);
  const auto t = compare_quantizers(vectors, e.pq_groups, e.quantizer_K, e.rq_depth, e.kmeans_iters, rng);
  Report r;
  r.add("quantizer.vq.distortion", t.vq);
  r.add("quantizer.rq.distortion", t.rq);
  r.add("quantizer.pq.distortion", t.pq);
  const double best_other = std::min(t.vq, t.rq);
  r.add("quantizer.best", t.pq < best_other ? "pq" : (t.rq < t.vq ? "rq" : "vq"));
  r.add("quantizer.pq_margin", (best_other - t.pq) / best_other);
  r.print();
  r.save(ctx.out / "quantizers.txt", ctx.cfg);
  return kOk;
}

int cmd_eval(const Context& ctx) {
  const auto codec = load_codec(ctx);
  const auto pred = load_predictor(ctx);
  const auto data = load_data(ctx);
  const auto v = vocabulary(ctx.cfg);
  const std::size_t holdout = std::min(ctx.cfg.data.holdout, data.size() - 1);
  const std::size_t first = holdout == 0 ? 0 : data.size() - holdout;
  auto rng = ctx.rng(kEval);
  const CodecParams untrained(ctx.cfg.codec, rng);

  const std::size_t n_eval = data.size() - first;
  std::vector<double> mse_trained(n_eval), mse_init(n_eval);
  std::vector<std::uint8_t> oracle_ok(n_eval);
  std::vector<TokenGrid> grids(n_eval);
  parallel_for(n_eval, [&](std::size_t i) {
    const auto& s = data[first + i];
    grids[i] = encode(codec, s.image);
    const auto rec = decode(codec, grids[i]);
    mse_trained[i] = mse(rec, s.image);
    mse_init[i] = mse(reconstruct(untrained, s.image), s.image);
    oracle_ok[i] = synth::attribute_oracle(rec) == s.spec;
  });
  const auto mean = [](const std::vector<double>& x) { return std::accumulate(x.begin(), x.end(), 0.0) / double(x.size()); };
  const auto usage = codebook_usage(codec, grids);

  std::size_t base_hit = 0, pattern_hit = 0, full_hit = 0;
  const std::size_t gens = ctx.cfg.eval.generations;
  for (std::size_t i = 0; i < gens; ++i) {
    const auto& s = data[first + i % n_eval];
    ConditionSet c;
    c.text = v.tokenize(s.caption);
    const auto res = decode(pred, v, c, nullptr, ctx.cfg.schedule, rng, ctx.cfg.temperature);
    const auto est = synth::attribute_oracle(decode(codec, res.grid));
    base_hit += est.base == s.spec.base;
    pattern_hit += est.pattern == s.spec.pattern;
    full_hit += est == s.spec;
  }

  Report r;
  r.add("eval.images", n_eval);
  r.add("codec.recon_mse", mean(mse_trained));
  r.add("codec.recon_mse_init", mean(mse_init));
  r.add("codec.used_fraction", usage.used_fraction);
  r.add("codec.oracle_accuracy", std::accumulate(oracle_ok.begin(), oracle_ok.end(), 0.0) / double(n_eval));
  r.add("text2img.generations", gens);
  r.add("text2img.base_match", double(base_hit) / double(gens));
  r.add("text2img.pattern_match", double(pattern_hit) / double(gens));
  r.add("text2img.full_match", double(full_hit) / double(gens));
  r.print();
  r.save(ctx.out / "eval.txt", ctx.cfg);
  return kOk;
}

// ---- bench ------------------------------------------------------------------

int cmd_bench(const Context& ctx, std::size_t runs) {
  const auto v = vocabulary(ctx.cfg);
  auto rng = ctx.rng(kBench);
  const bool trained = fs::exists(ctx.out / "predictor.ckpt");
  const Predictor pred = trained ? load_predictor(ctx) : Predictor(ctx.cfg.predictor, rng);
  using clock = std::chrono::steady_clock;
  double smart_s = 0.0, ar_s = 0.0;
  std::size_t smart_calls = 0, ar_calls = 0;
  for (std::size_t i = 0; i < runs; ++i) {
    auto t0 = clock::now();
    const auto s = decode(pred, v, {}, nullptr, ctx.cfg.schedule, rng, ctx.cfg.temperature);
    smart_s += std::chrono::duration<double>(clock::now() - t0).count();
    t0 = clock::now();
    const auto a = decode_greedy_ar_baseline(pred, v, {}, nullptr);
    ar_s += std::chrono::duration<double>(clock::now() - t0).count();
    smart_calls = s.trace.calls;
    ar_calls = a.calls;
  }

  // Call counts at a 16x16 grid (256 positions) with the same architecture.
  auto big_cfg = ctx.cfg.predictor;
  big_cfg.grid_h = big_cfg.grid_w = 16;
  big_cfg.max_len = std::max<std::size_t>(big_cfg.max_len, 256 + 64);
  const Predictor big(big_cfg, rng);
  const auto big_smart = decode(big, v, {}, nullptr, ctx.cfg.schedule, rng, ctx.cfg.temperature).trace.calls;
  const auto big_ar = decode_greedy_ar_baseline(big, v, {}, nullptr).calls;

  Report r;
  r.add("model", trained ? "trained" : "init");
  r.add("grid", std::to_string(pred.config().grid_h) + "x" + std::to_string(pred.config().grid_w));
  r.add("calls.smart", smart_calls);
  r.add("calls.ar", ar_calls);
  r.add("calls.ratio", double(ar_calls) / double(smart_calls));
  r.add("calls256.smart", big_smart);
  r.add("calls256.ar", big_ar);
  r.add("calls256.ratio", double(big_ar) / double(big_smart));
  r.save(ctx.out / "bench.txt", ctx.cfg);
  // Wall-clock goes to stdout only; bench.txt stays reproducible.
  r.add("wall.smart_ms", 1000.0 * smart_s / double(runs));
  r.add("wall.ar_ms", 1000.0 * ar_s / double(runs));
  r.add("wall.speedup", ar_s / smart_s);
  r.print();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Product-quantized image tokens with non-autoregressive mask-predict decoding"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "Sectioned key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Overrides [run] seed");
    sub->add_option("--out", o.out, "Artifact directory")->capture_default_str();
  };
  auto add_generate = [&](CLI::App* sub) {
    add_common(sub);
    sub->add_option("--task", o.task, "uncond|text2img|local-edit|text-local-edit|inpaint|outpaint|style-mix");
    sub->add_option("--box", o.boxes, "x,y,w,h in grid cells (repeatable)")->allow_extra_args(false);
    sub->add_option("--text", o.text, "Caption text");
    sub->add_option("--ref", o.refs, "Reference PPM image (repeatable)")->allow_extra_args(false);
    sub->add_option("--mix-levels", o.mix_levels, "Comma-separated style-mix levels")->capture_default_str();
  };
  auto* gen_data = app.add_subcommand("gen-data", "Render the toy dataset");
  auto* train_c = app.add_subcommand("train-codec", "Train the patch codec and product codebook");
  auto* train_n = app.add_subcommand("train-nar", "Train the token predictor");
  auto* generate = app.add_subcommand("generate", "Synthesize an image");
  auto* edit = app.add_subcommand("edit", "Edit a reference image");
  auto* eval = app.add_subcommand("eval", "Report reconstruction and text-match metrics");
  auto* bench = app.add_subcommand("bench", "Compare predictor calls and wall-clock against one-slot decoding");
  add_common(gen_data);
  add_common(train_c);
  add_common(train_n);
  add_generate(generate);
  add_generate(edit);
  add_common(eval);
  eval->add_flag("--quantizers", o.quantizers, "Only the VQ/RQ/PQ distortion table on synthetic vectors");
  add_common(bench);
  bench->add_option("--runs", o.bench_runs, "Timed decodes per method")->check(CLI::PositiveNumber)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    Context ctx;
    try {
      ctx.cfg = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path);
    } catch (const ArgumentError& e) {
      throw UsageError(std::string("config: ") + e.what());
    }
    if (o.seed) ctx.cfg.seed = *o.seed;
    ctx.out = o.out;
    fs::create_directories(ctx.out);
    for (const auto& l : config_lines(ctx.cfg)) std::cout << l << "\n";

    if (*gen_data) return cmd_gen_data(ctx);
    if (*train_c) return cmd_train_codec(ctx);
    if (*train_n) return cmd_train_nar(ctx);
    if (*generate) return cmd_generate(ctx, o, false);
    if (*edit) return cmd_generate(ctx, o, true);
    if (*eval) return o.quantizers ? cmd_eval_quantizers(ctx) : cmd_eval(ctx);
    if (*bench) return cmd_bench(ctx, o.bench_runs);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissing;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n" << e.diagnostic() << "\n";
    return kNumeric;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
