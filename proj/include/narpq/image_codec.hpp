#pragma once

// Patch encoder / decoder around a product quantizer, trained with the
// reconstruction + codebook + commitment objective and a straight-through
// gradient past quantization.

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "narpq/checkpoint.hpp"
#include "narpq/image.hpp"
#include "narpq/kv.hpp"
#include "narpq/numerics.hpp"
#include "narpq/pq_codec.hpp"
#include "narpq/token_grid.hpp"

namespace narpq {

struct CodecConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t patch = 4;
  std::size_t hidden = 128;
  std::size_t n_z = 16;
  std::size_t groups = 4;  // M
  std::size_t K = 32;

  std::size_t grid_h() const { return image_h / patch; }
  std::size_t grid_w() const { return image_w / patch; }
  std::size_t patch_dim() const { return patch * patch * 3; }
  std::size_t sub_dim() const { return n_z / groups; }

  void validate() const {
    if (patch == 0 || image_h % patch || image_w % patch) throw ArgumentError("codec: image dims must be multiples of patch");
    if (groups == 0 || n_z % groups) throw ArgumentError("codec: groups must divide n_z");
    if (K < 1 || hidden < 1) throw ArgumentError("codec: K and hidden must be positive");
  }

  KeyValues to_kv() const {
    return {{"image_h", std::to_string(image_h)}, {"image_w", std::to_string(image_w)},
            {"patch", std::to_string(patch)},     {"hidden", std::to_string(hidden)},
            {"n_z", std::to_string(n_z)},         {"groups", std::to_string(groups)},
            {"K", std::to_string(K)}};
  }

  static CodecConfig from_kv(const KeyValues& kv) {
    CodecConfig c;
    for (const auto& [k, v] : kv) {
      if (k == "image_h") c.image_h = to_size(k, v);
      else if (k == "image_w") c.image_w = to_size(k, v);
      else if (k == "patch") c.patch = to_size(k, v);
      else if (k == "hidden") c.hidden = to_size(k, v);
      else if (k == "n_z") c.n_z = to_size(k, v);
      else if (k == "groups") c.groups = to_size(k, v);
      else if (k == "K") c.K = to_size(k, v);
      else throw ArgumentError("codec: unknown config key '" + k + "'");
    }
    c.validate();
    return c;
  }
};

// Encoder output before quantization: [h*w, n_z].
struct LatentGrid {
  std::size_t h = 0;
  std::size_t w = 0;
  Tensor values;

  std::size_t n_z() const { return values.dim(1); }
};

class CodecParams {
 public:
  enum Slot : std::size_t { kEncW1, kEncB1, kEncW2, kEncB2, kDecW1, kDecB1, kDecW2, kDecB2, kCodebook0 };

  CodecParams() = default;

  CodecParams(const CodecConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t P = cfg.patch_dim(), H = cfg.hidden, Z = cfg.n_z;
    params_.emplace_back("enc.w1", randn({P, H}, 1.0 / std::sqrt(double(P)), rng));
    params_.emplace_back("enc.b1", Tensor({H}));
    params_.emplace_back("enc.w2", randn({H, Z}, 1.0 / std::sqrt(double(H)), rng));
    params_.emplace_back("enc.b2", Tensor({Z}));
    params_.emplace_back("dec.w1", randn({Z, H}, 1.0 / std::sqrt(double(Z)), rng));
    params_.emplace_back("dec.b1", Tensor({H}));
    params_.emplace_back("dec.w2", randn({H, P}, 1.0 / std::sqrt(double(H)), rng));
    params_.emplace_back("dec.b2", Tensor({P}, Scalar(0.5)));
    for (std::size_t m = 0; m < cfg.groups; ++m) {
      params_.emplace_back("codebook." + std::to_string(m), randn({cfg.K, cfg.sub_dim()}, 1.0, rng));
    }
  }

  const CodecConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  const Tensor& operator[](Slot s) const { return params_[s].value; }

  ProductCodebook codebook() const {
    ProductCodebook cb;
    for (std::size_t m = 0; m < cfg_.groups; ++m) cb.subs.push_back(SubCodebook{params_[kCodebook0 + m].value});
    return cb;
  }

  void set_codebook(const ProductCodebook& cb) {
    if (cb.groups() != cfg_.groups || cb.K() != cfg_.K || cb.sub_dim() != cfg_.sub_dim()) {
      throw ArgumentError("codec: codebook shape does not match config");
    }
    for (std::size_t m = 0; m < cfg_.groups; ++m) params_[kCodebook0 + m].value = cb.subs[m].codewords;
  }

  CheckpointSection to_section() const { return {"CODC", format_kv(cfg_.to_kv()), params_}; }

  static CodecParams from_section(const CheckpointSection& s) {
    CodecParams p;
    Rng rng(0);
    p = CodecParams(CodecConfig::from_kv(parse_kv(s.config)), rng);
    restore_params(s, p.params_);
    return p;
  }

 private:
  CodecConfig cfg_;
  std::vector<Param> params_;
};

namespace codec_detail {

inline void check_image(const CodecConfig& cfg, const Image& img) {
  if (img.height != cfg.image_h || img.width != cfg.image_w || img.pixels.size() != img.height * img.width * 3) {
    throw ArgumentError("codec: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        ", expected " + std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w));
  }
}

// [cells, patch*patch*3], cell-major then (py, px, channel).
inline MatrixRM patchify(const CodecConfig& cfg, const Image& img) {
  const std::size_t p = cfg.patch, gw = cfg.grid_w();
  MatrixRM out(static_cast<Eigen::Index>(cfg.grid_h() * gw), static_cast<Eigen::Index>(cfg.patch_dim()));
  for (std::size_t gr = 0; gr < cfg.grid_h(); ++gr) {
    for (std::size_t gc = 0; gc < gw; ++gc) {
      const auto row = static_cast<Eigen::Index>(gr * gw + gc);
      Eigen::Index col = 0;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          for (std::size_t ch = 0; ch < 3; ++ch) out(row, col++) = img.at(gr * p + py, gc * p + px, ch);
        }
      }
    }
  }
  return out;
}

inline Image unpatchify(const CodecConfig& cfg, const MatrixRM& patches) {
  const std::size_t p = cfg.patch, gw = cfg.grid_w();
  Image img(cfg.image_h, cfg.image_w);
  for (std::size_t gr = 0; gr < cfg.grid_h(); ++gr) {
    for (std::size_t gc = 0; gc < gw; ++gc) {
      const auto row = static_cast<Eigen::Index>(gr * gw + gc);
      Eigen::Index col = 0;
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          for (std::size_t ch = 0; ch < 3; ++ch) img.at(gr * p + py, gc * p + px, ch) = patches(row, col++);
        }
      }
    }
  }
  return img;
}

inline auto row_bias(const Tensor& b) { return b.vector().transpose(); }

struct EncoderPass {
  MatrixRM patches;
  MatrixRM hidden;  // tanh activations
  MatrixRM z_e;
};

inline EncoderPass run_encoder(const CodecParams& p, const Image& img) {
  EncoderPass e;
  e.patches = patchify(p.config(), img);
  e.hidden = ((e.patches * p[CodecParams::kEncW1].matrix()).rowwise() + row_bias(p[CodecParams::kEncB1])).array().tanh();
  e.z_e = (e.hidden * p[CodecParams::kEncW2].matrix()).rowwise() + row_bias(p[CodecParams::kEncB2]);
  return e;
}

struct DecoderPass {
  MatrixRM hidden;
  MatrixRM out;
};

inline DecoderPass run_decoder(const CodecParams& p, const MatrixRM& z) {
  DecoderPass d;
  d.hidden = ((z * p[CodecParams::kDecW1].matrix()).rowwise() + row_bias(p[CodecParams::kDecB1])).array().tanh();
  d.out = (d.hidden * p[CodecParams::kDecW2].matrix()).rowwise() + row_bias(p[CodecParams::kDecB2]);
  return d;
}

inline Image clamp_image(Image img) {
  for (auto& v : img.pixels) v = std::clamp(v, Scalar(0), Scalar(1));
  return img;
}

}  // namespace codec_detail

inline LatentGrid encode_latent(const CodecParams& params, const Image& image) {
  const auto& cfg = params.config();
  codec_detail::check_image(cfg, image);
  auto e = codec_detail::run_encoder(params, image);
  LatentGrid g{cfg.grid_h(), cfg.grid_w(), Tensor({cfg.grid_h() * cfg.grid_w(), cfg.n_z})};
  g.values.matrix() = e.z_e;
  return g;
}

inline TokenGrid quantize_latent(const ProductCodebook& cb, const LatentGrid& z) {
  TokenGrid grid(z.h, z.w, cb.groups());
  for (std::size_t pos = 0; pos < z.h * z.w; ++pos) {
    const auto q = quantize(cb, z.values.row(pos));
    std::copy(q.indices.begin(), q.indices.end(), grid.cell(pos).begin());
  }
  return grid;
}

inline TokenGrid encode(const CodecParams& params, const Image& image) {
  return quantize_latent(params.codebook(), encode_latent(params, image));
}

// Decoder output for an arbitrary latent grid, before clamping.
inline Image decode_latent_raw(const CodecParams& params, const MatrixRM& z) {
  return codec_detail::unpatchify(params.config(), codec_detail::run_decoder(params, z).out);
}

inline Image decode(const CodecParams& params, const TokenGrid& tokens) {
  const auto& cfg = params.config();
  if (tokens.h != cfg.grid_h() || tokens.w != cfg.grid_w() || tokens.M != cfg.groups) {
    throw ArgumentError("decode: token grid shape does not match codec");
  }
  const auto cb = params.codebook();
  MatrixRM z(static_cast<Eigen::Index>(tokens.cells()), static_cast<Eigen::Index>(cfg.n_z));
  for (std::size_t pos = 0; pos < tokens.cells(); ++pos) {
    const auto v = dequantize(cb, tokens.cell(pos));
    for (std::size_t j = 0; j < v.size(); ++j) z(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(j)) = v[j];
  }
  return codec_detail::clamp_image(decode_latent_raw(params, z));
}

// Values held fixed by the stop-gradient operator, captured at one parameter
// point. Evaluating codec_loss with an anchor gives the surrogate objective
// whose exact gradient is the straight-through gradient, which is what finite
// differences can check.
struct StopGradAnchor {
  MatrixRM z_e;
  MatrixRM z_q;
  std::vector<std::uint32_t> indices;  // cells * M
};

struct CodecLossTerms {
  double reconstruction = 0.0;  // ||x - x_hat||^2
  double codebook = 0.0;        // ||sg[E(x)] - z_q||^2
  double commitment = 0.0;      // ||sg[z_q] - E(x)||^2
  double total() const { return reconstruction + codebook + commitment; }
};

struct CodecLossDetail {
  MatrixRM decoder_input_grad;   // dL/dz_q through the decoder
  MatrixRM encoder_output_grad;  // dL/dE(x), straight-through + commitment
  MatrixRM z_e;
  MatrixRM z_q;
  std::vector<std::uint32_t> indices;
};

inline StopGradAnchor make_anchor(const CodecParams& params, const Image& image) {
  const auto& cfg = params.config();
  codec_detail::check_image(cfg, image);
  const auto cb = params.codebook();
  auto e = codec_detail::run_encoder(params, image);
  StopGradAnchor a{e.z_e, MatrixRM(e.z_e.rows(), e.z_e.cols()), {}};
  std::vector<Scalar> row(cfg.n_z);
  for (Eigen::Index i = 0; i < e.z_e.rows(); ++i) {
    for (std::size_t j = 0; j < cfg.n_z; ++j) row[j] = e.z_e(i, static_cast<Eigen::Index>(j));
    const auto q = quantize(cb, row);
    a.indices.insert(a.indices.end(), q.indices.begin(), q.indices.end());
    for (std::size_t j = 0; j < cfg.n_z; ++j) a.z_q(i, static_cast<Eigen::Index>(j)) = q.z_q[j];
  }
  return a;
}

// Loss for one image. When `grads` is given, gradients are accumulated into it
// (shaped like params.params()).
inline CodecLossTerms codec_loss(const CodecParams& params, const Image& image, GradBuffer* grads,
                                 const StopGradAnchor* anchor = nullptr, CodecLossDetail* detail = nullptr) {
  using namespace codec_detail;
  const auto& cfg = params.config();
  check_image(cfg, image);
  const std::size_t M = cfg.groups, dim = cfg.sub_dim();
  const auto n = static_cast<Eigen::Index>(cfg.grid_h() * cfg.grid_w());

  auto enc = run_encoder(params, image);
  const MatrixRM& z_e = enc.z_e;

  // Assignment and current codeword values.
  std::vector<std::uint32_t> idx;
  if (anchor) {
    idx = anchor->indices;
  } else {
    idx.resize(static_cast<std::size_t>(n) * M);
    std::vector<double> unused;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (std::size_t m = 0; m < M; ++m) {
        const auto& cw = params[static_cast<CodecParams::Slot>(CodecParams::kCodebook0 + m)];
        std::vector<Scalar> sub(dim);
        for (std::size_t j = 0; j < dim; ++j) sub[j] = z_e(i, static_cast<Eigen::Index>(m * dim + j));
        idx[static_cast<std::size_t>(i) * M + m] = static_cast<std::uint32_t>(detail::nearest(cw, sub.data(), nullptr));
      }
    }
  }
  MatrixRM z_q(n, static_cast<Eigen::Index>(cfg.n_z));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < M; ++m) {
      const auto& cw = params[static_cast<CodecParams::Slot>(CodecParams::kCodebook0 + m)];
      const std::size_t k = idx[static_cast<std::size_t>(i) * M + m];
      for (std::size_t j = 0; j < dim; ++j) z_q(i, static_cast<Eigen::Index>(m * dim + j)) = cw.at(k, j);
    }
  }

  const MatrixRM dec_in = anchor ? MatrixRM(z_e + (anchor->z_q - anchor->z_e)) : z_q;
  const MatrixRM& sg_ze = anchor ? anchor->z_e : z_e;
  const MatrixRM& sg_zq = anchor ? anchor->z_q : z_q;

  auto dec = run_decoder(params, dec_in);
  const MatrixRM diff = dec.out - enc.patches;
  CodecLossTerms terms;
  terms.reconstruction = diff.cast<double>().squaredNorm();
  terms.codebook = (sg_ze - z_q).cast<double>().squaredNorm();
  terms.commitment = (sg_zq - z_e).cast<double>().squaredNorm();

  if (grads || detail) {
    const MatrixRM d_out = Scalar(2) * diff;
    const MatrixRM d_dec_pre = (d_out * params[CodecParams::kDecW2].matrix().transpose()).array() *
                               (Scalar(1) - dec.hidden.array().square());
    const MatrixRM d_dec_in = d_dec_pre * params[CodecParams::kDecW1].matrix().transpose();
    const MatrixRM d_ze = d_dec_in + Scalar(2) * (z_e - sg_zq);
    const MatrixRM d_enc_pre = (d_ze * params[CodecParams::kEncW2].matrix().transpose()).array() *
                               (Scalar(1) - enc.hidden.array().square());
    if (grads) {
      auto& g = *grads;
      g[CodecParams::kDecW2].matrix() += dec.hidden.transpose() * d_out;
      g[CodecParams::kDecB2].vector() += d_out.colwise().sum().transpose();
      g[CodecParams::kDecW1].matrix() += dec_in.transpose() * d_dec_pre;
      g[CodecParams::kDecB1].vector() += d_dec_pre.colwise().sum().transpose();
      g[CodecParams::kEncW2].matrix() += enc.hidden.transpose() * d_ze;
      g[CodecParams::kEncB2].vector() += d_ze.colwise().sum().transpose();
      g[CodecParams::kEncW1].matrix() += enc.patches.transpose() * d_enc_pre;
      g[CodecParams::kEncB1].vector() += d_enc_pre.colwise().sum().transpose();
      for (Eigen::Index i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < M; ++m) {
          auto& gc = g[CodecParams::kCodebook0 + m];
          const std::size_t k = idx[static_cast<std::size_t>(i) * M + m];
          for (std::size_t j = 0; j < dim; ++j) {
            const auto col = static_cast<Eigen::Index>(m * dim + j);
            gc.at(k, j) += Scalar(2) * (z_q(i, col) - sg_ze(i, col));
          }
        }
      }
    }
    if (detail) {
      detail->decoder_input_grad = d_dec_in;
      detail->encoder_output_grad = d_ze;
      detail->z_e = z_e;
      detail->z_q = z_q;
      detail->indices = idx;
    }
  }
  return terms;
}

inline Image reconstruct(const CodecParams& params, const Image& image) { return decode(params, encode(params, image)); }

// Fraction of (group, codeword) pairs used at least once, plus the histogram.
struct CodebookUsage {
  std::vector<std::vector<std::size_t>> counts;  // [M][K]
  double used_fraction = 0.0;
};

inline CodebookUsage codebook_usage(const CodecParams& params, const std::vector<TokenGrid>& grids) {
  const auto& cfg = params.config();
  CodebookUsage u;
  u.counts.assign(cfg.groups, std::vector<std::size_t>(cfg.K, 0));
  for (const auto& g : grids) {
    for (std::size_t pos = 0; pos < g.cells(); ++pos) {
      for (std::size_t m = 0; m < cfg.groups; ++m) ++u.counts[m][g.cell(pos)[m]];
    }
  }
  std::size_t used = 0;
  for (const auto& row : u.counts) {
    for (auto c : row) used += c > 0;
  }
  u.used_fraction = static_cast<double>(used) / static_cast<double>(cfg.groups * cfg.K);
  return u;
}

struct TrainCodecConfig {
  std::size_t epochs = 16;
  std::size_t batch = 16;
  double lr = 1e-4;
  double momentum = 0.9;
  std::size_t warmup_epochs = 1;  // quantizer bypassed; codebook then seeded by k-means
  std::size_t kmeans_iters = 25;
  bool reseed_dead_codes = true;
  std::size_t max_steps = 0;  // 0 = no cap
};

struct CodecEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double recon_mse = 0.0;
  double used_fraction = 0.0;
  std::vector<std::vector<std::size_t>> usage;
};

namespace codec_detail {

inline Tensor collect_latents(const CodecParams& params, const std::vector<Image>& images, std::size_t max_images) {
  const auto& cfg = params.config();
  const std::size_t count = std::min(max_images, images.size());
  const std::size_t cells = cfg.grid_h() * cfg.grid_w();
  Tensor out({count * cells, cfg.n_z});
  for (std::size_t i = 0; i < count; ++i) {
    const auto z = encode_latent(params, images[i]);
    std::copy(z.values.values().begin(), z.values.values().end(), out.data() + i * cells * cfg.n_z);
  }
  return out;
}

// Loss of the bare autoencoder (decoder consumes E(x) directly).
inline double autoencoder_loss(const CodecParams& params, const Image& image, GradBuffer& g) {
  auto enc = run_encoder(params, image);
  auto dec = run_decoder(params, enc.z_e);
  const MatrixRM diff = dec.out - enc.patches;
  const MatrixRM d_out = Scalar(2) * diff;
  const MatrixRM d_dec_pre = (d_out * params[CodecParams::kDecW2].matrix().transpose()).array() *
                             (Scalar(1) - dec.hidden.array().square());
  const MatrixRM d_ze = d_dec_pre * params[CodecParams::kDecW1].matrix().transpose();
  const MatrixRM d_enc_pre = (d_ze * params[CodecParams::kEncW2].matrix().transpose()).array() *
                             (Scalar(1) - enc.hidden.array().square());
  g[CodecParams::kDecW2].matrix() += dec.hidden.transpose() * d_out;
  g[CodecParams::kDecB2].vector() += d_out.colwise().sum().transpose();
  g[CodecParams::kDecW1].matrix() += enc.z_e.transpose() * d_dec_pre;
  g[CodecParams::kDecB1].vector() += d_dec_pre.colwise().sum().transpose();
  g[CodecParams::kEncW2].matrix() += enc.hidden.transpose() * d_ze;
  g[CodecParams::kEncB2].vector() += d_ze.colwise().sum().transpose();
  g[CodecParams::kEncW1].matrix() += enc.patches.transpose() * d_enc_pre;
  g[CodecParams::kEncB1].vector() += d_enc_pre.colwise().sum().transpose();
  return diff.cast<double>().squaredNorm();
}

}  // namespace codec_detail

// Mini-batch training. Warm-up epochs fit the bare autoencoder; the codebook
// is then initialised by k-means on encoder outputs and all parameters are
// refined jointly. Codewords unused during an epoch are moved onto random
// encoder outputs.
inline CodecParams train_codec(const std::vector<Image>& images, const CodecConfig& cfg, const TrainCodecConfig& tc,
                               Rng& rng, const std::function<void(const CodecEpochLog&)>& on_epoch = {}) {
  if (images.empty()) throw ArgumentError("train_codec: dataset is empty");
  if (tc.batch < 1) throw ArgumentError("train_codec: batch must be >= 1");
  CodecParams params(cfg, rng);
  auto& ps = params.params();
  MomentumSgd opt(tc.lr, tc.momentum);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t cells = cfg.grid_h() * cfg.grid_w();
  const double pixels = static_cast<double>(cfg.image_h * cfg.image_w * 3);
  std::vector<GradBuffer> sample_grads;
  std::size_t steps = 0;

  auto check_finite = [&](double loss, std::size_t epoch) {
    if (!std::isfinite(loss)) {
      throw TrainingError("train_codec: loss diverged",
                          "epoch=" + std::to_string(epoch) + " step=" + std::to_string(steps) + " lr=" + from_double(tc.lr));
    }
  };

  const std::size_t total_epochs = tc.warmup_epochs + tc.epochs;
  for (std::size_t epoch = 0; epoch < total_epochs; ++epoch) {
    const bool warmup = epoch < tc.warmup_epochs;
    if (!warmup && epoch == tc.warmup_epochs) {
      const auto lat = codec_detail::collect_latents(params, images, std::max<std::size_t>(1, 4096 / cells));
      const auto cb = train_pq(lat, cfg.groups, cfg.K, tc.kmeans_iters, rng);
      params.set_codebook(cb);
    }
    rng.shuffle(order.begin(), order.end());
    CodecEpochLog log;
    log.epoch = epoch;
    log.usage.assign(cfg.groups, std::vector<std::size_t>(cfg.K, 0));
    double loss_sum = 0.0, recon_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch) {
      if (tc.max_steps && steps >= tc.max_steps) break;
      const std::size_t bs = std::min(tc.batch, order.size() - start);
      sample_grads.resize(bs);
      std::vector<CodecLossTerms> terms(bs);
      std::vector<std::vector<std::uint32_t>> used(bs);
      parallel_for(bs, [&](std::size_t b) {
        auto& g = sample_grads[b];
        if (g.empty()) g = make_grad_buffer(ps);
        clear(g);
        const auto& img = images[order[start + b]];
        if (warmup) {
          terms[b].reconstruction = codec_detail::autoencoder_loss(params, img, g);
        } else {
          CodecLossDetail d;
          terms[b] = codec_loss(params, img, &g, nullptr, &d);
          used[b] = std::move(d.indices);
        }
      });
      zero_grads(ps);
      for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t t = 0; t < ps.size(); ++t) ps[t].grad.vector() += sample_grads[b][t].vector();
        loss_sum += terms[b].total();
        recon_sum += terms[b].reconstruction;
        for (std::size_t i = 0; i < used[b].size(); ++i) ++log.usage[i % cfg.groups][used[b][i]];
      }
      for (auto& p : ps) p.grad.vector() /= static_cast<Scalar>(bs);
      check_finite(loss_sum, epoch);
      try {
        opt.step(ps);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("train_codec: ") + e.what(),
                            "epoch=" + std::to_string(epoch) + " step=" + std::to_string(steps));
      }
      ++steps;
    }
    log.loss = loss_sum / static_cast<double>(images.size());
    log.recon_mse = recon_sum / static_cast<double>(images.size()) / pixels;
    check_finite(log.loss, epoch);

    if (!warmup) {
      std::size_t used_count = 0;
      for (const auto& row : log.usage) {
        for (auto c : row) used_count += c > 0;
      }
      log.used_fraction = static_cast<double>(used_count) / static_cast<double>(cfg.groups * cfg.K);
      const bool last = epoch + 1 == total_epochs;
      if (tc.reseed_dead_codes && !last) {
        for (std::size_t m = 0; m < cfg.groups; ++m) {
          for (std::size_t k = 0; k < cfg.K; ++k) {
            if (log.usage[m][k] != 0) continue;
            const auto z = encode_latent(params, images[rng.index(images.size())]);
            const std::size_t cell = rng.index(cells);
            auto& cw = ps[CodecParams::kCodebook0 + m].value;
            for (std::size_t j = 0; j < cfg.sub_dim(); ++j) cw.at(k, j) = z.values.at(cell, m * cfg.sub_dim() + j);
          }
        }
      }
    }
    if (on_epoch) on_epoch(log);
    if (tc.max_steps && steps >= tc.max_steps) break;
  }
  return params;
}

}  // namespace narpq
