#pragma once

// Bidirectional pre-LN transformer over MultiModalSequence slots with M
// factorised output heads (one per product-quantization group).

#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "narpq/checkpoint.hpp"
#include "narpq/kv.hpp"
#include "narpq/numerics.hpp"
#include "narpq/sequence_protocol.hpp"

namespace narpq {

struct PredictorConfig {
  std::size_t layers = 4;
  std::size_t hidden = 128;
  std::size_t heads = 4;
  std::size_t ffn = 512;
  std::size_t M = 4;
  std::size_t K = 32;
  std::size_t text_vocab = 12;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t max_text = 16;
  std::size_t max_len = 256;
  double dropout = 0.0;
  double init_std = 0.02;

  void validate() const {
    if (layers < 1 || hidden < 1 || heads < 1 || ffn < 1) throw ArgumentError("predictor: sizes must be positive");
    if (hidden % heads != 0) throw ArgumentError("predictor: hidden must be divisible by heads");
    if (M < 1 || M > kMaxGroups || K < 2) throw ArgumentError("predictor: need 1 <= M <= 8 and K >= 2");
    if (text_vocab < 1 || grid_h < 1 || grid_w < 1 || max_text < 1) throw ArgumentError("predictor: empty vocabulary or grid");
    if (max_len < grid_h * grid_w + 2) throw ArgumentError("predictor: max_len shorter than the target grid");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ArgumentError("predictor: dropout must be in [0, 1)");
  }

  KeyValues to_kv() const {
    return {{"layers", std::to_string(layers)},   {"hidden", std::to_string(hidden)},
            {"heads", std::to_string(heads)},     {"ffn", std::to_string(ffn)},
            {"M", std::to_string(M)},             {"K", std::to_string(K)},
            {"text_vocab", std::to_string(text_vocab)}, {"grid_h", std::to_string(grid_h)},
            {"grid_w", std::to_string(grid_w)},   {"max_text", std::to_string(max_text)},
            {"max_len", std::to_string(max_len)}, {"dropout", from_double(dropout)},
            {"init_std", from_double(init_std)}};
  }

  static PredictorConfig from_kv(const KeyValues& kv) {
    PredictorConfig c;
    for (const auto& [k, v] : kv) {
      if (k == "layers") c.layers = to_size(k, v);
      else if (k == "hidden") c.hidden = to_size(k, v);
      else if (k == "heads") c.heads = to_size(k, v);
      else if (k == "ffn") c.ffn = to_size(k, v);
      else if (k == "M") c.M = to_size(k, v);
      else if (k == "K") c.K = to_size(k, v);
      else if (k == "text_vocab") c.text_vocab = to_size(k, v);
      else if (k == "grid_h") c.grid_h = to_size(k, v);
      else if (k == "grid_w") c.grid_w = to_size(k, v);
      else if (k == "max_text") c.max_text = to_size(k, v);
      else if (k == "max_len") c.max_len = to_size(k, v);
      else if (k == "dropout") c.dropout = to_double(k, v);
      else if (k == "init_std") c.init_std = to_double(k, v);
      else throw ArgumentError("predictor: unknown key '" + k + "'");
    }
    c.validate();
    return c;
  }
};

// Per-slot probabilities for a set of target positions.
struct SlotDistribution {
  std::size_t M = 0;
  std::size_t K = 0;
  std::vector<std::size_t> positions;
  Tensor probs;  // [positions, M * K]

  std::span<const Scalar> group(std::size_t slot, std::size_t m) const {
    return probs.row(slot).subspan(m * K, K);
  }

  // Geometric mean over groups of the probabilities of `chosen`.
  double score(std::size_t slot, std::span<const std::uint32_t> chosen) const {
    double log_sum = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      log_sum += std::log(std::max(static_cast<double>(group(slot, m)[chosen[m]]), 1e-30));
    }
    return std::exp(log_sum / static_cast<double>(M));
  }
};

class Predictor {
 public:
  Predictor() = default;

  Predictor(const PredictorConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::size_t H = cfg.hidden, F = cfg.ffn;
    const double s = cfg.init_std;
    add("emb.visual", randn({cfg.M * (cfg.K + 1), H}, s, rng));
    add("emb.text", randn({cfg.text_vocab + 1, H}, s, rng));
    add("emb.special", randn({4, H}, s, rng));
    add("pos.row", randn({cfg.grid_h, H}, s, rng));
    add("pos.col", randn({cfg.grid_w, H}, s, rng));
    add("pos.text", randn({cfg.max_text, H}, s, rng));
    add("emb.segment", randn({3, H}, s, rng));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      add(p + "ln1.g", Tensor({H}, Scalar(1)));
      add(p + "ln1.b", Tensor({H}));
      add(p + "attn.wq", randn({H, H}, s, rng));
      add(p + "attn.bq", Tensor({H}));
      add(p + "attn.wk", randn({H, H}, s, rng));
      add(p + "attn.bk", Tensor({H}));
      add(p + "attn.wv", randn({H, H}, s, rng));
      add(p + "attn.bv", Tensor({H}));
      add(p + "attn.wo", randn({H, H}, s, rng));
      add(p + "attn.bo", Tensor({H}));
      add(p + "ln2.g", Tensor({H}, Scalar(1)));
      add(p + "ln2.b", Tensor({H}));
      add(p + "ffn.w1", randn({H, F}, s, rng));
      add(p + "ffn.b1", Tensor({F}));
      add(p + "ffn.w2", randn({F, H}, s, rng));
      add(p + "ffn.b2", Tensor({H}));
    }
    add("lnf.g", Tensor({H}, Scalar(1)));
    add("lnf.b", Tensor({H}));
    for (std::size_t m = 0; m < cfg.M; ++m) {
      add("head" + std::to_string(m) + ".w", randn({H, cfg.K}, s, rng));
      add("head" + std::to_string(m) + ".b", Tensor({cfg.K}));
    }
  }

  const PredictorConfig& config() const { return cfg_; }
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }

  // Parameter indices.
  static constexpr std::size_t kEmbVisual = 0, kEmbText = 1, kEmbSpecial = 2, kPosRow = 3, kPosCol = 4,
                               kPosText = 5, kEmbSegment = 6, kLayer0 = 7, kPerLayer = 16;
  enum LayerSlot : std::size_t {
    kLn1G, kLn1B, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo, kLn2G, kLn2B, kW1, kB1, kW2, kB2
  };
  std::size_t layer_index(std::size_t l, LayerSlot s) const { return kLayer0 + l * kPerLayer + s; }
  std::size_t lnf_g() const { return kLayer0 + cfg_.layers * kPerLayer; }
  std::size_t lnf_b() const { return lnf_g() + 1; }
  std::size_t head_w(std::size_t m) const { return lnf_b() + 1 + 2 * m; }
  std::size_t head_b(std::size_t m) const { return head_w(m) + 1; }

  const Tensor& operator[](std::size_t i) const { return params_[i].value; }

  // Token ids follow the Vocabulary layout for (K, text_vocab).
  std::uint32_t visual_mask() const { return static_cast<std::uint32_t>(cfg_.K); }
  std::uint32_t text_base() const { return static_cast<std::uint32_t>(cfg_.K + 1); }
  std::uint32_t text_mask() const { return static_cast<std::uint32_t>(cfg_.K + 1 + cfg_.text_vocab); }
  std::uint32_t eov() const { return text_mask() + 1; }

  CheckpointSection to_section() const { return {"NARP", format_kv(cfg_.to_kv()), params_}; }

  static Predictor from_section(const CheckpointSection& s) {
    Rng rng(0);
    Predictor p(PredictorConfig::from_kv(parse_kv(s.config)), rng);
    restore_params(s, p.params_);
    return p;
  }

 private:
  void add(std::string name, Tensor t) { params_.emplace_back(std::move(name), std::move(t)); }

  PredictorConfig cfg_;
  std::vector<Param> params_;
};

namespace nar_detail {

using VectorS = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr Scalar kLnEps = Scalar(1e-5);

struct LnCache {
  MatrixRM xhat;
  VectorS rstd;
};

inline MatrixRM layer_norm(const MatrixRM& x, const Tensor& g, const Tensor& b, LnCache* cache) {
  const auto n = x.rows();
  const auto d = static_cast<Scalar>(x.cols());
  MatrixRM xhat(n, x.cols());
  VectorS rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mu = x.row(i).sum() / d;
    const auto centered = (x.row(i).array() - mu).matrix();
    const Scalar var = centered.squaredNorm() / d;
    rstd(i) = Scalar(1) / std::sqrt(var + kLnEps);
    xhat.row(i) = centered * rstd(i);
  }
  MatrixRM y = (xhat.array().rowwise() * g.vector().transpose().array()).rowwise() + b.vector().transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

inline MatrixRM layer_norm_backward(const MatrixRM& dy, const LnCache& c, const Tensor& g, Tensor& dg, Tensor& db) {
  dg.vector() += (dy.array() * c.xhat.array()).colwise().sum().matrix().transpose();
  db.vector() += dy.colwise().sum().transpose();
  const MatrixRM dxhat = dy.array().rowwise() * g.vector().transpose().array();
  const auto d = static_cast<Scalar>(dy.cols());
  MatrixRM dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const Scalar mean_d = dxhat.row(i).sum() / d;
    const Scalar mean_dx = dxhat.row(i).dot(c.xhat.row(i)) / d;
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - mean_d - c.xhat.row(i).array() * mean_dx).matrix();
  }
  return dx;
}

inline constexpr Scalar kGeluC = Scalar(0.7978845608028654);  // sqrt(2/pi)

inline Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(kGeluC * (x + Scalar(0.044715) * x * x * x)));
}

inline Scalar gelu_grad(Scalar x) {
  const Scalar t = std::tanh(kGeluC * (x + Scalar(0.044715) * x * x * x));
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * x * (Scalar(1) - t * t) * kGeluC * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
}

struct LayerCache {
  MatrixRM x;
  LnCache ln1;
  MatrixRM a;
  MatrixRM q, k, v;
  std::vector<MatrixRM> probs;
  MatrixRM ctx;
  MatrixRM drop1;  // dropout keep-mask scaled by 1/(1-p); empty when off
  MatrixRM x2;
  LnCache ln2;
  MatrixRM b;
  MatrixRM u;
  MatrixRM f;
  MatrixRM drop2;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  std::vector<std::size_t> rows;  // sequence rows fed to the heads
  LnCache lnf;
  MatrixRM h;                     // final-LN output at `rows`
  std::vector<MatrixRM> logits;   // per group, [rows, K]
};

inline std::size_t segment_index(Segment s) { return static_cast<std::size_t>(s); }

inline void check_sequence(const Predictor& p, const MultiModalSequence& seq) {
  const auto& cfg = p.config();
  if (seq.size() > cfg.max_len) {
    throw ArgumentError("predictor: sequence length " + std::to_string(seq.size()) + " exceeds max_len " +
                        std::to_string(cfg.max_len));
  }
  if (seq.M != cfg.M || seq.grid_h != cfg.grid_h || seq.grid_w != cfg.grid_w) {
    throw ArgumentError("predictor: sequence does not match the configured grid");
  }
  for (const auto& s : seq.slots) {
    switch (s.kind) {
      case SlotKind::Visual:
        for (std::size_t m = 0; m < cfg.M; ++m) {
          if (s.ids[m] > cfg.K) throw IndexError("predictor: visual id out of range");
        }
        if (s.row >= cfg.grid_h || s.col >= cfg.grid_w) throw IndexError("predictor: grid position out of range");
        break;
      case SlotKind::Text:
        if (s.ids[0] < p.text_base() || s.ids[0] > p.text_mask()) throw IndexError("predictor: text id out of range");
        if (s.pos >= cfg.max_text) throw IndexError("predictor: text position out of range");
        break;
      case SlotKind::Special:
        if (s.ids[0] < p.eov() || s.ids[0] > p.eov() + 3) throw IndexError("predictor: special id out of range");
        break;
    }
  }
}

inline MatrixRM embed(const Predictor& p, const MultiModalSequence& seq) {
  const auto& cfg = p.config();
  MatrixRM x = MatrixRM::Zero(static_cast<Eigen::Index>(seq.size()), static_cast<Eigen::Index>(cfg.hidden));
  const auto& vis = p[Predictor::kEmbVisual];
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& s = seq.slots[i];
    auto row = x.row(static_cast<Eigen::Index>(i));
    switch (s.kind) {
      case SlotKind::Visual:
        for (std::size_t m = 0; m < cfg.M; ++m) {
          row += vis.matrix().row(static_cast<Eigen::Index>(m * (cfg.K + 1) + s.ids[m]));
        }
        row += p[Predictor::kPosRow].matrix().row(s.row);
        row += p[Predictor::kPosCol].matrix().row(s.col);
        break;
      case SlotKind::Text:
        row += p[Predictor::kEmbText].matrix().row(s.ids[0] - p.text_base());
        row += p[Predictor::kPosText].matrix().row(s.pos);
        break;
      case SlotKind::Special:
        row += p[Predictor::kEmbSpecial].matrix().row(s.ids[0] - p.eov());
        break;
    }
    row += p[Predictor::kEmbSegment].matrix().row(static_cast<Eigen::Index>(segment_index(s.segment)));
  }
  return x;
}

inline void embed_backward(const Predictor& p, const MultiModalSequence& seq, const MatrixRM& dx, GradBuffer& g) {
  const auto& cfg = p.config();
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& s = seq.slots[i];
    const auto d = dx.row(static_cast<Eigen::Index>(i));
    switch (s.kind) {
      case SlotKind::Visual:
        for (std::size_t m = 0; m < cfg.M; ++m) {
          g[Predictor::kEmbVisual].matrix().row(static_cast<Eigen::Index>(m * (cfg.K + 1) + s.ids[m])) += d;
        }
        g[Predictor::kPosRow].matrix().row(s.row) += d;
        g[Predictor::kPosCol].matrix().row(s.col) += d;
        break;
      case SlotKind::Text:
        g[Predictor::kEmbText].matrix().row(s.ids[0] - p.text_base()) += d;
        g[Predictor::kPosText].matrix().row(s.pos) += d;
        break;
      case SlotKind::Special:
        g[Predictor::kEmbSpecial].matrix().row(s.ids[0] - p.eov()) += d;
        break;
    }
    g[Predictor::kEmbSegment].matrix().row(static_cast<Eigen::Index>(segment_index(s.segment))) += d;
  }
}

inline MatrixRM dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  MatrixRM m(rows, cols);
  const auto keep = static_cast<Scalar>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < rate ? Scalar(0) : keep;
  return m;
}

inline auto bias(const Tensor& t) { return t.vector().transpose(); }

// Runs the network; fills `cache` when given. `rows` are sequence indices
// whose head outputs are needed. `dropout_rng` enables dropout.
inline std::vector<MatrixRM> forward_rows(const Predictor& p, const MultiModalSequence& seq,
                                          const std::vector<std::size_t>& rows, ForwardCache* cache,
                                          Rng* dropout_rng = nullptr) {
  const auto& cfg = p.config();
  check_sequence(p, seq);
  const auto L = static_cast<Eigen::Index>(seq.size());
  const auto H = static_cast<Eigen::Index>(cfg.hidden);
  const auto nh = static_cast<Eigen::Index>(cfg.heads);
  const Eigen::Index dh = H / nh;
  const auto scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
  const bool drop = dropout_rng && cfg.dropout > 0.0;

  MatrixRM x = embed(p, seq);
  if (cache) cache->layers.resize(cfg.layers);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto P = [&](Predictor::LayerSlot s) -> const Tensor& { return p[p.layer_index(l, s)]; };
    LayerCache local;
    LayerCache& c = cache ? cache->layers[l] : local;
    c.x = x;
    c.a = layer_norm(x, P(Predictor::kLn1G), P(Predictor::kLn1B), &c.ln1);
    c.q = (c.a * P(Predictor::kWq).matrix()).rowwise() + bias(P(Predictor::kBq));
    c.k = (c.a * P(Predictor::kWk).matrix()).rowwise() + bias(P(Predictor::kBk));
    c.v = (c.a * P(Predictor::kWv).matrix()).rowwise() + bias(P(Predictor::kBv));
    c.ctx.resize(L, H);
    c.probs.resize(static_cast<std::size_t>(nh));
    for (Eigen::Index h = 0; h < nh; ++h) {
      MatrixRM s = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < L; ++i) {
        auto r = s.row(i);
        r.array() = (r.array() - r.maxCoeff()).exp();
        r /= r.sum();
      }
      c.ctx.middleCols(h * dh, dh) = s * c.v.middleCols(h * dh, dh);
      c.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    MatrixRM o = (c.ctx * P(Predictor::kWo).matrix()).rowwise() + bias(P(Predictor::kBo));
    if (drop) {
      c.drop1 = dropout_mask(L, H, cfg.dropout, *dropout_rng);
      o.array() *= c.drop1.array();
    }
    c.x2 = x + o;
    c.b = layer_norm(c.x2, P(Predictor::kLn2G), P(Predictor::kLn2B), &c.ln2);
    c.u = (c.b * P(Predictor::kW1).matrix()).rowwise() + bias(P(Predictor::kB1));
    c.f = c.u.unaryExpr([](Scalar v) { return gelu(v); });
    MatrixRM y = (c.f * P(Predictor::kW2).matrix()).rowwise() + bias(P(Predictor::kB2));
    if (drop) {
      c.drop2 = dropout_mask(L, H, cfg.dropout, *dropout_rng);
      y.array() *= c.drop2.array();
    }
    x = c.x2 + y;
  }

  MatrixRM sel(static_cast<Eigen::Index>(rows.size()), H);
  for (std::size_t r = 0; r < rows.size(); ++r) sel.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(rows[r]));
  LnCache lnf_local;
  MatrixRM hf = layer_norm(sel, p[p.lnf_g()], p[p.lnf_b()], cache ? &cache->lnf : &lnf_local);
  std::vector<MatrixRM> logits(cfg.M);
  for (std::size_t m = 0; m < cfg.M; ++m) {
    logits[m] = (hf * p[p.head_w(m)].matrix()).rowwise() + bias(p[p.head_b(m)]);
  }
  if (cache) {
    cache->rows = rows;
    cache->h = std::move(hf);
    cache->logits = logits;
  }
  return logits;
}

// Backward from per-group logit gradients (same shape as cache.logits).
inline void backward(const Predictor& p, const MultiModalSequence& seq, const ForwardCache& c,
                     const std::vector<MatrixRM>& dlogits, GradBuffer& g) {
  const auto& cfg = p.config();
  const auto L = static_cast<Eigen::Index>(seq.size());
  const auto H = static_cast<Eigen::Index>(cfg.hidden);
  const auto nh = static_cast<Eigen::Index>(cfg.heads);
  const Eigen::Index dh = H / nh;
  const auto scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));

  MatrixRM dh_sel = MatrixRM::Zero(c.h.rows(), H);
  for (std::size_t m = 0; m < cfg.M; ++m) {
    g[p.head_w(m)].matrix() += c.h.transpose() * dlogits[m];
    g[p.head_b(m)].vector() += dlogits[m].colwise().sum().transpose();
    dh_sel += dlogits[m] * p[p.head_w(m)].matrix().transpose();
  }
  const MatrixRM dsel = layer_norm_backward(dh_sel, c.lnf, p[p.lnf_g()], g[p.lnf_g()], g[p.lnf_b()]);
  MatrixRM dx = MatrixRM::Zero(L, H);
  for (std::size_t r = 0; r < c.rows.size(); ++r) dx.row(static_cast<Eigen::Index>(c.rows[r])) += dsel.row(static_cast<Eigen::Index>(r));

  for (std::size_t li = cfg.layers; li-- > 0;) {
    const auto& lc = c.layers[li];
    auto P = [&](Predictor::LayerSlot s) -> const Tensor& { return p[p.layer_index(li, s)]; };
    auto G = [&](Predictor::LayerSlot s) -> Tensor& { return g[p.layer_index(li, s)]; };

    // x = x2 + drop2 * (f W2 + b2)
    MatrixRM dy = dx;
    if (lc.drop2.size()) dy.array() *= lc.drop2.array();
    G(Predictor::kW2).matrix() += lc.f.transpose() * dy;
    G(Predictor::kB2).vector() += dy.colwise().sum().transpose();
    MatrixRM du = dy * P(Predictor::kW2).matrix().transpose();
    du.array() *= lc.u.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
    G(Predictor::kW1).matrix() += lc.b.transpose() * du;
    G(Predictor::kB1).vector() += du.colwise().sum().transpose();
    const MatrixRM db = du * P(Predictor::kW1).matrix().transpose();
    MatrixRM dx2 = dx + layer_norm_backward(db, lc.ln2, P(Predictor::kLn2G), G(Predictor::kLn2G), G(Predictor::kLn2B));

    // x2 = x + drop1 * (ctx Wo + bo)
    MatrixRM dout = dx2;
    if (lc.drop1.size()) dout.array() *= lc.drop1.array();
    G(Predictor::kWo).matrix() += lc.ctx.transpose() * dout;
    G(Predictor::kBo).vector() += dout.colwise().sum().transpose();
    const MatrixRM dctx = dout * P(Predictor::kWo).matrix().transpose();
    MatrixRM dq(L, H), dk(L, H), dv(L, H);
    for (Eigen::Index h = 0; h < nh; ++h) {
      const MatrixRM& pr = lc.probs[static_cast<std::size_t>(h)];
      const auto dctx_h = dctx.middleCols(h * dh, dh);
      MatrixRM dp = dctx_h * lc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = pr.transpose() * dctx_h;
      const VectorS rowdot = (dp.array() * pr.array()).rowwise().sum();
      MatrixRM ds = (pr.array() * (dp.colwise() - rowdot).array()) * scale;
      dq.middleCols(h * dh, dh) = ds * lc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * lc.q.middleCols(h * dh, dh);
    }
    G(Predictor::kWq).matrix() += lc.a.transpose() * dq;
    G(Predictor::kBq).vector() += dq.colwise().sum().transpose();
    G(Predictor::kWk).matrix() += lc.a.transpose() * dk;
    G(Predictor::kBk).vector() += dk.colwise().sum().transpose();
    G(Predictor::kWv).matrix() += lc.a.transpose() * dv;
    G(Predictor::kBv).vector() += dv.colwise().sum().transpose();
    const MatrixRM da = dq * P(Predictor::kWq).matrix().transpose() + dk * P(Predictor::kWk).matrix().transpose() +
                        dv * P(Predictor::kWv).matrix().transpose();
    dx = dx2 + layer_norm_backward(da, lc.ln1, P(Predictor::kLn1G), G(Predictor::kLn1G), G(Predictor::kLn1B));
  }
  embed_backward(p, seq, dx, g);
}

}  // namespace nar_detail

// Distributions at the given target positions (all target slots by default).
inline SlotDistribution forward(const Predictor& p, const MultiModalSequence& seq,
                                std::vector<std::size_t> positions = {}) {
  const auto& cfg = p.config();
  if (positions.empty()) {
    positions.resize(seq.target_count());
    std::iota(positions.begin(), positions.end(), 0);
  }
  std::vector<std::size_t> rows;
  rows.reserve(positions.size());
  for (auto pos : positions) {
    if (pos >= seq.target_count()) throw IndexError("forward: target position out of range");
    rows.push_back(seq.target_begin + pos);
  }
  auto logits = nar_detail::forward_rows(p, seq, rows, nullptr);
  SlotDistribution d;
  d.M = cfg.M;
  d.K = cfg.K;
  d.positions = std::move(positions);
  d.probs = Tensor({d.positions.size(), cfg.M * cfg.K});
  for (std::size_t r = 0; r < d.positions.size(); ++r) {
    auto row = d.probs.row(r);
    for (std::size_t m = 0; m < cfg.M; ++m) {
      auto out = row.subspan(m * cfg.K, cfg.K);
      for (std::size_t k = 0; k < cfg.K; ++k) out[k] = logits[m](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
      softmax_inplace(out);
    }
  }
  return d;
}

// Mean cross-entropy over (masked position, group). Gradients are accumulated
// into `grads` when given.
inline double nar_loss(const Predictor& p, const MultiModalSequence& masked, const TokenGrid& truth,
                       std::span<const std::size_t> positions, GradBuffer* grads, Rng* dropout_rng = nullptr) {
  const auto& cfg = p.config();
  if (positions.empty()) throw ArgumentError("nar_loss: empty mask set");
  if (truth.h != cfg.grid_h || truth.w != cfg.grid_w || truth.M != cfg.M) {
    throw ArgumentError("nar_loss: truth grid does not match configuration");
  }
  std::vector<std::size_t> rows;
  for (auto pos : positions) {
    if (pos >= masked.target_count()) throw IndexError("nar_loss: position out of range");
    rows.push_back(masked.target_begin + pos);
  }
  nar_detail::ForwardCache cache;
  auto logits = nar_detail::forward_rows(p, masked, rows, grads ? &cache : nullptr, dropout_rng);
  const double denom = static_cast<double>(positions.size() * cfg.M);
  double loss = 0.0;
  std::vector<MatrixRM> dlogits(cfg.M, MatrixRM(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cfg.K)));
  std::vector<Scalar> buf(cfg.K);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto cell = truth.cell(positions[r]);
    for (std::size_t m = 0; m < cfg.M; ++m) {
      for (std::size_t k = 0; k < cfg.K; ++k) buf[k] = logits[m](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
      const auto x = softmax_xent(buf, cell[m]);
      loss += x.loss;
      for (std::size_t k = 0; k < cfg.K; ++k) {
        dlogits[m](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = static_cast<Scalar>(x.grad[k] / denom);
      }
    }
  }
  loss /= denom;
  if (grads) nar_detail::backward(p, masked, cache, dlogits, *grads);
  return loss;
}


// One optimizer update on a batch. Per-example gradients are reduced in batch
// order, so the result does not depend on the worker count.
inline double train_step(Predictor& p, std::span<const TrainingExample> batch, MomentumSgd& opt, Rng& rng,
                         std::vector<GradBuffer>* scratch = nullptr) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  auto& ps = p.params();
  std::vector<GradBuffer> local;
  auto& bufs = scratch ? *scratch : local;
  bufs.resize(std::max(bufs.size(), batch.size()));
  std::vector<double> losses(batch.size());
  std::vector<Rng> drop_rngs;
  for (std::size_t b = 0; b < batch.size(); ++b) drop_rngs.push_back(rng.fork(rng.next_u64()));
  parallel_for(batch.size(), [&](std::size_t b) {
    auto& g = bufs[b];
    if (g.empty()) g = make_grad_buffer(ps);
    clear(g);
    losses[b] = nar_loss(p, batch[b].sequence, batch[b].truth, batch[b].masked, &g, &drop_rngs[b]);
  });
  zero_grads(ps);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    loss += losses[b];
    for (std::size_t t = 0; t < ps.size(); ++t) ps[t].grad.vector() += bufs[b][t].vector();
  }
  loss /= static_cast<double>(batch.size());
  if (!std::isfinite(loss)) throw TrainingError("train_step: non-finite loss", "loss=" + from_double(loss));
  const auto inv = static_cast<Scalar>(1.0 / static_cast<double>(batch.size()));
  for (auto& prm : ps) prm.grad.vector() *= inv;
  try {
    opt.step(ps);
  } catch (const NumericError& e) {
    throw TrainingError(std::string("train_step: ") + e.what(), "loss=" + from_double(loss));
  }
  return loss;
}

struct TrainNarConfig {
  std::size_t steps = 3000;
  std::size_t batch = 16;
  double lr = 0.1;
  double momentum = 0.9;
  double clip = 1.0;
  std::size_t log_every = 100;
};

struct NarLog {
  std::size_t step = 0;  // steps completed
  double loss = 0.0;     // mean over the last log_every steps
};

// Samples training examples (condition combo, crops, mask strategy) from the
// token dataset on the fly. `captions[i]` are word indices for `grids[i]`.
inline Predictor train_predictor(const std::vector<TokenGrid>& grids,
                                 const std::vector<std::vector<std::uint32_t>>& captions, const Vocabulary& vocab,
                                 const PredictorConfig& cfg, const TrainNarConfig& tc, Rng& rng,
                                 const std::function<void(const NarLog&)>& on_log = {}) {
  if (grids.empty() || grids.size() != captions.size()) {
    throw ArgumentError("train_predictor: need one caption per grid and a non-empty dataset");
  }
  if (tc.batch < 1) throw ArgumentError("train_predictor: batch must be >= 1");
  Predictor p(cfg, rng);
  MomentumSgd opt(tc.lr, tc.momentum, tc.clip);
  ProtocolConfig pc;
  pc.grid_h = cfg.grid_h;
  pc.grid_w = cfg.grid_w;
  pc.max_text = cfg.max_text;
  std::vector<GradBuffer> scratch;
  std::vector<TrainingExample> batch(tc.batch);
  double acc = 0.0;
  std::size_t acc_n = 0;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    for (auto& ex : batch) {
      const std::size_t i = rng.index(grids.size());
      ex = make_training_example(vocab, grids[i], captions[i], pc, rng);
    }
    acc += train_step(p, batch, opt, rng, &scratch);
    ++acc_n;
    const bool last = step + 1 == tc.steps;
    if (on_log && (last || (tc.log_every && (step + 1) % tc.log_every == 0))) {
      on_log({step + 1, acc / static_cast<double>(acc_n)});
      acc = 0.0;
      acc_n = 0;
    }
  }
  return p;
}

}  // namespace narpq
