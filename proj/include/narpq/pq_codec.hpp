#pragma once

// Vector, residual and product quantizers trained by k-means.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "narpq/io.hpp"
#include "narpq/numerics.hpp"

namespace narpq {

struct SubCodebook {
  Tensor codewords;  // [K, dim]

  std::size_t K() const { return codewords.dim(0); }
  std::size_t dim() const { return codewords.dim(1); }
};

struct ProductCodebook {
  std::vector<SubCodebook> subs;

  std::size_t groups() const { return subs.size(); }
  std::size_t K() const { return subs.at(0).K(); }
  std::size_t sub_dim() const { return subs.at(0).dim(); }
  std::size_t n_z() const { return groups() * sub_dim(); }

  void validate() const {
    if (subs.empty()) throw ArgumentError("product codebook needs at least one group");
    for (const auto& s : subs) {
      if (s.codewords.rank() != 2 || s.K() != K() || s.dim() != sub_dim()) {
        throw ArgumentError("sub-codebooks must share K and dimension");
      }
    }
  }

  bool operator==(const ProductCodebook& o) const {
    if (subs.size() != o.subs.size()) return false;
    for (std::size_t m = 0; m < subs.size(); ++m) {
      if (!(subs[m].codewords == o.subs[m].codewords)) return false;
    }
    return true;
  }
};

struct QuantResult {
  std::vector<std::uint32_t> indices;  // one per group (or per level)
  std::vector<Scalar> z_q;
  double sq_err = 0.0;
  std::vector<double> group_err;
};

namespace detail {

inline double sq_dist(const Scalar* a, const Scalar* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

// Nearest codeword, ties to the lowest index.
inline std::size_t nearest(const Tensor& codewords, const Scalar* x, double* err_out) {
  const std::size_t K = codewords.dim(0), dim = codewords.dim(1);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < K; ++k) {
    const double d = sq_dist(x, codewords.data() + k * dim, dim);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  if (err_out) *err_out = best_d;
  return best;
}

inline Tensor columns(const Tensor& data, std::size_t begin, std::size_t width) {
  const std::size_t n = data.dim(0), stride = data.dim(1);
  Tensor out({n, width});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(data.data() + i * stride + begin, width, out.data() + i * width);
  }
  return out;
}

inline void jitter_row(Tensor& t, std::size_t r, const Scalar* base, Rng& rng) {
  const std::size_t dim = t.dim(1);
  for (std::size_t j = 0; j < dim; ++j) {
    const double scale = 1e-3 * (1.0 + std::abs(static_cast<double>(base[j])));
    t.at(r, j) = static_cast<Scalar>(base[j] + rng.normal() * scale);
  }
}

}  // namespace detail

struct KMeansOptions {
  std::size_t iters = 25;
  double rel_tol = 1e-6;
};

struct KMeansResult {
  Tensor centroids;             // [K, dim]
  std::vector<double> history;  // mean squared distortion after init and each iteration
};

// Lloyd's algorithm with k-means++ seeding. Empty clusters are moved onto the
// point with the largest current error.
inline KMeansResult kmeans(const Tensor& data, std::size_t K, const KMeansOptions& opt, Rng& rng) {
  if (data.rank() != 2) throw ArgumentError("kmeans: data must be [N, dim]");
  const std::size_t N = data.dim(0), dim = data.dim(1);
  if (K < 1) throw ArgumentError("kmeans: K must be positive");
  if (N < K) throw ArgumentError("kmeans: fewer vectors than codewords");
  if (opt.iters < 1) throw ArgumentError("kmeans: iters must be >= 1");
  if (!data.all_finite()) throw NumericError("kmeans: non-finite input");

  KMeansResult res{Tensor({K, dim}), {}};
  Tensor& C = res.centroids;
  auto point = [&](std::size_t i) { return data.data() + i * dim; };

  // k-means++ seeding.
  std::vector<double> d2(N);
  const std::size_t first = rng.index(N);
  std::copy_n(point(first), dim, C.data());
  for (std::size_t i = 0; i < N; ++i) d2[i] = detail::sq_dist(point(i), C.data(), dim);
  for (std::size_t k = 1; k < K; ++k) {
    double total = 0.0;
    for (auto v : d2) total += v;
    if (total > 0.0) {
      const std::size_t pick = rng.categorical(std::span<const double>(d2));
      std::copy_n(point(pick), dim, C.data() + k * dim);
    } else {
      detail::jitter_row(C, k, point(rng.index(N)), rng);
    }
    for (std::size_t i = 0; i < N; ++i) {
      d2[i] = std::min(d2[i], detail::sq_dist(point(i), C.data() + k * dim, dim));
    }
  }

  std::vector<std::uint32_t> assign(N);
  std::vector<double> err(N);
  auto assign_all = [&] {
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      assign[i] = static_cast<std::uint32_t>(detail::nearest(C, point(i), &err[i]));
      total += err[i];
    }
    return total / static_cast<double>(N);
  };

  res.history.push_back(assign_all());
  std::vector<double> sums(K * dim);
  std::vector<std::size_t> counts(K);
  for (std::size_t it = 0; it < opt.iters; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < N; ++i) {
      const std::size_t k = assign[i];
      ++counts[k];
      for (std::size_t j = 0; j < dim; ++j) sums[k * dim + j] += point(i)[j];
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (counts[k] == 0) continue;
      for (std::size_t j = 0; j < dim; ++j) {
        C.at(k, j) = static_cast<Scalar>(sums[k * dim + j] / static_cast<double>(counts[k]));
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (counts[k] != 0) continue;
      const auto worst = static_cast<std::size_t>(std::max_element(err.begin(), err.end()) - err.begin());
      if (err[worst] > 0.0) {
        std::copy_n(point(worst), dim, C.data() + k * dim);
        err[worst] = 0.0;
      } else {
        detail::jitter_row(C, k, C.data(), rng);
      }
    }
    const double prev = res.history.back();
    const double cur = assign_all();
    res.history.push_back(cur);
    if (prev <= 0.0 || (prev - cur) < opt.rel_tol * prev) break;
  }

  // Keep codewords pairwise distinct. A duplicate never owns points (ties go
  // to the lower index), so moving it cannot raise the distortion.
  for (std::size_t k = 1; k < K; ++k) {
    for (std::size_t j = 0; j < k; ++j) {
      if (std::equal(C.row(k).begin(), C.row(k).end(), C.row(j).begin())) {
        const std::vector<Scalar> base(C.row(j).begin(), C.row(j).end());
        detail::jitter_row(C, k, base.data(), rng);
        j = static_cast<std::size_t>(-1);  // recheck against all earlier rows
      }
    }
  }
  return res;
}

struct PqTrainLog {
  std::vector<std::vector<double>> group_history;  // per group, per iteration
};

inline ProductCodebook train_pq(const Tensor& vectors, std::size_t M, std::size_t K, std::size_t iters, Rng& rng,
                                PqTrainLog* log = nullptr) {
  if (vectors.rank() != 2) throw ArgumentError("train_pq: vectors must be [N, n_z]");
  const std::size_t n_z = vectors.dim(1);
  if (M < 1 || n_z % M != 0) throw ArgumentError("train_pq: M must divide n_z");
  if (vectors.dim(0) < K) throw ArgumentError("train_pq: fewer vectors than codewords");
  const std::size_t dim = n_z / M;
  ProductCodebook cb;
  for (std::size_t m = 0; m < M; ++m) {
    const Tensor sub = M == 1 ? vectors : detail::columns(vectors, m * dim, dim);
    auto km = kmeans(sub, K, KMeansOptions{iters, 1e-6}, rng);
    if (log) log->group_history.push_back(std::move(km.history));
    cb.subs.push_back(SubCodebook{std::move(km.centroids)});
  }
  return cb;
}

inline ProductCodebook train_vq(const Tensor& vectors, std::size_t K, std::size_t iters, Rng& rng,
                                PqTrainLog* log = nullptr) {
  return train_pq(vectors, 1, K, iters, rng, log);
}

inline QuantResult quantize(const ProductCodebook& cb, std::span<const Scalar> z) {
  const std::size_t M = cb.groups(), dim = cb.sub_dim();
  if (z.size() != M * dim) throw ArgumentError("quantize: vector length does not match codebook");
  QuantResult r;
  r.indices.resize(M);
  r.z_q.resize(M * dim);
  r.group_err.resize(M);
  for (std::size_t m = 0; m < M; ++m) {
    const auto& cw = cb.subs[m].codewords;
    const std::size_t k = detail::nearest(cw, z.data() + m * dim, &r.group_err[m]);
    r.indices[m] = static_cast<std::uint32_t>(k);
    std::copy_n(cw.data() + k * dim, dim, r.z_q.data() + m * dim);
    r.sq_err += r.group_err[m];
  }
  return r;
}

inline std::vector<Scalar> dequantize(const ProductCodebook& cb, std::span<const std::uint32_t> indices) {
  const std::size_t M = cb.groups(), dim = cb.sub_dim();
  if (indices.size() != M) throw ArgumentError("dequantize: expected one index per group");
  std::vector<Scalar> out(M * dim);
  for (std::size_t m = 0; m < M; ++m) {
    if (indices[m] >= cb.subs[m].K()) throw IndexError("dequantize: codeword index out of range");
    const auto& cw = cb.subs[m].codewords;
    std::copy_n(cw.data() + indices[m] * dim, dim, out.data() + m * dim);
  }
  return out;
}

inline double distortion(const ProductCodebook& cb, const Tensor& vectors) {
  if (vectors.rank() != 2 || vectors.dim(0) == 0) throw ArgumentError("distortion: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < vectors.dim(0); ++i) total += quantize(cb, vectors.row(i)).sq_err;
  return total / static_cast<double>(vectors.dim(0));
}

// Stack of full-dimension codebooks applied to successive residuals.
struct ResidualCodebook {
  std::vector<Tensor> levels;  // each [K, n_z]

  std::size_t depth() const { return levels.size(); }
  std::size_t n_z() const { return levels.at(0).dim(1); }

  QuantResult quantize(std::span<const Scalar> z) const {
    const std::size_t n = n_z();
    if (z.size() != n) throw ArgumentError("quantize: vector length does not match codebook");
    QuantResult r;
    r.z_q.assign(n, Scalar(0));
    std::vector<Scalar> residual(z.begin(), z.end());
    for (const auto& level : levels) {
      double e = 0.0;
      const std::size_t k = detail::nearest(level, residual.data(), &e);
      r.indices.push_back(static_cast<std::uint32_t>(k));
      for (std::size_t j = 0; j < n; ++j) {
        r.z_q[j] += level.at(k, j);
        residual[j] -= level.at(k, j);
      }
      r.group_err.push_back(e);
    }
    r.sq_err = detail::sq_dist(z.data(), r.z_q.data(), n);
    return r;
  }

  std::vector<Scalar> dequantize(std::span<const std::uint32_t> indices) const {
    if (indices.size() != levels.size()) throw ArgumentError("dequantize: expected one index per level");
    std::vector<Scalar> out(n_z(), Scalar(0));
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (indices[l] >= levels[l].dim(0)) throw IndexError("dequantize: codeword index out of range");
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += levels[l].at(indices[l], j);
    }
    return out;
  }
};

// Sequential k-means on residuals. `level_distortion`, when given, receives the
// mean squared residual energy after each level.
inline ResidualCodebook train_rq(const Tensor& vectors, std::size_t depth, std::size_t K, std::size_t iters, Rng& rng,
                                 std::vector<double>* level_distortion = nullptr) {
  if (depth < 1) throw ArgumentError("train_rq: need at least one level");
  if (vectors.rank() != 2) throw ArgumentError("train_rq: vectors must be [N, n_z]");
  if (vectors.dim(0) < K) throw ArgumentError("train_rq: fewer vectors than codewords");
  ResidualCodebook rq;
  Tensor residual = vectors;
  const std::size_t N = vectors.dim(0), n = vectors.dim(1);
  for (std::size_t l = 0; l < depth; ++l) {
    auto km = kmeans(residual, K, KMeansOptions{iters, 1e-6}, rng);
    double energy = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double e = 0.0;
      const std::size_t k = detail::nearest(km.centroids, residual.data() + i * n, &e);
      for (std::size_t j = 0; j < n; ++j) residual.at(i, j) -= km.centroids.at(k, j);
      energy += e;
    }
    if (level_distortion) level_distortion->push_back(energy / static_cast<double>(N));
    rq.levels.push_back(std::move(km.centroids));
  }
  return rq;
}

inline double distortion(const ResidualCodebook& rq, const Tensor& vectors) {
  if (vectors.rank() != 2 || vectors.dim(0) == 0) throw ArgumentError("distortion: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < vectors.dim(0); ++i) total += rq.quantize(vectors.row(i)).sq_err;
  return total / static_cast<double>(vectors.dim(0));
}

// N x dim vectors whose M equal sub-spaces are independent Gaussian mixtures:
// per sub-space, `components` means drawn from N(0, spread^2), noise std `sigma`.
inline Tensor subspace_mixture(std::size_t N, std::size_t dim, std::size_t M, std::size_t components, Rng& rng,
                               double spread = 2.0, double sigma = 0.25) {
  if (M < 1 || dim % M != 0) throw ArgumentError("subspace_mixture: M must divide dim");
  if (components < 1) throw ArgumentError("subspace_mixture: need at least one component");
  const std::size_t sub = dim / M;
  std::vector<Tensor> means;
  for (std::size_t m = 0; m < M; ++m) {
    Tensor mu({components, sub});
    for (auto& x : mu.values()) x = static_cast<Scalar>(spread * rng.normal());
    means.push_back(std::move(mu));
  }
  Tensor out({N, dim});
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t m = 0; m < M; ++m) {
      const std::size_t c = rng.index(components);
      for (std::size_t j = 0; j < sub; ++j) {
        out.at(i, m * sub + j) = static_cast<Scalar>(means[m].at(c, j) + sigma * rng.normal());
      }
    }
  }
  return out;
}

// Mean squared distortion on `vectors` of VQ(K), RQ(depth levels, K each) and
// PQ(M groups, K each), all trained on the same vectors.
struct QuantizerTable {
  double vq = 0.0;
  double rq = 0.0;
  double pq = 0.0;
};

inline QuantizerTable compare_quantizers(const Tensor& vectors, std::size_t M, std::size_t K, std::size_t rq_depth,
                                         std::size_t iters, Rng& rng) {
  QuantizerTable t;
  t.vq = distortion(train_vq(vectors, K, iters, rng), vectors);
  t.rq = distortion(train_rq(vectors, rq_depth, K, iters, rng), vectors);
  t.pq = distortion(train_pq(vectors, M, K, iters, rng), vectors);
  return t;
}

// Codebook file: "PQCB", version, M, K, n_z (u32 LE), then M*K*(n_z/M) f32 LE.
inline constexpr std::uint32_t kCodebookVersion = 1;

inline void write_codebook(io::Writer& w, const ProductCodebook& cb) {
  cb.validate();
  w.bytes("PQCB");
  w.u32(kCodebookVersion);
  w.u32(static_cast<std::uint32_t>(cb.groups()));
  w.u32(static_cast<std::uint32_t>(cb.K()));
  w.u32(static_cast<std::uint32_t>(cb.n_z()));
  for (const auto& s : cb.subs) {
    for (auto v : s.codewords.values()) w.f32(static_cast<float>(v));
  }
}

inline ProductCodebook read_codebook(io::Reader& r) {
  if (r.bytes(4) != "PQCB") throw IoError("codebook: bad magic");
  if (r.u32() != kCodebookVersion) throw IoError("codebook: unsupported version");
  const std::size_t M = r.u32(), K = r.u32(), n_z = r.u32();
  if (M == 0 || K == 0 || n_z % M != 0) throw IoError("codebook: inconsistent header");
  ProductCodebook cb;
  for (std::size_t m = 0; m < M; ++m) {
    Tensor t({K, n_z / M});
    for (auto& v : t.values()) v = static_cast<Scalar>(r.f32());
    cb.subs.push_back(SubCodebook{std::move(t)});
  }
  return cb;
}

inline void save_codebook(const std::filesystem::path& path, const ProductCodebook& cb) {
  io::Writer w;
  write_codebook(w, cb);
  w.save(path);
}

inline ProductCodebook load_codebook(const std::filesystem::path& path) {
  auto r = io::Reader::open(path);
  auto cb = read_codebook(r);
  if (!r.at_end()) throw IoError("codebook: trailing bytes");
  return cb;
}

}  // namespace narpq
