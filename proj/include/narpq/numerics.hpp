#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Core>

#include "narpq/errors.hpp"

namespace narpq {

#ifdef NARPQ_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;
using VecMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
using ConstVecMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

// Dense row-major tensor of Scalars.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, const std::vector<Scalar>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (count(shape_) != data_.size()) {
      throw ArgumentError("tensor data length does not match shape");
    }
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  Scalar* data() noexcept { return data_.data(); }
  const Scalar* data() const noexcept { return data_.data(); }
  std::span<Scalar> values() noexcept { return data_; }
  std::span<const Scalar> values() const noexcept { return data_; }

  Scalar& operator[](std::size_t i) noexcept { return data_[i]; }
  Scalar operator[](std::size_t i) const noexcept { return data_[i]; }

  Scalar& at(std::size_t r, std::size_t c) { return data_[r * shape_.at(1) + c]; }
  Scalar at(std::size_t r, std::size_t c) const { return data_[r * shape_.at(1) + c]; }

  // Row r of a rank >= 2 tensor viewed as [dim0, rest].
  std::span<Scalar> row(std::size_t r) {
    const std::size_t stride = data_.size() / shape_.at(0);
    return {data_.data() + r * stride, stride};
  }
  std::span<const Scalar> row(std::size_t r) const {
    const std::size_t stride = data_.size() / shape_.at(0);
    return {data_.data() + r * stride, stride};
  }

  MatMap matrix() {
    return {data_.data(), static_cast<Eigen::Index>(shape_.at(0)),
            static_cast<Eigen::Index>(data_.size() / shape_.at(0))};
  }
  ConstMatMap matrix() const {
    return {data_.data(), static_cast<Eigen::Index>(shape_.at(0)),
            static_cast<Eigen::Index>(data_.size() / shape_.at(0))};
  }
  VecMap vector() { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }
  ConstVecMap vector() const { return {data_.data(), static_cast<Eigen::Index>(data_.size())}; }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor&) const = default;

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
      if (d == 0) throw ArgumentError("tensor extents must be positive");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<std::size_t> shape_;
  // Aligned so vectorised reductions split work the same way for every buffer.
  std::vector<Scalar, Eigen::aligned_allocator<Scalar>> data_;
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(Scalar(0)); }
};

inline void zero_grads(std::span<Param> params) {
  for (auto& p : params) p.zero_grad();
}

// A gradient buffer shaped like a parameter list.
using GradBuffer = std::vector<Tensor>;

inline GradBuffer make_grad_buffer(std::span<const Param> params) {
  GradBuffer g;
  g.reserve(params.size());
  for (const auto& p : params) g.emplace_back(p.value.shape());
  return g;
}

inline void clear(GradBuffer& g) {
  for (auto& t : g) t.fill(Scalar(0));
}

// Seeded pseudo-random source. The engine is the standard 64-bit Mersenne
// twister; all derived draws use explicit bit manipulation so results do not
// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t draws() const noexcept { return draws_; }

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive, unbiased by rejection.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi < lo) throw ArgumentError("uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<std::int64_t>(x % span);
  }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(n) - 1)); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  // Index drawn with probability proportional to weights (all >= 0, sum > 0).
  template <class T>
  std::size_t categorical(std::span<const T> weights) {
    double total = 0.0;
    for (auto w : weights) total += static_cast<double>(w);
    if (!(total > 0.0)) throw ArgumentError("categorical: weights sum to zero");
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (weights[i] > 0) last_positive = i;
      acc += static_cast<double>(weights[i]);
      if (u < acc && weights[i] > 0) return i;
    }
    return last_positive;
  }

  // Independent child stream; does not advance this generator.
  Rng fork(std::uint64_t stream) const { return Rng(seed_ ^ mix(stream + 0x9E3779B97F4A7C15ULL)); }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) std::iter_swap(first + (i - 1), first + index(i));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

struct XentResult {
  Scalar loss;
  std::vector<Scalar> grad;
};

// -log softmax(logits)[target] and its gradient softmax - onehot.
inline XentResult softmax_xent(std::span<const Scalar> logits, std::size_t target) {
  const std::size_t v = logits.size();
  if (v < 2) throw ArgumentError("softmax_xent: need at least two classes");
  if (target >= v) throw IndexError("softmax_xent: target out of range");
  double mx = -std::numeric_limits<double>::infinity();
  for (auto l : logits) {
    if (!std::isfinite(l)) throw NumericError("softmax_xent: non-finite logit");
    mx = std::max(mx, static_cast<double>(l));
  }
  double z = 0.0;
  std::vector<double> e(v);
  for (std::size_t i = 0; i < v; ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - mx);
    z += e[i];
  }
  XentResult r;
  r.loss = static_cast<Scalar>(std::log(z) - (static_cast<double>(logits[target]) - mx));
  r.grad.resize(v);
  for (std::size_t i = 0; i < v; ++i) r.grad[i] = static_cast<Scalar>(e[i] / z);
  r.grad[target] -= Scalar(1);
  return r;
}

// In-place softmax over a row, with max subtraction.
inline void softmax_inplace(std::span<Scalar> row) {
  Scalar mx = row[0];
  for (auto v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (auto& v : row) {
    v = std::exp(v - mx);
    z += v;
  }
  const auto inv = static_cast<Scalar>(1.0 / z);
  for (auto& v : row) v *= inv;
}

// Compares analytic gradients against central differences.
//
// `loss` must evaluate the objective at the current parameter values and
// accumulate its analytic gradient into each Param::grad. grad_check zeroes
// the gradients before the reference evaluation.
inline double grad_check(const std::function<double()>& loss, std::span<Param> params, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-2)) throw ArgumentError("grad_check: eps outside [1e-6, 1e-2]");
  zero_grads(params);
  const double f0 = loss();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad);
  zero_grads(params);
  if (loss() != f0) throw ContractError("grad_check: objective is not deterministic");

  // Fourth-order central stencil over the perturbations actually applied, so
  // a larger eps can be used without the truncation error of the
  // two-point formula.
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& value = params[pi].value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const Scalar saved = value[i];
      auto eval_at = [&](double offset, double& applied) {
        value[i] = static_cast<Scalar>(saved + offset);
        applied = static_cast<double>(value[i]) - saved;
        return loss();
      };
      double h1p, h1m, h2p, h2m;
      const double f1p = eval_at(eps, h1p);
      const double f1m = eval_at(-eps, h1m);
      const double f2p = eval_at(2 * eps, h2p);
      const double f2m = eval_at(-2 * eps, h2m);
      value[i] = saved;
      const double d1 = (f1p - f1m) / (h1p - h1m);
      const double d2 = (f2p - f2m) / (h2p - h2m);
      const double numeric = (4.0 * d1 - d2) / 3.0;
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  zero_grads(params);
  return worst;
}

// k distinct indices, drawn one at a time with probability proportional to
// the remaining weights.
template <class T>
std::vector<std::size_t> multinomial_without_replacement(std::span<const T> weights, std::size_t k, Rng& rng) {
  std::size_t support = 0;
  for (auto w : weights) {
    if (!std::isfinite(static_cast<double>(w)) || w < 0) {
      throw ArgumentError("multinomial: weights must be finite and non-negative");
    }
    if (w > 0) ++support;
  }
  if (support == 0 && k > 0) throw ArgumentError("multinomial: all weights are zero");
  if (k > support) throw ArgumentError("multinomial: k exceeds the positive support");
  std::vector<double> w(weights.begin(), weights.end());
  std::vector<std::size_t> out;
  out.reserve(k);
  for (std::size_t draw = 0; draw < k; ++draw) {
    const std::size_t i = rng.categorical(std::span<const double>(w));
    out.push_back(i);
    w[i] = 0.0;
  }
  return out;
}

// Worker count from NARPQ_THREADS (default 1).
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("NARPQ_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return 1;
}

// Runs body(i) for i in [0, n). Each index must write only its own output, so
// results do not depend on the worker count.
template <class Body>
void parallel_for(std::size_t n, Body&& body) {
  const std::size_t workers = std::min(worker_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

// SGD with optional momentum and global-norm clipping.
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum, double clip_norm = 0.0)
      : lr_(lr), momentum_(momentum), clip_(clip_norm) {}

  // Returns the pre-clip gradient norm.
  double step(std::span<Param> params) {
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.value.shape());
    }
    double sq = 0.0;
    for (const auto& p : params) {
      for (auto g : p.grad.values()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("optimizer: non-finite gradient");
    const double scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto& v = velocity_[pi];
      auto& p = params[pi];
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = static_cast<Scalar>(momentum_ * v[i] + scale * p.grad[i]);
        p.value[i] -= static_cast<Scalar>(lr_ * v[i]);
      }
    }
    return norm;
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  double clip_;
  std::vector<Tensor> velocity_;
};

inline Tensor randn(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<Scalar>(rng.normal() * stddev);
  return t;
}

}  // namespace narpq
