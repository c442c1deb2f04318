#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "narpq/errors.hpp"

namespace narpq {

// h x w cells, each holding M sub-token indices; row-major, group fastest.
struct TokenGrid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t M = 0;
  std::vector<std::uint32_t> ids;

  TokenGrid() = default;
  TokenGrid(std::size_t h_, std::size_t w_, std::size_t M_, std::uint32_t fill = 0)
      : h(h_), w(w_), M(M_), ids(h_ * w_ * M_, fill) {}

  std::size_t cells() const { return h * w; }

  std::span<std::uint32_t> cell(std::size_t pos) { return {ids.data() + pos * M, M}; }
  std::span<const std::uint32_t> cell(std::size_t pos) const { return {ids.data() + pos * M, M}; }
  std::span<std::uint32_t> cell(std::size_t r, std::size_t c) { return cell(r * w + c); }
  std::span<const std::uint32_t> cell(std::size_t r, std::size_t c) const { return cell(r * w + c); }

  std::vector<std::uint32_t> flatten() const { return ids; }

  static TokenGrid unflatten(std::size_t h, std::size_t w, std::size_t M, std::span<const std::uint32_t> flat) {
    if (flat.size() != h * w * M) throw ArgumentError("unflatten: length does not match h*w*M");
    TokenGrid g(h, w, M);
    g.ids.assign(flat.begin(), flat.end());
    return g;
  }

  TokenGrid crop(std::size_t r0, std::size_t c0, std::size_t ch, std::size_t cw) const {
    if (ch == 0 || cw == 0 || r0 + ch > h || c0 + cw > w) throw ArgumentError("crop: box outside grid");
    TokenGrid out(ch, cw, M);
    for (std::size_t r = 0; r < ch; ++r) {
      for (std::size_t c = 0; c < cw; ++c) {
        auto src = cell(r0 + r, c0 + c);
        std::copy(src.begin(), src.end(), out.cell(r, c).begin());
      }
    }
    return out;
  }

  bool all_below(std::uint32_t K) const {
    for (auto v : ids) {
      if (v >= K) return false;
    }
    return true;
  }

  bool operator==(const TokenGrid&) const = default;
};

}  // namespace narpq
