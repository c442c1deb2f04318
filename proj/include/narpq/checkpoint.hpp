#pragma once

// "M6CK" checkpoint container.
//
//   "M6CK"  version:u32  sections:u32
//   per section:
//     tag: 4 bytes          ("CODC" image codec, "NARP" predictor)
//     config: u32 length + UTF-8 key=value lines
//     tensors: u32 count, then per tensor
//       name: u32 length + bytes, rank:u32, dims:u32[rank], data:f32[prod(dims)]
//
// All integers and floats are little-endian.

#include <filesystem>
#include <string>
#include <vector>

#include "narpq/io.hpp"
#include "narpq/numerics.hpp"

namespace narpq {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointSection {
  std::string tag;
  std::string config;
  std::vector<Param> tensors;
};

inline void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointSection>& sections) {
  io::Writer w;
  w.bytes("M6CK");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    if (s.tag.size() != 4) throw ArgumentError("checkpoint: section tag must be 4 bytes");
    w.bytes(s.tag);
    w.string(s.config);
    w.u32(static_cast<std::uint32_t>(s.tensors.size()));
    for (const auto& p : s.tensors) {
      w.string(p.name);
      w.u32(static_cast<std::uint32_t>(p.value.rank()));
      for (auto d : p.value.shape()) w.u32(static_cast<std::uint32_t>(d));
      for (auto v : p.value.values()) w.f32(static_cast<float>(v));
    }
  }
  w.save(path);
}

inline std::vector<CheckpointSection> read_checkpoint(const std::filesystem::path& path) {
  auto r = io::Reader::open(path);
  if (r.bytes(4) != "M6CK") throw IoError("checkpoint: bad magic in " + path.string());
  if (r.u32() != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
  const std::uint32_t count = r.u32();
  std::vector<CheckpointSection> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointSection s;
    s.tag = r.bytes(4);
    s.config = r.string();
    const std::uint32_t n = r.u32();
    for (std::uint32_t t = 0; t < n; ++t) {
      std::string name = r.string();
      const std::uint32_t rank = r.u32();
      std::vector<std::size_t> shape(rank);
      for (auto& d : shape) d = r.u32();
      Tensor value(shape);
      for (auto& v : value.values()) v = static_cast<Scalar>(r.f32());
      s.tensors.emplace_back(std::move(name), std::move(value));
    }
    out.push_back(std::move(s));
  }
  if (!r.at_end()) throw IoError("checkpoint: trailing bytes");
  return out;
}

inline const CheckpointSection& find_section(const std::vector<CheckpointSection>& sections, const std::string& tag) {
  for (const auto& s : sections) {
    if (s.tag == tag) return s;
  }
  throw IoError("checkpoint: missing section " + tag);
}

// Copies checkpoint tensors into `params`, checking names and shapes.
inline void restore_params(const CheckpointSection& s, std::vector<Param>& params) {
  if (s.tensors.size() != params.size()) throw IoError("checkpoint: tensor count mismatch in " + s.tag);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (s.tensors[i].name != params[i].name || s.tensors[i].value.shape() != params[i].value.shape()) {
      throw IoError("checkpoint: tensor " + s.tensors[i].name + " does not match " + params[i].name);
    }
    params[i].value = s.tensors[i].value;
    params[i].zero_grad();
  }
}

}  // namespace narpq
