#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "narpq/io.hpp"

namespace narpq {

// One "image_path<TAB>caption" line of a dataset manifest.
struct ManifestRecord {
  std::string image_path;
  std::string caption;

  bool operator==(const ManifestRecord&) const = default;
};

inline std::string format_manifest(const std::vector<ManifestRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    if (r.image_path.find_first_of("\t\n") != std::string::npos || r.caption.find_first_of("\t\n") != std::string::npos) {
      throw ArgumentError("manifest fields may not contain tabs or newlines");
    }
    out += r.image_path;
    out += '\t';
    out += r.caption;
    out += '\n';
  }
  return out;
}

inline std::vector<ManifestRecord> parse_manifest(const std::string& text) {
  std::vector<ManifestRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw IoError("manifest line " + std::to_string(lineno) + ": expected exactly one tab");
    }
    out.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  io::write_text(path, format_manifest(records));
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  return parse_manifest(io::read_text(path));
}

}  // namespace narpq
