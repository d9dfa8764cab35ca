// SPDX-License-Identifier: Apache-2.0
#pragma once

// On-disk containers:
//  * array archives: `<stem>.json` manifest (named shapes + metadata) next to
//    `<stem>.bin` holding the arrays as raw little-endian float32, row-major.
//  * binary model files: magic, version, dims header, then named float32 arrays.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcvlm/errors.hpp"
#include "mcvlm/linalg.hpp"

namespace mcvlm {

using json = nlohmann::ordered_json;

namespace le {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) fail(ErrorKind::Io, "unexpected end of file");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_f32(std::ostream& out, double v) { put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
inline double get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

inline void put_matrix(std::ostream& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) put_f32(out, m.data()[i]);
}

inline void get_matrix(std::istream& in, Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_f32(in);
}

}  // namespace le

/// Rounds every entry to float32 precision, the precision the files store.
inline Matrix to_f32(const Matrix& m) { return m.unaryExpr([](double v) { return double(static_cast<float>(v)); }); }

struct NamedArray {
  std::string name;
  Matrix values;
};

struct ArrayArchive {
  json meta = json::object();
  std::vector<NamedArray> arrays;

  const Matrix& get(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return a.values;
    fail(ErrorKind::Validation, "archive has no array '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return true;
    return false;
  }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& stem) { return stem.string() + ".json"; }
inline std::filesystem::path payload_path(const std::filesystem::path& stem) { return stem.string() + ".bin"; }

inline void write_archive(const std::filesystem::path& stem, const ArrayArchive& ar, const std::string& format,
                          int version) {
  json manifest;
  manifest["format"] = format;
  manifest["version"] = version;
  manifest["meta"] = ar.meta;
  manifest["arrays"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ar.arrays) {
    manifest["arrays"].push_back({{"name", a.name},
                                  {"shape", {a.values.rows(), a.values.cols()}},
                                  {"dtype", "float32"},
                                  {"offset", offset}});
    offset += static_cast<std::uint64_t>(a.values.size());
  }
  if (!stem.parent_path().empty()) std::filesystem::create_directories(stem.parent_path());
  {
    std::ofstream bin(payload_path(stem), std::ios::binary);
    if (!bin) fail(ErrorKind::Io, "cannot write '" + payload_path(stem).string() + "'");
    for (const auto& a : ar.arrays) le::put_matrix(bin, a.values);
  }
  std::ofstream js(manifest_path(stem));
  if (!js) fail(ErrorKind::Io, "cannot write '" + manifest_path(stem).string() + "'");
  js << manifest.dump(2) << "\n";
}

inline ArrayArchive read_archive(const std::filesystem::path& stem, const std::string& format, int version) {
  std::ifstream js(manifest_path(stem));
  if (!js) fail(ErrorKind::Io, "cannot open '" + manifest_path(stem).string() + "'");
  json manifest;
  try {
    manifest = json::parse(js);
  } catch (const json::exception& e) {
    fail(ErrorKind::Validation, "malformed manifest '" + manifest_path(stem).string() + "': " + e.what());
  }
  if (manifest.value("format", "") != format || manifest.value("version", 0) != version)
    fail(ErrorKind::Validation, "'" + manifest_path(stem).string() + "' is not a " + format + " v" +
                                    std::to_string(version) + " manifest");
  std::ifstream bin(payload_path(stem), std::ios::binary);
  if (!bin) fail(ErrorKind::Io, "cannot open '" + payload_path(stem).string() + "'");
  ArrayArchive ar;
  ar.meta = manifest["meta"];
  for (const auto& entry : manifest["arrays"]) {
    const auto rows = entry["shape"][0].get<Eigen::Index>();
    const auto cols = entry["shape"][1].get<Eigen::Index>();
    const auto offset = entry["offset"].get<std::uint64_t>();
    NamedArray a{entry["name"].get<std::string>(), Matrix(rows, cols)};
    bin.seekg(static_cast<std::streamoff>(offset * 4));
    le::get_matrix(bin, a.values);
    ar.arrays.push_back(std::move(a));
  }
  return ar;
}

}  // namespace mcvlm
