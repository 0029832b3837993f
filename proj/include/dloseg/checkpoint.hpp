#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "dloseg/common.hpp"

namespace dloseg {

// Simple tensor container: magic + format version + JSON header (metadata and
// tensor manifest) + raw little-endian doubles. Round-trips bit-exactly.
namespace tensorfile {

constexpr char kMagic[8] = {'D', 'L', 'O', 'S', 'E', 'G', 'T', 'F'};
constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
  std::string name;
  Eigen::MatrixXd value;
};

inline void write(const std::string& path, const nlohmann::json& meta,
                  const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("tensorfile: cannot open for writing: " + path);
  nlohmann::json header;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors)
    header["tensors"].push_back({{"name", t.name},
                                 {"rows", t.value.rows()},
                                 {"cols", t.value.cols()}});
  const std::string hs = header.dump();
  const std::uint64_t hlen = hs.size();
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(sizeof(double) * t.value.size()));
  if (!out) throw IoError("tensorfile: write failed: " + path);
}

struct Contents {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const Eigen::MatrixXd& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw CheckpointError("tensorfile: missing tensor '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
};

inline Contents read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("tensorfile: cannot open: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("tensorfile: bad magic in " + path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kVersion)
    throw CheckpointError("tensorfile: unsupported format version " +
                          std::to_string(version) + " in " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw CheckpointError("tensorfile: truncated header in " + path);
  nlohmann::json header = nlohmann::json::parse(hs);

  Contents c;
  c.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.value.resize(entry.at("rows").get<Eigen::Index>(),
                   entry.at("cols").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(t.value.data()),
            static_cast<std::streamsize>(sizeof(double) * t.value.size()));
    if (!in) throw CheckpointError("tensorfile: truncated tensor data in " + path);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

}  // namespace tensorfile

}  // namespace dloseg
