#pragma once

// Checkpoint files: one line of JSON header, then every parameter as raw little-endian
// float64 in manifest order. The header carries the payload length and an FNV-1a checksum
// of the payload so truncation and corruption are both detected on load.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcst/diffcore.hpp"

namespace dcst::checkpoint {

inline constexpr const char* kFormat = "dcst-checkpoint";
inline constexpr int kVersion = 1;

enum class ModelKind { teacher, student };

NLOHMANN_JSON_SERIALIZE_ENUM(ModelKind, {{ModelKind::teacher, "teacher"}, {ModelKind::student, "student"}})

inline std::string to_string(ModelKind k) { return k == ModelKind::teacher ? "teacher" : "student"; }

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // bytes from the start of the payload
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ManifestEntry, name, shape, offset)

struct Header {
  std::string format = kFormat;
  int version = kVersion;
  ModelKind kind = ModelKind::student;
  nlohmann::json config;
  std::vector<ManifestEntry> manifest;
  std::size_t payload_bytes = 0;
  std::string checksum;  // FNV-1a 64 of the payload, 16 hex digits
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Header, format, version, kind, config, manifest, payload_bytes, checksum)

inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

inline void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

inline double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void save(const std::filesystem::path& path, ModelKind kind, const nlohmann::json& config,
                 const ParameterStore& store) {
  Header h;
  h.kind = kind;
  h.config = config;
  std::string payload;
  payload.reserve(store.element_count() * 8);
  for (const auto& p : store) {
    h.manifest.push_back({p.name(), p.shape(), payload.size()});
    for (double v : p.value().data()) detail::append_le(payload, v);
  }
  h.payload_bytes = payload.size();
  h.checksum = fnv1a_hex(payload);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out << nlohmann::json(h).dump() << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

struct Loaded {
  Header header;
  std::vector<Array> values;  // manifest order
};

/// Reads and validates a checkpoint without reference to any model.
inline Loaded read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::string header_line;
  if (!std::getline(in, header_line)) throw CheckpointError(path.string() + ": empty file");
  Loaded l;
  try {
    const auto j = nlohmann::json::parse(header_line);
    if (!j.is_object() || j.value("format", "") != kFormat) {
      throw CheckpointError(path.string() + ": not a checkpoint file");
    }
    if (j.value("version", -1) != kVersion) {
      throw CheckpointError(path.string() + ": unsupported checkpoint version " + j["version"].dump() +
                            " (expected " + std::to_string(kVersion) + ")");
    }
    l.header = j.get<Header>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed header: " + e.what());
  }
  std::ostringstream rest;
  rest << in.rdbuf();
  const std::string payload = rest.str();
  const auto& h = l.header;
  if (payload.size() != h.payload_bytes) {
    throw CheckpointError(path.string() + ": payload is " + std::to_string(payload.size()) + " bytes, header says " +
                          std::to_string(h.payload_bytes) + " (truncated or padded)");
  }
  std::size_t expected = 0;
  for (const auto& e : h.manifest) {
    if (e.offset != expected) throw CheckpointError(path.string() + ": manifest offset mismatch at " + e.name);
    expected += shape_size(e.shape) * 8;
  }
  if (expected != h.payload_bytes) {
    throw CheckpointError(path.string() + ": manifest describes " + std::to_string(expected) +
                          " bytes but payload_bytes is " + std::to_string(h.payload_bytes));
  }
  if (fnv1a_hex(payload) != h.checksum) throw CheckpointError(path.string() + ": payload checksum mismatch");
  for (const auto& e : h.manifest) {
    Array a(e.shape);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = detail::read_le(payload.data() + e.offset + 8 * i);
    l.values.push_back(std::move(a));
  }
  return l;
}

/// Copies checkpoint values into `store`, which must hold exactly the manifest's parameters.
inline void restore(const Loaded& l, ModelKind expected_kind, ParameterStore& store) {
  if (l.header.kind != expected_kind) {
    throw CheckpointError("model kind mismatch: checkpoint holds a " + to_string(l.header.kind) + ", expected a " +
                          to_string(expected_kind));
  }
  if (l.header.manifest.size() != store.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(l.header.manifest.size()) + " parameters, model has " +
                          std::to_string(store.size()));
  }
  std::size_t k = 0;
  for (auto& p : store) {
    const auto& e = l.header.manifest[k];
    if (e.name != p.name() || e.shape != p.shape()) {
      throw CheckpointError("parameter " + std::to_string(k) + " is " + e.name + shape_string(e.shape) +
                            " in the checkpoint but " + p.name() + shape_string(p.shape()) + " in the model");
    }
    p.assign(l.values[k]);
    ++k;
  }
}

}  // namespace dcst::checkpoint
