#pragma once

// Binary tensor container, dataset manifests and run artifacts.
//
// Tensor layout (all integers little-endian):
//   magic   8 bytes   89 52 47 54 0D 0A 1A 0A   ("\x89RGT\r\n\x1a\n")
//   dtype   1 byte    1 = float32
//   rank    1 byte    >= 1
//   dims    8 bytes each, u64
//   payload product(dims) * 4 bytes, row-major float32

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "raigen/error.hpp"

namespace raigen {

using json = nlohmann::json;

inline constexpr std::array<unsigned char, 8> kTensorMagic = {0x89, 'R', 'G', 'T', '\r', '\n', 0x1a, '\n'};
inline constexpr std::uint8_t kDtypeFloat32 = 1;

enum class Dtype : std::uint8_t { Float32 = kDtypeFloat32 };

struct TensorFile {
  Dtype dtype = Dtype::Float32;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  TensorFile() = default;
  TensorFile(std::vector<std::uint64_t> dims, std::vector<float> values)
      : shape(std::move(dims)), data(std::move(values)) {}

  std::size_t rank() const { return shape.size(); }

  std::uint64_t element_count() const {
    std::uint64_t count = 1;
    for (auto d : shape) count *= d;
    return count;
  }

  std::uint64_t payload_bytes() const { return element_count() * sizeof(float); }

  std::uint64_t header_bytes() const { return 8 + 1 + 1 + 8 * shape.size(); }

  void validate() const {
    require(!shape.empty(), ErrorKind::Shape, "tensor rank must be >= 1");
    require(shape.size() <= 255, ErrorKind::Shape, "tensor rank must fit in one byte");
    for (std::size_t i = 0; i < shape.size(); ++i) {
      require(shape[i] >= 1, ErrorKind::Shape, "tensor dim " + std::to_string(i) + " is zero");
    }
    require(data.size() == element_count(), ErrorKind::Shape,
            "tensor payload has " + std::to_string(data.size()) + " values, shape requires " +
                std::to_string(element_count()));
  }

  // Bitwise comparison: NaN payloads compare by bits, -0.0 differs from 0.0.
  friend bool operator==(const TensorFile& a, const TensorFile& b) {
    if (a.dtype != b.dtype || a.shape != b.shape || a.data.size() != b.data.size()) return false;
    return a.data.empty() || std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
  }
};

struct TensorHeader {
  Dtype dtype = Dtype::Float32;
  std::vector<std::uint64_t> shape;
};

namespace detail {

inline void put_u64(unsigned char* out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(v >> (8 * i));
}

inline std::uint64_t get_u64(const unsigned char* in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return v;
}

inline void put_f32(unsigned char* out, float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out[i] = static_cast<unsigned char>(bits >> (8 * i));
}

inline float get_f32(const unsigned char* in) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(in[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline void write_bytes(std::ostream& sink, const unsigned char* bytes, std::size_t n, std::uint64_t& offset) {
  sink.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(n));
  if (!sink) fail(ErrorKind::Io, "write failed at byte offset " + std::to_string(offset));
  offset += n;
}

inline std::size_t read_bytes(std::istream& source, unsigned char* bytes, std::size_t n) {
  source.read(reinterpret_cast<char*>(bytes), static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(source.gcount());
}

}  // namespace detail

/// Serializes a tensor; returns the number of bytes written.
inline std::uint64_t write_tensor(std::ostream& sink, const TensorFile& t) {
  t.validate();
  std::uint64_t offset = 0;
  std::vector<unsigned char> header(t.header_bytes());
  std::memcpy(header.data(), kTensorMagic.data(), kTensorMagic.size());
  header[8] = static_cast<unsigned char>(t.dtype);
  header[9] = static_cast<unsigned char>(t.rank());
  for (std::size_t i = 0; i < t.rank(); ++i) detail::put_u64(header.data() + 10 + 8 * i, t.shape[i]);
  detail::write_bytes(sink, header.data(), header.size(), offset);

  constexpr std::size_t kChunk = 1 << 14;
  std::vector<unsigned char> buf(kChunk * 4);
  for (std::size_t begin = 0; begin < t.data.size(); begin += kChunk) {
    std::size_t end = std::min(t.data.size(), begin + kChunk);
    for (std::size_t i = begin; i < end; ++i) detail::put_f32(buf.data() + 4 * (i - begin), t.data[i]);
    detail::write_bytes(sink, buf.data(), 4 * (end - begin), offset);
  }
  return offset;
}

inline TensorHeader read_tensor_header(std::istream& source) {
  unsigned char fixed[10];
  std::size_t got = detail::read_bytes(source, fixed, sizeof(fixed));
  if (got < kTensorMagic.size() || std::memcmp(fixed, kTensorMagic.data(), kTensorMagic.size()) != 0) {
    fail(ErrorKind::Format, "bad tensor magic");
  }
  require(got == sizeof(fixed), ErrorKind::Length, "truncated tensor header");
  require(fixed[8] == kDtypeFloat32, ErrorKind::Format, "unsupported dtype code " + std::to_string(fixed[8]));
  std::size_t rank = fixed[9];
  require(rank >= 1, ErrorKind::Format, "tensor rank must be >= 1");

  TensorHeader header;
  std::vector<unsigned char> dims(8 * rank);
  got = detail::read_bytes(source, dims.data(), dims.size());
  require(got == dims.size(), ErrorKind::Length,
          "truncated tensor dims: expected " + std::to_string(dims.size()) + " bytes, got " + std::to_string(got));
  header.shape.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    header.shape[i] = detail::get_u64(dims.data() + 8 * i);
    require(header.shape[i] >= 1, ErrorKind::Format, "tensor dim " + std::to_string(i) + " is zero");
  }
  return header;
}

inline TensorFile read_tensor(std::istream& source) {
  TensorHeader header = read_tensor_header(source);
  TensorFile t;
  t.shape = std::move(header.shape);
  const std::uint64_t count = t.element_count();
  const std::uint64_t expected = count * 4;

  t.data.resize(count);
  constexpr std::size_t kChunk = 1 << 14;
  std::vector<unsigned char> buf(kChunk * 4);
  std::uint64_t consumed = 0;
  for (std::size_t begin = 0; begin < count; begin += kChunk) {
    std::size_t end = std::min<std::size_t>(count, begin + kChunk);
    std::size_t want = 4 * (end - begin);
    std::size_t got = detail::read_bytes(source, buf.data(), want);
    consumed += got;
    if (got != want) {
      fail(ErrorKind::Length, "truncated tensor payload: expected " + std::to_string(expected) +
                                  " bytes, got " + std::to_string(consumed));
    }
    for (std::size_t i = begin; i < end; ++i) t.data[i] = detail::get_f32(buf.data() + 4 * (i - begin));
  }
  return t;
}

inline std::uint64_t save_tensor(const std::filesystem::path& path, const TensorFile& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  auto n = write_tensor(out, t);
  out.flush();
  require(static_cast<bool>(out), ErrorKind::Io, "flush failed for " + path.string());
  return n;
}

inline TensorFile load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  try {
    return read_tensor(in);
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

inline TensorHeader load_tensor_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  return read_tensor_header(in);
}

// ---------------------------------------------------------------------------
// Dataset manifest

struct DatasetManifest {
  std::string prompt;
  std::uint64_t sample_count = 0;
  std::uint64_t timestep = 0;
  std::uint64_t total_timesteps = 1;
  std::filesystem::path representation_file;
  std::optional<std::filesystem::path> embedding_file;
  std::vector<std::string> image_ids;
  std::uint64_t seed = 0;

  // Directory the manifest was loaded from; relative paths resolve against it.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
  }
};

inline json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["prompt"] = m.prompt;
  j["sample_count"] = m.sample_count;
  j["timestep"] = m.timestep;
  j["total_timesteps"] = m.total_timesteps;
  j["representation_file"] = m.representation_file.generic_string();
  j["embedding_file"] = m.embedding_file ? json(m.embedding_file->generic_string()) : json(nullptr);
  j["image_ids"] = m.image_ids;
  j["seed"] = m.seed;
  return j;
}

namespace detail {

inline const json& field(const json& j, const char* key) {
  auto it = j.find(key);
  require(it != j.end(), ErrorKind::Validation, std::string("manifest missing field '") + key + "'");
  return *it;
}

inline std::uint64_t unsigned_field(const json& j, const char* key) {
  const json& v = field(j, key);
  require(v.is_number_unsigned(), ErrorKind::Validation,
          std::string("manifest field '") + key + "' must be an unsigned integer");
  return v.get<std::uint64_t>();
}

inline std::string string_field(const json& j, const char* key) {
  const json& v = field(j, key);
  require(v.is_string(), ErrorKind::Validation, std::string("manifest field '") + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace detail

/// Parses a manifest without touching referenced files.
inline DatasetManifest parse_manifest(const json& j) {
  require(j.is_object(), ErrorKind::Validation, "manifest must be a JSON object");
  static const std::set<std::string> known = {"prompt",    "sample_count",        "timestep",
                                              "total_timesteps", "representation_file", "embedding_file",
                                              "image_ids", "seed"};
  for (const auto& [key, _] : j.items()) {
    require(known.count(key) == 1, ErrorKind::Validation, "manifest has unknown field '" + key + "'");
  }
  DatasetManifest m;
  m.prompt = detail::string_field(j, "prompt");
  m.sample_count = detail::unsigned_field(j, "sample_count");
  m.timestep = detail::unsigned_field(j, "timestep");
  m.total_timesteps = detail::unsigned_field(j, "total_timesteps");
  m.representation_file = detail::string_field(j, "representation_file");
  m.seed = detail::unsigned_field(j, "seed");
  if (auto it = j.find("embedding_file"); it != j.end() && !it->is_null()) {
    require(it->is_string(), ErrorKind::Validation, "manifest field 'embedding_file' must be a string or null");
    m.embedding_file = it->get<std::string>();
  }
  const json& ids = detail::field(j, "image_ids");
  require(ids.is_array(), ErrorKind::Validation, "manifest field 'image_ids' must be an array");
  for (const auto& id : ids) {
    require(id.is_string(), ErrorKind::Validation, "manifest image ids must be strings");
    m.image_ids.push_back(id.get<std::string>());
  }

  require(m.sample_count >= 1, ErrorKind::Validation, "manifest sample_count must be >= 1");
  require(m.timestep < m.total_timesteps, ErrorKind::Validation,
          "manifest timestep " + std::to_string(m.timestep) + " must be < total_timesteps " +
              std::to_string(m.total_timesteps));
  require(m.image_ids.size() == m.sample_count, ErrorKind::Validation,
          "manifest image_ids has " + std::to_string(m.image_ids.size()) + " entries, sample_count is " +
              std::to_string(m.sample_count));
  std::set<std::string> unique(m.image_ids.begin(), m.image_ids.end());
  require(unique.size() == m.image_ids.size(), ErrorKind::Validation, "manifest image_ids are not unique");
  require(!m.representation_file.empty(), ErrorKind::Validation, "manifest representation_file is empty");
  return m;
}

/// Checks that referenced tensors exist and agree with sample_count. Reads headers only.
inline void validate_manifest_files(const DatasetManifest& m) {
  auto check = [&](const std::filesystem::path& rel, const char* field, std::size_t min_rank) {
    auto path = m.resolve(rel);
    require(std::filesystem::exists(path), ErrorKind::Validation,
            std::string("manifest field '") + field + "' references missing file " + path.string());
    TensorHeader h;
    try {
      h = load_tensor_header(path);
    } catch (const Error& e) {
      fail(ErrorKind::Validation, path.string() + ": " + e.what());
    }
    require(h.shape.size() >= min_rank, ErrorKind::Validation,
            path.string() + " has rank " + std::to_string(h.shape.size()) + ", expected >= " +
                std::to_string(min_rank));
    require(h.shape[0] == m.sample_count, ErrorKind::Validation,
            path.string() + " leading dim " + std::to_string(h.shape[0]) + " does not match sample_count " +
                std::to_string(m.sample_count));
  };
  check(m.representation_file, "representation_file", 2);
  if (m.embedding_file) check(*m.embedding_file, "embedding_file", 2);
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Validation, "manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  DatasetManifest m = parse_manifest(j);
  m.base_dir = path.parent_path();
  validate_manifest_files(m);
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << manifest_to_json(m).dump(2) << "\n";
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Run artifacts: a JSON document plus named tensor attachments stored beside it.

enum class ArtifactKind { Params, Scores, MatchResult, Report };

inline constexpr unsigned kArtifactSchemaVersion = 1;

inline const char* to_string(ArtifactKind kind) {
  switch (kind) {
    case ArtifactKind::Params: return "params";
    case ArtifactKind::Scores: return "scores";
    case ArtifactKind::MatchResult: return "match_result";
    case ArtifactKind::Report: return "report";
  }
  return "unknown";
}

inline ArtifactKind artifact_kind_from_string(const std::string& s) {
  for (auto k : {ArtifactKind::Params, ArtifactKind::Scores, ArtifactKind::MatchResult, ArtifactKind::Report}) {
    if (s == to_string(k)) return k;
  }
  fail(ErrorKind::Format, "unknown artifact kind '" + s + "'");
}

struct RunArtifact {
  ArtifactKind kind = ArtifactKind::Report;
  unsigned schema_version = kArtifactSchemaVersion;
  json payload = json::object();
  std::map<std::string, TensorFile> attachments;
};

inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

/// Writes `<dir>/<stem>.json` and one `<stem>.<name>.rgt` per attachment.
inline std::filesystem::path save_artifact(const std::filesystem::path& dir, const std::string& stem,
                                           const RunArtifact& a) {
  std::filesystem::create_directories(dir);
  json doc;
  doc["kind"] = to_string(a.kind);
  doc["schema_version"] = a.schema_version;
  doc["payload"] = a.payload;
  json files = json::object();
  for (const auto& [name, tensor] : a.attachments) {
    std::string file = stem + "." + name + ".rgt";
    save_tensor(dir / file, tensor);
    files[name] = file;
  }
  doc["attachments"] = files;
  auto path = dir / (stem + ".json");
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << dump_json(doc);
  require(static_cast<bool>(out), ErrorKind::Io, "write failed for " + path.string());
  return path;
}

inline RunArtifact load_artifact(const std::filesystem::path& path, std::optional<ArtifactKind> expected = {}) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open artifact " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Format, "artifact " + path.string() + " is not valid JSON: " + e.what());
  }
  require(doc.is_object() && doc.contains("kind") && doc.contains("schema_version") && doc.contains("payload"),
          ErrorKind::Format, "artifact " + path.string() + " lacks kind/schema_version/payload");
  RunArtifact a;
  a.kind = artifact_kind_from_string(doc["kind"].get<std::string>());
  a.schema_version = doc["schema_version"].get<unsigned>();
  require(a.schema_version == kArtifactSchemaVersion, ErrorKind::Format,
          "artifact " + path.string() + " has schema_version " + std::to_string(a.schema_version) +
              ", this build reads " + std::to_string(kArtifactSchemaVersion));
  if (expected) {
    require(a.kind == *expected, ErrorKind::Format,
            "artifact " + path.string() + " is kind '" + to_string(a.kind) + "', expected '" + to_string(*expected) +
                "'");
  }
  a.payload = doc["payload"];
  if (doc.contains("attachments")) {
    for (const auto& [name, file] : doc["attachments"].items()) {
      a.attachments[name] = load_tensor(path.parent_path() / file.get<std::string>());
    }
  }
  return a;
}

}  // namespace raigen
