#include <gtest/gtest.h>

#include <bit>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "raigen/data_io.hpp"
#include "raigen/linalg.hpp"

using namespace raigen;

namespace {

std::string bytes_of(const TensorFile& t) {
  std::ostringstream out(std::ios::binary);
  write_tensor(out, t);
  return out.str();
}

TensorFile parse(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_tensor(in);
}

template <typename Fn>
ErrorKind kind_of(Fn fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::Capability;
}

// Golden file bytes, produced by an independent struct-packing writer.
const char* kGoldenHex =
    "895247540d0a1a0a0102020000000000000003000000000000000000803f000020c0cdcccc3d59d9003300e07f4700000080";

std::string hex(const std::string& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : bytes) {
    out += digits[c >> 4];
    out += digits[c & 15];
  }
  return out;
}

}  // namespace

TEST(TensorFormat, ZeroScalarMatrixLayout) {
  TensorFile t({1, 1}, {0.0f});
  std::string b = bytes_of(t);
  // magic 8 + dtype 1 + rank 1 + two u64 dims + one float
  ASSERT_EQ(b.size(), 30u);
  std::ostringstream sink;
  EXPECT_EQ(write_tensor(sink, t), 30u);
  EXPECT_EQ(b.substr(26), std::string(4, '\0'));
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 1);
  EXPECT_EQ(static_cast<unsigned char>(b[9]), 2);
}

TEST(TensorFormat, RoundTripOneToSix) {
  TensorFile t({2, 3}, {1, 2, 3, 4, 5, 6});
  std::string b = bytes_of(t);
  TensorFile back = parse(b);
  EXPECT_EQ(back, t);
  EXPECT_EQ(bytes_of(back), b);
}

TEST(TensorFormat, LargeHeaderDims) {
  // Header only: the full payload would be 1.6 GB.
  const std::vector<std::uint64_t> shape = {5000, 8, 8, 1280};
  std::string header;
  header.append(reinterpret_cast<const char*>(kTensorMagic.data()), 8);
  header += static_cast<char>(1);
  header += static_cast<char>(4);
  for (auto d : shape)
    for (int i = 0; i < 8; ++i) header += static_cast<char>((d >> (8 * i)) & 0xff);
  std::istringstream in(header, std::ios::binary);
  TensorHeader h = read_tensor_header(in);
  EXPECT_EQ(h.shape, shape);
}

TEST(TensorFormat, LargeHeaderDimsFromWriter) {
  TensorFile t({3, 8, 8, 1280}, std::vector<float>(3 * 8 * 8 * 1280, 0.5f));
  std::string b = bytes_of(t);
  EXPECT_EQ(b.size(), 10u + 32u + 4u * 3 * 8 * 8 * 1280);
  std::istringstream in(b, std::ios::binary);
  EXPECT_EQ(read_tensor_header(in).shape, t.shape);
}

TEST(TensorFormat, BadMagicIsFormatError) {
  std::string b = bytes_of(TensorFile({2}, {1, 2}));
  b[1] = 'X';
  EXPECT_EQ(kind_of([&] { parse(b); }), ErrorKind::Format);
}

TEST(TensorFormat, TruncatedPayloadIsLengthError) {
  std::string b = bytes_of(TensorFile({2, 3}, {1, 2, 3, 4, 5, 6}));
  b.resize(b.size() - 4);
  try {
    parse(b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Length);
    EXPECT_NE(std::string(e.what()).find("expected 24"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("got 20"), std::string::npos) << e.what();
  }
}

TEST(TensorFormat, TruncatedHeaderAndBadDtype) {
  std::string b = bytes_of(TensorFile({2}, {1, 2}));
  EXPECT_EQ(kind_of([&] { parse(b.substr(0, 12)); }), ErrorKind::Length);
  std::string bad = b;
  bad[8] = 2;
  EXPECT_EQ(kind_of([&] { parse(bad); }), ErrorKind::Format);
  std::string zero_rank = b;
  zero_rank[9] = 0;
  EXPECT_EQ(kind_of([&] { parse(zero_rank); }), ErrorKind::Format);
}

TEST(TensorFormat, RandomRoundTripBitExact) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> rank_d(1, 4), dim_d(1, 5);
  std::uniform_int_distribution<std::uint32_t> bits;
  for (int trial = 0; trial < 200; ++trial) {
    TensorFile t;
    int rank = rank_d(rng);
    for (int i = 0; i < rank; ++i) t.shape.push_back(static_cast<std::uint64_t>(dim_d(rng)));
    t.data.resize(t.element_count());
    // Arbitrary bit patterns, NaNs and infinities included.
    for (auto& v : t.data) v = std::bit_cast<float>(bits(rng));
    std::string b = bytes_of(t);
    ASSERT_EQ(b.size(), t.header_bytes() + t.payload_bytes());
    EXPECT_EQ(parse(b), t);
  }
}

TEST(TensorFormat, GoldenFixture) {
  TensorFile expected({2, 3}, {1.0f, -2.5f, 0.1f, 3.0e-8f, 65504.0f, -0.0f});
  auto path = std::filesystem::path(RAIGEN_TEST_DATA) / "golden_2x3.rgt";
  std::ifstream in(path, std::ios::binary);
  std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(hex(file), kGoldenHex);
  TensorFile t = load_tensor(path);
  EXPECT_EQ(t, expected);
  EXPECT_EQ(std::bit_cast<std::uint32_t>(t.data[2]), 0x3dcccccdu);
  EXPECT_EQ(std::bit_cast<std::uint32_t>(t.data[5]), 0x80000000u);
  EXPECT_EQ(hex(bytes_of(expected)), kGoldenHex);
}

TEST(TensorFormat, SinkFailureReportsOffset) {
  std::ostringstream out;
  out.setstate(std::ios::badbit);
  try {
    write_tensor(out, TensorFile({1}, {1.0f}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

struct ManifestFixture {
  std::filesystem::path dir;
  json base;

  explicit ManifestFixture(const std::string& name, std::uint64_t n = 10) {
    dir = oracle::fresh_dir(name);
    save_tensor(dir / "reps.rgt", TensorFile({n, 2, 2, 3}, std::vector<float>(n * 12, 1.0f)));
    save_tensor(dir / "emb.rgt", TensorFile({n, 4}, std::vector<float>(n * 4, 0.5f)));
    save_tensor(dir / "short.rgt", TensorFile({n - 1, 4}, std::vector<float>((n - 1) * 4, 0.5f)));
    save_tensor(dir / "vector.rgt", TensorFile({n}, std::vector<float>(n, 0.5f)));
    std::vector<std::string> ids;
    for (std::uint64_t i = 0; i < n; ++i) ids.push_back("img" + std::to_string(i));
    base = json{{"prompt", "a photo of a doctor"},
                {"sample_count", n},
                {"timestep", 49},
                {"total_timesteps", 50},
                {"representation_file", "reps.rgt"},
                {"embedding_file", "emb.rgt"},
                {"image_ids", ids},
                {"seed", 3}};
  }

  DatasetManifest load(const json& j) const {
    std::ofstream(dir / "manifest.json") << j.dump();
    return load_manifest(dir / "manifest.json");
  }
};

}  // namespace

TEST(Manifest, ValidLoadsWithTimestep49) {
  ManifestFixture f("manifest_ok");
  DatasetManifest m = f.load(f.base);
  EXPECT_EQ(m.sample_count, 10u);
  EXPECT_EQ(m.timestep, 49u);
  EXPECT_EQ(m.resolve(m.representation_file), f.dir / "reps.rgt");
  EXPECT_EQ(manifest_to_json(m), f.base);
}

TEST(Manifest, SampleCount5000) {
  ManifestFixture f("manifest_5000", 5000);
  EXPECT_EQ(f.load(f.base).image_ids.size(), 5000u);
}

TEST(Manifest, LeadingDimMismatchNamesFile) {
  ManifestFixture f("manifest_dim");
  json j = f.base;
  j["embedding_file"] = "short.rgt";
  try {
    f.load(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
    EXPECT_NE(std::string(e.what()).find("short.rgt"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
  }
}

TEST(Manifest, EmbeddingFileMayBeNullOrAbsent) {
  ManifestFixture f("manifest_noemb");
  json j = f.base;
  j["embedding_file"] = nullptr;
  EXPECT_FALSE(f.load(j).embedding_file.has_value());
  j.erase("embedding_file");
  EXPECT_FALSE(f.load(j).embedding_file.has_value());
}

TEST(Manifest, RejectsEverySingleFieldCorruption) {
  ManifestFixture f("manifest_corrupt");
  std::vector<std::pair<std::string, json>> corruptions = {
      {"prompt", 5},
      {"prompt", nullptr},
      {"sample_count", 0},
      {"sample_count", -1},
      {"sample_count", "10"},
      {"sample_count", 9},
      {"sample_count", 11},
      {"sample_count", 10.5},
      {"timestep", 50},
      {"timestep", -1},
      {"timestep", "49"},
      {"total_timesteps", 49},
      {"total_timesteps", 0},
      {"total_timesteps", 50.0},
      {"representation_file", "missing.rgt"},
      {"representation_file", ""},
      {"representation_file", 3},
      {"representation_file", "vector.rgt"},
      {"representation_file", "short.rgt"},
      {"embedding_file", "missing.rgt"},
      {"embedding_file", "short.rgt"},
      {"embedding_file", 7},
      {"embedding_file", "vector.rgt"},
      {"image_ids", json::array({"a"})},
      {"image_ids", "img0"},
      {"image_ids", json::array({"a", "a", "b", "c", "d", "e", "f", "g", "h", "i"})},
      {"image_ids", json::array({0, 1, 2, 3, 4, 5, 6, 7, 8, 9})},
      {"seed", -3},
      {"seed", "3"},
      {"unexpected", 1},
  };
  for (const auto& [key, value] : corruptions) {
    json j = f.base;
    j[key] = value;
    EXPECT_EQ(kind_of([&] { f.load(j); }), ErrorKind::Validation) << key << " = " << value.dump();
  }
  for (const char* key : {"prompt", "sample_count", "timestep", "total_timesteps", "representation_file",
                          "image_ids", "seed"}) {
    json j = f.base;
    j.erase(key);
    EXPECT_EQ(kind_of([&] { f.load(j); }), ErrorKind::Validation) << "missing " << key;
  }
  std::ofstream(f.dir / "manifest.json") << "{ not json";
  EXPECT_EQ(kind_of([&] { load_manifest(f.dir / "manifest.json"); }), ErrorKind::Validation);
  EXPECT_EQ(kind_of([&] { load_manifest(f.dir / "nope.json"); }), ErrorKind::Io);
}

// ---------------------------------------------------------------------------
// Artifacts

TEST(Artifact, RoundTripsPayloadAndAttachments) {
  auto dir = oracle::fresh_dir("artifact");
  RunArtifact a;
  a.kind = ArtifactKind::MatchResult;
  a.payload = json{{"x", 1.25}, {"names", {"a", "b"}}};
  a.attachments["m"] = TensorFile({2, 2}, {1, 2, 3, 4});
  a.attachments["v"] = TensorFile({3}, {-1, 0, 1});
  auto path = save_artifact(dir, "thing", a);
  RunArtifact b = load_artifact(path, ArtifactKind::MatchResult);
  EXPECT_EQ(b.kind, a.kind);
  EXPECT_EQ(b.schema_version, kArtifactSchemaVersion);
  EXPECT_EQ(b.payload, a.payload);
  EXPECT_EQ(b.attachments, a.attachments);
  EXPECT_EQ(kind_of([&] { load_artifact(path, ArtifactKind::Params); }), ErrorKind::Format);

  json j;
  std::ifstream(path) >> j;
  j["schema_version"] = kArtifactSchemaVersion + 1;
  std::ofstream(path) << j.dump();
  EXPECT_EQ(kind_of([&] { load_artifact(path); }), ErrorKind::Format);
}
