#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "deepcot/persistence.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using deepcot::Matrix;
using deepcot::ModelConfig;
using nlohmann::json;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("deepcot_persist_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

ModelConfig sample_config() {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.window = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.d_ff = 32;
  cfg.activation = deepcot::ActivationKind::Soft;
  cfg.norm = deepcot::NormKind::rezero_learned();
  cfg.positional = deepcot::RecyclingPositional{6};
  return cfg;
}

std::vector<unsigned char> bytes_of(const fs::path& p) { return deepcot::detail::read_file(p); }

void put_bytes(const fs::path& p, const std::vector<unsigned char>& b) { deepcot::detail::write_file(p, b); }

json load_json(const fs::path& p) { return deepcot::read_manifest(p); }

void store_json(const fs::path& p, const json& j) { deepcot::detail::write_text(p, j.dump(2)); }

}  // namespace

using Persistence = TempDir;

TEST_F(Persistence, RoundTripIsBitExactForFloat) {
  const auto md = deepcot::random_model<double>(sample_config(), 3);
  deepcot::save_model(md, dir_ / "m.json", dir_ / "m.bin");
  const auto mf = deepcot::load_model<float>(dir_ / "m.json");
  deepcot::save_model(mf, dir_ / "r.json", dir_ / "r.bin");
  EXPECT_EQ(bytes_of(dir_ / "m.bin"), bytes_of(dir_ / "r.bin"));
  const auto again = deepcot::load_model<float>(dir_ / "r.json");
  EXPECT_TRUE(again == mf);
  EXPECT_EQ(again.config, md.config);
}

TEST_F(Persistence, ConfigJsonRoundTrip) {
  for (auto norm : {deepcot::NormKind::layer_norm(), deepcot::NormKind::rezero_constant(),
                    deepcot::NormKind::rezero_constant(0.25), deepcot::NormKind::rezero_learned()}) {
    for (deepcot::PositionalKind pos : {deepcot::PositionalKind{deepcot::NoPositional{}},
                                        deepcot::PositionalKind{deepcot::RopePositional{500.0}},
                                        deepcot::PositionalKind{deepcot::RecyclingPositional{9}},
                                        deepcot::PositionalKind{deepcot::AbsolutePositional{32}}}) {
      auto cfg = sample_config();
      cfg.norm = norm;
      cfg.positional = pos;
      cfg.d_ff = 24;
      EXPECT_EQ(deepcot::config_from_json(deepcot::config_to_json(cfg)), cfg);
    }
  }
}

TEST_F(Persistence, DefaultFeedForwardWidthIsStoredResolved) {
  ModelConfig cfg;
  cfg.dim = 6;
  const auto j = deepcot::config_to_json(cfg);
  EXPECT_EQ(j["d_ff"], 24);
  EXPECT_EQ(deepcot::config_from_json(j).ff_dim(), cfg.ff_dim());
}

TEST_F(Persistence, BadConfigJsonIsConfigError) {
  EXPECT_THROW(deepcot::config_from_json(json{{"depth", "two"}}), deepcot::ConfigError);
  auto j = deepcot::config_to_json(sample_config());
  j["activation"] = "relu";
  EXPECT_THROW(deepcot::config_from_json(j), deepcot::ConfigError);
}

TEST_F(Persistence, CorruptBlobFailsChecksum) {
  const auto m = deepcot::random_model<double>(sample_config(), 4);
  deepcot::save_model(m, dir_ / "m.json", dir_ / "m.bin");
  auto b = bytes_of(dir_ / "m.bin");
  b[b.size() / 2] ^= 0x10;
  put_bytes(dir_ / "m.bin", b);
  EXPECT_THROW(deepcot::load_model<double>(dir_ / "m.json"), deepcot::ChecksumError);
}

TEST_F(Persistence, OffsetOutOfRange) {
  const auto m = deepcot::random_model<double>(sample_config(), 5);
  deepcot::save_model(m, dir_ / "m.json", dir_ / "m.bin");
  auto j = load_json(dir_ / "m.json");
  j["tensors"][0]["byte_offset"] = 1u << 30;
  store_json(dir_ / "m.json", j);
  EXPECT_THROW(deepcot::load_model<double>(dir_ / "m.json"), deepcot::FormatError);
}

TEST_F(Persistence, UnknownVersion) {
  const auto m = deepcot::random_model<double>(sample_config(), 6);
  deepcot::save_model(m, dir_ / "m.json", dir_ / "m.bin");
  auto j = load_json(dir_ / "m.json");
  j["format_version"] = 2;
  store_json(dir_ / "m.json", j);
  try {
    (void)deepcot::load_model<double>(dir_ / "m.json");
    FAIL() << "expected FormatError";
  } catch (const deepcot::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("format_version 2"), std::string::npos);
  }
}

TEST_F(Persistence, ShapeMismatchAndMissingTensor) {
  const auto m = deepcot::random_model<double>(sample_config(), 7);
  deepcot::save_model(m, dir_ / "m.json", dir_ / "m.bin");
  auto j = load_json(dir_ / "m.json");
  auto bad = j;
  bad["tensors"][0]["rows"] = 4;
  store_json(dir_ / "m.json", bad);
  EXPECT_THROW(deepcot::load_model<double>(dir_ / "m.json"), deepcot::Error);
  bad = j;
  bad["tensors"].erase(0);
  store_json(dir_ / "m.json", bad);
  EXPECT_THROW(deepcot::load_model<double>(dir_ / "m.json"), deepcot::Error);
}

TEST_F(Persistence, NonFiniteWeightRejected) {
  auto cfg = sample_config();
  auto m = deepcot::random_model<double>(cfg, 8);
  deepcot::save_model(m, dir_ / "m.json", dir_ / "m.bin");
  auto b = bytes_of(dir_ / "m.bin");
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(b.data(), &inf, 4);
  put_bytes(dir_ / "m.bin", b);
  auto j = load_json(dir_ / "m.json");
  j["checksum"] = deepcot::crc32_of(b);
  store_json(dir_ / "m.json", j);
  EXPECT_THROW(deepcot::load_model<double>(dir_ / "m.json"), deepcot::Error);
}

TEST_F(Persistence, MissingFileIsIoError) {
  EXPECT_THROW(deepcot::load_model<double>(dir_ / "nope.json"), deepcot::IoError);
}

TEST_F(Persistence, Crc32KnownValue) {
  const std::string s = "123456789";
  const std::vector<unsigned char> b(s.begin(), s.end());
  EXPECT_EQ(deepcot::crc32_of(b), 0xCBF43926u);
}

TEST_F(Persistence, StreamRoundTrip) {
  const auto x = deepcot::random_tokens<double>(7, 5, 9).cast<float>();
  deepcot::save_stream(dir_ / "s.bin", x);
  EXPECT_EQ(fs::file_size(dir_ / "s.bin"), deepcot::kStreamHeaderBytes + 4 * 35);
  EXPECT_EQ(deepcot::load_stream<float>(dir_ / "s.bin"), x);
}

TEST_F(Persistence, EmptyStreamAllowed) {
  deepcot::save_stream(dir_ / "s.bin", Matrix<float>(0, 4));
  const auto back = deepcot::load_stream<float>(dir_ / "s.bin");
  EXPECT_EQ(back.rows(), 0u);
  EXPECT_EQ(back.cols(), 4u);
}

TEST_F(Persistence, StreamFormatErrors) {
  EXPECT_THROW(deepcot::save_stream(dir_ / "s.bin", Matrix<float>(3, 0)), deepcot::FormatError);
  deepcot::save_stream(dir_ / "s.bin", Matrix<float>(2, 2));
  auto b = bytes_of(dir_ / "s.bin");
  auto zero_d = b;
  std::fill(zero_d.begin() + 8, zero_d.begin() + 16, 0);
  put_bytes(dir_ / "z.bin", zero_d);
  EXPECT_THROW(deepcot::load_stream<float>(dir_ / "z.bin"), deepcot::FormatError);
  auto truncated = b;
  truncated.pop_back();
  put_bytes(dir_ / "t.bin", truncated);
  EXPECT_THROW(deepcot::load_stream<float>(dir_ / "t.bin"), deepcot::FormatError);
  auto magic = b;
  magic[0] = 'X';
  put_bytes(dir_ / "m.bin", magic);
  EXPECT_THROW(deepcot::load_stream<float>(dir_ / "m.bin"), deepcot::FormatError);
}

TEST_F(Persistence, ConvertRejectsAbsolutePositions) {
  auto cfg = sample_config();
  cfg.positional = deepcot::AbsolutePositional{64};
  try {
    (void)deepcot::convert_config(cfg);
    FAIL() << "expected ConfigError";
  } catch (const deepcot::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("circular"), std::string::npos);
  }
}

TEST_F(Persistence, ConvertWarnsWithoutPositions) {
  auto cfg = sample_config();
  cfg.positional = deepcot::NoPositional{};
  cfg.mode = deepcot::ExecutionMode::OracleBidirectional;
  const auto r = deepcot::convert_config(cfg);
  EXPECT_EQ(r.config.mode, deepcot::ExecutionMode::Continual);
  ASSERT_FALSE(r.warnings.empty());
  EXPECT_NE(r.warnings[0].find("no positional"), std::string::npos);
}

TEST_F(Persistence, ConvertManifestKeepsWeights) {
  auto cfg = sample_config();
  cfg.positional = deepcot::RopePositional{};
  cfg.mode = deepcot::ExecutionMode::OracleBidirectional;
  const auto m = deepcot::random_model<double>(cfg, 10);
  deepcot::save_model(m, dir_ / "in.json", dir_ / "in.bin");
  fs::create_directories(dir_ / "out");
  const auto warnings = deepcot::convert_manifest(dir_ / "in.json", dir_ / "out" / "conv.json");
  EXPECT_TRUE(warnings.empty());
  const auto a = deepcot::load_model<double>(dir_ / "in.json");
  const auto b = deepcot::load_model<double>(dir_ / "out" / "conv.json");
  EXPECT_EQ(b.config.mode, deepcot::ExecutionMode::Continual);
  EXPECT_EQ(a.layers, b.layers);
}

TEST_F(Persistence, ReportJson) {
  ModelConfig cfg;
  cfg.window = 3;
  const auto m = deepcot::random_model<double>(cfg, 11);
  const auto rep = deepcot::measure_deltas(m, deepcot::random_tokens<double>(5, cfg.dim, 12), 11);
  deepcot::save_report(rep, dir_ / "r.json");
  const auto j = load_json(dir_ / "r.json");
  EXPECT_EQ(j["seed"], 11);
  EXPECT_EQ(j["positions"].size(), 3u);
  EXPECT_EQ(j["attention_diff"][0].size(), 3u);
}
