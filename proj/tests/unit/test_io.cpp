#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "ditflow/checkpoint.hpp"
#include "ditflow/errors.hpp"
#include "ditflow/rng.hpp"
#include "ditflow/vtns.hpp"

using namespace ditflow;
namespace fs = std::filesystem;

TEST_CASE("vtns header layout") {
  Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const auto bytes = vtns::encode(t);
  REQUIRE(bytes.size() == 12 + 2 * 8 + 6 * 4);
  CHECK(bytes.compare(0, 4, "VTNS") == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 2);
  for (int i = 7; i < 12; ++i) CHECK(bytes[i] == 0);
  std::uint64_t d0 = 0;
  std::memcpy(&d0, bytes.data() + 12, 8);
  CHECK(d0 == 2);
  float last = 0;
  std::memcpy(&last, bytes.data() + bytes.size() - 4, 4);
  CHECK(last == 6.0f);
}

TEST_CASE("vtns round-trips bit-exactly") {
  Rng rng(1);
  const auto dir = fs::temp_directory_path() / "ditflow_test_vtns";
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (const Shape& dims : {Shape{1}, Shape{7}, Shape{3, 5}, Shape{2, 3, 4, 5}}) {
    auto f = rng.normal_tensor<float>(dims);
    auto d = rng.normal_tensor<double>(dims);
    d[0] = -0.0;
    CHECK(bit_identical(vtns::decode_as<float>(vtns::encode(f)), f));
    CHECK(bit_identical(vtns::decode_as<double>(vtns::encode(d)), d));
    vtns::save(dir / "f.vtns", f);
    vtns::save(dir / "d.vtns", d);
    CHECK(bit_identical(vtns::load<float>(dir / "f.vtns"), f));
    CHECK(bit_identical(vtns::load<double>(dir / "d.vtns"), d));
    CHECK(vtns::encode(vtns::load<double>(dir / "d.vtns")) == vtns::read_file(dir / "d.vtns"));
  }
  fs::remove_all(dir);
}

TEST_CASE("vtns rejects malformed input") {
  Tensor<double> t({4}, 1.5);
  auto bytes = vtns::encode(t);
  CHECK_THROWS_AS(vtns::decode_as<float>(bytes), FormatError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(vtns::decode(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(vtns::decode(bad), FormatError);
  bad = bytes;
  bad[5] = 7;
  CHECK_THROWS_AS(vtns::decode(bad), FormatError);
  CHECK_THROWS_AS(vtns::decode(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(vtns::decode(bytes + "x"), FormatError);
  CHECK_THROWS_AS(vtns::decode(bytes.substr(0, 10)), FormatError);
  CHECK_THROWS_AS(vtns::load<double>("/nonexistent/ditflow.vtns"), FormatError);
}

TEST_CASE("checkpoints round-trip and detect corruption") {
  ModelConfig cfg;
  cfg.frames = 2;
  cfg.height = 8;
  cfg.width = 8;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.blocks = 2;
  DiTModel<float> model(cfg, 5);
  const auto dir = fs::temp_directory_path() / "ditflow_test_ckpt";
  fs::remove_all(dir);
  save_checkpoint(dir, model, {{"note", "unit"}});
  auto back = load_checkpoint(dir);
  CHECK(back.config() == cfg);
  CHECK(back.weights_checksum() == model.weights_checksum());
  CHECK(config_from_json(config_to_json(cfg)) == cfg);

  auto manifest = nlohmann::json::parse(vtns::read_file(dir / "manifest.json"));
  CHECK(manifest["format"] == kCheckpointFormat);
  CHECK(manifest["info"]["note"] == "unit");

  // Flip one weight.
  auto w = vtns::load<float>(dir / "tensors" / "block1.attn.wq.vtns");
  w[3] += 1.0f;
  vtns::save(dir / "tensors" / "block1.attn.wq.vtns", w);
  CHECK_THROWS_AS(load_checkpoint(dir), FormatError);

  fs::remove(dir / "tensors" / "block1.attn.wq.vtns");
  CHECK_THROWS_AS(load_checkpoint(dir), FormatError);
  CHECK_THROWS_AS(load_checkpoint(dir / "nowhere"), FormatError);

  auto bad = config_to_json(cfg);
  bad["dim"] = 15;
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);
  bad.erase("dim");
  CHECK_THROWS_AS(config_from_json(bad), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("committed toy checkpoint loads") {
  const fs::path fixture = fs::path(DITFLOW_FIXTURE_DIR) / "toy_dit";
  auto model = load_checkpoint(fixture);
  CHECK(model.config() == ModelConfig{});
}
