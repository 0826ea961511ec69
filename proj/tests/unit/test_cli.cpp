#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "cli.hpp"
#include "ditflow/checkpoint.hpp"
#include "ditflow/errors.hpp"
#include "ditflow/synthgen.hpp"
#include "ditflow/vtns.hpp"

using namespace ditflow;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kFixture = fs::path(DITFLOW_FIXTURE_DIR) / "toy_dit";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "ditflow_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir.parent_path());
  return dir;
}

// Whole-cell motion clip saved as VTNS.
fs::path reference_clip() {
  static const fs::path path = [] {
    const auto dir = scratch("ref");
    fs::create_directories(dir);
    synth::SpecOptions opts;
    opts.cell_multiple = true;
    const auto spec = synth::random_spec(1, 17, ModelConfig{}, opts);
    const auto p = dir / "clip.vtns";
    vtns::save(p, synth::gen_clip(spec, ModelConfig{}).first.pixels);
    return p;
  }();
  return path;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DITFLOW_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string bytes(const fs::path& p) { return vtns::read_file(p); }

}  // namespace

TEST_CASE("transfer defaults") {
  const auto d = cli::default_args("transfer");
  CHECK(d["tau"] == 2.0);
  CHECK(d["kopt"] == 5);
  CHECK(d["topt"] == 0.2);
  CHECK(d["lr_start"] == 0.002);
  CHECK(d["lr_end"] == 0.001);
  CHECK(d["inject_kv"] == true);
  CHECK(d["target"] == "latent");
  CHECK(d["block"].is_null());
  CHECK(d["ckpt"].is_null());
}

TEST_CASE("argument resolution") {
  CHECK_THROWS_AS(cli::resolve_args("transfer", {{"ckpt", "a"}}), cli::UsageError);
  CHECK_THROWS_AS(cli::resolve_args("transfer", {{"ckpt", "a"}, {"ref", "b"}, {"bogus", 1}}), cli::UsageError);
  CHECK_THROWS_AS(cli::resolve_args("transfer", {{"ckpt", "a"}, {"ref", "b"}, {"kopt", -1}}), cli::UsageError);
  CHECK_THROWS_AS(cli::resolve_args("transfer", {{"ckpt", "a"}, {"ref", "b"}, {"tau", "x"}}), cli::UsageError);
  CHECK_THROWS_AS(cli::resolve_args("nope", json::object()), cli::UsageError);
  const auto r = cli::resolve_args("transfer", {{"ckpt", "a"}, {"ref", "b"}, {"tau", 3}});
  CHECK(fs::path(r["ckpt"].get<std::string>()).is_absolute());
  CHECK(r["tau"].is_number_float());
  CHECK(r["kopt"] == 5);
}

TEST_CASE("run directory naming") {
  setenv("DITFLOW_OUT_ROOT", "/tmp/ditflow_root", 1);
  const auto a = cli::default_run_dir("sample", cli::resolve_args("sample", {{"ckpt", "x"}}));
  const auto b = cli::default_run_dir("sample", cli::resolve_args("sample", {{"ckpt", "x"}}));
  const auto c = cli::default_run_dir("sample", cli::resolve_args("sample", {{"ckpt", "x"}, {"seed", 1}}));
  unsetenv("DITFLOW_OUT_ROOT");
  CHECK(a == b);
  CHECK(a != c);
  CHECK(a.parent_path() == "/tmp/ditflow_root");
  CHECK(a.filename().string().rfind("sample-", 0) == 0);
}

TEST_CASE("pgm encoding") {
  Tensor<float> v({1, 1, 1, 4}, std::vector<float>{-1.0f, 0.0f, 1.0f, 3.0f});
  const auto pgm = cli::encode_pgm(v, 0, 0);
  const std::string header = "P5\n4 1\n255\n";
  REQUIRE(pgm.size() == header.size() + 4);
  CHECK(pgm.compare(0, header.size(), header) == 0);
  CHECK((unsigned char)pgm[header.size()] == 0);
  CHECK((unsigned char)pgm[header.size() + 1] == 128);
  CHECK((unsigned char)pgm[header.size() + 2] == 255);
  CHECK((unsigned char)pgm[header.size() + 3] == 255);
  CHECK_THROWS_AS(cli::encode_pgm(v, 1, 0), ShapeError);
}

TEST_CASE("transfer with no optimization steps equals plain sampling") {
  std::ostringstream log;
  const json common = {{"ckpt", kFixture.string()}, {"cond", 2}, {"seed", 3}};
  auto t_args = common;
  t_args["ref"] = reference_clip().string();
  t_args["kopt"] = 0;
  t_args["baseline"] = false;

  SUBCASE("without key/value injection") {
    const auto s = cli::execute("sample", common, scratch("s0"), log);
    t_args["inject_kv"] = false;
    const auto t = cli::execute("transfer", t_args, scratch("t0"), log);
    CHECK(bytes(s.dir / "tensors/video.vtns") == bytes(t.dir / "tensors/video.vtns"));
  }
  SUBCASE("with key/value injection") {
    auto s_args = common;
    s_args["ref"] = reference_clip().string();
    s_args["inject_kv"] = true;
    const auto s = cli::execute("sample", s_args, scratch("s1"), log);
    const auto t = cli::execute("transfer", t_args, scratch("t1"), log);
    CHECK(bytes(s.dir / "tensors/video.vtns") == bytes(t.dir / "tensors/video.vtns"));
  }
}

TEST_CASE("manifest replay is bit-exact and detects changes") {
  std::ostringstream log;
  const json args = {{"ckpt", kFixture.string()}, {"ref", reference_clip().string()}, {"target", "posemb"},
                     {"inject_kv", false}, {"block", 3}, {"lr_start", 0.02}, {"lr_end", 0.01}};
  const auto run = cli::execute("transfer", args, scratch("orig"), log);
  REQUIRE(run.exit_code == 0);
  const auto outputs = run.manifest["outputs"].get<std::vector<std::string>>();
  CHECK(std::count(outputs.begin(), outputs.end(), "embeddings/provenance.json") == 1);
  CHECK(std::count(outputs.begin(), outputs.end(), "metrics/loss_trace.csv") == 1);
  CHECK(run.manifest["inputs"]["ckpt"]["weights_checksum"] == load_checkpoint(kFixture).weights_checksum());

  const auto again = cli::replay(run.dir / "manifest.json", scratch("again"), true, log);
  CHECK(again.exit_code == 0);
  CHECK(again.manifest["args"] == run.manifest["args"]);

  auto trace = bytes(run.dir / "metrics/loss_trace.csv");
  trace.back() = trace.back() == '\n' ? ' ' : '\n';
  vtns::write_file(run.dir / "metrics/loss_trace.csv", trace);
  CHECK(cli::replay(run.dir / "manifest.json", scratch("tampered"), true, log).exit_code == 1);
}

TEST_CASE("existing run directories are kept unless forced") {
  std::ostringstream log;
  const json args = {{"suite", "amf"}, {"trials", 1}};
  const auto dir = scratch("gc");
  REQUIRE(cli::execute("grad-check", args, dir, log).exit_code == 0);
  CHECK_THROWS_AS(cli::execute("grad-check", args, dir, log), cli::UsageError);
  CHECK(cli::execute("grad-check", args, dir, log, true).exit_code == 0);

  const auto foreign = scratch("foreign");
  fs::create_directories(foreign);
  vtns::write_file(foreign / "keep.txt", "x");
  CHECK_THROWS_AS(cli::execute("grad-check", args, foreign, log, true), cli::UsageError);
  CHECK(fs::exists(foreign / "keep.txt"));
}

TEST_CASE("ablate writes one row per value") {
  std::ostringstream log;
  const json args = {{"ckpt", kFixture.string()}, {"axis", "kopt"}, {"values", {0, 1, 2}}, {"clips", 1}, {"block", 3}};
  const auto run = cli::execute("ablate", args, scratch("ablate"), log);
  std::istringstream csv(bytes(run.dir / "metrics/ablate.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[1].rfind("kopt,0,", 0) == 0);
  CHECK(lines[3].rfind("kopt,2,", 0) == 0);
  CHECK_THROWS_AS(cli::execute("ablate", {{"ckpt", kFixture.string()}, {"axis", "kopt"}, {"values", {1.5}}},
                               scratch("ablate_bad"), log),
                  ConfigError);
}

TEST_CASE("diverging training keeps the last good checkpoint") {
  ModelConfig mc;
  mc.frames = 2;
  mc.height = 8;
  mc.width = 8;
  mc.dim = 16;
  mc.heads = 2;
  mc.blocks = 1;
  mc.steps = 10;
  const auto dir = scratch("diverge");
  fs::create_directories(dir);
  vtns::write_file(dir / "model.json", config_to_json(mc).dump());
  std::ostringstream log;
  const json args = {{"model_config", (dir / "model.json").string()}, {"clips", 12}, {"holdout", 4},
                     {"epochs", 2}, {"batch", 4}, {"lr", 1e30}};
  const auto run = cli::execute("train", args, dir / "run", log);
  CHECK(run.exit_code == 1);
  CHECK(fs::exists(run.dir / "checkpoint_last_good/manifest.json"));
  CHECK_FALSE(fs::exists(run.dir / "checkpoint"));
}

TEST_CASE("exit codes of the binary") {
  const auto out = scratch("exit");
  const std::string ckpt = " --ckpt " + kFixture.string();
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("sample" + ckpt + " --bogus 1 --out " + (out / "a").string()) == 2);
  CHECK(run_cli("sample --ckpt /nonexistent/ckpt --out " + (out / "b").string()) == 2);
  CHECK(run_cli("sample" + ckpt + " --seed -1 --out " + (out / "c").string()) == 2);
  CHECK(run_cli("sample" + ckpt + " --cond 99 --out " + (out / "d").string()) == 2);
  CHECK(run_cli("transfer" + ckpt + " --ref /nonexistent.vtns --out " + (out / "e").string()) == 2);
  CHECK(run_cli("sample" + ckpt + " --cond 1 --out " + (out / "f").string()) == 0);
  CHECK(fs::exists(out / "f/frames/video_f0.pgm"));
  CHECK(run_cli("replay --manifest " + (out / "f/manifest.json").string() + " --check") == 0);
}
