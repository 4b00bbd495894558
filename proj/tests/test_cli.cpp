#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nrsfm/cli.h"
#include "nrsfm/data.h"
#include "nrsfm/former.h"
#include "nrsfm/io.h"

#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace nrsfm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("nrsfm_test_cli_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

struct Run {
  int code = 0;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "nrsfm");
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Run r;
  r.code = cli::run(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

void write_text(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

}  // namespace

TEST_CASE("usage errors exit with 1") {
  TempDir tmp;
  Run r = run({"synth", "--frames", "4", "--bogus", "--out", tmp.file("a.json")});
  CHECK(r.code == 1);
  CHECK(r.err.find("--bogus") != std::string::npos);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(run({}).code == 1);
  CHECK(run({"dance"}).code == 1);
  CHECK(run({"synth", "--frames", "0", "--out", tmp.file("a.json")}).code == 1);
  CHECK_FALSE(fs::exists(tmp.file("a.json")));
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"fit", "--in", tmp.file("missing.json"), "--out", tmp.file("d.json")}).code == 1);
}

TEST_CASE("configuration precedence") {
  TempDir tmp;
  write_text(tmp.file("cfg.json"), R"({"frames": 5, "joints": 6, "noise": 0.5})");
  REQUIRE(run({"synth", "--config", tmp.file("cfg.json"), "--out", tmp.file("a.json")}).code == 0);
  SyntheticScene s = load_scene(tmp.file("a.json"));
  CHECK(s.w.size() == 5);
  CHECK(s.skeleton.joints() == 6);
  CHECK(s.params.noise_sigma == 0.5);

  REQUIRE(run({"synth", "--config", tmp.file("cfg.json"), "--frames", "7", "--out", tmp.file("b.json")}).code == 0);
  s = load_scene(tmp.file("b.json"));
  CHECK(s.w.size() == 7);
  CHECK(s.params.noise_sigma == 0.5);

  REQUIRE(run({"synth", "--out", tmp.file("c.json")}).code == 0);
  CHECK(load_scene(tmp.file("c.json")).w.size() == GeneratorParams{}.frames);

  write_text(tmp.file("unknown.json"), R"({"frames": 5, "colour": "red"})");
  const Run r = run({"synth", "--config", tmp.file("unknown.json"), "--out", tmp.file("d.json")});
  CHECK(r.code == 1);
  CHECK(r.err.find("colour") != std::string::npos);
  write_text(tmp.file("broken.json"), R"({"frames": )");
  CHECK(run({"synth", "--config", tmp.file("broken.json"), "--out", tmp.file("d.json")}).code == 1);
  CHECK_FALSE(fs::exists(tmp.file("d.json")));
}

TEST_CASE("seed from the environment") {
  TempDir tmp;
  REQUIRE(run({"synth", "--frames", "3", "--seed", "7", "--out", tmp.file("a.json")}).code == 0);
  ::setenv("NRSFM_SEED", "7", 1);
  REQUIRE(run({"synth", "--frames", "3", "--out", tmp.file("b.json")}).code == 0);
  ::setenv("NRSFM_SEED", "seven", 1);
  CHECK(run({"synth", "--frames", "3", "--out", tmp.file("c.json")}).code == 1);
  ::unsetenv("NRSFM_SEED");
  REQUIRE(run({"synth", "--frames", "3", "--out", tmp.file("d.json")}).code == 0);
  CHECK(io::read_file(tmp.file("a.json")) == io::read_file(tmp.file("b.json")));
  CHECK(io::read_file(tmp.file("a.json")) != io::read_file(tmp.file("d.json")));
}

TEST_CASE("pipeline and reproducibility") {
  TempDir tmp;
  const std::string scene = tmp.file("scene.json");
  REQUIRE(run({"synth", "--frames", "8", "--joints", "17", "--seed", "7", "--out", scene}).code == 0);

  for (const char* tag : {"a", "b"}) {
    const Run r = run({"fit", "--in", scene, "--iterations", "200", "--seed", "3", "--out",
                       tmp.file(std::string("dec_") + tag + ".json"), "--trace", tmp.file(std::string("trace_") + tag + ".csv")});
    REQUIRE(r.code == 0);
  }
  CHECK(io::read_file(tmp.file("dec_a.json")) == io::read_file(tmp.file("dec_b.json")));
  const std::string trace = io::read_file(tmp.file("trace_a.csv"));
  CHECK(trace == io::read_file(tmp.file("trace_b.csv")));
  CHECK(trace.rfind("iteration,reproj,proc,prior,smooth,total\n", 0) == 0);
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 21);

  const Run e = run({"eval", "--pred", tmp.file("dec_a.json"), "--gt", scene, "--out", tmp.file("report.json")});
  REQUIRE(e.code == 0);
  const nlohmann::json rep = io::read_json(tmp.file("report.json"));
  for (const char* k : {"mpjpe_mm", "n_mpjpe_mm", "pa_mpjpe_mm", "pck_pct", "auc_pct", "per_frame"}) CHECK(rep.contains(k));
  CHECK(rep["per_frame"].size() == 8);
  CHECK(rep["pa_mpjpe_mm"].get<double>() >= 0.0);
  CHECK(rep["pck_pct"].get<double>() <= 100.0);

  const Run stdout_eval = run({"eval", "--pred", tmp.file("dec_a.json"), "--gt", scene, "--frame", "canonical",
                               "--resolve-flip"});
  REQUIRE(stdout_eval.code == 0);
  CHECK(nlohmann::json::parse(stdout_eval.out)["frame"] == "canonical");

  REQUIRE(run({"align", "--in", scene, "--out", tmp.file("aligned.json"), "--residuals", tmp.file("res.csv"),
               "--threads", "2"})
              .code == 0);
  CHECK(io::read_file(tmp.file("res.csv")).rfind("frame,residual\n", 0) == 0);
  CHECK(load_sequence(tmp.file("aligned.json")).poses.size() == 8);

  REQUIRE(run({"baseline", "--in", scene, "--out", tmp.file("base.csv")}).code == 0);
  const std::string base = io::read_file(tmp.file("base.csv"));
  CHECK(base.rfind("k,residual\n", 0) == 0);
  CHECK(std::count(base.begin(), base.end(), '\n') == 1 + 5);
  CHECK(run({"baseline", "--in", scene, "--k-max", "9", "--out", tmp.file("base2.csv")}).code == 1);
}

TEST_CASE("training commands") {
  TempDir tmp;
  const std::string scene = tmp.file("scene.json");
  REQUIRE(run({"synth", "--frames", "8", "--joints", "5", "--seed", "2", "--out", scene}).code == 0);
  REQUIRE(run({"train-prior", "--joints", "5", "--sequences", "4", "--frames", "4", "--epochs", "2", "--hidden", "8",
               "--steps", "10", "--out", tmp.file("prior.json"), "--loss-out", tmp.file("prior.csv")})
              .code == 0);
  CHECK(io::read_file(tmp.file("prior.csv")).rfind("epoch,loss\n", 0) == 0);
  CHECK(load_diffusion_checkpoint(tmp.file("prior.json")).schedule().steps() == 10);

  REQUIRE(run({"fit", "--in", scene, "--iterations", "20", "--prior", tmp.file("prior.json"), "--beta-prior", "0.001",
               "--out", tmp.file("dec.json")})
              .code == 0);
  const Run noprior = run({"fit", "--in", scene, "--iterations", "5", "--beta-prior", "1", "--out", tmp.file("d2.json")});
  CHECK(noprior.code == 0);
  CHECK(noprior.err.find("prior term disabled") != std::string::npos);

  REQUIRE(run({"train-former", "--in", scene, "--frames", "4", "--dim", "8", "--blocks", "1", "--heads", "2", "--steps",
               "3", "--out", tmp.file("former.json"), "--loss-out", tmp.file("former.csv")})
              .code == 0);
  CHECK(load_former_checkpoint(tmp.file("former.json")).config().joints == 5);
  CHECK(run({"train-former", "--in", scene, "--frames", "9", "--out", tmp.file("f2.json")}).code == 1);
  CHECK(run({"train-former", "--in", scene, "--frames", "4", "--dim", "6", "--heads", "4", "--out", tmp.file("f3.json")})
            .code == 1);
}

TEST_CASE("failures leave no output behind") {
  TempDir tmp;
  const std::string scene = tmp.file("scene.json");
  REQUIRE(run({"synth", "--frames", "5", "--joints", "14", "--out", scene}).code == 0);
  const Run r = run({"fit", "--in", scene, "--lr", "1e300", "--iterations", "5", "--out", tmp.file("dec.json"), "--trace",
                     tmp.file("t.csv")});
  CHECK(r.code == 2);
  CHECK(r.err.find("numerical failure") != std::string::npos);
  CHECK_FALSE(fs::exists(tmp.file("dec.json")));
  CHECK_FALSE(fs::exists(tmp.file("t.csv")));
  for (const auto& e : fs::directory_iterator(tmp.path)) CHECK(e.path().filename().string().find(".tmp") == std::string::npos);

  REQUIRE(run({"synth", "--frames", "5", "--joints", "17", "--out", tmp.file("other.json")}).code == 0);
  const Run m = run({"eval", "--pred", scene, "--gt", tmp.file("other.json")});
  CHECK(m.code == 1);
  CHECK(m.err.find("num_joints") != std::string::npos);
}
