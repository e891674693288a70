#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <nlohmann/json.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

// Runs the CLI inside `dir`, capturing stdout and stderr together.
Run run(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" LSLM_BIN "' " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("lslm_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("make-data twice gives identical files") {
  const auto dir = fresh_dir("det");
  REQUIRE(run(dir, "make-data --scenario voice --seed 7 --n-train 300 --n-val 30").code == 0);
  const auto first = dir / "first";
  fs::rename(dir / "runs" / "make-data", first);
  REQUIRE(run(dir, "make-data --scenario voice --seed 7 --n-train 300 --n-val 30").code == 0);
  const auto second = dir / "runs" / "make-data";
  int compared = 0;
  for (const auto& entry : fs::directory_iterator(first)) {
    const auto name = entry.path().filename();
    REQUIRE(fs::exists(second / name));
    if (name == "manifest.json") {
      auto a = nlohmann::json::parse(slurp(entry.path()));
      auto b = nlohmann::json::parse(slurp(second / name));
      a.erase("created");
      b.erase("created");
      CHECK(a == b);
    } else {
      CHECK_MESSAGE(slurp(entry.path()) == slurp(second / name), name.string());
    }
    ++compared;
  }
  CHECK(compared >= 6);
  const auto manifest = nlohmann::json::parse(slurp(first / "manifest.json"));
  CHECK(manifest.at("subcommand") == "make-data");
  CHECK(manifest.at("seed") == 7);
  CHECK(manifest.contains("versions"));
  fs::remove_all(dir);
}

TEST_CASE("exit codes") {
  const auto dir = fresh_dir("codes");
  const auto missing = run(dir, "eval-interactive --out x");
  CHECK(missing.code == 2);
  CHECK(missing.output.find("checkpoint") != std::string::npos);

  const auto unknown = run(dir, "make-data --bogus-flag 3");
  CHECK(unknown.code == 1);
  CHECK(unknown.output.find("--bogus-flag") != std::string::npos);

  CHECK(run(dir, "").code == 1);
  CHECK(run(dir, "--help").code == 0);
  CHECK(run(dir, "make-data --scenario telepathy").code == 2);

  std::ofstream(dir / "bad.json") << "{ not json";
  CHECK(run(dir, "make-data --config bad.json").code == 2);

  REQUIRE(run(dir, "make-data --seed 3 --n-train 40 --n-val 8 --out data").code == 0);
  const auto absent = run(dir, "eval-tts --data data --checkpoint nowhere.ckpt");
  CHECK(absent.code == 2);
  CHECK(absent.output.find("nowhere.ckpt") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("a tiny pipeline runs end to end from a config file") {
  const auto dir = fresh_dir("pipeline");
  std::ofstream(dir / "cfg.json") << R"({
    "world": {"n_train": 120, "n_val": 16, "n_test_interrupted": 4, "n_test_clean": 4, "n_tts_test": 4},
    "model": {"n_blocks": 1, "d_model": 16, "n_heads": 2, "d_ff": 32},
    "train": {"total_steps": 6, "warmup_steps": 2, "batch_size": 4, "eval_every": 3}
  })";
  REQUIRE(run(dir, "make-data --config cfg.json --seed 5 --out data").code == 0);
  const auto tts = run(dir, "pretrain-tts --config cfg.json --data data --out tts");
  REQUIRE_MESSAGE(tts.code == 0, tts.output);
  CHECK(fs::exists(dir / "tts" / "model.ckpt"));
  CHECK(fs::exists(dir / "tts" / "train_log.jsonl"));
  REQUIRE(run(dir, "pretrain-listener --config cfg.json --data data --out lis").code == 0);
  CHECK(fs::exists(dir / "lis" / "listener.ckpt"));
  const auto tr = run(dir,
                      "train --config cfg.json --data data --out lslm --speaking-init frozen --listening-init finetune "
                      "--speaking-ckpt tts/model.ckpt --listening-ckpt lis/listener.ckpt");
  REQUIRE_MESSAGE(tr.code == 0, tr.output);
  const auto ev = run(dir, "eval-interactive --data data --checkpoint lslm/model.ckpt --condition noise --out ev");
  REQUIRE_MESSAGE(ev.code == 0, ev.output);
  const auto report = nlohmann::json::parse(slurp(dir / "ev" / "interactive_noise.json"));
  CHECK(report.at("counts").at("tp").get<long>() + report.at("counts").at("fn").get<long>() == 4);
  REQUIRE(run(dir, "eval-tts --data data --checkpoint tts/model.ckpt --out ev").code == 0);
  CHECK(fs::exists(dir / "ev" / "tts_report.json"));
  REQUIRE(run(dir, "trace-irq --data data --checkpoint lslm/model.ckpt --out tr").code == 0);
  CHECK(fs::exists(dir / "tr" / "irq_stats.json"));
  fs::remove_all(dir);
}
