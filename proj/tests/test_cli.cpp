#include <doctest.h>

#include <aspcnet/config.hpp>
#include <aspcnet/dataio.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace aspcnet;
namespace fs = std::filesystem;

namespace {

#ifndef ASPCNET_CLI_PATH
#define ASPCNET_CLI_PATH "aspcnet"
#endif

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ASPCNET_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return status < 0 ? status : WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct Workspace {
  fs::path dir;
  Workspace() : dir(fs::temp_directory_path() / "aspcnet_cli_test") {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("config precedence: flags > file > defaults; unknown keys rejected") {
  Workspace ws;
  {
    std::ofstream f(ws / "run.cfg");
    f << "# comment line\n";
    f << "batch = 8   # trailing comment\n";
    f << "lr=0.001\n";
    f << "precision=f64\n";
  }
  RunConfig rc;
  rc.load_file(ws / "run.cfg");
  CHECK(rc.get_int("batch", 96) == 8);
  CHECK(rc.get_double("lr", 5e-4) == doctest::Approx(0.001));
  CHECK(rc.get_string("precision", "f32") == "f64");
  CHECK(rc.get_int("epochs", 200) == 200);  // default when absent

  rc.set("batch", "4");  // flag override
  CHECK(rc.get_int("batch", 96) == 4);

  {
    std::ofstream f(ws / "bad.cfg");
    f << "no_such_key=1\n";
  }
  RunConfig bad;
  CHECK_THROWS_WITH_AS(bad.load_file(ws / "bad.cfg"), doctest::Contains("no_such_key"),
                       std::invalid_argument);

  {
    std::ofstream f(ws / "badvalue.cfg");
    f << "batch=notanumber\n";
  }
  RunConfig badv;
  CHECK_THROWS_AS(badv.load_file(ws / "badvalue.cfg"), std::invalid_argument);
  CHECK_THROWS_AS(rc.set("deterministic", "maybe"), std::invalid_argument);
}

TEST_CASE("cli: split determinism and per-class counts") {
  Workspace ws;
  LabelRaster nine;
  nine.height = 30;
  nine.width = 30;
  nine.classes = 9;
  nine.labels.resize(900);
  for (int i = 0; i < 900; ++i)
    nine.labels[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(1 + (i % 9));
  save_labels(nine, ws / "nine.hsig");

  REQUIRE(run_cli("split --labels " + (ws / "nine.hsig") + " --per-class 40 --seed 7 --out " +
                  (ws / "a.split")) == 0);
  SplitSpec split = load_split(ws / "a.split");
  CHECK(split.train.size() == 360);

  REQUIRE(run_cli("split --labels " + (ws / "nine.hsig") + " --per-class 40 --seed 7 --out " +
                  (ws / "b.split")) == 0);
  CHECK(slurp(ws / "a.split") == slurp(ws / "b.split"));

  // Missing inputs are a validation error (exit 1).
  CHECK(run_cli("split --per-class 40 --out " + (ws / "x.split")) == 1);

  // ASPCNET_THREADS is the environment fallback for --threads.
  {
    const std::string cmd = std::string("ASPCNET_THREADS=2 '") + ASPCNET_CLI_PATH +
                            "' split --labels " + (ws / "nine.hsig") +
                            " --per-class 40 --seed 7 --out " + (ws / "c.split") +
                            " >/dev/null 2>&1";
    CHECK(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    CHECK(slurp(ws / "c.split") == slurp(ws / "a.split"));
  }
}

TEST_CASE("cli: synth, train, eval, map and saliency round trip") {
  Workspace ws;
  REQUIRE(run_cli("synth --size 24 --bands 6 --block 12 --seed 5 --out " + (ws / "data")) == 0);
  REQUIRE(fs::exists(ws / "data/cube.hsic"));
  REQUIRE(run_cli("split --labels " + (ws / "data/labels.hsig") +
                  " --per-class 10 --seed 5 --out " + (ws / "train.split")) == 0);

  const std::string train_args =
      "train --cube " + (ws / "data/cube.hsic") + " --labels " + (ws / "data/labels.hsig") +
      " --split " + (ws / "train.split") +
      " --patch 7 --pca-dims 4 --width-scale 0.125 --epochs 2 --batch 16 --seed 5"
      " --deterministic --out ";
  REQUIRE(run_cli(train_args + (ws / "run1")) == 0);
  REQUIRE(fs::exists(ws / "run1/train_log.csv"));
  REQUIRE(fs::exists(ws / "run1/best.ckpt"));
  REQUIRE(fs::exists(ws / "run1/last.ckpt"));

  // Deterministic mode: logs and checkpoints are byte-identical across runs,
  // with the wall-time column suppressed.
  REQUIRE(run_cli(train_args + (ws / "run2")) == 0);
  const std::string log = slurp(ws / "run1/train_log.csv");
  CHECK(log == slurp(ws / "run2/train_log.csv"));
  CHECK(slurp(ws / "run1/last.ckpt") == slurp(ws / "run2/last.ckpt"));
  CHECK(log.find("epoch,loss,train_oa,wall_seconds") == 0);
  std::istringstream lines(log);
  std::string line;
  std::getline(lines, line);
  while (std::getline(lines, line)) CHECK(line.substr(line.rfind(',') + 1) == "0.000");

  // Evaluation reports a total equal to the test partition size.
  {
    const int code = std::system(("'" ASPCNET_CLI_PATH "' eval --cube " + (ws / "data/cube.hsic") +
                                  " --labels " + (ws / "data/labels.hsig") + " --split " +
                                  (ws / "train.split") + " --checkpoint " + (ws / "run1/last.ckpt") +
                                  " --out " + (ws / "metrics.txt") + " >/dev/null 2>&1")
                                     .c_str());
    REQUIRE(WEXITSTATUS(code) == 0);
    const std::string report = slurp(ws / "metrics.txt");
    LabelRaster labels = load_labels(ws / "data/labels.hsig");
    SplitSpec split = load_split(ws / "train.split");
    const std::size_t expected = test_pixels(labels, split).size();
    CHECK(report.find("test samples: " + std::to_string(expected)) != std::string::npos);
    CHECK(report.find("OA:") != std::string::npos);
    CHECK(report.find("Kappa:") != std::string::npos);
  }

  // Classification map: labeled-only and all-pixels modes.
  REQUIRE(run_cli("map --cube " + (ws / "data/cube.hsic") + " --labels " +
                  (ws / "data/labels.hsig") + " --palette " + (ws / "data/palette.txt") +
                  " --checkpoint " + (ws / "run1/last.ckpt") + " --out " + (ws / "map.ppm")) == 0);
  const std::string ppm = slurp(ws / "map.ppm");
  CHECK(ppm.substr(0, 11) == "P6\n24 24\n25");
  CHECK(ppm.size() == std::string("P6\n24 24\n255\n").size() + 24 * 24 * 3);

  REQUIRE(run_cli("map --all-pixels --cube " + (ws / "data/cube.hsic") + " --palette " +
                  (ws / "data/palette.txt") + " --checkpoint " + (ws / "run1/last.ckpt") +
                  " --out " + (ws / "map_all.ppm")) == 0);
  CHECK(fs::exists(ws / "map_all.ppm"));

  // The map is deterministic: a second run is byte-identical.
  REQUIRE(run_cli("map --cube " + (ws / "data/cube.hsic") + " --labels " +
                  (ws / "data/labels.hsig") + " --palette " + (ws / "data/palette.txt") +
                  " --checkpoint " + (ws / "run1/last.ckpt") + " --out " +
                  (ws / "map_again.ppm")) == 0);
  CHECK(ppm == slurp(ws / "map_again.ppm"));

  // Saliency: patch-sized output, byte-identical across calls.
  const std::string sal_args = "saliency --cube " + (ws / "data/cube.hsic") + " --checkpoint " +
                               (ws / "run1/last.ckpt") + " --row 12 --col 12 --class 1 --out ";
  REQUIRE(run_cli(sal_args + (ws / "sal1.ppm")) == 0);
  REQUIRE(run_cli(sal_args + (ws / "sal2.ppm")) == 0);
  const std::string sal = slurp(ws / "sal1.ppm");
  CHECK(sal == slurp(ws / "sal2.ppm"));
  CHECK(sal.substr(0, 9) == "P6\n7 7\n25");

  // Out-of-bounds saliency pixel is a validation error.
  CHECK(run_cli("saliency --cube " + (ws / "data/cube.hsic") + " --checkpoint " +
                (ws / "run1/last.ckpt") + " --row 99 --col 0 --class 1 --out " +
                (ws / "sal_bad.ppm")) == 1);

  // Resume: continue run1 to 4 epochs; the log keeps monotone epoch numbers.
  REQUIRE(run_cli(train_args + (ws / "run1") + " --resume --epochs 4") == 0);
  std::istringstream resumed(slurp(ws / "run1/train_log.csv"));
  std::vector<int> epochs;
  std::getline(resumed, line);
  while (std::getline(resumed, line)) epochs.push_back(std::stoi(line.substr(0, line.find(','))));
  CHECK(epochs == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("cli: f64 precision path and runtime-error exit code") {
  Workspace ws;
  REQUIRE(run_cli("synth --size 24 --bands 6 --block 12 --seed 2 --out " + (ws / "data")) == 0);
  REQUIRE(run_cli("split --labels " + (ws / "data/labels.hsig") +
                  " --per-class 8 --seed 2 --out " + (ws / "s.split")) == 0);

  // Command-line flags override the configuration file.
  {
    std::ofstream f(ws / "one_epoch.cfg");
    f << "epochs=1\npatch=7\npca_dims=4\nwidth_scale=0.125\nbatch=16\nseed=2\n";
  }
  REQUIRE(run_cli("train --config " + (ws / "one_epoch.cfg") + " --cube " +
                  (ws / "data/cube.hsic") + " --labels " + (ws / "data/labels.hsig") +
                  " --split " + (ws / "s.split") + " --epochs 2 --out " + (ws / "prec")) == 0);
  {
    std::istringstream log(slurp(ws / "prec/train_log.csv"));
    std::string line;
    int rows = -1;  // skip header
    while (std::getline(log, line)) ++rows;
    CHECK(rows == 2);  // the flag's two epochs, not the file's one
  }
  REQUIRE(run_cli("train --cube " + (ws / "data/cube.hsic") + " --labels " +
                  (ws / "data/labels.hsig") + " --split " + (ws / "s.split") +
                  " --patch 7 --pca-dims 4 --width-scale 0.125 --epochs 1 --batch 16"
                  " --precision f64 --seed 2 --out " +
                  (ws / "f64run")) == 0);
  REQUIRE(run_cli("eval --cube " + (ws / "data/cube.hsic") + " --labels " +
                  (ws / "data/labels.hsig") + " --split " + (ws / "s.split") +
                  " --checkpoint " + (ws / "f64run/last.ckpt") + " --precision f64") == 0);

  // A corrupted checkpoint is a runtime failure (exit 2).
  {
    std::ofstream f(ws / "broken.ckpt", std::ios::binary);
    f << "GARBAGE!!" << std::string(32, 'z');
  }
  CHECK(run_cli("eval --cube " + (ws / "data/cube.hsic") + " --labels " +
                (ws / "data/labels.hsig") + " --split " + (ws / "s.split") + " --checkpoint " +
                (ws / "broken.ckpt")) == 2);

  // An unknown precision is a validation error (exit 1).
  CHECK(run_cli("eval --cube " + (ws / "data/cube.hsic") + " --labels " +
                (ws / "data/labels.hsig") + " --split " + (ws / "s.split") + " --checkpoint " +
                (ws / "f64run/last.ckpt") + " --precision f16") == 1);
}

TEST_CASE("cli: lr 0 keeps the training accuracy flat") {
  Workspace ws;
  REQUIRE(run_cli("synth --size 24 --bands 6 --block 12 --seed 9 --out " + (ws / "data")) == 0);
  REQUIRE(run_cli("split --labels " + (ws / "data/labels.hsig") +
                  " --per-class 10 --seed 9 --out " + (ws / "s.split")) == 0);
  // Full-batch epochs so batch statistics cannot change between epochs.
  REQUIRE(run_cli("train --cube " + (ws / "data/cube.hsic") + " --labels " +
                  (ws / "data/labels.hsig") + " --split " + (ws / "s.split") +
                  " --patch 7 --pca-dims 4 --width-scale 0.125 --epochs 3 --batch 64 --lr 0"
                  " --seed 9 --deterministic --out " +
                  (ws / "frozen")) == 0);
  std::istringstream lines(slurp(ws / "frozen/train_log.csv"));
  std::string line, first_oa;
  std::getline(lines, line);  // header
  int rows = 0;
  while (std::getline(lines, line)) {
    std::istringstream cells(line);
    std::string epoch, loss, oa;
    std::getline(cells, epoch, ',');
    std::getline(cells, loss, ',');
    std::getline(cells, oa, ',');
    if (rows == 0) first_oa = oa;
    CHECK(oa == first_oa);
    ++rows;
  }
  CHECK(rows == 3);
}
