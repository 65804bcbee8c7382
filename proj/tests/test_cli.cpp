#include <filesystem>
#include <set>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "vqd/commands.hpp"
#include "vqd/diagnostics.hpp"
#include "vqd/run_config.hpp"

using namespace vqd;
using namespace vqd::cli;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "vqd_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string last_line(const std::string& text) {
  auto end = text.find_last_not_of('\n');
  auto start = text.rfind('\n', end);
  return text.substr(start == std::string::npos ? 0 : start + 1, end - start);
}

// A configuration small enough for unit-test training runs.
std::string tiny_config(const fs::path& runs) {
  return "# tiny\ngrid=4\nqueries=4\nwidth=16\nheads=2\nlayers=2\nffn_width=16\nepochs=2\n"
         "batch_size=4\nruns_dir=" +
         runs.string() + "\n";
}

struct Workspace {
  fs::path dir, config, train, val;
};

Workspace workspace(const std::string& name) {
  Workspace w;
  w.dir = fresh_dir(name);
  w.config = w.dir / "run.cfg";
  write(w.config, tiny_config(w.dir / "runs"));
  std::ostringstream out, err;
  GenDataArgs g;
  g.config = w.config;
  g.scenes = 8;
  g.seed = 3;
  g.out = w.train = w.dir / "train.jsonl";
  REQUIRE(cmd_gen_data(g, out, err) == kOk);
  g.scenes = 4;
  g.split = "val";
  g.out = w.val = w.dir / "val.jsonl";
  REQUIRE(cmd_gen_data(g, out, err) == kOk);
  return w;
}

int train_run(const Workspace& w, const std::string& run, const std::string& mode,
              std::string* output = nullptr) {
  TrainArgs t;
  t.config = w.config;
  t.data = w.train;
  t.val = w.val;
  t.run = run;
  t.mode = mode;
  std::ostringstream out, err;
  const int code = cmd_train(t, out, err);
  if (output) *output = out.str() + err.str();
  return code;
}

}  // namespace

TEST_CASE("run config defaults, comments and round trip") {
  const RunConfig d = parse_run_config("# only a comment\n\n");
  CHECK(d.detector.groups == 2);
  CHECK(d.detector.input_channels == d.scene.channels());
  CHECK(d.train.epochs == 60);
  CHECK(d.train.optimizer.lr == 1e-3);

  RunConfig c = parse_run_config("width = 32\nheads=2\ndecay_at=0.5,0.9\ndenoising_mode=deterministic\n"
                                 "class_priors=4:1.5:1.4,5:2:2,9:2.5:3\nlr=0.002\n");
  CHECK(c.detector.width == 32);
  CHECK(c.train.optimizer.decay_at == std::vector<double>{0.5, 0.9});
  CHECK(c.detector.denoising.mode == vqg::DenoisingMode::kDeterministic);
  CHECK(c.scene.priors[2].h3d == 3.0);
  const RunConfig back = parse_run_config(format_run_config(c));
  CHECK(format_run_config(back) == format_run_config(c));
  CHECK(default_entries().size() > 50);
}

TEST_CASE("run config errors name the key") {
  auto message = [](const std::string& text) {
    try {
      parse_run_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("bogus=1\n").find("bogus") != std::string::npos);
  CHECK(message("width=abc\n").find("width") != std::string::npos);
  CHECK(message("lr=1\nlr=2\n").find("duplicate") != std::string::npos);
  CHECK(message("width=30\n").find("divisible") != std::string::npos);
  CHECK(message("no equals sign\n").find("line 1") != std::string::npos);
  CHECK(message("grid=8\nnum_classes=2\n").find("priors") != std::string::npos);
}

TEST_CASE("gen-data writes deterministic files and refuses to overwrite") {
  const auto dir = fresh_dir("gen");
  std::ostringstream out, err;
  GenDataArgs g;
  g.out = dir / "empty.jsonl";
  g.scenes = 0;
  CHECK(cmd_gen_data(g, out, err) == kOk);
  CHECK(slurp(g.out).empty());
  CHECK(cmd_gen_data(g, out, err) == kUsageError);
  g.force = true;
  CHECK(cmd_gen_data(g, out, err) == kOk);

  g.scenes = 500;
  g.seed = 4;
  g.out = dir / "a.jsonl";
  CHECK(cmd_gen_data(g, out, err) == kOk);
  g.out = dir / "b.jsonl";
  CHECK(cmd_gen_data(g, out, err) == kOk);
  CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
  CHECK(scenes::load_dataset(dir / "a.jsonl").size() == 500);

  g.split = "val";
  g.out = dir / "val.jsonl";
  CHECK(cmd_gen_data(g, out, err) == kOk);
  CHECK(slurp(dir / "val.jsonl") != slurp(dir / "a.jsonl"));
  CHECK(out.str().find("500 scenes") != std::string::npos);
}

TEST_CASE("train maps modes, is deterministic, and eval reads the run") {
  const auto w = workspace("train");
  std::string log;
  REQUIRE(train_run(w, "base", "baseline", &log) == kOk);
  const RunConfig written = load_run_config(w.dir / "runs/base/config.txt");
  CHECK(written.detector.noisy_groups == 0);
  CHECK(written.detector.lambda_dn == 0.0);
  CHECK(written.detector.lambda_distill == 0.0);

  REQUIRE(train_run(w, "vdn1", "fld+vdn") == kOk);
  REQUIRE(train_run(w, "vdn2", "fld+vdn") == kOk);
  CHECK(slurp(w.dir / "runs/vdn1/metrics.csv") == slurp(w.dir / "runs/vdn2/metrics.csv"));
  CHECK(slurp(w.dir / "runs/vdn1/checkpoint.bin") == slurp(w.dir / "runs/vdn2/checkpoint.bin"));
  CHECK(diagnostics::read_run_csv(w.dir / "runs/vdn1/metrics.csv").size() == 2);

  EvalArgs e;
  e.checkpoint = w.dir / "runs/vdn1/checkpoint.bin";
  e.data = w.val;
  std::ostringstream o1, o2, err;
  REQUIRE(cmd_eval(e, o1, err) == kOk);
  REQUIRE(cmd_eval(e, o2, err) == kOk);
  CHECK(o1.str() == o2.str());
  CHECK(last_line(o1.str()).rfind("AP40=", 0) == 0);
  CHECK(o1.str().find("class 2") != std::string::npos);
  e.iou = 0.999;
  std::ostringstream o3;
  REQUIRE(cmd_eval(e, o3, err) == kOk);
  CHECK(std::stod(last_line(o3.str()).substr(5)) < 0.01);

  DiagnoseArgs d;
  d.runs_dir = w.dir / "runs";
  d.runs = {"vdn1"};
  std::ostringstream t1;
  REQUIRE(cmd_diagnose(d, t1, err) == kOk);
  CHECK(t1.str().find("sparser=vdn1") != std::string::npos);
  d.runs = {"vdn1", "vdn2"};
  std::ostringstream t2;
  REQUIRE(cmd_diagnose(d, t2, err) == kOk);
  // Identical runs give identical column pairs on every epoch row.
  std::istringstream rows(t2.str());
  std::string line;
  std::getline(rows, line);
  while (std::getline(rows, line) && line.rfind("final", 0) != 0) {
    std::istringstream cells(line);
    std::string epoch, h1, m1, h2, m2;
    cells >> epoch >> h1 >> m1 >> h2 >> m2;
    CHECK(h1 == h2);
    CHECK(m1 == m2);
  }
}

TEST_CASE("command failures map to exit codes") {
  const auto w = workspace("errors");
  std::ostringstream out, err;
  EvalArgs e;
  e.checkpoint = w.dir / "missing.bin";
  e.data = w.val;
  CHECK(cmd_eval(e, out, err) == kDataError);

  TrainArgs t;
  t.config = w.config;
  t.data = w.dir / "nope.jsonl";
  t.val = w.val;
  t.run = "x";
  CHECK(cmd_train(t, out, err) == kDataError);
  t.data = w.train;
  t.mode = "vdn";
  CHECK(cmd_train(t, out, err) == kUsageError);

  write(w.dir / "bad.cfg", "widht=16\n");
  t.mode.reset();
  t.config = w.dir / "bad.cfg";
  std::ostringstream bad;
  CHECK(cmd_train(t, out, bad) == kUsageError);
  CHECK(bad.str().find("widht") != std::string::npos);

  // A dataset generated for another grid size is rejected.
  GenDataArgs g;
  g.out = w.dir / "grid16.jsonl";
  g.scenes = 2;
  REQUIRE(cmd_gen_data(g, out, err) == kOk);
  t.config = w.config;
  t.data = g.out;
  CHECK(cmd_train(t, out, err) == kDataError);

  write(w.dir / "corrupt.jsonl", "{\"scene_id\": 1}\n");
  t.data = w.dir / "corrupt.jsonl";
  std::ostringstream corrupt;
  CHECK(cmd_train(t, out, corrupt) == kDataError);
  CHECK(corrupt.str().find(":1:") != std::string::npos);
}

TEST_CASE("grad-check lists every op once and fails under perturbation") {
  std::ostringstream out, err;
  CHECK(cmd_grad_check({}, out, err) == kOk);
  std::istringstream lines(out.str());
  std::set<std::string> names;
  std::string line;
  while (std::getline(lines, line)) {
    if (line.find("max_rel_error") == std::string::npos) continue;
    std::istringstream cells(line);
    std::string name;
    cells >> name;
    CHECK(names.insert(name).second);
    CHECK(line.find(" ok") != std::string::npos);
  }
  CHECK(names.count("end_to_end_model") == 1);
  CHECK(names.count("sin") == 1);

  GradCheckArgs bad;
  bad.perturb = 1e-2;
  std::ostringstream out2;
  CHECK(cmd_grad_check(bad, out2, err) == kNumericError);
  CHECK(out2.str().find("FAIL") != std::string::npos);
}
