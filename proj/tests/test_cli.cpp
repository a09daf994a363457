// End-to-end exercise of the command line tool. Invoked with the binary path
// as argv[1]; returns nonzero on the first failed check.
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {
int failures = 0;

void expect(bool ok, const std::string& what) {
  if (!ok) {
    ++failures;
    std::cerr << "FAILED: " << what << "\n";
  }
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
  if (rc == -1) return -1;
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

fs::path find_run_dir(const fs::path& root, const std::string& prefix) {
  if (!fs::is_directory(root)) return {};
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.path().filename().string().rfind(prefix, 0) == 0) return e.path();
  }
  return {};
}
}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: test_cli <raco-binary>\n";
    return 1;
  }
  const std::string raco = argv[1];
  const fs::path work = fs::absolute("cli_test_work");
  fs::remove_all(work);
  fs::create_directories(work);
  const auto corpus = (work / "corpus").string();

  expect(run(raco) == 2, "no subcommand exits 2");
  expect(run(raco + " frobnicate") == 2, "unknown subcommand exits 2");

  // Corpus generation.
  expect(run(raco + " gen-corpus --out " + corpus + " --count 4 --size 128 --seed 3") == 0,
         "gen-corpus succeeds");
  expect(fs::exists(fs::path(corpus) / "toy_000.ppm"), "corpus image written");
  expect(fs::exists(fs::path(corpus) / "manifest.jsonl"), "corpus manifest written");

  // Tiny detector training run.
  const auto cfg_path = (work / "detector.json").string();
  {
    std::ofstream f(cfg_path);
    f << R"({
  "seed": 5,
  "out_root": ")" << (work / "runs").string() << R"(",
  "corpus_dir": ")" << corpus << R"(",
  "detector": {
    "steps": 3, "keypoints_per_image": 32, "nms_radius": 2,
    "lr0": 1e-4, "lr_min": 1e-6, "base_channels": 4,
    "val_interval": 100, "val_pairs": 1, "val_images": 1,
    "checkpoint_interval": 3, "stochastic_sampling": false,
    "crop_size": 96, "out_size": 64
  }
})";
  }
  expect(run(raco + " train detector --config " + cfg_path) == 0, "detector training succeeds");
  const fs::path det_run = find_run_dir(work / "runs", "train-detector-");
  expect(!det_run.empty(), "detector run directory created");
  expect(fs::exists(det_run / "resolved_config.json"), "resolved config recorded");
  expect(fs::exists(det_run / "config_hash.txt"), "config hash recorded");
  expect(fs::exists(det_run / "versions.json"), "versions recorded");
  const fs::path det_ckpt = det_run / "detector.ckpt";
  expect(fs::exists(det_ckpt), "detector checkpoint written");

  // Determinism: rerun into a different root, compare checkpoint bytes.
  const auto alt_root = (work / "runs_alt").string();
  expect(run("RACO_OUT_ROOT=" + alt_root + " " + raco + " train detector --config " + cfg_path) ==
             0,
         "detector rerun succeeds");
  const fs::path det_run2 = find_run_dir(work / "runs_alt", "train-detector-");
  expect(!det_run2.empty(), "rerun directory created");
  if (!det_run.empty() && !det_run2.empty()) {
    expect(det_run.filename() == det_run2.filename(), "run directory name is config-derived");
    expect(slurp(det_ckpt) == slurp(det_run2 / "detector.ckpt"),
           "retraining is byte-identical");
  }

  // Config hygiene: unknown keys and broken JSON are usage errors.
  const auto bad_cfg = (work / "bad.json").string();
  std::ofstream(bad_cfg) << R"({"seed": 1, "unknown_key": true})";
  expect(run(raco + " train detector --config " + bad_cfg) == 2, "unknown config key exits 2");
  std::ofstream(bad_cfg) << "{not json";
  expect(run(raco + " train detector --config " + bad_cfg) == 2, "malformed JSON exits 2");
  expect(run(raco + " train detector --config " + (work / "missing.json").string()) == 2,
         "missing config exits 2");

  // Ranker training without a detector checkpoint is a usage error.
  const auto ranker_cfg = (work / "ranker.json").string();
  std::ofstream(ranker_cfg) << R"({
  "seed": 5, "corpus_dir": ")" + corpus + R"(",
  "out_root": ")" + (work / "runs").string() + R"(",
  "ranker": {"steps": 1, "keypoints_per_image": 16, "nms_radius": 2, "lr0": 1e-4,
             "lr_min": 1e-6, "epsilon": 1.0, "lambda": 1.0, "match_radius": 3.0,
             "channels": 4, "checkpoint_interval": 1, "crop_size": 96, "out_size": 64}
})";
  expect(run(raco + " train ranker --config " + ranker_cfg) == 2,
         "ranker without detector checkpoint exits 2");

  // Eval with a missing checkpoint is a usage error; with the trained one it runs.
  const auto eval_cfg = (work / "eval.json").string();
  auto write_eval_cfg = [&](const std::string& ckpt) {
    std::ofstream(eval_cfg) << R"({
  "seed": 9, "corpus_dir": ")" + corpus + R"(",
  "out_root": ")" + (work / "runs").string() + R"(",
  "detector_checkpoint": ")" + ckpt + R"(",
  "eval": {"num_pairs": 2, "keypoints": 32, "nms_radius": 2, "match_radius": 3.0,
           "thresholds": [1.0, 3.0], "crop_size": 96, "out_size": 64,
           "rotation_step_deg": 90, "noise_sigma": 0.0, "resize_to": 64,
           "budgets": [4, 8], "num_bins": 5}
})";
  };
  write_eval_cfg((work / "nope.ckpt").string());
  expect(run(raco + " eval two-view --config " + eval_cfg) == 2,
         "eval with missing checkpoint exits 2");
  write_eval_cfg(det_ckpt.string());
  expect(run(raco + " eval two-view --config " + eval_cfg) == 0, "two-view eval succeeds");
  const fs::path eval_run = find_run_dir(work / "runs", "eval-two-view-");
  expect(!eval_run.empty() && fs::exists(eval_run / "report.json"), "eval report written");
  expect(run(raco + " eval no-such-task --config " + eval_cfg) == 2, "unknown task exits 2");

  // Triangulation eval needs no checkpoint or corpus images.
  const auto tri_cfg = (work / "tri.json").string();
  std::ofstream(tri_cfg) << R"({
  "seed": 11, "out_root": ")" + (work / "runs").string() + R"(",
  "triangulate": {"num_cams": 5, "num_points": 30, "sigma_min": 0.2, "sigma_max": 1.5,
                  "isotropic": false, "num_bins": 5, "num_seeds": 3,
                  "fractions": [0.5, 1.0]}
})";
  expect(run(raco + " eval triangulation --config " + tri_cfg) == 0, "triangulation eval runs");
  const fs::path tri_run = find_run_dir(work / "runs", "eval-triangulation-");
  expect(!tri_run.empty() && fs::exists(tri_run / "triangulation.csv"),
         "triangulation curve written");

  // Plotting.
  const auto csv = (work / "curve.csv").string();
  const auto svg = (work / "curve.svg").string();
  std::ofstream(csv) << "x,y\n0,0\n1,1\n2,4\n";
  expect(run(raco + " plot --input " + csv + " --out " + svg) == 0, "plot succeeds");
  expect(fs::exists(svg) && slurp(svg).find("<svg") == 0, "SVG written");
  const auto empty_csv = (work / "empty.csv").string();
  std::ofstream(empty_csv).flush();
  expect(run(raco + " plot --input " + empty_csv + " --out " + svg) == 2, "empty CSV exits 2");
  std::ofstream(csv) << "x,y\n0,zero\n";
  expect(run(raco + " plot --input " + csv + " --out " + svg) == 2, "non-numeric CSV exits 2");

  if (failures == 0) {
    std::cout << "all cli checks passed\n";
    fs::remove_all(work);
    return 0;
  }
  std::cerr << failures << " cli check(s) failed\n";
  return 1;
}
