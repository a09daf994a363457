// Experiment entry points: corpus generation, the three training stages, the
// evaluation protocols, and CSV -> SVG figure rendering.
//
// Exit codes: 0 success, 1 internal failure, 2 usage / precondition error.

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "raco/covariance.hpp"
#include "raco/data.hpp"
#include "raco/detector.hpp"
#include "raco/evalbench.hpp"
#include "raco/ranker.hpp"
#include "raco/triangulate.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace raco;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_keys(const json& j, const std::vector<std::string>& allowed,
                  const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw UsageError("unknown config key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

geometry::HomographySamplerConfig parse_geo(const json& j) {
  require_keys(j, {"max_rotation_deg", "max_perspective", "scale_min", "scale_max",
                   "max_translation_frac"},
               "geometry");
  geometry::HomographySamplerConfig g;
  get_to(j, "max_rotation_deg", g.max_rotation_deg);
  get_to(j, "max_perspective", g.max_perspective);
  get_to(j, "scale_min", g.scale_min);
  get_to(j, "scale_max", g.scale_max);
  get_to(j, "max_translation_frac", g.max_translation_frac);
  g.validate();
  return g;
}

data::PhotometricConfig parse_photo(const json& j) {
  require_keys(j, {"brightness_delta", "contrast_min", "contrast_max", "hue_delta",
                   "gaussian_noise_sigma", "blur_probability", "jpeg_like_quality_min",
                   "jpeg_like_quality_max"},
               "photometric");
  data::PhotometricConfig p;
  get_to(j, "brightness_delta", p.brightness_delta);
  get_to(j, "contrast_min", p.contrast_min);
  get_to(j, "contrast_max", p.contrast_max);
  get_to(j, "hue_delta", p.hue_delta);
  get_to(j, "gaussian_noise_sigma", p.gaussian_noise_sigma);
  get_to(j, "blur_probability", p.blur_probability);
  get_to(j, "jpeg_like_quality_min", p.jpeg_like_quality_min);
  get_to(j, "jpeg_like_quality_max", p.jpeg_like_quality_max);
  p.validate();
  return p;
}

struct Config {
  json raw;
  uint64_t seed = 0;
  std::string out_root = "runs";
  std::string corpus_dir;
  std::string detector_checkpoint;
  std::string ranker_checkpoint;
  json detector = json::object();
  json ranker = json::object();
  json covariance = json::object();
  json eval = json::object();
  json triangulate = json::object();
};

Config load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file: " + path);
  Config cfg;
  try {
    f >> cfg.raw;
  } catch (const std::exception& e) {
    throw UsageError(std::string("config parse error: ") + e.what());
  }
  require_keys(cfg.raw,
               {"seed", "out_root", "corpus_dir", "detector_checkpoint", "ranker_checkpoint",
                "detector", "ranker", "covariance", "eval", "triangulate"},
               "top level");
  get_to(cfg.raw, "seed", cfg.seed);
  get_to(cfg.raw, "out_root", cfg.out_root);
  get_to(cfg.raw, "corpus_dir", cfg.corpus_dir);
  get_to(cfg.raw, "detector_checkpoint", cfg.detector_checkpoint);
  get_to(cfg.raw, "ranker_checkpoint", cfg.ranker_checkpoint);
  get_to(cfg.raw, "detector", cfg.detector);
  get_to(cfg.raw, "ranker", cfg.ranker);
  get_to(cfg.raw, "covariance", cfg.covariance);
  get_to(cfg.raw, "eval", cfg.eval);
  get_to(cfg.raw, "triangulate", cfg.triangulate);
  if (const char* env = std::getenv("RACO_OUT_ROOT")) cfg.out_root = env;
  return cfg;
}

uint64_t config_hash(const Config& cfg, const std::string& command) {
  return fnv1a(command + "|" + cfg.raw.dump());
}

std::string hex64(uint64_t v) {
  std::ostringstream s;
  s << std::hex << v;
  return s.str();
}

// Every run directory records what produced it: the resolved config, its
// hash, and the toolchain versions.
std::string prepare_run_dir(const Config& cfg, const std::string& command) {
  const uint64_t hash = config_hash(cfg, command);
  const fs::path dir = fs::path(cfg.out_root) / (command + "-" + hex64(hash));
  fs::create_directories(dir);
  std::ofstream((dir / "resolved_config.json")) << cfg.raw.dump(2) << "\n";
  std::ofstream((dir / "config_hash.txt")) << hex64(hash) << "\n";
  json versions{{"compiler", __VERSION__},
                {"cxx_standard", __cplusplus},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                              std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                             std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                             std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  std::ofstream((dir / "versions.json")) << versions.dump(2) << "\n";
  return dir.string();
}

std::vector<image::ImageBuffer> load_corpus(const std::string& dir) {
  if (dir.empty() || !fs::is_directory(dir)) {
    throw UsageError("corpus_dir missing or not a directory: " + dir);
  }
  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".ppm" || ext == ".png" || ext == ".jpg") paths.push_back(e.path().string());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw UsageError("no images in corpus_dir: " + dir);
  std::vector<image::ImageBuffer> out;
  for (const auto& p : paths) out.push_back(image::load_image(p));
  return out;
}

models::DetectorNet load_detector(const std::string& path) {
  if (path.empty() || !fs::exists(path)) {
    throw UsageError("detector checkpoint missing: " + (path.empty() ? "<unset>" : path));
  }
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  const json header = json::parse(ckpt.header_json);
  models::DetectorNet net(header.value("base_channels", 8));
  Rng rng(0);
  net.init(rng);
  net.load_tensors(ckpt.tensors);
  return net;
}

models::RankerNet load_ranker(const std::string& path) {
  if (path.empty() || !fs::exists(path)) {
    throw UsageError("ranker checkpoint missing: " + (path.empty() ? "<unset>" : path));
  }
  const nn::Checkpoint ckpt = nn::load_checkpoint(path);
  const json header = json::parse(ckpt.header_json);
  models::RankerNet net(header.value("channels", 16));
  Rng rng(0);
  net.init(rng);
  net.load_tensors(ckpt.tensors);
  return net;
}

detector::DetectorTrainConfig parse_detector_cfg(const json& j, uint64_t seed) {
  require_keys(j, {"steps", "keypoints_per_image", "nms_radius", "lr0", "lr_min",
                   "base_channels", "val_interval", "val_pairs", "val_images",
                   "checkpoint_interval", "stochastic_sampling", "geometry", "photometric",
                   "crop_size", "out_size"},
               "detector");
  detector::DetectorTrainConfig c;
  c.seed = seed;
  get_to(j, "steps", c.steps);
  get_to(j, "keypoints_per_image", c.keypoints_per_image);
  get_to(j, "nms_radius", c.nms_radius);
  get_to(j, "lr0", c.lr0);
  get_to(j, "lr_min", c.lr_min);
  get_to(j, "base_channels", c.base_channels);
  get_to(j, "val_interval", c.val_interval);
  get_to(j, "val_pairs", c.val_pairs);
  get_to(j, "val_images", c.val_images);
  get_to(j, "checkpoint_interval", c.checkpoint_interval);
  get_to(j, "stochastic_sampling", c.stochastic_sampling);
  if (j.contains("geometry")) c.geo = parse_geo(j.at("geometry"));
  if (j.contains("photometric")) c.photo = parse_photo(j.at("photometric"));
  get_to(j, "crop_size", c.synthesis.crop_size);
  get_to(j, "out_size", c.synthesis.out_size);
  return c;
}

int cmd_gen_corpus(const std::string& out_dir, int count, int size, uint64_t seed) {
  fs::create_directories(out_dir);
  const auto corpus = data::make_toy_corpus(count, size, seed);
  std::ofstream manifest(fs::path(out_dir) / "manifest.jsonl");
  for (size_t i = 0; i < corpus.size(); ++i) {
    std::ostringstream name;
    name << "toy_" << std::setw(3) << std::setfill('0') << i << ".ppm";
    const std::string path = (fs::path(out_dir) / name.str()).string();
    image::save_ppm(corpus[i], path);
    manifest << json{{"source_id", "toy_" + std::to_string(i)}, {"path", path}}.dump() << "\n";
  }
  std::cout << "wrote " << corpus.size() << " images to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& stage, const Config& cfg) {
  const std::string run_dir = prepare_run_dir(cfg, "train-" + stage);
  const auto corpus = load_corpus(cfg.corpus_dir);

  if (stage == "detector") {
    models::DetectorNet net(cfg.detector.value("base_channels", 8));
    const auto tc = parse_detector_cfg(cfg.detector, derive_seed(cfg.seed, "detector"));
    const auto res = detector::train_detector(corpus, net, tc, run_dir);
    json report{{"checkpoint", res.checkpoint_path},
                {"final_val_repeatability", res.final_val_repeatability},
                {"random_baseline_repeatability", res.random_baseline_repeatability},
                {"checkpoint_hash", hex64(nn::hash_file(res.checkpoint_path))}};
    std::ofstream(fs::path(run_dir) / "report.json") << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  if (stage == "ranker") {
    models::DetectorNet det = load_detector(cfg.detector_checkpoint);
    require_keys(cfg.ranker,
                 {"steps", "keypoints_per_image", "nms_radius", "lr0", "lr_min", "epsilon",
                  "lambda", "match_radius", "channels", "checkpoint_interval", "geometry",
                  "photometric", "crop_size", "out_size"},
                 "ranker");
    ranker::RankerTrainConfig rc;
    rc.seed = derive_seed(cfg.seed, "ranker");
    get_to(cfg.ranker, "steps", rc.steps);
    get_to(cfg.ranker, "keypoints_per_image", rc.keypoints_per_image);
    get_to(cfg.ranker, "nms_radius", rc.nms_radius);
    get_to(cfg.ranker, "lr0", rc.lr0);
    get_to(cfg.ranker, "lr_min", rc.lr_min);
    get_to(cfg.ranker, "epsilon", rc.epsilon);
    get_to(cfg.ranker, "lambda", rc.lambda);
    get_to(cfg.ranker, "match_radius", rc.match_radius);
    get_to(cfg.ranker, "channels", rc.channels);
    get_to(cfg.ranker, "checkpoint_interval", rc.checkpoint_interval);
    if (cfg.ranker.contains("geometry")) rc.geo = parse_geo(cfg.ranker.at("geometry"));
    if (cfg.ranker.contains("photometric")) rc.photo = parse_photo(cfg.ranker.at("photometric"));
    get_to(cfg.ranker, "crop_size", rc.synthesis.crop_size);
    get_to(cfg.ranker, "out_size", rc.synthesis.out_size);

    models::RankerNet net(rc.channels);
    const auto res = ranker::train_ranker(corpus, rc, det, net, run_dir);
    json report{{"checkpoint", res.checkpoint_path},
                {"final_loss", res.final_loss},
                {"detector_hash", hex64(res.detector_hash)},
                {"checkpoint_hash", hex64(nn::hash_file(res.checkpoint_path))}};
    std::ofstream(fs::path(run_dir) / "report.json") << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  if (stage == "covariance") {
    models::DetectorNet det = load_detector(cfg.detector_checkpoint);
    require_keys(cfg.covariance,
                 {"steps", "keypoints_per_image", "nms_radius", "lr0", "lr_min", "match_radius",
                  "checkpoint_interval", "geometry", "photometric", "crop_size", "out_size"},
                 "covariance");
    covariance::CovTrainConfig cc;
    cc.seed = derive_seed(cfg.seed, "covariance");
    get_to(cfg.covariance, "steps", cc.steps);
    get_to(cfg.covariance, "keypoints_per_image", cc.keypoints_per_image);
    get_to(cfg.covariance, "nms_radius", cc.nms_radius);
    get_to(cfg.covariance, "lr0", cc.lr0);
    get_to(cfg.covariance, "lr_min", cc.lr_min);
    get_to(cfg.covariance, "match_radius", cc.match_radius);
    get_to(cfg.covariance, "checkpoint_interval", cc.checkpoint_interval);
    if (cfg.covariance.contains("geometry")) cc.geo = parse_geo(cfg.covariance.at("geometry"));
    if (cfg.covariance.contains("photometric")) {
      cc.photo = parse_photo(cfg.covariance.at("photometric"));
    }
    get_to(cfg.covariance, "crop_size", cc.synthesis.crop_size);
    get_to(cfg.covariance, "out_size", cc.synthesis.out_size);

    const auto res = covariance::train_covariance(corpus, cc, det, run_dir);
    json report{{"checkpoint", res.checkpoint_path},
                {"final_loss", res.final_loss},
                {"frozen_hash", hex64(res.frozen_hash)},
                {"checkpoint_hash", hex64(nn::hash_file(res.checkpoint_path))}};
    std::ofstream(fs::path(run_dir) / "report.json") << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  throw UsageError("unknown train stage: " + stage);
}

struct EvalCommon {
  int num_pairs = 10;
  int keypoints = 128;
  int nms_radius = 3;
  double match_radius = 3.0;
  std::vector<double> thresholds = {1.0, 2.0, 3.0};
  geometry::HomographySamplerConfig geo;
  data::PhotometricConfig photo;
  data::PairSynthesisConfig synthesis;
};

EvalCommon parse_eval(const json& j) {
  require_keys(j, {"num_pairs", "keypoints", "nms_radius", "match_radius", "thresholds",
                   "geometry", "photometric", "crop_size", "out_size", "rotation_step_deg",
                   "noise_sigma", "resize_to", "budgets", "num_bins"},
               "eval");
  EvalCommon e;
  get_to(j, "num_pairs", e.num_pairs);
  get_to(j, "keypoints", e.keypoints);
  get_to(j, "nms_radius", e.nms_radius);
  get_to(j, "match_radius", e.match_radius);
  get_to(j, "thresholds", e.thresholds);
  if (j.contains("geometry")) e.geo = parse_geo(j.at("geometry"));
  if (j.contains("photometric")) e.photo = parse_photo(j.at("photometric"));
  get_to(j, "crop_size", e.synthesis.crop_size);
  get_to(j, "out_size", e.synthesis.out_size);
  return e;
}

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows) {
  std::ofstream f(path);
  f << header << "\n";
  f.precision(12);
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
    f << "\n";
  }
}

int cmd_eval(const std::string& task, const Config& cfg) {
  const std::string run_dir = prepare_run_dir(cfg, "eval-" + task);
  const EvalCommon ec = parse_eval(cfg.eval);

  if (task == "two-view") {
    models::DetectorNet det = load_detector(cfg.detector_checkpoint);
    const uint64_t ckpt_before = nn::hash_file(cfg.detector_checkpoint);
    const auto corpus = load_corpus(cfg.corpus_dir);

    std::vector<double> corner_errors;
    double rep_sum = 0.0, loc_sum = 0.0;
    int rep_n = 0, loc_n = 0, match_sum = 0;
    std::vector<double> rep_per_thr(ec.thresholds.size(), 0.0);
    Rng rng(derive_seed(cfg.seed, "eval_two_view"));
    for (int p = 0; p < ec.num_pairs; ++p) {
      const auto& img = corpus[p % corpus.size()];
      Rng pair_rng = rng.substream("pair_" + std::to_string(p));
      const auto pair = data::make_training_pair(img, ec.geo, ec.photo, ec.synthesis, pair_rng);
      const auto kps_a =
          detector::detect_keypoints(det, pair.view_a, ec.keypoints, ec.nms_radius, true);
      const auto kps_b =
          detector::detect_keypoints(det, pair.view_b, ec.keypoints, ec.nms_radius, true);
      const auto rep = evalbench::two_view_report(kps_a, kps_b, pair.h_a_to_b, pair.view_b.width,
                                                  pair.view_b.height, ec.thresholds,
                                                  ec.match_radius, nullptr, &pair.valid_mask_b);
      match_sum += rep.num_matches;
      if (!rep.repeatability.empty()) {
        for (size_t t = 0; t < rep_per_thr.size(); ++t) rep_per_thr[t] += rep.repeatability[t];
        rep_sum += rep.repeatability.back();
        ++rep_n;
      }
      if (rep.localization_defined) {
        loc_sum += rep.localization_error;
        ++loc_n;
      }
      if (rep.corner_error_defined) corner_errors.push_back(rep.corner_error);
    }
    json report{{"num_pairs", ec.num_pairs},
                {"mean_num_matches", static_cast<double>(match_sum) / ec.num_pairs},
                {"thresholds", ec.thresholds}};
    if (rep_n > 0) {
      for (double& v : rep_per_thr) v /= rep_n;
      report["repeatability"] = rep_per_thr;
    }
    if (loc_n > 0) report["localization_error"] = loc_sum / loc_n;
    if (const auto auc = evalbench::homography_auc(corner_errors, ec.thresholds)) {
      report["homography_auc"] = *auc;
    }
    std::ofstream(fs::path(run_dir) / "report.json") << report.dump(2) << "\n";
    if (nn::hash_file(cfg.detector_checkpoint) != ckpt_before) {
      throw std::runtime_error("eval mutated the checkpoint");
    }
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  if (task == "rotation") {
    models::DetectorNet det = load_detector(cfg.detector_checkpoint);
    const auto corpus = load_corpus(cfg.corpus_dir);
    int step_deg = 10, resize_to = 256;
    double noise_sigma = 10.0;
    get_to(cfg.eval, "rotation_step_deg", step_deg);
    get_to(cfg.eval, "noise_sigma", noise_sigma);
    get_to(cfg.eval, "resize_to", resize_to);

    auto detect = [&](const image::ImageBuffer& img) {
      return detector::detect_keypoints(det, img, ec.keypoints, ec.nms_radius, true);
    };
    const auto sweep =
        evalbench::rotation_sweep(detect, corpus, step_deg, noise_sigma, ec.keypoints, resize_to,
                                  derive_seed(cfg.seed, "rotation_noise"), ec.thresholds);

    std::vector<std::vector<double>> rows;
    for (size_t a = 0; a < sweep.angles_deg.size(); ++a) {
      std::vector<double> row{sweep.angles_deg[a]};
      for (size_t t = 0; t < sweep.thresholds.size(); ++t) {
        row.push_back(sweep.repeatability[t][a]);
      }
      rows.push_back(row);
    }
    std::string header = "angle_deg";
    for (double t : sweep.thresholds) header += ",repeatability@" + std::to_string(t);
    write_csv((fs::path(run_dir) / "rotation.csv").string(), header, rows);
    json report{{"thresholds", sweep.thresholds}, {"auc", sweep.auc}};
    std::ofstream(fs::path(run_dir) / "report.json") << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  if (task == "budget") {
    models::DetectorNet det = load_detector(cfg.detector_checkpoint);
    models::RankerNet rank_net = load_ranker(cfg.ranker_checkpoint);
    const auto corpus = load_corpus(cfg.corpus_dir);
    std::vector<int> budgets;
    get_to(cfg.eval, "budgets", budgets);
    if (budgets.empty()) {
      budgets = {ec.keypoints / 8, ec.keypoints / 4, ec.keypoints / 2, ec.keypoints};
    }

    std::vector<double> ranker_curve(budgets.size(), 0.0), prob_curve(budgets.size(), 0.0);
    int n_pairs = 0;
    Rng rng(derive_seed(cfg.seed, "eval_budget"));
    for (int p = 0; p < ec.num_pairs; ++p) {
      const auto& img = corpus[p % corpus.size()];
      Rng pair_rng = rng.substream("pair_" + std::to_string(p));
      const auto pair = data::make_training_pair(img, ec.geo, ec.photo, ec.synthesis, pair_rng);
      const auto kps_a =
          detector::detect_keypoints(det, pair.view_a, ec.keypoints, ec.nms_radius, true);
      const auto kps_b =
          detector::detect_keypoints(det, pair.view_b, ec.keypoints, ec.nms_radius, true);
      if (kps_a.size() == 0 || kps_b.size() == 0) continue;
      const auto map_ab = evalbench::homography_map(pair.h_a_to_b);
      const auto map_ba = evalbench::homography_map(pair.h_a_to_b.inverse());
      const auto scores_a = ranker::score_keypoints(rank_net, pair.view_a, kps_a);
      const auto scores_b = ranker::score_keypoints(rank_net, pair.view_b, kps_b);
      const auto by_rank =
          evalbench::budget_curve(kps_a, kps_b, scores_a, scores_b, map_ab, map_ba, budgets,
                                  pair.view_a.width, pair.view_a.height);
      const auto by_prob =
          evalbench::budget_curve(kps_a, kps_b, kps_a.probs, kps_b.probs, map_ab, map_ba,
                                  budgets, pair.view_a.width, pair.view_a.height);
      for (size_t b = 0; b < budgets.size(); ++b) {
        ranker_curve[b] += by_rank[b];
        prob_curve[b] += by_prob[b];
      }
      ++n_pairs;
    }
    if (n_pairs == 0) throw std::runtime_error("eval budget: no usable pairs");
    std::vector<std::vector<double>> rows;
    for (size_t b = 0; b < budgets.size(); ++b) {
      ranker_curve[b] /= n_pairs;
      prob_curve[b] /= n_pairs;
      rows.push_back({static_cast<double>(budgets[b]), ranker_curve[b], prob_curve[b]});
    }
    write_csv((fs::path(run_dir) / "budget.csv").string(),
              "budget,repeatability_ranker,repeatability_prob", rows);
    json report{{"budgets", budgets},
                {"ranker_ordering", ranker_curve},
                {"probability_ordering", prob_curve}};
    std::ofstream(fs::path(run_dir) / "report.json") << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  if (task == "calibration" || task == "triangulation") {
    require_keys(cfg.triangulate,
                 {"num_cams", "num_points", "sigma_min", "sigma_max", "isotropic", "num_bins",
                  "num_seeds", "fractions"},
                 "triangulate");
    int num_cams = 6, num_points = 200, num_bins = 20, num_seeds = 20;
    triangulate::NoiseModel noise;
    get_to(cfg.triangulate, "num_cams", num_cams);
    get_to(cfg.triangulate, "num_points", num_points);
    get_to(cfg.triangulate, "sigma_min", noise.sigma_min);
    get_to(cfg.triangulate, "sigma_max", noise.sigma_max);
    get_to(cfg.triangulate, "isotropic", noise.isotropic);
    get_to(cfg.triangulate, "num_bins", num_bins);
    get_to(cfg.triangulate, "num_seeds", num_seeds);

    if (task == "calibration") {
      const auto scene = triangulate::synth_scene(num_cams, num_points, noise,
                                                  derive_seed(cfg.seed, "calibration_scene"));
      std::vector<double> pred, obs;
      for (size_t i = 0; i < scene.tracks.size(); ++i) {
        triangulate::Vec3 x0;
        try {
          x0 = triangulate::triangulate_dlt(scene.tracks[i], scene.cameras);
        } catch (const std::exception&) {
          continue;
        }
        const auto pts =
            triangulate::refine_points({x0}, {scene.tracks[i]}, scene.cameras);
        if (!pts[0].valid) continue;
        pred.push_back(std::sqrt(pts[0].marginal_cov.trace()));
        obs.push_back((pts[0].position - scene.points_gt[scene.track_to_point[i]]).norm());
      }
      const auto curve = evalbench::calibration_curve(pred, obs, num_bins);
      std::vector<std::vector<double>> rows;
      for (size_t b = 0; b < curve.bin_predicted.size(); ++b) {
        rows.push_back({curve.bin_predicted[b], curve.bin_observed[b]});
      }
      write_csv((fs::path(run_dir) / "calibration.csv").string(),
                "predicted_uncertainty,observed_error", rows);
      json report{{"beta", curve.slope}, {"num_points", pred.size()}, {"num_bins", num_bins}};
      std::ofstream(fs::path(run_dir) / "report.json") << report.dump(2) << "\n";
      std::cout << report.dump(2) << "\n";
      return 0;
    }

    // Triangulation comparison: covariance-weighted vs identity-weighted
    // refinement, plus the precision-filtering curve on the final seed.
    int wins = 0;
    double weighted_err_sum = 0.0, identity_err_sum = 0.0;
    json filter_report;
    std::vector<double> fractions = {0.25, 0.5, 0.75, 1.0};
    get_to(cfg.triangulate, "fractions", fractions);
    std::vector<std::vector<double>> filter_rows;
    for (int s = 0; s < num_seeds; ++s) {
      const auto scene = triangulate::synth_scene(
          num_cams, num_points, noise, derive_seed(cfg.seed, "tri_seed_" + std::to_string(s)));
      std::vector<triangulate::Vec3> init;
      std::vector<triangulate::Track> tracks, tracks_id;
      std::vector<triangulate::Vec3> gt;
      for (size_t i = 0; i < scene.tracks.size(); ++i) {
        try {
          init.push_back(triangulate::triangulate_dlt(scene.tracks[i], scene.cameras));
        } catch (const std::exception&) {
          continue;
        }
        tracks.push_back(scene.tracks[i]);
        auto t_id = scene.tracks[i];
        for (auto& o : t_id.observations) o.cov = triangulate::Mat2::Identity();
        tracks_id.push_back(std::move(t_id));
        gt.push_back(scene.points_gt[scene.track_to_point[i]]);
      }
      const auto weighted = triangulate::refine_points(init, tracks, scene.cameras);
      const auto identity = triangulate::refine_points(init, tracks_id, scene.cameras);
      double we = 0.0, ie = 0.0;
      int n = 0;
      for (size_t i = 0; i < weighted.size(); ++i) {
        if (!weighted[i].valid || !identity[i].valid) continue;
        we += (weighted[i].position - gt[i]).norm();
        ie += (identity[i].position - gt[i]).norm();
        ++n;
      }
      if (n > 0) {
        we /= n;
        ie /= n;
        weighted_err_sum += we;
        identity_err_sum += ie;
        if (we < ie) ++wins;
      }
      if (s == num_seeds - 1) {
        const auto curve = triangulate::precision_filter_curve(weighted, gt, fractions);
        filter_report = json{{"fractions", curve.fractions},
                             {"thresholds", curve.thresholds},
                             {"accuracy", curve.accuracy},
                             {"completeness", curve.completeness}};
        for (size_t f = 0; f < curve.fractions.size(); ++f) {
          std::vector<double> row{curve.fractions[f]};
          for (size_t t = 0; t < curve.thresholds.size(); ++t) {
            row.push_back(curve.accuracy[t][f]);
            row.push_back(curve.completeness[t][f]);
          }
          filter_rows.push_back(row);
        }
      }
    }
    std::string header = "fraction";
    for (double t : std::vector<double>{0.005, 0.01, 0.02}) {
      header += ",accuracy@" + std::to_string(t) + ",completeness@" + std::to_string(t);
    }
    write_csv((fs::path(run_dir) / "triangulation.csv").string(), header, filter_rows);
    json report{{"num_seeds", num_seeds},
                {"win_rate", static_cast<double>(wins) / num_seeds},
                {"mean_error_weighted", weighted_err_sum / num_seeds},
                {"mean_error_identity", identity_err_sum / num_seeds},
                {"precision_filter", filter_report}};
    std::ofstream(fs::path(run_dir) / "report.json") << report.dump(2) << "\n";
    std::cout << report.dump(2) << "\n";
    return 0;
  }

  throw UsageError("unknown eval task: " + task);
}

// Deterministic SVG polyline plot of a CSV file (first column = x axis).
int cmd_plot(const std::string& input, const std::string& output) {
  std::ifstream f(input);
  if (!f) throw UsageError("cannot open input: " + input);
  std::string line;
  if (!std::getline(f, line) || line.empty()) throw UsageError("empty curve file: " + input);
  std::vector<std::string> names;
  {
    std::istringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) names.push_back(cell);
  }
  std::vector<std::vector<double>> cols(names.size());
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    size_t c = 0;
    while (std::getline(ls, cell, ',')) {
      if (c >= cols.size()) throw UsageError("malformed CSV row in " + input);
      try {
        cols[c++].push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw UsageError("non-numeric CSV cell in " + input);
      }
    }
    if (c != cols.size()) throw UsageError("ragged CSV row in " + input);
  }
  if (cols.empty() || cols[0].empty()) throw UsageError("no data rows in " + input);

  const int w = 640, h = 480, margin = 60;
  auto minmax = [](const std::vector<double>& v) {
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    double a = *lo, b = *hi;
    if (b - a < 1e-12) b = a + 1.0;
    return std::pair<double, double>(a, b);
  };
  const auto [x0, x1] = minmax(cols[0]);
  double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
  for (size_t c = 1; c < cols.size(); ++c) {
    const auto [a, b] = minmax(cols[c]);
    y0 = std::min(y0, a);
    y1 = std::max(y1, b);
  }
  if (y1 - y0 < 1e-12) y1 = y0 + 1.0;

  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream svg;
  svg.precision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\"" << w - margin
      << "\" y2=\"" << h - margin << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
      << h - margin << "\" stroke=\"black\"/>\n";
  for (size_t c = 1; c < cols.size(); ++c) {
    svg << "<polyline fill=\"none\" stroke=\"" << palette[(c - 1) % 6]
        << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < cols[0].size(); ++i) {
      const double px = margin + (cols[0][i] - x0) / (x1 - x0) * (w - 2 * margin);
      const double py = h - margin - (cols[c][i] - y0) / (y1 - y0) * (h - 2 * margin);
      svg << px << "," << py << " ";
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << w - margin + 5 << "\" y=\"" << margin + 15 * c << "\" font-size=\"10\">"
        << names[c] << "</text>\n";
  }
  svg << "<text x=\"" << w / 2 << "\" y=\"" << h - margin / 3 << "\" font-size=\"12\">" << names[0]
      << "</text>\n</svg>\n";

  std::ofstream out(output);
  if (!out) throw UsageError("cannot write output: " + output);
  out << svg.str();
  std::cout << "wrote " << output << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-supervised keypoint pipeline: training, evaluation, figures"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-corpus", "generate the procedural toy corpus");
  std::string gen_out = "corpus";
  int gen_count = 20, gen_size = 192;
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out);
  gen->add_option("--count", gen_count);
  gen->add_option("--size", gen_size);
  gen->add_option("--seed", gen_seed);

  auto* train = app.add_subcommand("train", "train a pipeline stage");
  std::string train_stage, train_config;
  train->add_option("stage", train_stage, "detector|ranker|covariance")->required();
  train->add_option("--config", train_config)->required();

  auto* eval = app.add_subcommand("eval", "run an evaluation protocol");
  std::string eval_task, eval_config;
  eval->add_option("task", eval_task, "two-view|rotation|budget|calibration|triangulation")
      ->required();
  eval->add_option("--config", eval_config)->required();

  auto* plot = app.add_subcommand("plot", "render a CSV curve as SVG");
  std::string plot_in, plot_out;
  plot->add_option("--input", plot_in)->required();
  plot->add_option("--out", plot_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(gen_out, gen_count, gen_size, gen_seed);
    if (train->parsed()) return cmd_train(train_stage, load_config(train_config));
    if (eval->parsed()) return cmd_eval(eval_task, load_config(eval_config));
    if (plot->parsed()) return cmd_plot(plot_in, plot_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
