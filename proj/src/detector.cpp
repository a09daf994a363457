#include "raco/detector.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace raco::detector {

using geometry::Homography;

Tensor global_softmax(const Tensor& score) {
  if (score.c != 1) throw std::invalid_argument("global_softmax: expected 1-channel map");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : score.v) {
    if (!std::isfinite(v)) throw std::invalid_argument("global_softmax: non-finite score");
    mx = std::max(mx, v);
  }
  Tensor out(1, score.h, score.w);
  double sum = 0.0;
  for (size_t i = 0; i < score.v.size(); ++i) {
    out.v[i] = std::exp(score.v[i] - mx);
    sum += out.v[i];
  }
  for (double& v : out.v) v /= sum;
  return out;
}

namespace {
// Strict local maximum with deterministic (row, col) tie-break: on exactly
// equal scores the lexicographically earlier pixel wins.
bool is_local_max(const Tensor& p, int y, int x, int r) {
  const double v = p.at(0, y, x);
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      if (dy == 0 && dx == 0) continue;
      const int yy = y + dy, xx = x + dx;
      if (yy < 0 || yy >= p.h || xx < 0 || xx >= p.w) continue;
      const double q = p.at(0, yy, xx);
      if (q > v) return false;
      if (q == v && (yy < y || (yy == y && xx < x))) return false;
    }
  }
  return true;
}
}  // namespace

KeypointSet select_keypoints(const Tensor& prob, int nms_radius, int k,
                             const image::Mask* valid_mask) {
  if (k < 1 || nms_radius < 1) throw std::invalid_argument("select_keypoints: k and radius >= 1");
  struct Cand {
    double p;
    int y, x;
  };
  std::vector<Cand> cands;
  for (int y = 0; y < prob.h; ++y) {
    for (int x = 0; x < prob.w; ++x) {
      if (valid_mask && !valid_mask->at(y, x)) continue;
      if (is_local_max(prob, y, x, nms_radius)) cands.push_back({prob.at(0, y, x), y, x});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.p != b.p) return a.p > b.p;
    return a.y != b.y ? a.y < b.y : a.x < b.x;
  });
  if (static_cast<int>(cands.size()) > k) cands.resize(k);

  KeypointSet out;
  for (const auto& c : cands) {
    out.coords.emplace_back(c.x, c.y);
    out.grid.emplace_back(c.x, c.y);
    out.probs.push_back(c.p);
  }
  return out;
}

Vec2 subpixel_refine(const Tensor& prob, const Eigen::Vector2i& kp, int patch_radius,
                     double temperature) {
  const int x = kp.x(), y = kp.y(), r = patch_radius;
  if (x < r || y < r || x >= prob.w - r || y >= prob.h - r)
    return Vec2(x, y);  // border guard: unrefined

  double mx = -std::numeric_limits<double>::infinity();
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx)
      mx = std::max(mx, std::log(prob.at(0, y + dy, x + dx)));

  double wsum = 0.0, ox = 0.0, oy = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const double w = std::exp((std::log(prob.at(0, y + dy, x + dx)) - mx) / temperature);
      wsum += w;
      ox += w * dx;
      oy += w * dy;
    }
  }
  return Vec2(x + ox / wsum, y + oy / wsum);
}

void subpixel_refine_all(const Tensor& prob, KeypointSet& kps, int patch_radius,
                         double temperature) {
  for (size_t i = 0; i < kps.size(); ++i) {
    kps.coords[i] = subpixel_refine(prob, kps.grid[i], patch_radius, temperature);
  }
}

double rho_neg(const RewardConfig& cfg, int64_t step) {
  return -std::min(cfg.rho_neg_cap, static_cast<double>(step) * cfg.rho_neg_slope);
}

namespace {
std::vector<double> one_sided_rewards(const KeypointSet& from, const KeypointSet& to,
                                      const Homography& h_from_to, const RewardConfig& cfg,
                                      int64_t step) {
  const double neg = rho_neg(cfg, step);
  std::vector<double> out(from.size(), neg);
  if (to.size() == 0) return out;
  for (size_t i = 0; i < from.size(); ++i) {
    const Vec2 proj = geometry::apply_homography(h_from_to, from.coords[i]);
    double best = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < to.size(); ++j) {
      best = std::min(best, (proj - to.coords[j]).norm());
    }
    out[i] = best <= cfg.d_max ? cfg.rho_pos : neg;
  }
  return out;
}
}  // namespace

RewardPair compute_rewards(const KeypointSet& kps_a, const KeypointSet& kps_b,
                           const Homography& h_ab, const RewardConfig& cfg, int64_t step) {
  RewardPair out;
  out.rewards_a = one_sided_rewards(kps_a, kps_b, h_ab, cfg, step);
  out.rewards_b = one_sided_rewards(kps_b, kps_a, h_ab.inverse(), cfg, step);
  return out;
}

namespace {
std::vector<double> normalized_weights(const std::vector<double>& rewards, double eps) {
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= std::max<size_t>(1, rewards.size());
  std::vector<double> w(rewards.size());
  for (size_t i = 0; i < rewards.size(); ++i) w[i] = rewards[i] / (mean + eps);
  return w;
}

double view_loss(const Tensor& prob, const KeypointSet& kps, const std::vector<double>& w) {
  double loss = 0.0;
  for (size_t i = 0; i < kps.size(); ++i) {
    const double p = prob.at(0, kps.grid[i].y(), kps.grid[i].x());
    if (!(p > 0.0)) throw std::domain_error("detector_loss: zero probability at keypoint");
    loss -= w[i] * std::log(p);
  }
  return loss;
}
}  // namespace

double detector_loss(const Tensor& prob_a, const Tensor& prob_b, const KeypointSet& kps_a,
                     const KeypointSet& kps_b, const RewardPair& rewards, double epsilon_norm) {
  return view_loss(prob_a, kps_a, normalized_weights(rewards.rewards_a, epsilon_norm)) +
         view_loss(prob_b, kps_b, normalized_weights(rewards.rewards_b, epsilon_norm));
}

namespace {
// For L = -sum_i w_i log softmax(S)[x_i]:
//   dL/dS = (sum_i w_i) P - sum_i w_i e_{x_i}
void view_loss_grad(const Tensor& score, const KeypointSet& kps, const std::vector<double>& w,
                    double* loss, Tensor* grad) {
  const Tensor prob = global_softmax(score);
  *loss += view_loss(prob, kps, w);
  double wsum = 0.0;
  for (double x : w) wsum += x;
  *grad = Tensor(1, score.h, score.w);
  for (size_t i = 0; i < grad->v.size(); ++i) grad->v[i] = wsum * prob.v[i];
  for (size_t i = 0; i < kps.size(); ++i) {
    grad->at(0, kps.grid[i].y(), kps.grid[i].x()) -= w[i];
  }
}
}  // namespace

DetectorLossGrad detector_loss_with_grad(const Tensor& score_a, const Tensor& score_b,
                                         const KeypointSet& kps_a, const KeypointSet& kps_b,
                                         const RewardPair& rewards, double epsilon_norm) {
  DetectorLossGrad out;
  view_loss_grad(score_a, kps_a, normalized_weights(rewards.rewards_a, epsilon_norm), &out.loss,
                 &out.grad_score_a);
  view_loss_grad(score_b, kps_b, normalized_weights(rewards.rewards_b, epsilon_norm), &out.loss,
                 &out.grad_score_b);
  return out;
}

KeypointSet detect_keypoints(models::DetectorNet& net, const image::ImageBuffer& img, int k,
                             int nms_radius, bool subpixel, const image::Mask* valid_mask) {
  net.forward(nn::image_to_input(img));
  const Tensor prob = global_softmax(net.score());
  KeypointSet kps = select_keypoints(prob, nms_radius, k, valid_mask);
  if (subpixel) subpixel_refine_all(prob, kps);
  return kps;
}

KeypointSet random_keypoints(int width, int height, int k, Rng& rng) {
  KeypointSet out;
  for (int i = 0; i < k; ++i) {
    const int x = static_cast<int>(rng.uniform_int(0, width - 1));
    const int y = static_cast<int>(rng.uniform_int(0, height - 1));
    out.coords.emplace_back(x, y);
    out.grid.emplace_back(x, y);
    out.probs.push_back(1.0 / k);
  }
  return out;
}

namespace {
// Repeatability@thr averaged over both directions; covisibility via image
// bounds plus the pair's B-side valid mask.
double pair_repeatability(const KeypointSet& kps_a, const KeypointSet& kps_b,
                          const data::TrainingPair& pair, double thr) {
  const Homography h_ba = pair.h_a_to_b.inverse();
  const int w = pair.view_b.width, h = pair.view_b.height;

  auto direction = [&](const KeypointSet& from, const KeypointSet& to, const Homography& h_ft,
                       bool check_mask) -> std::pair<int, int> {
    int covisible = 0, repeated = 0;
    for (size_t i = 0; i < from.size(); ++i) {
      const Vec2 p = geometry::apply_homography(h_ft, from.coords[i]);
      if (p.x() < 0 || p.y() < 0 || p.x() > w - 1 || p.y() > h - 1) continue;
      if (check_mask) {
        const int ix = static_cast<int>(std::lround(p.x()));
        const int iy = static_cast<int>(std::lround(p.y()));
        if (!pair.valid_mask_b.at(std::clamp(iy, 0, h - 1), std::clamp(ix, 0, w - 1))) continue;
      }
      ++covisible;
      for (size_t j = 0; j < to.size(); ++j) {
        if ((p - to.coords[j]).norm() <= thr) {
          ++repeated;
          break;
        }
      }
    }
    return {covisible, repeated};
  };

  const auto [cov_a, rep_a] = direction(kps_a, kps_b, pair.h_a_to_b, true);
  const auto [cov_b, rep_b] = direction(kps_b, kps_a, h_ba, false);
  double acc = 0.0;
  int terms = 0;
  if (cov_a > 0) {
    acc += static_cast<double>(rep_a) / cov_a;
    ++terms;
  }
  if (cov_b > 0) {
    acc += static_cast<double>(rep_b) / cov_b;
    ++terms;
  }
  return terms > 0 ? acc / terms : 0.0;
}
}  // namespace

double evaluate_repeatability(
    const std::vector<image::ImageBuffer>& images,
    const std::function<KeypointSet(const image::ImageBuffer&)>& detect,
    const DetectorTrainConfig& cfg, int num_pairs, uint64_t seed, double threshold) {
  if (images.empty()) throw std::invalid_argument("evaluate_repeatability: no images");
  double acc = 0.0;
  int n = 0;
  for (int i = 0; i < num_pairs; ++i) {
    Rng rng(derive_seed(seed, "val_pair_" + std::to_string(i)));
    const auto& img = images[i % images.size()];
    const data::TrainingPair pair =
        data::make_training_pair(img, cfg.geo, cfg.photo, cfg.synthesis, rng);
    const KeypointSet kps_a = detect(pair.view_a);
    const KeypointSet kps_b = detect(pair.view_b);
    acc += pair_repeatability(kps_a, kps_b, pair, threshold);
    ++n;
  }
  return acc / n;
}

namespace {
uint64_t config_hash(const DetectorTrainConfig& cfg) {
  nlohmann::json j{{"steps", cfg.steps},
                   {"keypoints", cfg.keypoints_per_image},
                   {"nms_radius", cfg.nms_radius},
                   {"lr0", cfg.lr0},
                   {"lr_min", cfg.lr_min},
                   {"base_channels", cfg.base_channels},
                   {"d_max", cfg.reward.d_max},
                   {"rho_pos", cfg.reward.rho_pos},
                   {"rho_neg_cap", cfg.reward.rho_neg_cap},
                   {"rho_neg_slope", cfg.reward.rho_neg_slope},
                   {"epsilon_norm", cfg.reward.epsilon_norm},
                   {"max_rotation_deg", cfg.geo.max_rotation_deg},
                   {"seed", cfg.seed},
                   {"stochastic", cfg.stochastic_sampling}};
  return fnv1a(j.dump());
}

KeypointSet stochastic_sample(const Tensor& prob, int k, Rng& rng) {
  // Gumbel top-k on log P: exact sampling without replacement.
  struct Cand {
    double key;
    int y, x;
  };
  std::vector<Cand> cands;
  cands.reserve(prob.v.size());
  for (int y = 0; y < prob.h; ++y) {
    for (int x = 0; x < prob.w; ++x) {
      double u = rng.uniform();
      while (u <= 1e-300) u = rng.uniform();
      cands.push_back({std::log(prob.at(0, y, x)) - std::log(-std::log(u)), y, x});
    }
  }
  std::nth_element(cands.begin(), cands.begin() + std::min<size_t>(k, cands.size() - 1),
                   cands.end(), [](const Cand& a, const Cand& b) { return a.key > b.key; });
  cands.resize(std::min<size_t>(k, cands.size()));
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.key != b.key) return a.key > b.key;
    return a.y != b.y ? a.y < b.y : a.x < b.x;
  });
  KeypointSet out;
  for (const auto& c : cands) {
    out.coords.emplace_back(c.x, c.y);
    out.grid.emplace_back(c.x, c.y);
    out.probs.push_back(prob.at(0, c.y, c.x));
  }
  return out;
}

void write_log(const std::string& path, const std::vector<TrainLogEntry>& log) {
  std::ofstream f(path);
  for (const auto& e : log) {
    nlohmann::json j{{"step", e.step},
                     {"loss", e.loss},
                     {"mean_reward", e.mean_reward},
                     {"lr", e.lr}};
    if (e.val_repeatability) j["val_repeatability"] = *e.val_repeatability;
    f << j.dump() << "\n";
  }
}
}  // namespace

DetectorTrainResult train_detector(const std::vector<image::ImageBuffer>& corpus,
                                   models::DetectorNet& net, const DetectorTrainConfig& cfg,
                                   const std::string& out_dir) {
  if (corpus.empty()) throw std::invalid_argument("train_detector: empty dataset");
  std::filesystem::create_directories(out_dir);
  const std::string ckpt_path = (std::filesystem::path(out_dir) / "detector.ckpt").string();
  const std::string log_path =
      (std::filesystem::path(out_dir) / "detector_train_log.jsonl").string();

  const int n_val = std::min<int>(cfg.val_images, static_cast<int>(corpus.size()) - 1);
  std::vector<image::ImageBuffer> train_set(corpus.begin(), corpus.end() - n_val);
  std::vector<image::ImageBuffer> val_set(corpus.end() - n_val, corpus.end());

  Rng init_rng(derive_seed(cfg.seed, "detector_init"));
  net.init(init_rng);

  nn::AdamW opt(net.detector_params());
  DetectorTrainResult result;
  std::string last_good_ckpt;

  auto save_ckpt = [&](int64_t step) {
    nlohmann::json header{{"module", "detector"},
                          {"base_channels", net.base_channels()},
                          {"step", step},
                          {"config_hash", config_hash(cfg)}};
    std::vector<const nn::Param*> params;
    for (auto* p : net.all_params()) params.push_back(p);
    nn::save_checkpoint(ckpt_path, header.dump(), params);
    last_good_ckpt = ckpt_path;
  };

  auto run_validation = [&]() {
    auto detect = [&](const image::ImageBuffer& img) {
      return detect_keypoints(net, img, cfg.keypoints_per_image, cfg.nms_radius, true);
    };
    return evaluate_repeatability(val_set, detect, cfg, cfg.val_pairs,
                                  derive_seed(cfg.seed, "validation"));
  };

  for (int64_t t = 0; t < cfg.steps; ++t) {
    Rng step_rng(derive_seed(cfg.seed, "train_step_" + std::to_string(t)));
    const auto& img = train_set[step_rng.uniform_int(0, train_set.size() - 1)];
    const data::TrainingPair pair =
        data::make_training_pair(img, cfg.geo, cfg.photo, cfg.synthesis, step_rng);

    const Tensor in_a = nn::image_to_input(pair.view_a);
    const Tensor in_b = nn::image_to_input(pair.view_b);

    net.forward(in_a);
    const Tensor score_a = net.score();
    const Tensor prob_a = global_softmax(score_a);
    KeypointSet kps_a = cfg.stochastic_sampling
                            ? stochastic_sample(prob_a, cfg.keypoints_per_image, step_rng)
                            : select_keypoints(prob_a, cfg.nms_radius, cfg.keypoints_per_image);

    net.forward(in_b);
    const Tensor score_b = net.score();
    const Tensor prob_b = global_softmax(score_b);
    KeypointSet kps_b = cfg.stochastic_sampling
                            ? stochastic_sample(prob_b, cfg.keypoints_per_image, step_rng)
                            : select_keypoints(prob_b, cfg.nms_radius, cfg.keypoints_per_image);

    const RewardPair rewards = compute_rewards(kps_a, kps_b, pair.h_a_to_b, cfg.reward, t);
    const DetectorLossGrad lg = detector_loss_with_grad(score_a, score_b, kps_a, kps_b, rewards,
                                                        cfg.reward.epsilon_norm);
    if (!std::isfinite(lg.loss)) {
      write_log(log_path, result.log);
      throw std::runtime_error("train_detector: non-finite loss at step " + std::to_string(t) +
                               "; last good checkpoint: " +
                               (last_good_ckpt.empty() ? "<none>" : last_good_ckpt));
    }

    opt.zero_grad();
    net.backward_score(lg.grad_score_b);  // caches currently hold view B
    net.forward(in_a);
    net.backward_score(lg.grad_score_a);
    opt.step(nn::cosine_lr(cfg.lr0, cfg.lr_min, t, cfg.steps));

    TrainLogEntry e;
    e.step = t;
    e.loss = lg.loss;
    e.lr = nn::cosine_lr(cfg.lr0, cfg.lr_min, t, cfg.steps);
    double mr = 0.0;
    for (double r : rewards.rewards_a) mr += r;
    for (double r : rewards.rewards_b) mr += r;
    e.mean_reward = mr / std::max<size_t>(1, rewards.rewards_a.size() + rewards.rewards_b.size());
    if (cfg.val_interval > 0 && (t + 1) % cfg.val_interval == 0) {
      e.val_repeatability = run_validation();
    }
    result.log.push_back(e);

    if (cfg.checkpoint_interval > 0 && (t + 1) % cfg.checkpoint_interval == 0) save_ckpt(t + 1);
  }

  save_ckpt(cfg.steps);
  result.checkpoint_path = ckpt_path;
  result.final_val_repeatability = run_validation();

  Rng base_rng(derive_seed(cfg.seed, "random_baseline"));
  auto random_detect = [&](const image::ImageBuffer& img) {
    return random_keypoints(img.width, img.height, cfg.keypoints_per_image, base_rng);
  };
  result.random_baseline_repeatability = evaluate_repeatability(
      val_set, random_detect, cfg, cfg.val_pairs, derive_seed(cfg.seed, "validation"));

  write_log(log_path, result.log);
  return result;
}

}  // namespace raco::detector
