#include "raco/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include <json.hpp>

namespace raco::ranker {

SoftRankResult soft_rank(const std::vector<double>& scores, double epsilon) {
  if (scores.empty()) throw std::invalid_argument("soft_rank: empty input");
  if (!(epsilon > 0.0)) throw std::invalid_argument("soft_rank: epsilon must be > 0");
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("soft_rank: non-finite score");
  }
  const int n = static_cast<int>(scores.size());

  SoftRankResult r;
  r.epsilon = epsilon;
  r.sigma.resize(n);
  std::iota(r.sigma.begin(), r.sigma.end(), 0);
  // The projection of z = -s/eps onto the permutohedron of w = (n, ..., 1)
  // needs z in descending order, i.e. scores ascending (ties by index): the
  // smallest score sits first and is pulled toward rank n.
  std::stable_sort(r.sigma.begin(), r.sigma.end(),
                   [&](int a, int b) { return scores[a] < scores[b]; });

  // Non-increasing isotonic fit v of y = z_sorted - w, ranks_sorted = z - v.
  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) {
    y[i] = -scores[r.sigma[i]] / epsilon - static_cast<double>(n - i);
  }

  // Pool adjacent violators: merge while a block mean exceeds its successor's.
  std::vector<double> mean(n);
  std::vector<int> count(n), start(n);
  int top = -1;
  for (int i = 0; i < n; ++i) {
    ++top;
    mean[top] = y[i];
    count[top] = 1;
    start[top] = i;
    while (top > 0 && mean[top - 1] < mean[top]) {
      mean[top - 1] = (mean[top - 1] * count[top - 1] + mean[top] * count[top]) /
                      (count[top - 1] + count[top]);
      count[top - 1] += count[top];
      --top;
    }
  }

  r.ranks.resize(n);
  r.block_starts.reserve(top + 2);
  for (int b = 0; b <= top; ++b) {
    r.block_starts.push_back(start[b]);
    for (int i = start[b]; i < start[b] + count[b]; ++i) {
      r.ranks[r.sigma[i]] = -scores[r.sigma[i]] / epsilon - mean[b];
    }
  }
  r.block_starts.push_back(n);
  return r;
}

std::vector<double> soft_rank_vjp(const SoftRankResult& r, const std::vector<double>& grad_ranks) {
  const int n = static_cast<int>(r.sigma.size());
  if (static_cast<int>(grad_ranks.size()) != n) {
    throw std::invalid_argument("soft_rank_vjp: gradient size mismatch");
  }
  // d ranks_sorted / d z_sorted = I - block-averaging, then z = -s/eps.
  std::vector<double> gs(n, 0.0);
  for (size_t b = 0; b + 1 < r.block_starts.size(); ++b) {
    const int lo = r.block_starts[b], hi = r.block_starts[b + 1];
    double gsum = 0.0;
    for (int i = lo; i < hi; ++i) gsum += grad_ranks[r.sigma[i]];
    const double gmean = gsum / (hi - lo);
    for (int i = lo; i < hi; ++i) {
      gs[r.sigma[i]] = -(grad_ranks[r.sigma[i]] - gmean) / r.epsilon;
    }
  }
  return gs;
}

double spearman_loss(const std::vector<double>& ranks_a, const std::vector<double>& ranks_b,
                     const std::vector<std::pair<int, int>>& matches) {
  if (matches.empty()) {
    std::cerr << "[ranker] warning: empty match set, spearman contribution is 0\n";
    return 0.0;
  }
  double sum = 0.0;
  for (const auto& [ia, ib] : matches) {
    if (ia < 0 || ia >= static_cast<int>(ranks_a.size()) || ib < 0 ||
        ib >= static_cast<int>(ranks_b.size())) {
      throw std::out_of_range("spearman_loss: match index out of range");
    }
    const double d = ranks_a[ia] - ranks_b[ib];
    sum += d * d;
  }
  return sum / matches.size();
}

double pull_loss(const std::vector<double>& ranks, const std::vector<bool>& matched) {
  if (ranks.empty()) throw std::invalid_argument("pull_loss: empty input");
  if (ranks.size() != matched.size()) throw std::invalid_argument("pull_loss: size mismatch");
  const double n = static_cast<double>(ranks.size());
  double sum = 0.0;
  for (size_t i = 0; i < ranks.size(); ++i) {
    sum += matched[i] ? std::abs(ranks[i] - 1.0) : std::abs(ranks[i] - n);
  }
  return sum / n;
}

namespace {
double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }
}  // namespace

RankerLossGrad ranker_loss(const std::vector<double>& scores_a,
                           const std::vector<double>& scores_b,
                           const std::vector<std::pair<int, int>>& matches, double epsilon,
                           double lambda) {
  if (scores_a.empty() || scores_b.empty()) {
    throw std::invalid_argument("ranker_loss: empty score vector");
  }
  const int na = static_cast<int>(scores_a.size());
  const int nb = static_cast<int>(scores_b.size());
  const SoftRankResult ra = soft_rank(scores_a, epsilon);
  const SoftRankResult rb = soft_rank(scores_b, epsilon);

  std::vector<bool> matched_a(na, false), matched_b(nb, false);
  for (const auto& [ia, ib] : matches) {
    if (ia < 0 || ia >= na || ib < 0 || ib >= nb) {
      throw std::out_of_range("ranker_loss: match index out of range");
    }
    matched_a[ia] = true;
    matched_b[ib] = true;
  }

  RankerLossGrad out;
  std::vector<double> gra(na, 0.0), grb(nb, 0.0);

  out.spearman = spearman_loss(ra.ranks, rb.ranks, matches);
  if (!matches.empty()) {
    const double inv = 1.0 / matches.size();
    for (const auto& [ia, ib] : matches) {
      const double d = 2.0 * (ra.ranks[ia] - rb.ranks[ib]) * inv;
      gra[ia] += d;
      grb[ib] -= d;
    }
  }

  // Pull term averaged over every keypoint of both views.
  const double inv_total = 1.0 / (na + nb);
  double pull_sum = 0.0;
  for (int i = 0; i < na; ++i) {
    const double target = matched_a[i] ? 1.0 : static_cast<double>(na);
    pull_sum += std::abs(ra.ranks[i] - target);
    gra[i] += lambda * sgn(ra.ranks[i] - target) * inv_total;
  }
  for (int i = 0; i < nb; ++i) {
    const double target = matched_b[i] ? 1.0 : static_cast<double>(nb);
    pull_sum += std::abs(rb.ranks[i] - target);
    grb[i] += lambda * sgn(rb.ranks[i] - target) * inv_total;
  }
  out.pull = pull_sum * inv_total;

  out.loss = out.spearman + lambda * out.pull;
  out.grad_scores_a = soft_rank_vjp(ra, gra);
  out.grad_scores_b = soft_rank_vjp(rb, grb);
  return out;
}

detector::KeypointSet rank_order_truncate(const detector::KeypointSet& kps,
                                          const std::vector<double>& order_scores, int budget) {
  if (budget < 1) throw std::invalid_argument("rank_order_truncate: budget must be >= 1");
  if (order_scores.size() != kps.size()) {
    throw std::invalid_argument("rank_order_truncate: score count mismatch");
  }
  std::vector<int> idx(kps.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return order_scores[a] > order_scores[b]; });
  idx.resize(std::min<size_t>(budget, idx.size()));

  detector::KeypointSet out;
  for (int i : idx) {
    out.coords.push_back(kps.coords[i]);
    out.grid.push_back(kps.grid[i]);
    out.probs.push_back(kps.probs[i]);
    if (!kps.ranks.empty()) out.ranks.push_back(kps.ranks[i]);
    if (!kps.covs.empty()) out.covs.push_back(kps.covs[i]);
  }
  return out;
}

std::vector<double> score_keypoints(models::RankerNet& net, const image::ImageBuffer& img,
                                    const detector::KeypointSet& kps) {
  const nn::Tensor map = net.forward(nn::image_to_input(img));
  std::vector<double> scores;
  scores.reserve(kps.size());
  for (const auto& p : kps.coords) {
    scores.push_back(nn::sample_channel(map, 0, nn::bilinear_taps(map.h, map.w, p.x(), p.y())));
  }
  return scores;
}

namespace {
uint64_t config_hash(const RankerTrainConfig& cfg) {
  nlohmann::json j{{"steps", cfg.steps},
                   {"keypoints", cfg.keypoints_per_image},
                   {"nms_radius", cfg.nms_radius},
                   {"lr0", cfg.lr0},
                   {"lr_min", cfg.lr_min},
                   {"epsilon", cfg.epsilon},
                   {"lambda", cfg.lambda},
                   {"match_radius", cfg.match_radius},
                   {"channels", cfg.channels},
                   {"seed", cfg.seed}};
  return fnv1a(j.dump());
}
}  // namespace

RankerTrainResult train_ranker(const std::vector<image::ImageBuffer>& corpus,
                               const RankerTrainConfig& cfg, models::DetectorNet& frozen_detector,
                               models::RankerNet& net, const std::string& out_dir) {
  if (corpus.empty()) throw std::invalid_argument("train_ranker: empty dataset");
  std::filesystem::create_directories(out_dir);
  const std::string ckpt_path = (std::filesystem::path(out_dir) / "ranker.ckpt").string();
  const std::string log_path = (std::filesystem::path(out_dir) / "ranker_train_log.jsonl").string();
  std::ofstream log(log_path);

  std::vector<const nn::Param*> det_params;
  for (auto* p : frozen_detector.all_params()) det_params.push_back(p);
  const uint64_t det_hash_before = nn::hash_params(det_params);

  Rng init_rng(derive_seed(cfg.seed, "ranker_init"));
  net.init(init_rng);
  nn::AdamW opt(net.params());

  RankerTrainResult result;
  result.detector_hash = det_hash_before;

  auto save_ckpt = [&](int64_t step) {
    nlohmann::json header{{"module", "ranker"},        {"channels", cfg.channels},
                          {"epsilon", cfg.epsilon},    {"lambda", cfg.lambda},
                          {"step", step},              {"config_hash", config_hash(cfg)},
                          {"detector_hash", det_hash_before}};
    std::vector<const nn::Param*> params;
    for (auto* p : net.params()) params.push_back(p);
    nn::save_checkpoint(ckpt_path, header.dump(), params);
  };

  for (int64_t t = 0; t < cfg.steps; ++t) {
    Rng step_rng(derive_seed(cfg.seed, "ranker_step_" + std::to_string(t)));
    const auto& img = corpus[step_rng.uniform_int(0, corpus.size() - 1)];
    const data::TrainingPair pair =
        data::make_training_pair(img, cfg.geo, cfg.photo, cfg.synthesis, step_rng);

    const detector::KeypointSet kps_a = detector::detect_keypoints(
        frozen_detector, pair.view_a, cfg.keypoints_per_image, cfg.nms_radius, true);
    const detector::KeypointSet kps_b = detector::detect_keypoints(
        frozen_detector, pair.view_b, cfg.keypoints_per_image, cfg.nms_radius, true);
    if (kps_a.size() < 2 || kps_b.size() < 2) continue;

    const evalbench::MatchSet matches =
        evalbench::mutual_matches(kps_a, kps_b, pair.h_a_to_b, cfg.match_radius);

    const nn::Tensor in_a = nn::image_to_input(pair.view_a);
    const nn::Tensor in_b = nn::image_to_input(pair.view_b);

    std::vector<nn::BilinearTaps> taps_a, taps_b;
    std::vector<double> scores_a, scores_b;
    const nn::Tensor map_a = net.forward(in_a);
    for (const auto& p : kps_a.coords) {
      taps_a.push_back(nn::bilinear_taps(map_a.h, map_a.w, p.x(), p.y()));
      scores_a.push_back(nn::sample_channel(map_a, 0, taps_a.back()));
    }
    const nn::Tensor map_b = net.forward(in_b);
    for (const auto& p : kps_b.coords) {
      taps_b.push_back(nn::bilinear_taps(map_b.h, map_b.w, p.x(), p.y()));
      scores_b.push_back(nn::sample_channel(map_b, 0, taps_b.back()));
    }

    const RankerLossGrad lg =
        ranker_loss(scores_a, scores_b, matches.pairs, cfg.epsilon, cfg.lambda);
    if (!std::isfinite(lg.loss)) {
      throw std::runtime_error("train_ranker: non-finite loss at step " + std::to_string(t));
    }

    opt.zero_grad();
    nn::Tensor gmap_b(1, map_b.h, map_b.w);
    for (size_t i = 0; i < taps_b.size(); ++i) {
      nn::scatter_channel(gmap_b, 0, taps_b[i], lg.grad_scores_b[i]);
    }
    net.backward(gmap_b);  // caches currently hold view B
    net.forward(in_a);
    nn::Tensor gmap_a(1, map_a.h, map_a.w);
    for (size_t i = 0; i < taps_a.size(); ++i) {
      nn::scatter_channel(gmap_a, 0, taps_a[i], lg.grad_scores_a[i]);
    }
    net.backward(gmap_a);
    opt.step(nn::cosine_lr(cfg.lr0, cfg.lr_min, t, cfg.steps));

    result.final_loss = lg.loss;
    log << nlohmann::json{{"step", t},
                          {"loss", lg.loss},
                          {"spearman", lg.spearman},
                          {"pull", lg.pull},
                          {"num_matches", matches.pairs.size()}}
               .dump()
        << "\n";
    if (cfg.checkpoint_interval > 0 && (t + 1) % cfg.checkpoint_interval == 0) save_ckpt(t + 1);
  }

  save_ckpt(cfg.steps);
  result.checkpoint_path = ckpt_path;

  if (nn::hash_params(det_params) != det_hash_before) {
    throw std::logic_error("train_ranker: frozen detector parameters changed");
  }
  return result;
}

}  // namespace raco::ranker
