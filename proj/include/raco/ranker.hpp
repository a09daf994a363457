#pragma once

#include "raco/evalbench.hpp"
#include "raco/models.hpp"

namespace raco::ranker {

using geometry::Vec2;

// Differentiable ranks via isotonic regression on the permutohedron.
// Descending convention: the highest score gets rank 1, the lowest rank n.
// epsilon -> 0 recovers hard ranks; large epsilon pulls all ranks toward
// the centroid (n+1)/2. Ranks always sum to n(n+1)/2 exactly.
struct SoftRankResult {
  std::vector<double> ranks;
  // Backward state: sorted order and PAV block boundaries.
  std::vector<int> sigma;          // indices sorted by ascending score
  std::vector<int> block_starts;   // block partition of the sorted sequence
  double epsilon = 1.0;
};

SoftRankResult soft_rank(const std::vector<double>& scores, double epsilon);

// d(loss)/d(scores) given d(loss)/d(ranks).
std::vector<double> soft_rank_vjp(const SoftRankResult& r, const std::vector<double>& grad_ranks);

// Mean squared rank discrepancy over matched keypoint pairs.
double spearman_loss(const std::vector<double>& ranks_a, const std::vector<double>& ranks_b,
                     const std::vector<std::pair<int, int>>& matches);

// Matched keypoints are pulled toward rank 1, unmatched toward rank n.
double pull_loss(const std::vector<double>& ranks, const std::vector<bool>& matched);

struct RankerLossGrad {
  double loss = 0.0;
  double spearman = 0.0;
  double pull = 0.0;
  std::vector<double> grad_scores_a;
  std::vector<double> grad_scores_b;
};

// spearman + lambda * pull, pull averaged over all keypoints of both views.
RankerLossGrad ranker_loss(const std::vector<double>& scores_a,
                           const std::vector<double>& scores_b,
                           const std::vector<std::pair<int, int>>& matches, double epsilon,
                           double lambda);

// Keep the `budget` best-ranked keypoints (ascending rank; ties broken by
// original index). Reorders the set best-first.
detector::KeypointSet rank_order_truncate(const detector::KeypointSet& kps,
                                          const std::vector<double>& order_scores, int budget);

struct RankerTrainConfig {
  int steps = 300;
  int keypoints_per_image = 128;
  int nms_radius = 3;
  double lr0 = 2e-4;
  double lr_min = 1e-6;
  double epsilon = 1.0;
  double lambda = 1.0;
  double match_radius = 3.0;
  int channels = 16;
  geometry::HomographySamplerConfig geo = {};
  data::PhotometricConfig photo = {};
  data::PairSynthesisConfig synthesis = {};
  uint64_t seed = 7;
  int checkpoint_interval = 100;
};

struct RankerTrainResult {
  double final_loss = 0.0;
  std::string checkpoint_path;
  uint64_t detector_hash = 0;  // parameter hash of the frozen detector
};

// Trains the ranking head on matches produced by a frozen detector.
RankerTrainResult train_ranker(const std::vector<image::ImageBuffer>& corpus,
                               const RankerTrainConfig& cfg, models::DetectorNet& frozen_detector,
                               models::RankerNet& net, const std::string& out_dir);

// Rank scores sampled at subpixel keypoint locations from the ranker map.
std::vector<double> score_keypoints(models::RankerNet& net, const image::ImageBuffer& img,
                                    const detector::KeypointSet& kps);

}  // namespace raco::ranker
