#pragma once

#include <functional>
#include <optional>
#include <string>

#include "raco/data.hpp"
#include "raco/geometry.hpp"
#include "raco/models.hpp"
#include "raco/nn.hpp"

namespace raco::detector {

using geometry::Vec2;
using nn::Tensor;

// Subpixel keypoints with the integer grid positions they were selected at.
struct KeypointSet {
  std::vector<Vec2> coords;              // subpixel px
  std::vector<Eigen::Vector2i> grid;     // integer selection positions
  std::vector<double> probs;             // P at the grid position
  std::vector<double> ranks;             // optional ranker scores
  std::vector<Eigen::Matrix2d> covs;     // optional 2x2 covariances, px^2

  size_t size() const { return coords.size(); }
};

struct RewardConfig {
  double d_max = 1.2;
  double rho_pos = 1.0;
  double rho_neg_cap = 1e-2;
  double rho_neg_slope = 1e-6;
  double epsilon_norm = 1e-6;
};

// Softmax over all H*W entries with max-subtraction stability (1-channel in/out).
Tensor global_softmax(const Tensor& score);

// Strict local maxima in a (2r+1)^2 window, ties broken by (row, col) order,
// sorted by probability descending, truncated to k.
KeypointSet select_keypoints(const Tensor& prob, int nms_radius, int k,
                             const image::Mask* valid_mask = nullptr);

// Soft-argmax over log-probabilities in a (2r+1)^2 patch. Keypoints closer
// than r to the border are returned unrefined.
Vec2 subpixel_refine(const Tensor& prob, const Eigen::Vector2i& kp, int patch_radius,
                     double temperature);
void subpixel_refine_all(const Tensor& prob, KeypointSet& kps, int patch_radius = 2,
                         double temperature = 1.0);

struct RewardPair {
  std::vector<double> rewards_a;
  std::vector<double> rewards_b;
};
RewardPair compute_rewards(const KeypointSet& kps_a, const KeypointSet& kps_b,
                           const geometry::Homography& h_ab, const RewardConfig& cfg,
                           int64_t step);

double rho_neg(const RewardConfig& cfg, int64_t step);

// Eq.-style policy-gradient loss on the probability maps.
double detector_loss(const Tensor& prob_a, const Tensor& prob_b, const KeypointSet& kps_a,
                     const KeypointSet& kps_b, const RewardPair& rewards,
                     double epsilon_norm);

// Same loss evaluated from raw score maps, with dL/dS for both views.
struct DetectorLossGrad {
  double loss = 0.0;
  Tensor grad_score_a;
  Tensor grad_score_b;
};
DetectorLossGrad detector_loss_with_grad(const Tensor& score_a, const Tensor& score_b,
                                         const KeypointSet& kps_a, const KeypointSet& kps_b,
                                         const RewardPair& rewards, double epsilon_norm);

// Full inference path: forward, global softmax, NMS + top-k, optional
// soft-argmax refinement.
KeypointSet detect_keypoints(models::DetectorNet& net, const image::ImageBuffer& img, int k,
                             int nms_radius, bool subpixel,
                             const image::Mask* valid_mask = nullptr);

struct DetectorTrainConfig {
  int steps = 200;
  int keypoints_per_image = 128;
  int nms_radius = 3;
  double lr0 = 2e-4;
  double lr_min = 1e-6;
  int base_channels = 8;
  RewardConfig reward;
  geometry::HomographySamplerConfig geo;
  data::PhotometricConfig photo;
  data::PairSynthesisConfig synthesis;
  uint64_t seed = 0;
  int val_interval = 50;
  int val_pairs = 6;
  int val_images = 4;       // held out from the tail of the corpus
  int checkpoint_interval = 50;
  bool stochastic_sampling = false;  // experiment: sample from P instead of NMS+top-k
};

struct TrainLogEntry {
  int64_t step = 0;
  double loss = 0.0;
  double mean_reward = 0.0;
  double lr = 0.0;
  std::optional<double> val_repeatability;
};

struct DetectorTrainResult {
  std::vector<TrainLogEntry> log;
  double final_val_repeatability = 0.0;
  double random_baseline_repeatability = 0.0;
  std::string checkpoint_path;
};

DetectorTrainResult train_detector(const std::vector<image::ImageBuffer>& corpus,
                                   models::DetectorNet& net, const DetectorTrainConfig& cfg,
                                   const std::string& out_dir);

// Held-out repeatability@3px of a detector callback over synthetic pairs.
double evaluate_repeatability(
    const std::vector<image::ImageBuffer>& images,
    const std::function<KeypointSet(const image::ImageBuffer&)>& detect,
    const DetectorTrainConfig& cfg, int num_pairs, uint64_t seed, double threshold = 3.0);

// Uniform random keypoints, the baseline detector for smoke comparisons.
KeypointSet random_keypoints(int width, int height, int k, Rng& rng);

}  // namespace raco::detector
