#pragma once

#include "raco/evalbench.hpp"
#include "raco/models.hpp"

namespace raco::covariance {

using geometry::Mat2;
using geometry::Vec2;

// Raw network outputs of the Cholesky head at one location.
struct RawChol {
  double l11 = 0.0, l21 = 0.0, l22 = 0.0;
};

double softplus(double x);
double softplus_inv(double y);

// L = [[softplus(l11), 0], [l21, softplus(l22)]], Sigma = L L^T.
// Diagonal entries of L are floored at 1e-4 px after activation.
Mat2 build_covariance(const RawChol& raw);
Mat2 build_covariance(double raw_l11, double raw_l21, double raw_l22);

// Sigma_err = Sigma_A + J Sigma_B J^T with J mapping B pixels to A pixels.
Mat2 propagate_error_cov(const Mat2& sigma_a, const Mat2& sigma_b, const Mat2& j_ba);

// 1/2 log det Sigma + 1/2 e^T Sigma^-1 e, via Cholesky of Sigma.
double nll_reprojection(const Vec2& e, const Mat2& sigma_err);

// Average bidirectional NLL over the match set: for each match, B->A uses the
// error x_A - H_BA(x_B) with the Jacobian at x_B, and symmetrically for A->B.
double covariance_loss(const std::vector<std::pair<int, int>>& matches,
                       const detector::KeypointSet& kps_a, const detector::KeypointSet& kps_b,
                       const std::vector<Mat2>& sigmas_a, const std::vector<Mat2>& sigmas_b,
                       const geometry::Homography& h_ab);

struct CovLossGrad {
  double loss = 0.0;
  std::vector<RawChol> grad_raw_a;  // per keypoint of view A
  std::vector<RawChol> grad_raw_b;
};

// Same loss from the raw Cholesky triplets, with analytic gradients.
CovLossGrad covariance_loss_with_grad(const std::vector<std::pair<int, int>>& matches,
                                      const detector::KeypointSet& kps_a,
                                      const detector::KeypointSet& kps_b,
                                      const std::vector<RawChol>& raws_a,
                                      const std::vector<RawChol>& raws_b,
                                      const geometry::Homography& h_ab);

// Raw triplets sampled bilinearly from the 3-channel Cholesky map; activation
// happens after interpolation so positive definiteness stays exact.
std::vector<RawChol> sample_raws(const nn::Tensor& chol_map,
                                 const std::vector<Vec2>& coords);
std::vector<Mat2> raws_to_covs(const std::vector<RawChol>& raws);

struct CovTrainConfig {
  int steps = 300;
  int keypoints_per_image = 128;
  int nms_radius = 3;
  double lr0 = 2e-4;
  double lr_min = 1e-6;
  double match_radius = 3.0;
  geometry::HomographySamplerConfig geo = {};
  data::PhotometricConfig photo = {};
  data::PairSynthesisConfig synthesis = {};
  uint64_t seed = 11;
  int checkpoint_interval = 100;
};

struct CovTrainResult {
  double final_loss = 0.0;
  std::string checkpoint_path;
  uint64_t frozen_hash = 0;  // encoder + score head hash, must not move
};

// Trains the covariance head only; encoder and score head stay frozen.
CovTrainResult train_covariance(const std::vector<image::ImageBuffer>& corpus,
                                const CovTrainConfig& cfg, models::DetectorNet& net,
                                const std::string& out_dir);

// Covariances for a detected keypoint set from a forward pass with the head on.
std::vector<Mat2> predict_covariances(models::DetectorNet& net, const image::ImageBuffer& img,
                                      const detector::KeypointSet& kps);

}  // namespace raco::covariance
