#pragma once

#include <functional>
#include <optional>

#include "raco/detector.hpp"

namespace raco::evalbench {

using detector::KeypointSet;
using geometry::Vec2;

// Ground-truth correspondence as a pair of point maps (A->B and B->A);
// homographies are the common special case.
using PointMap = std::function<Vec2(const Vec2&)>;
PointMap homography_map(const geometry::Homography& h);

struct MatchSet {
  std::vector<std::pair<int, int>> pairs;
  std::vector<double> reproj_errors;  // symmetric mean of both directions, px
  double radius = 0.0;
};

// Mutual nearest neighbors within the reprojection radius (inclusive).
MatchSet mutual_matches(const KeypointSet& kps_a, const KeypointSet& kps_b,
                        const PointMap& map_ab, const PointMap& map_ba, double radius);
MatchSet mutual_matches(const KeypointSet& kps_a, const KeypointSet& kps_b,
                        const geometry::Homography& h_ab, double radius);

// Fraction of covisible keypoints with a detection of the other view within
// each threshold, averaged over both directions. Covisibility: reprojection
// inside the other view's valid mask, or inside image bounds without a mask.
// Zero covisible keypoints in both directions -> nullopt.
std::optional<std::vector<double>> repeatability(
    const KeypointSet& kps_a, const KeypointSet& kps_b, const PointMap& map_ab,
    const PointMap& map_ba, const std::vector<double>& thresholds, int width, int height,
    const image::Mask* mask_a = nullptr, const image::Mask* mask_b = nullptr);

std::optional<double> localization_error(const MatchSet& matches);

// Exact AUC of the step-function recall curve from 0 to each threshold.
std::optional<std::vector<double>> homography_auc(const std::vector<double>& corner_errors,
                                                  const std::vector<double>& thresholds);

using DetectFn = std::function<KeypointSet(const image::ImageBuffer&)>;

struct RotationSweepResult {
  std::vector<double> angles_deg;
  std::vector<double> thresholds;
  // repeatability[t][a]: threshold t, angle a
  std::vector<std::vector<double>> repeatability;
  std::vector<double> auc;  // mean over angles, per threshold
};
RotationSweepResult rotation_sweep(const DetectFn& detect,
                                   const std::vector<image::ImageBuffer>& images, int step_deg,
                                   double noise_sigma, int k, int resize_to, uint64_t noise_seed,
                                   const std::vector<double>& thresholds = {1.0, 2.0, 3.0});

// Repeatability@3px after truncating both views to each budget by their own
// ordering scores.
std::vector<double> budget_curve(const KeypointSet& kps_a, const KeypointSet& kps_b,
                                 const std::vector<double>& order_scores_a,
                                 const std::vector<double>& order_scores_b,
                                 const PointMap& map_ab, const PointMap& map_ba,
                                 const std::vector<int>& budgets, int width, int height,
                                 double threshold = 3.0);

struct CalibrationCurve {
  std::vector<double> bin_predicted;  // mean predicted uncertainty per bin
  std::vector<double> bin_observed;   // mean observed error per bin
  double slope = 0.0;                 // log-log OLS slope over bin means
};
CalibrationCurve calibration_curve(const std::vector<double>& predicted_uncertainties,
                                   const std::vector<double>& observed_errors, int num_bins);

struct MetricReport {
  int num_matches = 0;
  std::vector<double> thresholds;
  std::vector<double> repeatability;  // per threshold; empty if undefined
  double localization_error = 0.0;
  bool localization_defined = false;
  double corner_error = 0.0;  // DLT estimate vs ground truth, px
  bool corner_error_defined = false;
  std::vector<double> auc;  // per threshold; empty if undefined
};

// Full two-view protocol: match, repeat, localize, DLT + corner-error AUC.
MetricReport two_view_report(const KeypointSet& kps_a, const KeypointSet& kps_b,
                             const geometry::Homography& h_ab, int width, int height,
                             const std::vector<double>& thresholds, double match_radius = 3.0,
                             const image::Mask* mask_a = nullptr,
                             const image::Mask* mask_b = nullptr);

}  // namespace raco::evalbench
