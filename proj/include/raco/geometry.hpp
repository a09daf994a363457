#pragma once

#include <Eigen/Dense>
#include <string>
#include <utility>
#include <vector>

#include "raco/common.hpp"

namespace raco::geometry {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

// 3x3 projective transform, pixel coordinates in -> pixel coordinates out.
// Stored normalized: h33 = 1 when |h33| > 1e-6, else unit Frobenius norm.
class Homography {
 public:
  Homography() : m_(Mat3::Identity()) {}
  static Homography identity() { return Homography(); }
  static Homography from_matrix(const Mat3& m);

  const Mat3& matrix() const { return m_; }
  Homography inverse() const;
  Homography compose(const Homography& rhs) const;  // this after rhs

  std::string to_text() const;  // HPatches H-file convention, 3 lines
  static Homography from_text(const std::string& text);

 private:
  explicit Homography(const Mat3& m) : m_(m) {}
  Mat3 m_;
};

struct HomographySamplerConfig {
  double max_rotation_deg = 180.0;  // uniform over [-max, max]
  double max_perspective = 0.0;     // corner-displacement fraction
  double scale_min = 1.0;
  double scale_max = 1.0;
  double max_translation_frac = 0.0;  // fraction of image size
  uint64_t rng_seed = 0;

  void validate() const;
};

Vec2 apply_homography(const Homography& h, const Vec2& pt);
std::vector<Vec2> apply_homography(const Homography& h, const std::vector<Vec2>& pts);

// Analytic d(output px)/d(input px) of apply_homography at pt.
Mat2 homography_jacobian(const Homography& h, const Vec2& pt);

// Composition translation . perspective . scale . rotation about the image
// center, each component drawn uniformly within the config bounds.
Homography sample_homography(const HomographySamplerConfig& cfg, int width, int height, Rng& rng);
Homography sample_homography(const HomographySamplerConfig& cfg, int width, int height);

// Least-squares homography with Hartley normalization of both point sets.
Homography estimate_homography_dlt(const std::vector<std::pair<Vec2, Vec2>>& matches);

// Mean distance over the 4 image corners between the two warps.
double corner_error(const Homography& h_est, const Homography& h_gt, int width, int height);

}  // namespace raco::geometry
