#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "raco/common.hpp"

namespace raco::triangulate {

using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

struct Camera {
  Mat3 k = Mat3::Identity();   // intrinsics, px
  Mat3 r = Mat3::Identity();   // world -> camera rotation
  Vec3 t = Vec3::Zero();       // world -> camera translation

  Eigen::Matrix<double, 3, 4> projection() const;
  Vec2 project(const Vec3& x) const;
  double depth(const Vec3& x) const;
  // 2x3 Jacobian of the projection w.r.t. the world point.
  Eigen::Matrix<double, 2, 3> point_jacobian(const Vec3& x) const;
};

struct Observation {
  int camera_id = 0;
  Vec2 point = Vec2::Zero();   // px
  Mat2 cov = Mat2::Identity(); // px^2
};

struct Track {
  std::vector<Observation> observations;
};

struct Point3D {
  Vec3 position = Vec3::Zero();
  Mat3 marginal_cov = Mat3::Identity();
  double precision = 0.0;  // 1 / ((4/3) pi sqrt(det marginal_cov))
  bool valid = true;
};

double ellipsoid_precision(const Mat3& cov);

// Anisotropic observation noise: per observation a random orientation and
// axis sigmas drawn from [sigma_min, sigma_max], recorded in the observation.
struct NoiseModel {
  double sigma_min = 0.2;  // px
  double sigma_max = 2.0;
  bool isotropic = false;
};

struct Scene {
  std::vector<Camera> cameras;
  std::vector<Vec3> points_gt;
  std::vector<Track> tracks;      // parallel to points_gt
  std::vector<int> track_to_point;
};

// Cameras on a ring looking at a point cloud inside the unit box.
Scene synth_scene(int num_cams, int num_points, const NoiseModel& noise, uint64_t seed);

// Homogeneous linear least squares from all observations' constraints.
// Throws on near-parallel rays (triangulation angle <= 0.1 deg) and on
// points behind every camera.
Vec3 triangulate_dlt(const Track& track, const std::vector<Camera>& cameras);

struct RefineConfig {
  double init_damping = 1e-3;
  double step_tol = 1e-10;
  int max_iters = 100;
};

// Per-point covariance-weighted reprojection refinement (LM, cameras fixed).
std::vector<Point3D> refine_points(const std::vector<Vec3>& initial,
                                   const std::vector<Track>& tracks,
                                   const std::vector<Camera>& cameras,
                                   const RefineConfig& cfg = {});

double reprojection_objective(const Vec3& x, const Track& track,
                              const std::vector<Camera>& cameras);

// Gauss-Newton information inverse: (sum J^T cov^-1 J)^-1 at the point.
Mat3 marginal_covariance_3d(const Vec3& point, const Track& track,
                            const std::vector<Camera>& cameras);

struct FilterCurve {
  std::vector<double> fractions;
  std::vector<double> thresholds;
  // accuracy[t][f], completeness[t][f]
  std::vector<std::vector<double>> accuracy;
  std::vector<std::vector<double>> completeness;
};

// Keep the top fraction by precision; accuracy = kept points near ground
// truth, completeness = ground-truth points near the kept set.
FilterCurve precision_filter_curve(const std::vector<Point3D>& points,
                                   const std::vector<Vec3>& ground_truth,
                                   const std::vector<double>& fractions,
                                   const std::vector<double>& thresholds = {0.005, 0.01, 0.02});

}  // namespace raco::triangulate
