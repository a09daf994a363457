#include "raco/triangulate.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace raco::triangulate {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr double kMinTriAngleRad = 0.1 * kPi / 180.0;
}  // namespace

Eigen::Matrix<double, 3, 4> Camera::projection() const {
  Eigen::Matrix<double, 3, 4> rt;
  rt.leftCols<3>() = r;
  rt.col(3) = t;
  return k * rt;
}

Vec2 Camera::project(const Vec3& x) const {
  const Vec3 u = k * (r * x + t);
  return {u.x() / u.z(), u.y() / u.z()};
}

double Camera::depth(const Vec3& x) const { return (r * x + t).z(); }

Eigen::Matrix<double, 2, 3> Camera::point_jacobian(const Vec3& x) const {
  const Mat3 m = k * r;
  const Vec3 u = k * (r * x + t);
  Eigen::Matrix<double, 2, 3> j;
  j.row(0) = (m.row(0) - (u.x() / u.z()) * m.row(2)) / u.z();
  j.row(1) = (m.row(1) - (u.y() / u.z()) * m.row(2)) / u.z();
  return j;
}

double ellipsoid_precision(const Mat3& cov) {
  const double det = cov.determinant();
  if (!(det > 0.0)) throw std::invalid_argument("ellipsoid_precision: non-PD covariance");
  return 1.0 / ((4.0 / 3.0) * kPi * std::sqrt(det));
}

namespace {
Camera look_at(const Vec3& pos, const Vec3& target) {
  Camera cam;
  const Vec3 fwd = (target - pos).normalized();
  Vec3 up(0.0, 0.0, 1.0);
  if (std::abs(fwd.dot(up)) > 0.99) up = Vec3(0.0, 1.0, 0.0);
  const Vec3 right = fwd.cross(up).normalized();
  const Vec3 down = fwd.cross(right).normalized();
  cam.r.row(0) = right;
  cam.r.row(1) = down;
  cam.r.row(2) = fwd;
  cam.t = -cam.r * pos;
  cam.k << 500.0, 0.0, 256.0, 0.0, 500.0, 256.0, 0.0, 0.0, 1.0;
  return cam;
}

Mat2 rot2(double phi) {
  Mat2 m;
  m << std::cos(phi), -std::sin(phi), std::sin(phi), std::cos(phi);
  return m;
}
}  // namespace

Scene synth_scene(int num_cams, int num_points, const NoiseModel& noise, uint64_t seed) {
  if (num_cams < 2) throw std::invalid_argument("synth_scene: need at least 2 cameras");
  if (num_points < 1) throw std::invalid_argument("synth_scene: need at least 1 point");

  Scene scene;
  for (int c = 0; c < num_cams; ++c) {
    const double a = 2.0 * kPi * c / num_cams;
    const Vec3 pos(3.0 * std::cos(a), 3.0 * std::sin(a), 0.8);
    scene.cameras.push_back(look_at(pos, Vec3::Zero()));
  }

  Rng point_rng(derive_seed(seed, "scene_points"));
  for (int i = 0; i < num_points; ++i) {
    scene.points_gt.emplace_back(point_rng.uniform(-0.5, 0.5), point_rng.uniform(-0.5, 0.5),
                                 point_rng.uniform(-0.5, 0.5));
  }

  Rng noise_rng(derive_seed(seed, "scene_noise"));
  for (int i = 0; i < num_points; ++i) {
    Track track;
    for (int c = 0; c < num_cams; ++c) {
      if (scene.cameras[c].depth(scene.points_gt[i]) <= 0.0) continue;
      Observation obs;
      obs.camera_id = c;
      const double s1 = noise_rng.uniform(noise.sigma_min, noise.sigma_max);
      const double s2 =
          noise.isotropic ? s1 : noise_rng.uniform(noise.sigma_min, noise.sigma_max);
      const double phi = noise.isotropic ? 0.0 : noise_rng.uniform(0.0, 2.0 * kPi);
      const Mat2 q = rot2(phi);
      Mat2 d = Mat2::Zero();
      d(0, 0) = s1 * s1;
      d(1, 1) = s2 * s2;
      obs.cov = q * d * q.transpose();
      const Vec2 e = q * Vec2(s1 * noise_rng.normal(), s2 * noise_rng.normal());
      obs.point = scene.cameras[c].project(scene.points_gt[i]) + e;
      track.observations.push_back(obs);
    }
    if (track.observations.size() < 2) {
      std::cerr << "[triangulate] point " << i << " visible in <2 cameras, dropped\n";
      continue;
    }
    scene.tracks.push_back(std::move(track));
    scene.track_to_point.push_back(i);
  }
  return scene;
}

Vec3 triangulate_dlt(const Track& track, const std::vector<Camera>& cameras) {
  const size_t n = track.observations.size();
  if (n < 2) throw std::invalid_argument("triangulate_dlt: need at least 2 observations");

  // Triangulation angle from the backprojected ray directions.
  std::vector<Vec3> rays;
  for (const auto& obs : track.observations) {
    const Camera& cam = cameras.at(obs.camera_id);
    const Vec3 dir_cam = cam.k.inverse() * Vec3(obs.point.x(), obs.point.y(), 1.0);
    rays.push_back((cam.r.transpose() * dir_cam).normalized());
  }
  double max_angle = 0.0;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = i + 1; j < n; ++j) {
      max_angle = std::max(max_angle, std::acos(std::clamp(rays[i].dot(rays[j]), -1.0, 1.0)));
    }
  }
  if (max_angle <= kMinTriAngleRad) {
    throw std::runtime_error("triangulate_dlt: degenerate track (near-parallel rays)");
  }

  Eigen::MatrixXd a(2 * n, 4);
  for (size_t i = 0; i < n; ++i) {
    const auto& obs = track.observations[i];
    const auto p = cameras.at(obs.camera_id).projection();
    a.row(2 * i) = obs.point.x() * p.row(2) - p.row(0);
    a.row(2 * i + 1) = obs.point.y() * p.row(2) - p.row(1);
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::Vector4d h = svd.matrixV().col(3);
  if (std::abs(h(3)) < 1e-12) {
    throw std::runtime_error("triangulate_dlt: point at infinity");
  }
  const Vec3 x = h.head<3>() / h(3);

  bool in_front = false;
  for (const auto& obs : track.observations) {
    if (cameras.at(obs.camera_id).depth(x) > 0.0) in_front = true;
  }
  if (!in_front) throw std::runtime_error("triangulate_dlt: cheirality failure");
  return x;
}

double reprojection_objective(const Vec3& x, const Track& track,
                              const std::vector<Camera>& cameras) {
  double obj = 0.0;
  for (const auto& obs : track.observations) {
    const Vec2 e = obs.point - cameras.at(obs.camera_id).project(x);
    obj += e.dot(obs.cov.inverse() * e);
  }
  return obj;
}

std::vector<Point3D> refine_points(const std::vector<Vec3>& initial,
                                   const std::vector<Track>& tracks,
                                   const std::vector<Camera>& cameras, const RefineConfig& cfg) {
  if (initial.size() != tracks.size()) {
    throw std::invalid_argument("refine_points: point/track count mismatch");
  }
  std::vector<Point3D> out(initial.size());
  for (size_t i = 0; i < initial.size(); ++i) {
    Vec3 x = initial[i];
    double obj = reprojection_objective(x, tracks[i], cameras);
    if (!std::isfinite(obj)) {
      out[i].valid = false;
      continue;
    }
    double damping = cfg.init_damping;
    for (int it = 0; it < cfg.max_iters; ++it) {
      Mat3 h = Mat3::Zero();
      Vec3 g = Vec3::Zero();
      for (const auto& obs : tracks[i].observations) {
        const auto j = cameras.at(obs.camera_id).point_jacobian(x);
        const Mat2 w = obs.cov.inverse();
        const Vec2 e = obs.point - cameras.at(obs.camera_id).project(x);
        h += j.transpose() * w * j;
        g += j.transpose() * w * e;
      }
      const Vec3 step = (h + damping * Mat3::Identity()).ldlt().solve(g);
      if (!step.allFinite()) {
        out[i].valid = false;
        break;
      }
      if (step.norm() < cfg.step_tol) break;
      const double new_obj = reprojection_objective(x + step, tracks[i], cameras);
      if (std::isfinite(new_obj) && new_obj < obj) {
        x += step;
        obj = new_obj;
        damping = std::max(damping / 10.0, 1e-12);
      } else {
        damping *= 10.0;
      }
    }
    if (!out[i].valid) continue;
    out[i].position = x;
    try {
      out[i].marginal_cov = marginal_covariance_3d(x, tracks[i], cameras);
      out[i].precision = ellipsoid_precision(out[i].marginal_cov);
    } catch (const std::exception&) {
      out[i].valid = false;
    }
  }
  return out;
}

Mat3 marginal_covariance_3d(const Vec3& point, const Track& track,
                            const std::vector<Camera>& cameras) {
  if (track.observations.size() < 2) {
    throw std::invalid_argument("marginal_covariance_3d: need at least 2 observations");
  }
  Mat3 info = Mat3::Zero();
  for (const auto& obs : track.observations) {
    const auto j = cameras.at(obs.camera_id).point_jacobian(point);
    info += j.transpose() * obs.cov.inverse() * j;
  }
  const Eigen::FullPivLU<Mat3> lu(info);
  if (!lu.isInvertible()) {
    throw std::runtime_error("marginal_covariance_3d: singular information matrix");
  }
  return lu.inverse();
}

FilterCurve precision_filter_curve(const std::vector<Point3D>& points,
                                   const std::vector<Vec3>& ground_truth,
                                   const std::vector<double>& fractions,
                                   const std::vector<double>& thresholds) {
  std::vector<int> idx;
  for (size_t i = 0; i < points.size(); ++i) {
    if (points[i].valid) idx.push_back(static_cast<int>(i));
  }
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return points[a].precision > points[b].precision; });

  FilterCurve curve;
  curve.fractions = fractions;
  curve.thresholds = thresholds;
  curve.accuracy.assign(thresholds.size(), std::vector<double>(fractions.size(), 0.0));
  curve.completeness.assign(thresholds.size(), std::vector<double>(fractions.size(), 0.0));
  if (idx.empty() || ground_truth.empty()) return curve;

  for (size_t fi = 0; fi < fractions.size(); ++fi) {
    const int kept =
        std::clamp<int>(static_cast<int>(std::llround(fractions[fi] * idx.size())), 1,
                        static_cast<int>(idx.size()));
    for (size_t ti = 0; ti < thresholds.size(); ++ti) {
      const double tau = thresholds[ti];
      int acc = 0;
      for (int i = 0; i < kept; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& g : ground_truth) {
          best = std::min(best, (points[idx[i]].position - g).norm());
        }
        if (best <= tau) ++acc;
      }
      int comp = 0;
      for (const auto& g : ground_truth) {
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < kept; ++i) {
          best = std::min(best, (points[idx[i]].position - g).norm());
        }
        if (best <= tau) ++comp;
      }
      curve.accuracy[ti][fi] = static_cast<double>(acc) / kept;
      curve.completeness[ti][fi] = static_cast<double>(comp) / ground_truth.size();
    }
  }
  return curve;
}

}  // namespace raco::triangulate
