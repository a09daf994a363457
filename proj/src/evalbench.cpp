#include "raco/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "raco/ranker.hpp"

namespace raco::evalbench {

PointMap homography_map(const geometry::Homography& h) {
  return [h](const Vec2& p) { return geometry::apply_homography(h, p); };
}

namespace {
// Index of the nearest point, smallest index on exact ties. -1 when empty.
int nearest(const std::vector<Vec2>& pts, const Vec2& q, double* dist) {
  int best = -1;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < pts.size(); ++i) {
    const double d2 = (pts[i] - q).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = static_cast<int>(i);
    }
  }
  if (dist) *dist = best >= 0 ? std::sqrt(best_d2) : 0.0;
  return best;
}
}  // namespace

MatchSet mutual_matches(const KeypointSet& kps_a, const KeypointSet& kps_b,
                        const PointMap& map_ab, const PointMap& map_ba, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("mutual_matches: radius must be > 0");
  MatchSet out;
  out.radius = radius;
  if (kps_a.size() == 0 || kps_b.size() == 0) return out;

  std::vector<Vec2> proj_a(kps_a.size()), proj_b(kps_b.size());
  for (size_t i = 0; i < kps_a.size(); ++i) proj_a[i] = map_ab(kps_a.coords[i]);
  for (size_t j = 0; j < kps_b.size(); ++j) proj_b[j] = map_ba(kps_b.coords[j]);

  for (size_t i = 0; i < kps_a.size(); ++i) {
    double d_ab = 0.0;
    const int j = nearest(kps_b.coords, proj_a[i], &d_ab);
    double d_ba = 0.0;
    if (nearest(kps_a.coords, proj_b[j], &d_ba) != static_cast<int>(i)) continue;
    const double err = 0.5 * (d_ab + d_ba);
    if (err <= radius) {
      out.pairs.emplace_back(static_cast<int>(i), j);
      out.reproj_errors.push_back(err);
    }
  }
  return out;
}

MatchSet mutual_matches(const KeypointSet& kps_a, const KeypointSet& kps_b,
                        const geometry::Homography& h_ab, double radius) {
  return mutual_matches(kps_a, kps_b, homography_map(h_ab), homography_map(h_ab.inverse()),
                        radius);
}

namespace {
bool covisible(const Vec2& p, int width, int height, const image::Mask* mask) {
  if (p.x() < 0.0 || p.x() > width - 1 || p.y() < 0.0 || p.y() > height - 1) return false;
  if (!mask) return true;
  const int x = static_cast<int>(std::lround(p.x()));
  const int y = static_cast<int>(std::lround(p.y()));
  return mask->at(std::clamp(y, 0, height - 1), std::clamp(x, 0, width - 1)) != 0;
}

// One direction: counts covisible sources and, per threshold, those with a
// target keypoint within range of the reprojection.
bool directional_repeat(const std::vector<Vec2>& src, const std::vector<Vec2>& dst,
                        const PointMap& map, const std::vector<double>& thresholds, int width,
                        int height, const image::Mask* dst_mask, std::vector<double>* hits) {
  hits->assign(thresholds.size(), 0.0);
  int n_covis = 0;
  for (const auto& p : src) {
    const Vec2 q = map(p);
    if (!covisible(q, width, height, dst_mask)) continue;
    ++n_covis;
    double d = std::numeric_limits<double>::infinity();
    if (!dst.empty()) nearest(dst, q, &d);
    for (size_t t = 0; t < thresholds.size(); ++t) {
      if (d <= thresholds[t]) (*hits)[t] += 1.0;
    }
  }
  if (n_covis == 0) return false;
  for (double& h : *hits) h /= n_covis;
  return true;
}
}  // namespace

std::optional<std::vector<double>> repeatability(
    const KeypointSet& kps_a, const KeypointSet& kps_b, const PointMap& map_ab,
    const PointMap& map_ba, const std::vector<double>& thresholds, int width, int height,
    const image::Mask* mask_a, const image::Mask* mask_b) {
  std::vector<double> fwd, bwd;
  const bool has_fwd =
      directional_repeat(kps_a.coords, kps_b.coords, map_ab, thresholds, width, height, mask_b,
                         &fwd);
  const bool has_bwd =
      directional_repeat(kps_b.coords, kps_a.coords, map_ba, thresholds, width, height, mask_a,
                         &bwd);
  if (!has_fwd && !has_bwd) {
    std::cerr << "[evalbench] warning: no covisible keypoints, repeatability undefined\n";
    return std::nullopt;
  }
  std::vector<double> out(thresholds.size(), 0.0);
  for (size_t t = 0; t < thresholds.size(); ++t) {
    if (has_fwd && has_bwd) {
      out[t] = 0.5 * (fwd[t] + bwd[t]);
    } else {
      out[t] = has_fwd ? fwd[t] : bwd[t];
    }
  }
  return out;
}

std::optional<double> localization_error(const MatchSet& matches) {
  if (matches.reproj_errors.empty()) return std::nullopt;
  const double sum =
      std::accumulate(matches.reproj_errors.begin(), matches.reproj_errors.end(), 0.0);
  return sum / matches.reproj_errors.size();
}

std::optional<std::vector<double>> homography_auc(const std::vector<double>& corner_errors,
                                                  const std::vector<double>& thresholds) {
  if (corner_errors.empty()) return std::nullopt;
  for (double e : corner_errors) {
    if (!(e >= 0.0)) throw std::invalid_argument("homography_auc: negative error");
  }
  // AUC of the step CDF over [0, t]: each error <= t contributes (t - e)/(n t).
  std::vector<double> out;
  out.reserve(thresholds.size());
  const double n = static_cast<double>(corner_errors.size());
  for (double t : thresholds) {
    if (!(t > 0.0)) throw std::invalid_argument("homography_auc: threshold must be > 0");
    double area = 0.0;
    for (double e : corner_errors) {
      if (e <= t) area += t - e;
    }
    out.push_back(area / (n * t));
  }
  return out;
}

namespace {
image::ImageBuffer add_noise(const image::ImageBuffer& img, double sigma, Rng& rng) {
  image::ImageBuffer out = img;
  if (sigma <= 0.0) return out;
  const double s = sigma / 255.0;
  for (double& v : out.px) v = std::clamp(v + rng.normal(0.0, s), 0.0, 1.0);
  return out;
}
}  // namespace

RotationSweepResult rotation_sweep(const DetectFn& detect,
                                   const std::vector<image::ImageBuffer>& images, int step_deg,
                                   double noise_sigma, int k, int resize_to, uint64_t noise_seed,
                                   const std::vector<double>& thresholds) {
  if (step_deg <= 0 || 360 % step_deg != 0) {
    throw std::invalid_argument("rotation_sweep: step must divide 360");
  }
  if (images.empty()) throw std::invalid_argument("rotation_sweep: no images");
  (void)k;

  RotationSweepResult res;
  res.thresholds = thresholds;
  for (int a = 0; a < 360; a += step_deg) res.angles_deg.push_back(a);
  res.repeatability.assign(thresholds.size(),
                           std::vector<double>(res.angles_deg.size(), 0.0));

  for (size_t ai = 0; ai < res.angles_deg.size(); ++ai) {
    const double theta = res.angles_deg[ai] * M_PI / 180.0;
    std::vector<std::vector<double>> per_image;  // repeatability per threshold

    for (size_t ii = 0; ii < images.size(); ++ii) {
      const auto& img = images[ii];
      // Largest square that stays inside the image under any rotation.
      const int side = static_cast<int>(std::floor(std::min(img.width, img.height) / std::sqrt(2.0)));
      const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
      const double scale = static_cast<double>(resize_to) / side;

      geometry::Mat3 crop = geometry::Mat3::Identity();
      crop(0, 2) = -(cx - (side - 1) / 2.0);
      crop(1, 2) = -(cy - (side - 1) / 2.0);
      geometry::Mat3 s = geometry::Mat3::Identity();
      s(0, 0) = s(1, 1) = scale;
      s(0, 2) = s(1, 2) = (scale - 1.0) / 2.0;  // pixel-center resize convention
      geometry::Mat3 rot = geometry::Mat3::Identity();
      rot(0, 0) = std::cos(theta);
      rot(0, 1) = -std::sin(theta);
      rot(1, 0) = std::sin(theta);
      rot(0, 2) = cx - rot(0, 0) * cx - rot(0, 1) * cy;
      rot(1, 2) = cy - rot(1, 0) * cx - rot(1, 1) * cy;

      const auto h_a = geometry::Homography::from_matrix(s * crop);
      const auto h_b = geometry::Homography::from_matrix(s * crop * rot);
      image::WarpResult view_a = image::warp_image(img, h_a, resize_to, resize_to);
      image::WarpResult view_b = image::warp_image(img, h_b, resize_to, resize_to);

      Rng rng(derive_seed(noise_seed, "rot_" + std::to_string(res.angles_deg[ai]) + "_img_" +
                                          std::to_string(ii)));
      view_a.img = add_noise(view_a.img, noise_sigma, rng);
      view_b.img = add_noise(view_b.img, noise_sigma, rng);

      const KeypointSet kps_a = detect(view_a.img);
      const KeypointSet kps_b = detect(view_b.img);
      const auto h_ab = h_b.compose(h_a.inverse());
      const auto rep =
          repeatability(kps_a, kps_b, homography_map(h_ab), homography_map(h_ab.inverse()),
                        thresholds, resize_to, resize_to, &view_a.valid, &view_b.valid);
      if (rep) per_image.push_back(*rep);
    }

    for (size_t t = 0; t < thresholds.size(); ++t) {
      double sum = 0.0;
      for (const auto& r : per_image) sum += r[t];
      res.repeatability[t][ai] = per_image.empty() ? 0.0 : sum / per_image.size();
    }
  }

  res.auc.resize(thresholds.size());
  for (size_t t = 0; t < thresholds.size(); ++t) {
    const auto& row = res.repeatability[t];
    res.auc[t] = std::accumulate(row.begin(), row.end(), 0.0) / row.size();
  }
  return res;
}

std::vector<double> budget_curve(const KeypointSet& kps_a, const KeypointSet& kps_b,
                                 const std::vector<double>& order_scores_a,
                                 const std::vector<double>& order_scores_b,
                                 const PointMap& map_ab, const PointMap& map_ba,
                                 const std::vector<int>& budgets, int width, int height,
                                 double threshold) {
  std::vector<double> out;
  out.reserve(budgets.size());
  for (int n : budgets) {
    const KeypointSet ta = ranker::rank_order_truncate(kps_a, order_scores_a, n);
    const KeypointSet tb = ranker::rank_order_truncate(kps_b, order_scores_b, n);
    const auto rep = repeatability(ta, tb, map_ab, map_ba, {threshold}, width, height);
    out.push_back(rep ? (*rep)[0] : 0.0);
  }
  return out;
}

CalibrationCurve calibration_curve(const std::vector<double>& predicted_uncertainties,
                                   const std::vector<double>& observed_errors, int num_bins) {
  const int n = static_cast<int>(predicted_uncertainties.size());
  if (n != static_cast<int>(observed_errors.size())) {
    throw std::invalid_argument("calibration_curve: size mismatch");
  }
  if (num_bins < 2 || n < num_bins) {
    throw std::invalid_argument("calibration_curve: need at least num_bins >= 2 samples");
  }
  for (int i = 0; i < n; ++i) {
    if (!(predicted_uncertainties[i] > 0.0) || !(observed_errors[i] > 0.0)) {
      throw std::invalid_argument("calibration_curve: values must be positive (log domain)");
    }
  }

  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return predicted_uncertainties[a] < predicted_uncertainties[b];
  });

  CalibrationCurve out;
  for (int b = 0; b < num_bins; ++b) {
    const int lo = static_cast<int>(static_cast<int64_t>(b) * n / num_bins);
    const int hi = static_cast<int>(static_cast<int64_t>(b + 1) * n / num_bins);
    double sp = 0.0, so = 0.0;
    for (int i = lo; i < hi; ++i) {
      sp += predicted_uncertainties[idx[i]];
      so += observed_errors[idx[i]];
    }
    out.bin_predicted.push_back(sp / (hi - lo));
    out.bin_observed.push_back(so / (hi - lo));
  }

  // OLS slope of log(observed bin mean) on log(predicted bin mean).
  double mx = 0.0, my = 0.0;
  for (int b = 0; b < num_bins; ++b) {
    mx += std::log(out.bin_predicted[b]);
    my += std::log(out.bin_observed[b]);
  }
  mx /= num_bins;
  my /= num_bins;
  double sxx = 0.0, sxy = 0.0;
  for (int b = 0; b < num_bins; ++b) {
    const double dx = std::log(out.bin_predicted[b]) - mx;
    sxx += dx * dx;
    sxy += dx * (std::log(out.bin_observed[b]) - my);
  }
  if (sxx < 1e-18) {
    throw std::invalid_argument("calibration_curve: degenerate regressor (constant predictions)");
  }
  out.slope = sxy / sxx;
  return out;
}

MetricReport two_view_report(const KeypointSet& kps_a, const KeypointSet& kps_b,
                             const geometry::Homography& h_ab, int width, int height,
                             const std::vector<double>& thresholds, double match_radius,
                             const image::Mask* mask_a, const image::Mask* mask_b) {
  MetricReport rep;
  rep.thresholds = thresholds;
  const MatchSet matches = mutual_matches(kps_a, kps_b, h_ab, match_radius);
  rep.num_matches = static_cast<int>(matches.pairs.size());

  const auto r = repeatability(kps_a, kps_b, homography_map(h_ab),
                               homography_map(h_ab.inverse()), thresholds, width, height, mask_a,
                               mask_b);
  if (r) rep.repeatability = *r;

  if (const auto loc = localization_error(matches)) {
    rep.localization_error = *loc;
    rep.localization_defined = true;
  }

  if (matches.pairs.size() >= 4) {
    std::vector<std::pair<Vec2, Vec2>> pts;
    for (const auto& [ia, ib] : matches.pairs) {
      pts.emplace_back(kps_a.coords[ia], kps_b.coords[ib]);
    }
    try {
      const auto h_est = geometry::estimate_homography_dlt(pts);
      rep.corner_error = geometry::corner_error(h_est, h_ab, width, height);
      rep.corner_error_defined = true;
      if (const auto auc = homography_auc({rep.corner_error}, thresholds)) rep.auc = *auc;
    } catch (const std::exception&) {
      // Degenerate match geometry leaves the corner error undefined.
    }
  }
  return rep;
}

}  // namespace raco::evalbench
