#include "raco/geometry.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <sstream>

namespace raco::geometry {

namespace {
constexpr double kDegenerateW = 1e-12;
constexpr double kPi = 3.14159265358979323846;

Mat3 normalized(const Mat3& m) {
  Mat3 out = m;
  if (std::abs(out(2, 2)) > 1e-6) {
    out /= out(2, 2);
  } else {
    out /= out.norm();
  }
  return out;
}
}  // namespace

Homography Homography::from_matrix(const Mat3& m) {
  if (!m.allFinite()) throw std::invalid_argument("homography: non-finite matrix");
  Mat3 n = normalized(m);
  if (!n.allFinite() || std::abs(n.determinant()) <= 1e-12) {
    throw std::invalid_argument("homography: singular matrix");
  }
  return Homography(n);
}

Homography Homography::inverse() const { return from_matrix(m_.inverse()); }

Homography Homography::compose(const Homography& rhs) const {
  return from_matrix(m_ * rhs.m_);
}

std::string Homography::to_text() const {
  std::ostringstream os;
  os.precision(17);
  for (int r = 0; r < 3; ++r) {
    os << m_(r, 0) << " " << m_(r, 1) << " " << m_(r, 2) << "\n";
  }
  return os.str();
}

Homography Homography::from_text(const std::string& text) {
  std::istringstream is(text);
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      if (!(is >> m(r, c))) throw std::runtime_error("homography text: expected 9 numbers");
  return from_matrix(m);
}

void HomographySamplerConfig::validate() const {
  if (!(scale_min > 0.0) || scale_max < scale_min)
    throw std::invalid_argument("sampler config: scale range must satisfy 0 < min <= max");
  if (max_rotation_deg < 0.0 || max_perspective < 0.0 || max_translation_frac < 0.0)
    throw std::invalid_argument("sampler config: magnitudes must be >= 0");
  if (max_perspective > 0.25 || max_translation_frac > 0.5 || scale_max > 4.0)
    throw std::invalid_argument("sampler config: magnitude outside safe bounds");
}

Vec2 apply_homography(const Homography& h, const Vec2& pt) {
  if (!pt.allFinite()) throw std::invalid_argument("apply_homography: non-finite point");
  const Mat3& m = h.matrix();
  const double w = m(2, 0) * pt.x() + m(2, 1) * pt.y() + m(2, 2);
  if (std::abs(w) < kDegenerateW)
    throw std::domain_error("apply_homography: degenerate point (w ~ 0)");
  return Vec2((m(0, 0) * pt.x() + m(0, 1) * pt.y() + m(0, 2)) / w,
              (m(1, 0) * pt.x() + m(1, 1) * pt.y() + m(1, 2)) / w);
}

std::vector<Vec2> apply_homography(const Homography& h, const std::vector<Vec2>& pts) {
  std::vector<Vec2> out;
  out.reserve(pts.size());
  for (size_t i = 0; i < pts.size(); ++i) {
    try {
      out.push_back(apply_homography(h, pts[i]));
    } catch (const std::domain_error&) {
      throw std::domain_error("apply_homography: degenerate point at index " + std::to_string(i));
    }
  }
  return out;
}

Mat2 homography_jacobian(const Homography& h, const Vec2& pt) {
  const Mat3& m = h.matrix();
  const double u = m(0, 0) * pt.x() + m(0, 1) * pt.y() + m(0, 2);
  const double v = m(1, 0) * pt.x() + m(1, 1) * pt.y() + m(1, 2);
  const double w = m(2, 0) * pt.x() + m(2, 1) * pt.y() + m(2, 2);
  if (std::abs(w) < kDegenerateW)
    throw std::domain_error("homography_jacobian: degenerate point (w ~ 0)");
  Mat2 j;
  // d(u/w)/dx = (u_x w - u w_x) / w^2, etc.
  j(0, 0) = (m(0, 0) * w - u * m(2, 0)) / (w * w);
  j(0, 1) = (m(0, 1) * w - u * m(2, 1)) / (w * w);
  j(1, 0) = (m(1, 0) * w - v * m(2, 0)) / (w * w);
  j(1, 1) = (m(1, 1) * w - v * m(2, 1)) / (w * w);
  return j;
}

Homography sample_homography(const HomographySamplerConfig& cfg, int width, int height, Rng& rng) {
  cfg.validate();
  if (width <= 0 || height <= 0) throw std::invalid_argument("sample_homography: bad image size");

  const double cx = (width - 1) / 2.0;
  const double cy = (height - 1) / 2.0;

  const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * kPi / 180.0;
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const double px = rng.uniform(-cfg.max_perspective, cfg.max_perspective);
  const double py = rng.uniform(-cfg.max_perspective, cfg.max_perspective);
  const double tx = rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac) * width;
  const double ty = rng.uniform(-cfg.max_translation_frac, cfg.max_translation_frac) * height;

  Mat3 to_center = Mat3::Identity(), from_center = Mat3::Identity();
  to_center(0, 2) = -cx;
  to_center(1, 2) = -cy;
  from_center(0, 2) = cx;
  from_center(1, 2) = cy;

  Mat3 rot = Mat3::Identity();
  rot(0, 0) = std::cos(angle);
  rot(0, 1) = -std::sin(angle);
  rot(1, 0) = std::sin(angle);
  rot(1, 1) = std::cos(angle);

  Mat3 sc = Mat3::Identity();
  sc(0, 0) = sc(1, 1) = scale;

  // Perspective magnitudes are expressed as corner displacement fractions;
  // divide by the half-extent so the corner shift matches the fraction.
  Mat3 persp = Mat3::Identity();
  persp(2, 0) = px / std::max(cx, 1.0);
  persp(2, 1) = py / std::max(cy, 1.0);

  Mat3 trans = Mat3::Identity();
  trans(0, 2) = tx;
  trans(1, 2) = ty;

  Mat3 m = from_center * trans * persp * sc * rot * to_center;
  return Homography::from_matrix(m);
}

Homography sample_homography(const HomographySamplerConfig& cfg, int width, int height) {
  Rng rng(cfg.rng_seed);
  return sample_homography(cfg, width, height, rng);
}

namespace {
// Hartley normalization: translate centroid to origin, scale mean distance
// to sqrt(2).
Mat3 hartley_transform(const std::vector<Vec2>& pts) {
  Vec2 centroid = Vec2::Zero();
  for (const auto& p : pts) centroid += p;
  centroid /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const auto& p : pts) mean_dist += (p - centroid).norm();
  mean_dist /= static_cast<double>(pts.size());
  const double s = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
  Mat3 t = Mat3::Identity();
  t(0, 0) = t(1, 1) = s;
  t(0, 2) = -s * centroid.x();
  t(1, 2) = -s * centroid.y();
  return t;
}
}  // namespace

Homography estimate_homography_dlt(const std::vector<std::pair<Vec2, Vec2>>& matches) {
  const size_t n = matches.size();
  if (n < 4) throw std::invalid_argument("estimate_homography_dlt: need >= 4 point pairs");

  std::vector<Vec2> src, dst;
  src.reserve(n);
  dst.reserve(n);
  for (const auto& [a, b] : matches) {
    src.push_back(a);
    dst.push_back(b);
  }
  const Mat3 ts = hartley_transform(src);
  const Mat3 td = hartley_transform(dst);

  Eigen::MatrixXd a(2 * n, 9);
  for (size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d p = ts * src[i].homogeneous();
    const Eigen::Vector3d q = td * dst[i].homogeneous();
    const double x = p.x() / p.z(), y = p.y() / p.z();
    const double u = q.x() / q.z(), v = q.y() / q.z();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // Rank must be 8: the second-smallest singular value separates a unique
  // solution from a degenerate configuration (e.g. collinear points).
  if (sv(7) < 1e-9 * sv(0))
    throw std::runtime_error("estimate_homography_dlt: degenerate configuration");

  Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return Homography::from_matrix(td.inverse() * hn * ts);
}

double corner_error(const Homography& h_est, const Homography& h_gt, int width, int height) {
  const std::vector<Vec2> corners = {
      {0.0, 0.0},
      {static_cast<double>(width - 1), 0.0},
      {0.0, static_cast<double>(height - 1)},
      {static_cast<double>(width - 1), static_cast<double>(height - 1)}};
  double sum = 0.0;
  for (const auto& c : corners) {
    sum += (apply_homography(h_est, c) - apply_homography(h_gt, c)).norm();
  }
  return sum / 4.0;
}

}  // namespace raco::geometry
