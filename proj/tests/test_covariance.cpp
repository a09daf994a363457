#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "raco/covariance.hpp"

using namespace raco;
using namespace raco::covariance;
using geometry::Mat2;
using geometry::Vec2;

TEST_CASE("softplus inversion builds the identity covariance") {
  const double raw = softplus_inv(1.0);  // ln(e - 1)
  CHECK(raw == doctest::Approx(std::log(std::exp(1.0) - 1.0)).epsilon(1e-12));
  const Mat2 sigma = build_covariance(raw, 0.0, raw);
  CHECK((sigma - Mat2::Identity()).norm() == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("zero off-diagonal raw gives a diagonal covariance") {
  const Mat2 sigma = build_covariance(0.3, 0.0, -0.7);
  CHECK(sigma(0, 1) == doctest::Approx(0.0));
  CHECK(sigma(0, 0) == doctest::Approx(std::pow(softplus(0.3), 2)).epsilon(1e-12));
  CHECK(sigma(1, 1) == doctest::Approx(std::pow(softplus(-0.7), 2)).epsilon(1e-12));
}

TEST_CASE("cholesky factor is recovered from the built covariance") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const RawChol raw{rng.normal(), rng.normal(), rng.normal()};
    const Mat2 sigma = build_covariance(raw);
    const Eigen::LLT<Mat2> llt(sigma);
    REQUIRE(llt.info() == Eigen::Success);
    const Mat2 l = llt.matrixL();
    CHECK(l(0, 0) == doctest::Approx(std::max(softplus(raw.l11), 1e-4)).epsilon(1e-9));
    CHECK(l(1, 0) == doctest::Approx(raw.l21).epsilon(1e-9));
    CHECK(l(1, 1) == doctest::Approx(std::max(softplus(raw.l22), 1e-4)).epsilon(1e-9));
  }
}

TEST_CASE("covariance stays positive definite for extreme raws") {
  for (const double a : {-50.0, 0.0, 50.0}) {
    for (const double b : {-50.0, 50.0}) {
      const Mat2 sigma = build_covariance(a, b, -a);
      const Eigen::SelfAdjointEigenSolver<Mat2> es(sigma);
      CHECK(es.eigenvalues().minCoeff() > 0.0);
    }
  }
}

TEST_CASE("error covariance propagation closed forms") {
  const Mat2 i2 = Mat2::Identity();
  CHECK((propagate_error_cov(i2, i2, i2) - 2.0 * i2).norm() == doctest::Approx(0.0));
  CHECK((propagate_error_cov(i2, i2, 2.0 * i2) - 5.0 * i2).norm() == doctest::Approx(0.0));

  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat2 sa = build_covariance(rng.normal(), rng.normal(), rng.normal());
    const Mat2 sb = build_covariance(rng.normal(), rng.normal(), rng.normal());
    Mat2 j;
    j << rng.normal(), rng.normal(), rng.normal(), rng.normal();
    const Mat2 expected = sa + j * sb * j.transpose();
    CHECK((propagate_error_cov(sa, sb, j) - expected).norm() == doctest::Approx(0.0));
    // PD is preserved whenever sigma_a is PD.
    const Eigen::SelfAdjointEigenSolver<Mat2> es(propagate_error_cov(sa, sb, j));
    CHECK(es.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("nll closed forms") {
  CHECK(nll_reprojection(Vec2(0, 0), Mat2::Identity()) == doctest::Approx(0.0));
  CHECK(nll_reprojection(Vec2(1, 0), Mat2::Identity()) == doctest::Approx(0.5));
  Mat2 d = Mat2::Zero();
  d(0, 0) = 4.0;
  d(1, 1) = 1.0;
  CHECK(std::abs(nll_reprojection(Vec2(2, 0), d) - (std::log(2.0) + 0.5)) < 1e-9);

  Mat2 bad;
  bad << 1.0, 2.0, 2.0, 1.0;  // indefinite
  CHECK_THROWS(nll_reprojection(Vec2(1, 1), bad));
}

TEST_CASE("nll is stationary in scale at sigma^2 = |e|^2 / 2") {
  const Vec2 e(1.5, -0.7);
  const double s_opt = e.squaredNorm() / 2.0;
  const double at_opt = nll_reprojection(e, s_opt * Mat2::Identity());
  for (const double f : {0.5, 0.8, 1.25, 2.0}) {
    CHECK(nll_reprojection(e, f * s_opt * Mat2::Identity()) > at_opt);
  }
}

namespace {
detector::KeypointSet make_kps(const std::vector<Vec2>& pts) {
  detector::KeypointSet k;
  for (const auto& p : pts) {
    k.coords.push_back(p);
    k.grid.emplace_back(static_cast<int>(p.x()), static_cast<int>(p.y()));
    k.probs.push_back(0.1);
  }
  return k;
}
}  // namespace

TEST_CASE("bidirectional loss closed form and symmetry") {
  // Identity homography, zero errors, sigma = I/2 on both sides:
  // sigma_err = I in each direction, so every NLL term vanishes.
  const auto kps_a = make_kps({{10.0, 10.0}, {40.0, 20.0}});
  const auto kps_b = make_kps({{10.0, 10.0}, {40.0, 20.0}});
  const std::vector<Mat2> half(2, 0.5 * Mat2::Identity());
  const std::vector<std::pair<int, int>> matches = {{0, 0}, {1, 1}};
  const auto h = geometry::Homography::identity();
  CHECK(covariance_loss(matches, kps_a, kps_b, half, half, h) ==
        doctest::Approx(0.0).epsilon(1e-12));

  // Doubling the errors with fixed covariance quadruples the quadratic term.
  auto kps_b1 = make_kps({{11.0, 10.0}, {41.0, 20.0}});   // error (1,0)
  auto kps_b2 = make_kps({{12.0, 10.0}, {42.0, 20.0}});   // error (2,0)
  const std::vector<Mat2> ident(2, Mat2::Identity());
  const double l1 = covariance_loss(matches, kps_a, kps_b1, ident, ident, h);
  const double l2 = covariance_loss(matches, kps_a, kps_b2, ident, ident, h);
  const double logdet = 0.5 * std::log(4.0);  // per direction, sigma_err = 2I
  CHECK((l2 - logdet) == doctest::Approx(4.0 * (l1 - logdet)).epsilon(1e-9));

  // Swapping the two views leaves the loss unchanged.
  geometry::Mat3 m = geometry::Mat3::Identity();
  m(0, 2) = 3.0;
  m(1, 0) = 0.05;
  const auto hx = geometry::Homography::from_matrix(m);
  Rng rng(3);
  std::vector<Mat2> sa, sb;
  for (int i = 0; i < 2; ++i) {
    sa.push_back(build_covariance(rng.normal(), rng.normal(), rng.normal()));
    sb.push_back(build_covariance(rng.normal(), rng.normal(), rng.normal()));
  }
  const double fwd = covariance_loss(matches, kps_a, kps_b1, sa, sb, hx);
  std::vector<std::pair<int, int>> swapped = {{0, 0}, {1, 1}};
  const double bwd = covariance_loss(swapped, kps_b1, kps_a, sb, sa, hx.inverse());
  CHECK(fwd == doctest::Approx(bwd).epsilon(1e-9));

  CHECK_THROWS_AS(covariance_loss({}, kps_a, kps_b, half, half, h), std::invalid_argument);
}

TEST_CASE("loss gradient w.r.t. raw cholesky channels matches finite differences") {
  Rng rng(4);
  const auto kps_a = make_kps({{20.0, 30.0}, {80.0, 50.0}, {45.0, 90.0}});
  const auto kps_b = make_kps({{21.0, 30.5}, {79.0, 49.0}, {46.0, 91.0}});
  std::vector<RawChol> raws_a, raws_b;
  for (int i = 0; i < 3; ++i) {
    raws_a.push_back({rng.normal(), 0.3 * rng.normal(), rng.normal()});
    raws_b.push_back({rng.normal(), 0.3 * rng.normal(), rng.normal()});
  }
  geometry::Mat3 m = geometry::Mat3::Identity();
  m(0, 2) = 1.0;
  m(0, 1) = 0.02;
  const auto h = geometry::Homography::from_matrix(m);
  const std::vector<std::pair<int, int>> matches = {{0, 0}, {1, 1}, {2, 2}};

  const auto lg = covariance_loss_with_grad(matches, kps_a, kps_b, raws_a, raws_b, h);
  CHECK(lg.loss == doctest::Approx(covariance_loss(matches, kps_a, kps_b, raws_to_covs(raws_a),
                                                   raws_to_covs(raws_b), h))
                       .epsilon(1e-12));

  const double eps = 1e-6;
  auto loss_at = [&](const std::vector<RawChol>& ra, const std::vector<RawChol>& rb) {
    return covariance_loss(matches, kps_a, kps_b, raws_to_covs(ra), raws_to_covs(rb), h);
  };
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 3; ++c) {
      auto bump = [&](std::vector<RawChol> r, int idx, double d) {
        if (c == 0) r[idx].l11 += d;
        if (c == 1) r[idx].l21 += d;
        if (c == 2) r[idx].l22 += d;
        return r;
      };
      double fd = (loss_at(bump(raws_a, i, eps), raws_b) -
                   loss_at(bump(raws_a, i, -eps), raws_b)) /
                  (2 * eps);
      const double g = c == 0 ? lg.grad_raw_a[i].l11
                              : (c == 1 ? lg.grad_raw_a[i].l21 : lg.grad_raw_a[i].l22);
      CHECK(std::abs(g - fd) < 1e-4 * std::max(1.0, std::abs(fd)));

      fd = (loss_at(raws_a, bump(raws_b, i, eps)) - loss_at(raws_a, bump(raws_b, i, -eps))) /
           (2 * eps);
      const double gb = c == 0 ? lg.grad_raw_b[i].l11
                               : (c == 1 ? lg.grad_raw_b[i].l21 : lg.grad_raw_b[i].l22);
      CHECK(std::abs(gb - fd) < 1e-4 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("raw sampling interpolates before activation") {
  nn::Tensor chol(3, 4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      chol.at(0, y, x) = x;        // raw l11 ramps in x
      chol.at(1, y, x) = 0.0;
      chol.at(2, y, x) = 1.0;
    }
  }
  const auto raws = sample_raws(chol, {{1.5, 2.0}});
  CHECK(raws[0].l11 == doctest::Approx(1.5));
  const Mat2 sigma = build_covariance(raws[0]);
  CHECK(sigma(0, 0) == doctest::Approx(std::pow(softplus(1.5), 2)).epsilon(1e-12));
}
