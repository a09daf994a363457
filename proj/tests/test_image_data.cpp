#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "raco/data.hpp"
#include "raco/image.hpp"

using namespace raco;
namespace fs = std::filesystem;

namespace {
image::ImageBuffer gradient_image(int w, int h) {
  image::ImageBuffer img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = static_cast<double>(x) / (w - 1);
      img.at(y, x, 1) = static_cast<double>(y) / (h - 1);
      img.at(y, x, 2) = 0.25;
    }
  }
  return img;
}
}  // namespace

TEST_CASE("identity warp reproduces the image with a full valid mask") {
  const auto img = gradient_image(48, 40);
  const auto res = image::warp_image(img, geometry::Homography::identity(), 48, 40);
  for (size_t i = 0; i < img.px.size(); ++i) {
    CHECK(res.img.px[i] == doctest::Approx(img.px[i]).epsilon(1e-12));
  }
  CHECK(res.valid.true_fraction() == doctest::Approx(1.0));
}

TEST_CASE("translation warp moves content and invalidates uncovered pixels") {
  const auto img = gradient_image(40, 40);
  geometry::Mat3 t = geometry::Mat3::Identity();
  t(0, 2) = 10.0;  // source pixel x maps to destination x+10
  const auto res = image::warp_image(img, geometry::Homography::from_matrix(t), 40, 40);
  CHECK(res.img.at(20, 30, 0) == doctest::Approx(img.at(20, 20, 0)));
  CHECK(res.valid.at(20, 5) == 0);  // no source content left of the shift
  CHECK(res.valid.at(20, 30) == 1);
}

TEST_CASE("resize with pixel-center mapping and bilinear sampling") {
  const auto img = gradient_image(40, 40);
  const auto half = image::resize(img, 20, 20);
  CHECK(half.width == 20);
  // The red channel is linear in x, so resampling preserves the ramp ends.
  CHECK(half.at(10, 0, 0) < half.at(10, 19, 0));
  CHECK(image::sample_bilinear(img, 39.0, 0.0, 0) == doctest::Approx(1.0));
  CHECK(image::sample_bilinear(img, 19.5, 0.0, 0) ==
        doctest::Approx(0.5 * (img.at(0, 19, 0) + img.at(0, 20, 0))));
}

TEST_CASE("ppm round trip") {
  const auto img = gradient_image(33, 17);
  const auto path = fs::temp_directory_path() / "raco_test_roundtrip.ppm";
  image::save_ppm(img, path.string());
  const auto back = image::load_image(path.string());
  REQUIRE(back.width == 33);
  REQUIRE(back.height == 17);
  for (size_t i = 0; i < img.px.size(); ++i) {
    CHECK(std::abs(back.px[i] - img.px[i]) <= 0.5 / 255.0 + 1e-12);
  }
  fs::remove(path);
}

TEST_CASE("photometric brightness shifts mid-gray mean by the configured delta") {
  image::ImageBuffer img(64, 64, 0.5);
  data::PhotometricConfig cfg;
  cfg.brightness_delta = 0.1;
  cfg.jpeg_like_quality_min = cfg.jpeg_like_quality_max = 100.0;
  const auto out = data::apply_photometric(img, cfg);
  double mean = 0.0;
  for (double v : out.px) mean += v;
  mean /= out.px.size();
  CHECK(std::abs(mean - 0.6) < 1e-6);
}

TEST_CASE("neutral photometric config is the identity") {
  const auto img = gradient_image(32, 32);
  const auto out = data::apply_photometric(img, data::PhotometricConfig{});
  for (size_t i = 0; i < img.px.size(); ++i) {
    CHECK(out.px[i] == doctest::Approx(img.px[i]).epsilon(1e-12));
  }
}

TEST_CASE("photometric output stays in range under the strong preset") {
  const auto img = gradient_image(64, 64);
  const auto cfg = data::PhotometricConfig::strong(123);
  Rng rng(9);
  const auto out = data::apply_photometric(img, cfg, rng);
  for (double v : out.px) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("photometric config validation") {
  data::PhotometricConfig cfg;
  cfg.contrast_min = 1.5;
  cfg.contrast_max = 0.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.jpeg_like_quality_min = -5.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("training pairs satisfy their geometric contract") {
  const auto img = data::synth_toy_image(256, 5);
  geometry::HomographySamplerConfig geo;
  geo.max_rotation_deg = 30.0;
  geo.max_translation_frac = 0.1;
  geo.scale_min = 0.9;
  geo.scale_max = 1.1;
  data::PairSynthesisConfig syn;
  syn.crop_size = 192;
  syn.out_size = 160;

  Rng rng(77);
  const auto pair = data::make_training_pair(img, geo, data::PhotometricConfig{}, syn, rng);
  CHECK(pair.view_a.width == 160);
  CHECK(pair.view_b.height == 160);
  CHECK(pair.valid_mask_b.true_fraction() > 0.25);

  // h_a_to_b maps view-A content onto view B: luminance must agree on the
  // valid region (photometrics disabled here).
  int checked = 0;
  double err = 0.0;
  for (int y = 10; y < 150; y += 14) {
    for (int x = 10; x < 150; x += 14) {
      const auto q = geometry::apply_homography(pair.h_a_to_b, {double(x), double(y)});
      if (q.x() < 1 || q.x() > 158 || q.y() < 1 || q.y() > 158) continue;
      const int qx = static_cast<int>(std::lround(q.x()));
      const int qy = static_cast<int>(std::lround(q.y()));
      if (!pair.valid_mask_b.at(qy, qx)) continue;
      err += std::abs(pair.view_a.at(y, x, 0) -
                      image::sample_bilinear(pair.view_b, q.x(), q.y(), 0));
      ++checked;
    }
  }
  REQUIRE(checked > 10);
  CHECK(err / checked < 0.08);  // bilinear resampling blur only
}

TEST_CASE("training pair synthesis is deterministic") {
  const auto img = data::synth_toy_image(256, 5);
  geometry::HomographySamplerConfig geo;
  geo.max_rotation_deg = 45.0;
  data::PairSynthesisConfig syn;
  Rng r1(5), r2(5);
  const auto a = data::make_training_pair(img, geo, data::PhotometricConfig{}, syn, r1);
  const auto b = data::make_training_pair(img, geo, data::PhotometricConfig{}, syn, r2);
  CHECK(a.view_b.px == b.view_b.px);
  CHECK((a.h_a_to_b.matrix() - b.h_a_to_b.matrix()).norm() == doctest::Approx(0.0));
}

TEST_CASE("hpatches-style sequence loading with homography conjugation") {
  const auto dir = fs::temp_directory_path() / "raco_hp_seq";
  fs::create_directories(dir);
  const auto ref = gradient_image(60, 48);
  image::save_ppm(ref, (dir / "1.ppm").string());
  geometry::Mat3 t = geometry::Mat3::Identity();
  t(0, 2) = 4.0;
  const auto h12 = geometry::Homography::from_matrix(t);
  image::save_ppm(image::warp_image(ref, h12, 60, 48).img, (dir / "2.ppm").string());
  std::ofstream((dir / "H_1_2")) << h12.to_text();

  const auto seq = data::load_hpatches_sequence(dir.string());
  REQUIRE(seq.size() == 2);
  CHECK((seq[0].second.matrix() - geometry::Mat3::Identity()).norm() ==
        doctest::Approx(0.0).epsilon(1e-12));
  CHECK((seq[1].second.matrix() - h12.matrix()).norm() == doctest::Approx(0.0).epsilon(1e-9));

  // Resized loading conjugates the homography: corresponding pixel centers
  // still map onto each other in the resized frames.
  const auto seq_small = data::load_hpatches_sequence(dir.string(), 24);
  CHECK(seq_small[0].first.height == 24);
  const auto p = geometry::apply_homography(seq_small[1].second, {10.0, 10.0});
  const double s = 24.0 / 48.0;
  const auto p_big = geometry::apply_homography(h12, {(10.0 + 0.5) / s - 0.5, (10.0 + 0.5) / s - 0.5});
  CHECK(p.x() == doctest::Approx((p_big.x() + 0.5) * s - 0.5).epsilon(1e-9));
  fs::remove_all(dir);
}

TEST_CASE("manifest loading") {
  const auto path = fs::temp_directory_path() / "raco_manifest.jsonl";
  std::ofstream(path) << R"({"source_id":"a","path":"x.ppm"})" << "\n"
                      << R"({"source_id":"b","path":"y.ppm"})" << "\n";
  const auto entries = data::load_manifest(path.string());
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].source_id == "a");
  CHECK(entries[1].path == "y.ppm");
  fs::remove(path);
}

TEST_CASE("toy corpus is deterministic and corner rich") {
  const auto c1 = data::make_toy_corpus(3, 128, 9);
  const auto c2 = data::make_toy_corpus(3, 128, 9);
  REQUIRE(c1.size() == 3);
  CHECK(c1[1].px == c2[1].px);
  CHECK(c1[0].px != c1[1].px);

  // Images are not flat: they carry measurable gradient structure.
  double grad = 0.0;
  for (int y = 1; y < 127; ++y) {
    for (int x = 1; x < 127; ++x) {
      grad += std::abs(c1[0].at(y, x, 0) - c1[0].at(y, x - 1, 0));
    }
  }
  CHECK(grad / (126 * 126) > 0.005);
}
