#include "raco/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace raco::data {

namespace fs = std::filesystem;
using geometry::Homography;
using geometry::Mat3;
using geometry::Vec2;

void PhotometricConfig::validate() const {
  if (brightness_delta < 0 || hue_delta < 0 || gaussian_noise_sigma < 0 ||
      blur_probability < 0 || blur_probability > 1)
    throw std::invalid_argument("photometric config: magnitudes must be >= 0");
  if (!(contrast_min > 0) || contrast_max < contrast_min)
    throw std::invalid_argument("photometric config: contrast range invalid");
  if (jpeg_like_quality_min > jpeg_like_quality_max || jpeg_like_quality_min < 1 ||
      jpeg_like_quality_max > 100)
    throw std::invalid_argument("photometric config: quality range invalid");
}

PhotometricConfig PhotometricConfig::strong(uint64_t seed) {
  PhotometricConfig cfg;
  cfg.brightness_delta = 0.15;
  cfg.contrast_min = 0.6;
  cfg.contrast_max = 1.4;
  cfg.hue_delta = 0.3;
  cfg.gaussian_noise_sigma = 6.0;
  cfg.blur_probability = 0.2;
  cfg.jpeg_like_quality_min = 60.0;
  cfg.jpeg_like_quality_max = 100.0;
  cfg.rng_seed = seed;
  return cfg;
}

ImageBuffer apply_photometric(const ImageBuffer& img, const PhotometricConfig& cfg, Rng& rng) {
  cfg.validate();
  ImageBuffer out = img;

  const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
  const double hue = rng.uniform(-cfg.hue_delta, cfg.hue_delta);
  const double quality = rng.uniform(cfg.jpeg_like_quality_min, cfg.jpeg_like_quality_max);
  const bool blur = rng.uniform() < cfg.blur_probability;

  if (contrast != 1.0) {
    for (double& v : out.px) v = 0.5 + contrast * (v - 0.5);
  }
  if (cfg.brightness_delta != 0.0) {
    for (double& v : out.px) v += cfg.brightness_delta;
  }
  if (hue != 0.0) {
    // rotation about the gray axis (1,1,1)/sqrt(3)
    const double c = std::cos(hue), s = std::sin(hue);
    const double a = c + (1 - c) / 3.0;
    const double b = (1 - c) / 3.0 + s / std::sqrt(3.0);
    const double d = (1 - c) / 3.0 - s / std::sqrt(3.0);
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        const double r = out.at(y, x, 0), g = out.at(y, x, 1), bl = out.at(y, x, 2);
        out.at(y, x, 0) = a * r + d * g + b * bl;
        out.at(y, x, 1) = b * r + a * g + d * bl;
        out.at(y, x, 2) = d * r + b * g + a * bl;
      }
    }
  }
  if (cfg.gaussian_noise_sigma > 0.0) {
    const double sigma = cfg.gaussian_noise_sigma / 255.0;
    for (double& v : out.px) v += rng.normal(0.0, sigma);
  }
  if (blur) {
    ImageBuffer tmp = out;
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        for (int c = 0; c < 3; ++c) {
          double sum = 0.0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = std::clamp(y + dy, 0, out.height - 1);
              const int xx = std::clamp(x + dx, 0, out.width - 1);
              sum += tmp.at(yy, xx, c);
            }
          }
          out.at(y, x, c) = sum / 9.0;
        }
      }
    }
  }
  if (quality < 100.0) {
    // coarse value quantization standing in for compression artifacts
    const double step = (100.0 - quality) / 800.0;
    for (double& v : out.px) v = std::round(v / step) * step;
  }
  for (double& v : out.px) v = std::clamp(v, 0.0, 1.0);
  return out;
}

ImageBuffer apply_photometric(const ImageBuffer& img, const PhotometricConfig& cfg) {
  Rng rng(cfg.rng_seed);
  return apply_photometric(img, cfg, rng);
}

namespace {
// Affine map from crop pixel coordinates to resized-output coordinates,
// matching the pixel-center convention of image::resize.
Homography crop_to_out_scaling(int crop_size, int out_size) {
  const double s = static_cast<double>(crop_size) / out_size;
  Mat3 m = Mat3::Identity();
  m(0, 0) = m(1, 1) = 1.0 / s;
  m(0, 2) = m(1, 2) = 0.5 / s - 0.5;
  return Homography::from_matrix(m);
}
}  // namespace

TrainingPair make_training_pair(const ImageBuffer& img,
                                const geometry::HomographySamplerConfig& geo_cfg,
                                const PhotometricConfig& photo_cfg,
                                const PairSynthesisConfig& syn_cfg, Rng& rng) {
  if (img.width < syn_cfg.crop_size || img.height < syn_cfg.crop_size)
    throw std::invalid_argument("make_training_pair: image smaller than crop size");

  const int cs = syn_cfg.crop_size;
  const int os = syn_cfg.out_size;
  const int ox = (img.width - cs) / 2;
  const int oy = (img.height - cs) / 2;
  ImageBuffer crop(cs, cs);
  crop.source_id = img.source_id;
  for (int y = 0; y < cs; ++y)
    for (int x = 0; x < cs; ++x)
      for (int c = 0; c < 3; ++c) crop.at(y, x, c) = img.at(oy + y, ox + x, c);

  const Homography scaling = crop_to_out_scaling(cs, os);

  for (int attempt = 0; attempt < syn_cfg.max_resample_attempts; ++attempt) {
    const Homography h_a = geometry::sample_homography(geo_cfg, cs, cs, rng);
    const Homography h_b = geometry::sample_homography(geo_cfg, cs, cs, rng);
    const Homography full_a = scaling.compose(h_a);
    const Homography full_b = scaling.compose(h_b);

    auto warped_a = image::warp_image(crop, full_a, os, os);
    auto warped_b = image::warp_image(crop, full_b, os, os);
    const Homography h_ab = full_b.compose(full_a.inverse());
    const Homography h_ba = h_ab.inverse();

    // B pixels covered by warped A: valid under B's own warp and reprojecting
    // into A's valid region.
    Mask mask_b(os, os);
    const auto& mba = h_ba.matrix();
    for (int y = 0; y < os; ++y) {
      for (int x = 0; x < os; ++x) {
        if (!warped_b.valid.at(y, x)) continue;
        const double w = mba(2, 0) * x + mba(2, 1) * y + mba(2, 2);
        if (std::abs(w) < 1e-12) continue;
        const double ax = (mba(0, 0) * x + mba(0, 1) * y + mba(0, 2)) / w;
        const double ay = (mba(1, 0) * x + mba(1, 1) * y + mba(1, 2)) / w;
        const int x0 = static_cast<int>(std::floor(ax));
        const int y0 = static_cast<int>(std::floor(ay));
        if (x0 < 0 || y0 < 0 || x0 + 1 > os - 1 || y0 + 1 > os - 1) continue;
        if (warped_a.valid.at(y0, x0) && warped_a.valid.at(y0, x0 + 1) &&
            warped_a.valid.at(y0 + 1, x0) && warped_a.valid.at(y0 + 1, x0 + 1)) {
          mask_b.at(y, x) = 1;
        }
      }
    }
    if (mask_b.true_fraction() <= syn_cfg.min_overlap) continue;

    // Per-view brightness shift is drawn in [-delta, +delta]; the other
    // photometric draws differ per view through independent rng use.
    TrainingPair pair;
    for (int v = 0; v < 2; ++v) {
      PhotometricConfig view_cfg = photo_cfg;
      view_cfg.brightness_delta = 0.0;
      const double shift = rng.uniform(-photo_cfg.brightness_delta, photo_cfg.brightness_delta);
      ImageBuffer& dst = v == 0 ? pair.view_a : pair.view_b;
      dst = apply_photometric(v == 0 ? warped_a.img : warped_b.img, view_cfg, rng);
      if (shift != 0.0) {
        for (double& px : dst.px) px = std::clamp(px + shift, 0.0, 1.0);
      }
    }
    pair.h_a_to_b = h_ab;
    pair.valid_mask_b = mask_b;
    return pair;
  }
  throw std::runtime_error("make_training_pair: could not reach minimum overlap");
}

std::vector<std::pair<ImageBuffer, Homography>> load_hpatches_sequence(
    const std::string& dir_path, int resize_to) {
  auto find_frame = [&dir_path](int idx) -> std::string {
    for (const char* ext : {".ppm", ".png", ".jpg", ".jpeg", ".pgm"}) {
      fs::path p = fs::path(dir_path) / (std::to_string(idx) + ext);
      if (fs::exists(p)) return p.string();
    }
    return {};
  };

  const std::string ref_path = find_frame(1);
  if (ref_path.empty())
    throw std::runtime_error("hpatches: missing reference image 1.* in " + dir_path);

  auto maybe_resized = [resize_to](ImageBuffer img, Mat3* scale_out) {
    Mat3 s = Mat3::Identity();
    if (resize_to > 0) {
      const int shorter = std::min(img.width, img.height);
      const double f = static_cast<double>(resize_to) / shorter;
      const int nw = static_cast<int>(std::lround(img.width * f));
      const int nh = static_cast<int>(std::lround(img.height * f));
      const double sx = static_cast<double>(img.width) / nw;
      const double sy = static_cast<double>(img.height) / nh;
      img = image::resize(img, nw, nh);
      s(0, 0) = 1.0 / sx;
      s(1, 1) = 1.0 / sy;
      s(0, 2) = 0.5 / sx - 0.5;
      s(1, 2) = 0.5 / sy - 0.5;
    }
    *scale_out = s;
    return img;
  };

  std::vector<std::pair<ImageBuffer, Homography>> out;
  Mat3 s_ref;
  out.emplace_back(maybe_resized(image::load_image(ref_path), &s_ref), Homography::identity());

  for (int k = 2;; ++k) {
    const std::string img_path = find_frame(k);
    if (img_path.empty()) break;
    const fs::path h_path = fs::path(dir_path) / ("H_1_" + std::to_string(k));
    std::ifstream hf(h_path);
    if (!hf) throw std::runtime_error("hpatches: missing homography file " + h_path.string());
    std::string text((std::istreambuf_iterator<char>(hf)), std::istreambuf_iterator<char>());
    Homography h;
    try {
      h = Homography::from_text(text);
    } catch (const std::exception& e) {
      throw std::runtime_error("hpatches: malformed " + h_path.string() + ": " + e.what());
    }
    Mat3 s_k;
    ImageBuffer img = maybe_resized(image::load_image(img_path), &s_k);
    const Homography scaled = Homography::from_matrix(
        s_k * h.matrix() * s_ref.inverse());
    out.emplace_back(std::move(img), scaled);
  }
  if (out.size() < 2)
    throw std::runtime_error("hpatches: no numbered pairs found in " + dir_path);
  return out;
}

std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open manifest: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("source_id") || !j.contains("path"))
      throw std::runtime_error("manifest: bad entry at line " + std::to_string(line_no));
    out.push_back({j["source_id"].get<std::string>(), j["path"].get<std::string>()});
  }
  return out;
}

ImageBuffer synth_toy_image(int size, uint64_t seed) {
  Rng rng(seed);
  ImageBuffer img(size, size);

  // low-frequency background
  const double base = rng.uniform(0.25, 0.55);
  const double gx = rng.uniform(-0.2, 0.2), gy = rng.uniform(-0.2, 0.2);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = base + gx * x / size + gy * y / size;

  auto fill_rect = [&](int x0, int y0, int w, int h, double r, double g, double b) {
    for (int y = std::max(0, y0); y < std::min(size, y0 + h); ++y) {
      for (int x = std::max(0, x0); x < std::min(size, x0 + w); ++x) {
        img.at(y, x, 0) = r;
        img.at(y, x, 1) = g;
        img.at(y, x, 2) = b;
      }
    }
  };

  // axis-aligned rectangles give clean, oriented corners
  const int n_rect = static_cast<int>(rng.uniform_int(10, 16));
  for (int i = 0; i < n_rect; ++i) {
    const int w = static_cast<int>(rng.uniform_int(size / 16, size / 4));
    const int h = static_cast<int>(rng.uniform_int(size / 16, size / 4));
    const int x0 = static_cast<int>(rng.uniform_int(0, size - 2));
    const int y0 = static_cast<int>(rng.uniform_int(0, size - 2));
    const double v = rng.uniform(0.0, 1.0);
    fill_rect(x0, y0, w, h, std::clamp(v + rng.uniform(-0.1, 0.1), 0.0, 1.0),
              std::clamp(v + rng.uniform(-0.1, 0.1), 0.0, 1.0),
              std::clamp(v + rng.uniform(-0.1, 0.1), 0.0, 1.0));
  }

  // one checkerboard patch
  {
    const int cell = static_cast<int>(rng.uniform_int(6, 10));
    const int nx = 4, ny = 4;
    const int x0 = static_cast<int>(rng.uniform_int(0, std::max(1, size - nx * cell - 1)));
    const int y0 = static_cast<int>(rng.uniform_int(0, std::max(1, size - ny * cell - 1)));
    const double lo = rng.uniform(0.05, 0.25), hi = rng.uniform(0.7, 0.95);
    for (int cyi = 0; cyi < ny; ++cyi)
      for (int cxi = 0; cxi < nx; ++cxi) {
        const double v = ((cxi + cyi) % 2 == 0) ? lo : hi;
        fill_rect(x0 + cxi * cell, y0 + cyi * cell, cell, cell, v, v, v);
      }
  }

  // a few disks (blobs without orientation)
  const int n_disk = static_cast<int>(rng.uniform_int(2, 4));
  for (int i = 0; i < n_disk; ++i) {
    const double cx = rng.uniform(0.1, 0.9) * size;
    const double cy = rng.uniform(0.1, 0.9) * size;
    const double rad = rng.uniform(size / 32.0, size / 12.0);
    const double v = rng.uniform(0.0, 1.0);
    for (int y = std::max(0, static_cast<int>(cy - rad) - 1);
         y < std::min(size, static_cast<int>(cy + rad) + 2); ++y)
      for (int x = std::max(0, static_cast<int>(cx - rad) - 1);
           x < std::min(size, static_cast<int>(cx + rad) + 2); ++x)
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= rad * rad)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = v;
  }

  for (double& v : img.px) v = std::clamp(v, 0.0, 1.0);
  return img;
}

std::vector<ImageBuffer> make_toy_corpus(int count, int size, uint64_t seed) {
  std::vector<ImageBuffer> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    ImageBuffer img = synth_toy_image(size, derive_seed(seed, "toy_image_" + std::to_string(i)));
    img.source_id = "toy_" + std::to_string(i);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace raco::data
