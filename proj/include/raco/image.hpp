#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "raco/geometry.hpp"

namespace raco::image {

// H x W x 3 values in [0, 1], row-major, channel-interleaved.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  std::vector<double> px;  // size width*height*3
  std::string source_id;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, double fill = 0.0)
      : width(w), height(h), px(static_cast<size_t>(w) * h * 3, fill) {}

  double& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * width + x) * 3 + c]; }

  void validate() const;
};

struct Mask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int w, int h, uint8_t fill = 0)
      : width(w), height(h), v(static_cast<size_t>(w) * h, fill) {}
  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * width + x]; }
  double true_fraction() const;
};

struct WarpResult {
  ImageBuffer img;
  Mask valid;  // true where all bilinear taps fell inside the source
};

// Warp with inverse mapping: out(p) = in(h^-1 p), bilinear, zero padding.
// `h` maps source pixels to destination pixels.
WarpResult warp_image(const ImageBuffer& src, const geometry::Homography& h,
                      int out_width, int out_height);

ImageBuffer resize(const ImageBuffer& src, int out_width, int out_height);

// Bilinear read of one channel at a subpixel position (clamped at borders).
double sample_bilinear(const ImageBuffer& img, double x, double y, int c);

// PPM native; PNG/JPEG decoded via OpenCV imgcodecs.
ImageBuffer load_image(const std::string& path);
void save_ppm(const ImageBuffer& img, const std::string& path);

}  // namespace raco::image
