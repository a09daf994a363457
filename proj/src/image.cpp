#include "raco/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <opencv2/imgcodecs.hpp>

namespace raco::image {

void ImageBuffer::validate() const {
  if (width < 32 || height < 32)
    throw std::invalid_argument("image: dimensions must be >= 32");
  if (px.size() != static_cast<size_t>(width) * height * 3)
    throw std::invalid_argument("image: pixel buffer size mismatch");
  for (double v : px) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw std::invalid_argument("image: values must be finite and in [0,1]");
  }
}

double Mask::true_fraction() const {
  size_t n = 0;
  for (uint8_t b : v) n += b ? 1 : 0;
  return v.empty() ? 0.0 : static_cast<double>(n) / static_cast<double>(v.size());
}

WarpResult warp_image(const ImageBuffer& src, const geometry::Homography& h,
                      int out_width, int out_height) {
  const geometry::Homography inv = h.inverse();
  WarpResult out;
  out.img = ImageBuffer(out_width, out_height);
  out.img.source_id = src.source_id;
  out.valid = Mask(out_width, out_height);

  const auto& m = inv.matrix();
  for (int y = 0; y < out_height; ++y) {
    for (int x = 0; x < out_width; ++x) {
      const double w = m(2, 0) * x + m(2, 1) * y + m(2, 2);
      if (std::abs(w) < 1e-12) continue;
      const double sx = (m(0, 0) * x + m(0, 1) * y + m(0, 2)) / w;
      const double sy = (m(1, 0) * x + m(1, 1) * y + m(1, 2)) / w;
      if (sx < 0.0 || sy < 0.0 || sx > src.width - 1 || sy > src.height - 1) {
        continue;  // outside the source: stays zero and invalid
      }
      const int x0 = std::min(static_cast<int>(std::floor(sx)), src.width - 1);
      const int y0 = std::min(static_cast<int>(std::floor(sy)), src.height - 1);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const int y1 = std::min(y0 + 1, src.height - 1);
      const double fx = sx - x0, fy = sy - y0;
      for (int c = 0; c < 3; ++c) {
        const double v00 = src.at(y0, x0, c), v01 = src.at(y0, x1, c);
        const double v10 = src.at(y1, x0, c), v11 = src.at(y1, x1, c);
        out.img.at(y, x, c) = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                              fy * ((1 - fx) * v10 + fx * v11);
      }
      out.valid.at(y, x) = 1;
    }
  }
  return out;
}

ImageBuffer resize(const ImageBuffer& src, int out_width, int out_height) {
  ImageBuffer out(out_width, out_height);
  out.source_id = src.source_id;
  const double sx = static_cast<double>(src.width) / out_width;
  const double sy = static_cast<double>(src.height) / out_height;
  for (int y = 0; y < out_height; ++y) {
    for (int x = 0; x < out_width; ++x) {
      // pixel-center mapping
      const double ux = (x + 0.5) * sx - 0.5;
      const double uy = (y + 0.5) * sy - 0.5;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sample_bilinear(src, ux, uy, c);
    }
  }
  return out;
}

double sample_bilinear(const ImageBuffer& img, double x, double y, int c) {
  x = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
  const int x0 = std::min(static_cast<int>(std::floor(x)), img.width - 2 >= 0 ? img.width - 2 : 0);
  const int y0 = std::min(static_cast<int>(std::floor(y)), img.height - 2 >= 0 ? img.height - 2 : 0);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const int y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0, fy = y - y0;
  return (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
         fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
}

namespace {
ImageBuffer load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open image: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("unsupported ppm magic in " + path);
  auto skip_ws_comments = [&f]() {
    while (true) {
      int ch = f.peek();
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(ch)) {
        f.get();
      } else {
        break;
      }
    }
  };
  int w, h, maxval;
  skip_ws_comments();
  f >> w;
  skip_ws_comments();
  f >> h;
  skip_ws_comments();
  f >> maxval;
  f.get();  // single whitespace after header
  if (w <= 0 || h <= 0 || maxval != 255)
    throw std::runtime_error("bad ppm header in " + path);
  std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw std::runtime_error("truncated ppm: " + path);
  ImageBuffer img(w, h);
  for (size_t i = 0; i < raw.size(); ++i) img.px[i] = raw[i] / 255.0;
  img.source_id = path;
  return img;
}
}  // namespace

ImageBuffer load_image(const std::string& path) {
  const auto dot = path.find_last_of('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  if (ext == "ppm") return load_ppm(path);

  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot decode image: " + path);
  ImageBuffer img(bgr.cols, bgr.rows);
  for (int y = 0; y < bgr.rows; ++y) {
    for (int x = 0; x < bgr.cols; ++x) {
      const auto& p = bgr.at<cv::Vec3b>(y, x);
      img.at(y, x, 0) = p[2] / 255.0;
      img.at(y, x, 1) = p[1] / 255.0;
      img.at(y, x, 2) = p[0] / 255.0;
    }
  }
  img.source_id = path;
  return img;
}

void save_ppm(const ImageBuffer& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write image: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.px.size());
  for (size_t i = 0; i < img.px.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.px[i], 0.0, 1.0) * 255.0));
  }
  f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

}  // namespace raco::image
