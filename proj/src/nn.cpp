#include "raco/nn.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <fstream>

namespace raco::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

bool Tensor::all_finite() const {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

Conv2d::Conv2d(std::string name, int in_c_, int out_c_, int k_, int stride_)
    : in_c(in_c_), out_c(out_c_), k(k_), stride(stride_) {
  weight.name = name + ".weight";
  bias.name = name + ".bias";
  weight.w.assign(static_cast<size_t>(out_c) * in_c * k * k, 0.0);
  weight.g.assign(weight.w.size(), 0.0);
  bias.w.assign(out_c, 0.0);
  bias.g.assign(out_c, 0.0);
}

void Conv2d::init(Rng& rng) {
  const double scale = std::sqrt(2.0 / (in_c * k * k));
  for (double& x : weight.w) x = rng.normal(0.0, scale);
  for (double& x : bias.w) x = 0.0;
}

namespace {
int conv_out_dim(int in, int k, int stride) {
  const int pad = k / 2;
  return (in + 2 * pad - k) / stride + 1;
}

// cols: (in_c*k*k) x (oh*ow), zero padding.
Eigen::MatrixXd im2col(const Tensor& x, int k, int stride, int oh, int ow) {
  const int pad = k / 2;
  Eigen::MatrixXd cols(static_cast<Eigen::Index>(x.c) * k * k,
                       static_cast<Eigen::Index>(oh) * ow);
  cols.setZero();
  for (int ci = 0; ci < x.c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(ci) * k + ky) * k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= x.h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= x.w) continue;
            cols(row, static_cast<Eigen::Index>(oy) * ow + ox) = x.at(ci, iy, ix);
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(const Eigen::MatrixXd& cols, int k, int stride, Tensor& x) {
  const int pad = k / 2;
  const int oh = conv_out_dim(x.h, k, stride);
  const int ow = conv_out_dim(x.w, k, stride);
  for (int ci = 0; ci < x.c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Eigen::Index row = (static_cast<Eigen::Index>(ci) * k + ky) * k + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= x.h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= x.w) continue;
            x.at(ci, iy, ix) += cols(row, static_cast<Eigen::Index>(oy) * ow + ox);
          }
        }
      }
    }
  }
}
}  // namespace

Tensor Conv2d::forward(const Tensor& x) {
  cache_in_ = x;
  const int oh = conv_out_dim(x.h, k, stride);
  const int ow = conv_out_dim(x.w, k, stride);
  const Eigen::MatrixXd cols = im2col(x, k, stride, oh, ow);
  Eigen::Map<const RowMat> wmat(weight.w.data(), out_c, static_cast<Eigen::Index>(in_c) * k * k);

  Tensor out(out_c, oh, ow);
  Eigen::Map<RowMat> omat(out.v.data(), out_c, static_cast<Eigen::Index>(oh) * ow);
  omat.noalias() = wmat * cols;
  for (int co = 0; co < out_c; ++co) omat.row(co).array() += bias.w[co];
  return out;
}

Tensor Conv2d::backward(const Tensor& gout) {
  const int oh = gout.h, ow = gout.w;
  const Eigen::Index krows = static_cast<Eigen::Index>(in_c) * k * k;
  const Eigen::MatrixXd cols = im2col(cache_in_, k, stride, oh, ow);
  Eigen::Map<const RowMat> gmat(gout.v.data(), out_c, static_cast<Eigen::Index>(oh) * ow);

  Eigen::Map<RowMat> gw(weight.g.data(), out_c, krows);
  gw.noalias() += gmat * cols.transpose();
  for (int co = 0; co < out_c; ++co) bias.g[co] += gmat.row(co).sum();

  Eigen::Map<const RowMat> wmat(weight.w.data(), out_c, krows);
  Eigen::MatrixXd gcols = wmat.transpose() * gmat;
  Tensor gin(cache_in_.c, cache_in_.h, cache_in_.w);
  col2im_add(gcols, k, stride, gin);
  return gin;
}

Tensor ReLU::forward(const Tensor& x) {
  Tensor out = x;
  mask_.assign(x.size(), 0);
  for (size_t i = 0; i < out.v.size(); ++i) {
    if (out.v[i] > 0.0) {
      mask_[i] = 1;
    } else {
      out.v[i] = 0.0;
    }
  }
  return out;
}

Tensor ReLU::backward(const Tensor& gout) const {
  Tensor gin = gout;
  for (size_t i = 0; i < gin.v.size(); ++i)
    if (!mask_[i]) gin.v[i] = 0.0;
  return gin;
}

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
  Tensor out(x.c, out_h, out_w);
  const double sy = static_cast<double>(x.h) / out_h;
  const double sx = static_cast<double>(x.w) / out_w;
  for (int ci = 0; ci < x.c; ++ci) {
    for (int oy = 0; oy < out_h; ++oy) {
      const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(x.h - 1));
      const int y0 = std::min(static_cast<int>(fy), x.h - 2 >= 0 ? x.h - 2 : 0);
      const double wy = fy - y0;
      for (int ox = 0; ox < out_w; ++ox) {
        const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(x.w - 1));
        const int x0 = std::min(static_cast<int>(fx), x.w - 2 >= 0 ? x.w - 2 : 0);
        const double wx = fx - x0;
        out.at(ci, oy, ox) =
            (1 - wy) * ((1 - wx) * x.at(ci, y0, x0) + wx * x.at(ci, y0, x0 + 1)) +
            wy * ((1 - wx) * x.at(ci, y0 + 1, x0) + wx * x.at(ci, y0 + 1, x0 + 1));
      }
    }
  }
  return out;
}

Tensor upsample_bilinear_backward(const Tensor& gout, int in_h, int in_w) {
  Tensor gin(gout.c, in_h, in_w);
  const double sy = static_cast<double>(in_h) / gout.h;
  const double sx = static_cast<double>(in_w) / gout.w;
  for (int ci = 0; ci < gout.c; ++ci) {
    for (int oy = 0; oy < gout.h; ++oy) {
      const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
      const int y0 = std::min(static_cast<int>(fy), in_h - 2 >= 0 ? in_h - 2 : 0);
      const double wy = fy - y0;
      for (int ox = 0; ox < gout.w; ++ox) {
        const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
        const int x0 = std::min(static_cast<int>(fx), in_w - 2 >= 0 ? in_w - 2 : 0);
        const double wx = fx - x0;
        const double g = gout.at(ci, oy, ox);
        gin.at(ci, y0, x0) += (1 - wy) * (1 - wx) * g;
        gin.at(ci, y0, x0 + 1) += (1 - wy) * wx * g;
        gin.at(ci, y0 + 1, x0) += wy * (1 - wx) * g;
        gin.at(ci, y0 + 1, x0 + 1) += wy * wx * g;
      }
    }
  }
  return gin;
}

Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  int total_c = 0;
  for (const auto* p : parts) total_c += p->c;
  Tensor out(total_c, parts[0]->h, parts[0]->w);
  size_t off = 0;
  for (const auto* p : parts) {
    std::memcpy(out.v.data() + off, p->v.data(), p->v.size() * sizeof(double));
    off += p->v.size();
  }
  return out;
}

std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int>& sizes) {
  std::vector<Tensor> out;
  size_t off = 0;
  for (int c : sizes) {
    Tensor t(c, x.h, x.w);
    std::memcpy(t.v.data(), x.v.data() + off, t.v.size() * sizeof(double));
    off += t.v.size();
    out.push_back(std::move(t));
  }
  return out;
}

AdamW::AdamW(std::vector<Param*> params, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
  for (auto* p : params_) {
    m_.emplace_back(p->w.size(), 0.0);
    v_.emplace_back(p->w.size(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    for (size_t j = 0; j < p.w.size(); ++j) {
      m_[i][j] = beta1_ * m_[i][j] + (1 - beta1_) * p.g[j];
      v_[i][j] = beta2_ * v_[i][j] + (1 - beta2_) * p.g[j] * p.g[j];
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      p.w[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.w[j]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto* p : params_) std::fill(p->g.begin(), p->g.end(), 0.0);
}

double cosine_lr(double lr0, double lr_min, int64_t t, int64_t total_steps) {
  if (total_steps <= 1) return lr0;
  const double frac = static_cast<double>(t) / static_cast<double>(total_steps - 1);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

namespace {
constexpr char kMagic[8] = {'R', 'A', 'C', 'O', 'C', 'K', 'P', 'T'};
}

void save_checkpoint(const std::string& path, const std::string& header_json,
                     const std::vector<const Param*>& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  f.write(kMagic, 8);
  const uint64_t hlen = header_json.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(header_json.data(), static_cast<std::streamsize>(hlen));
  const uint64_t n = params.size();
  f.write(reinterpret_cast<const char*>(&n), 8);
  for (const auto* p : params) {
    const uint64_t nlen = p->name.size();
    f.write(reinterpret_cast<const char*>(&nlen), 8);
    f.write(p->name.data(), static_cast<std::streamsize>(nlen));
    const uint64_t count = p->w.size();
    f.write(reinterpret_cast<const char*>(&count), 8);
    f.write(reinterpret_cast<const char*>(p->w.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  Checkpoint ck;
  ck.header_json.resize(hlen);
  f.read(ck.header_json.data(), static_cast<std::streamsize>(hlen));
  uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 8);
  for (uint64_t i = 0; i < n; ++i) {
    uint64_t nlen = 0;
    f.read(reinterpret_cast<char*>(&nlen), 8);
    std::string name(nlen, '\0');
    f.read(name.data(), static_cast<std::streamsize>(nlen));
    uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&count), 8);
    std::vector<double> w(count);
    f.read(reinterpret_cast<char*>(w.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    if (!f) throw std::runtime_error("truncated checkpoint: " + path);
    ck.tensors.emplace(std::move(name), std::move(w));
  }
  return ck;
}

uint64_t hash_params(const std::vector<const Param*>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto* p : params) {
    h = fnv1a(p->name, h);
    h = fnv1a(p->w.data(), p->w.size() * sizeof(double), h);
  }
  return h;
}

uint64_t hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open file: " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return fnv1a(buf.data(), buf.size());
}

Tensor image_to_input(const image::ImageBuffer& img) {
  static const double mean[3] = {0.485, 0.456, 0.406};
  static const double stdev[3] = {0.229, 0.224, 0.225};
  Tensor t(3, img.height, img.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        t.at(c, y, x) = (img.at(y, x, c) - mean[c]) / stdev[c];
  return t;
}

BilinearTaps bilinear_taps(int height, int width, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(width - 1));
  y = std::clamp(y, 0.0, static_cast<double>(height - 1));
  BilinearTaps t;
  t.x0 = std::min(static_cast<int>(x), width >= 2 ? width - 2 : 0);
  t.y0 = std::min(static_cast<int>(y), height >= 2 ? height - 2 : 0);
  t.x1 = std::min(t.x0 + 1, width - 1);
  t.y1 = std::min(t.y0 + 1, height - 1);
  const double fx = x - t.x0, fy = y - t.y0;
  t.w00 = (1 - fy) * (1 - fx);
  t.w01 = (1 - fy) * fx;
  t.w10 = fy * (1 - fx);
  t.w11 = fy * fx;
  return t;
}

double sample_channel(const Tensor& t, int c, const BilinearTaps& b) {
  return b.w00 * t.at(c, b.y0, b.x0) + b.w01 * t.at(c, b.y0, b.x1) +
         b.w10 * t.at(c, b.y1, b.x0) + b.w11 * t.at(c, b.y1, b.x1);
}

void scatter_channel(Tensor& grad, int c, const BilinearTaps& b, double g) {
  grad.at(c, b.y0, b.x0) += b.w00 * g;
  grad.at(c, b.y0, b.x1) += b.w01 * g;
  grad.at(c, b.y1, b.x0) += b.w10 * g;
  grad.at(c, b.y1, b.x1) += b.w11 * g;
}

}  // namespace raco::nn
