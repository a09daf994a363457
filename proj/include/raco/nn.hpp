#pragma once

#include <map>
#include <string>
#include <vector>

#include "raco/common.hpp"
#include "raco/image.hpp"

namespace raco::nn {

// C x H x W, row-major per channel.
struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_, double fill = 0.0)
      : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, fill) {}

  double& at(int ci, int y, int x) {
    return v[(static_cast<size_t>(ci) * h + y) * w + x];
  }
  double at(int ci, int y, int x) const {
    return v[(static_cast<size_t>(ci) * h + y) * w + x];
  }
  size_t size() const { return v.size(); }
  bool all_finite() const;
};

struct Param {
  std::string name;
  std::vector<double> w;
  std::vector<double> g;
};

// 2D convolution, same padding (k/2), square kernel.
class Conv2d {
 public:
  Conv2d(std::string name, int in_c, int out_c, int k, int stride = 1);
  void init(Rng& rng);

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gout);  // accumulates weight grads

  Param weight;  // out_c x in_c x k x k
  Param bias;    // out_c
  int in_c, out_c, k, stride;

 private:
  Tensor cache_in_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gout) const;

 private:
  std::vector<uint8_t> mask_;
};

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);
Tensor upsample_bilinear_backward(const Tensor& gout, int in_h, int in_w);

Tensor concat_channels(const std::vector<const Tensor*>& parts);
std::vector<Tensor> split_channels(const Tensor& x, const std::vector<int>& sizes);

class AdamW {
 public:
  explicit AdamW(std::vector<Param*> params, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8, double weight_decay = 1e-4);
  void step(double lr);
  void zero_grad();
  int64_t t() const { return t_; }

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, wd_;
  int64_t t_ = 0;
};

// lr(t) for t in [0, total_steps-1]: cosine from lr0 down to lr_min exactly
// at the final step.
double cosine_lr(double lr0, double lr_min, int64_t t, int64_t total_steps);

// Self-describing checkpoint container: JSON header + named double tensors.
struct Checkpoint {
  std::string header_json;
  std::map<std::string, std::vector<double>> tensors;
};
void save_checkpoint(const std::string& path, const std::string& header_json,
                     const std::vector<const Param*>& params);
Checkpoint load_checkpoint(const std::string& path);
uint64_t hash_params(const std::vector<const Param*>& params);
uint64_t hash_file(const std::string& path);

// ImageNet-normalized RGB input tensor.
Tensor image_to_input(const image::ImageBuffer& img);

// Bilinear interpolation footprint at a (clamped) subpixel position; the same
// weights serve the forward read and the gradient scatter.
struct BilinearTaps {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double w00 = 0, w01 = 0, w10 = 0, w11 = 0;
};
BilinearTaps bilinear_taps(int height, int width, double x, double y);
double sample_channel(const Tensor& t, int c, const BilinearTaps& taps);
void scatter_channel(Tensor& grad, int c, const BilinearTaps& taps, double g);

}  // namespace raco::nn
