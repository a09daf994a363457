#pragma once

#include <memory>

#include "raco/nn.hpp"

namespace raco::models {

using nn::Param;
using nn::Tensor;

// Multi-scale strided encoder with a 1-channel score head and a 3-channel
// Cholesky head on the concatenated upsampled features F1..F4.
class DetectorNet {
 public:
  explicit DetectorNet(int base_channels = 8);
  DetectorNet(DetectorNet&&) noexcept;
  DetectorNet& operator=(DetectorNet&&) noexcept;
  ~DetectorNet();
  void init(Rng& rng);

  // Input spatial size must be divisible by 8.
  void forward(const Tensor& input, bool with_cov = false);
  const Tensor& score() const { return score_; }
  const Tensor& chol() const { return chol_; }

  // Backprop from dL/dscore through head and encoder.
  void backward_score(const Tensor& gscore);
  // Backprop from dL/dchol through the covariance head only (encoder frozen).
  void backward_chol(const Tensor& gchol);

  std::vector<Param*> detector_params();  // encoder + score head
  std::vector<Param*> cov_params();
  std::vector<Param*> all_params();
  std::vector<const Param*> all_params_const() const;

  int base_channels() const { return base_; }
  int feat_channels() const { return 10 * base_; }

  void load_tensors(const std::map<std::string, std::vector<double>>& tensors);

 private:
  int base_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
  Tensor score_;
  Tensor chol_;
};

// Residual conv stack, normalized RGB in, 1-channel ranker map out.
class RankerNet {
 public:
  explicit RankerNet(int channels = 16);
  RankerNet(RankerNet&&) noexcept;
  RankerNet& operator=(RankerNet&&) noexcept;
  ~RankerNet();
  void init(Rng& rng);

  Tensor forward(const Tensor& input);
  void backward(const Tensor& gout);

  std::vector<Param*> params();
  std::vector<const Param*> params_const() const;
  int channels() const { return ch_; }
  void load_tensors(const std::map<std::string, std::vector<double>>& tensors);

 private:
  int ch_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace raco::models
