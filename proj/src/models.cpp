#include "raco/models.hpp"

namespace raco::models {

using nn::Conv2d;
using nn::ReLU;

struct DetectorNet::Impl {
  Conv2d c1a, c1b, c2a, c2b, c3a, c3b, c4a, c4b;
  Conv2d score_a, score_b;
  Conv2d cov_a, cov_b;
  ReLU r1a, r1b, r2a, r2b, r3a, r3b, r4a, r4b, r_score, r_cov;

  // forward caches
  Tensor f1, f2, f3, f4;
  int in_h = 0, in_w = 0;
  bool cov_ready = false;

  explicit Impl(int c)
      : c1a("enc1a", 3, c, 3, 1),
        c1b("enc1b", c, c, 3, 1),
        c2a("enc2a", c, 2 * c, 3, 2),
        c2b("enc2b", 2 * c, 2 * c, 3, 1),
        c3a("enc3a", 2 * c, 3 * c, 3, 2),
        c3b("enc3b", 3 * c, 3 * c, 3, 1),
        c4a("enc4a", 3 * c, 4 * c, 3, 2),
        c4b("enc4b", 4 * c, 4 * c, 3, 1),
        score_a("score_a", 10 * c, 2 * c, 1, 1),
        score_b("score_b", 2 * c, 1, 1, 1),
        cov_a("cov_a", 10 * c, 2 * c, 1, 1),
        cov_b("cov_b", 2 * c, 3, 1, 1) {}
};

DetectorNet::DetectorNet(int base_channels)
    : base_(base_channels), impl_(std::make_unique<Impl>(base_channels)) {}

DetectorNet::DetectorNet(DetectorNet&&) noexcept = default;
DetectorNet& DetectorNet::operator=(DetectorNet&&) noexcept = default;
DetectorNet::~DetectorNet() = default;

void DetectorNet::init(Rng& rng) {
  impl_->c1a.init(rng);
  impl_->c1b.init(rng);
  impl_->c2a.init(rng);
  impl_->c2b.init(rng);
  impl_->c3a.init(rng);
  impl_->c3b.init(rng);
  impl_->c4a.init(rng);
  impl_->c4b.init(rng);
  impl_->score_a.init(rng);
  impl_->score_b.init(rng);
  impl_->cov_a.init(rng);
  impl_->cov_b.init(rng);
}

void DetectorNet::forward(const Tensor& input, bool with_cov) {
  if (input.h % 8 != 0 || input.w % 8 != 0)
    throw std::invalid_argument("detector: input size must be divisible by 8");
  auto& im = *impl_;
  im.in_h = input.h;
  im.in_w = input.w;

  im.f1 = im.r1b.forward(im.c1b.forward(im.r1a.forward(im.c1a.forward(input))));
  im.f2 = im.r2b.forward(im.c2b.forward(im.r2a.forward(im.c2a.forward(im.f1))));
  im.f3 = im.r3b.forward(im.c3b.forward(im.r3a.forward(im.c3a.forward(im.f2))));
  im.f4 = im.r4b.forward(im.c4b.forward(im.r4a.forward(im.c4a.forward(im.f3))));

  const Tensor u2 = nn::upsample_bilinear(im.f2, input.h, input.w);
  const Tensor u3 = nn::upsample_bilinear(im.f3, input.h, input.w);
  const Tensor u4 = nn::upsample_bilinear(im.f4, input.h, input.w);
  const Tensor feats = nn::concat_channels({&im.f1, &u2, &u3, &u4});

  score_ = im.score_b.forward(im.r_score.forward(im.score_a.forward(feats)));
  im.cov_ready = with_cov;
  if (with_cov) {
    chol_ = im.cov_b.forward(im.r_cov.forward(im.cov_a.forward(feats)));
  }
}

void DetectorNet::backward_score(const Tensor& gscore) {
  auto& im = *impl_;
  Tensor g = im.score_a.backward(im.r_score.backward(im.score_b.backward(gscore)));

  auto parts = nn::split_channels(
      g, {base_, 2 * base_, 3 * base_, 4 * base_});
  Tensor g1 = std::move(parts[0]);
  Tensor g2 = nn::upsample_bilinear_backward(parts[1], im.f2.h, im.f2.w);
  Tensor g3 = nn::upsample_bilinear_backward(parts[2], im.f3.h, im.f3.w);
  Tensor g4 = nn::upsample_bilinear_backward(parts[3], im.f4.h, im.f4.w);

  Tensor gf3 = im.c4a.backward(im.r4a.backward(im.c4b.backward(im.r4b.backward(g4))));
  for (size_t i = 0; i < g3.v.size(); ++i) g3.v[i] += gf3.v[i];
  Tensor gf2 = im.c3a.backward(im.r3a.backward(im.c3b.backward(im.r3b.backward(g3))));
  for (size_t i = 0; i < g2.v.size(); ++i) g2.v[i] += gf2.v[i];
  Tensor gf1 = im.c2a.backward(im.r2a.backward(im.c2b.backward(im.r2b.backward(g2))));
  for (size_t i = 0; i < g1.v.size(); ++i) g1.v[i] += gf1.v[i];
  im.c1a.backward(im.r1a.backward(im.c1b.backward(im.r1b.backward(g1))));
}

void DetectorNet::backward_chol(const Tensor& gchol) {
  auto& im = *impl_;
  if (!im.cov_ready) throw std::logic_error("backward_chol without cov forward");
  im.cov_a.backward(im.r_cov.backward(im.cov_b.backward(gchol)));
}

std::vector<Param*> DetectorNet::detector_params() {
  auto& im = *impl_;
  std::vector<Param*> out;
  for (Conv2d* c : {&im.c1a, &im.c1b, &im.c2a, &im.c2b, &im.c3a, &im.c3b, &im.c4a,
                    &im.c4b, &im.score_a, &im.score_b}) {
    out.push_back(&c->weight);
    out.push_back(&c->bias);
  }
  return out;
}

std::vector<Param*> DetectorNet::cov_params() {
  auto& im = *impl_;
  std::vector<Param*> out;
  for (Conv2d* c : {&im.cov_a, &im.cov_b}) {
    out.push_back(&c->weight);
    out.push_back(&c->bias);
  }
  return out;
}

std::vector<Param*> DetectorNet::all_params() {
  auto out = detector_params();
  for (auto* p : cov_params()) out.push_back(p);
  return out;
}

std::vector<const Param*> DetectorNet::all_params_const() const {
  auto* self = const_cast<DetectorNet*>(this);
  std::vector<const Param*> out;
  for (auto* p : self->all_params()) out.push_back(p);
  return out;
}

void DetectorNet::load_tensors(const std::map<std::string, std::vector<double>>& tensors) {
  for (auto* p : all_params()) {
    auto it = tensors.find(p->name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint missing tensor " + p->name);
    if (it->second.size() != p->w.size())
      throw std::runtime_error("checkpoint tensor size mismatch for " + p->name);
    p->w = it->second;
  }
}

struct RankerNet::Impl {
  Conv2d c_in, c1a, c1b, c2a, c2b, c_out;
  ReLU r_in, r1a, r1s, r2a, r2s;
  Tensor skip1, skip2;

  explicit Impl(int c)
      : c_in("rank_in", 3, c, 3, 1),
        c1a("rank1a", c, c, 3, 1),
        c1b("rank1b", c, c, 3, 1),
        c2a("rank2a", c, c, 3, 1),
        c2b("rank2b", c, c, 3, 1),
        c_out("rank_out", c, 1, 1, 1) {}
};

RankerNet::RankerNet(int channels) : ch_(channels), impl_(std::make_unique<Impl>(channels)) {}

RankerNet::RankerNet(RankerNet&&) noexcept = default;
RankerNet& RankerNet::operator=(RankerNet&&) noexcept = default;
RankerNet::~RankerNet() = default;

void RankerNet::init(Rng& rng) {
  auto& im = *impl_;
  for (Conv2d* c : {&im.c_in, &im.c1a, &im.c1b, &im.c2a, &im.c2b, &im.c_out}) c->init(rng);
}

Tensor RankerNet::forward(const Tensor& input) {
  auto& im = *impl_;
  Tensor x = im.r_in.forward(im.c_in.forward(input));
  im.skip1 = x;
  Tensor y = im.c1b.forward(im.r1a.forward(im.c1a.forward(x)));
  for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += im.skip1.v[i];
  x = im.r1s.forward(y);
  im.skip2 = x;
  y = im.c2b.forward(im.r2a.forward(im.c2a.forward(x)));
  for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += im.skip2.v[i];
  x = im.r2s.forward(y);
  return im.c_out.forward(x);
}

void RankerNet::backward(const Tensor& gout) {
  auto& im = *impl_;
  Tensor g = im.c_out.backward(gout);
  g = im.r2s.backward(g);
  Tensor gb = im.c2a.backward(im.r2a.backward(im.c2b.backward(g)));
  for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += gb.v[i];  // skip connection
  g = im.r1s.backward(g);
  gb = im.c1a.backward(im.r1a.backward(im.c1b.backward(g)));
  for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += gb.v[i];
  im.c_in.backward(im.r_in.backward(g));
}

std::vector<Param*> RankerNet::params() {
  auto& im = *impl_;
  std::vector<Param*> out;
  for (Conv2d* c : {&im.c_in, &im.c1a, &im.c1b, &im.c2a, &im.c2b, &im.c_out}) {
    out.push_back(&c->weight);
    out.push_back(&c->bias);
  }
  return out;
}

std::vector<const Param*> RankerNet::params_const() const {
  auto* self = const_cast<RankerNet*>(this);
  std::vector<const Param*> out;
  for (auto* p : self->params()) out.push_back(p);
  return out;
}

void RankerNet::load_tensors(const std::map<std::string, std::vector<double>>& tensors) {
  for (auto* p : params()) {
    auto it = tensors.find(p->name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint missing tensor " + p->name);
    if (it->second.size() != p->w.size())
      throw std::runtime_error("checkpoint tensor size mismatch for " + p->name);
    p->w = it->second;
  }
}

}  // namespace raco::models
