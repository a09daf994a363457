#include "raco/covariance.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace raco::covariance {

namespace {
constexpr double kDiagFloor = 1e-4;  // px, prevents collapse on exact corners

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct CholFactor {
  double l11, l21, l22;        // after activation
  double d11, d22;             // d l11/d raw_l11, d l22/d raw_l22
};

CholFactor activate(const RawChol& r) {
  CholFactor f;
  f.l11 = softplus(r.l11);
  f.l22 = softplus(r.l22);
  f.d11 = f.l11 > kDiagFloor ? sigmoid(r.l11) : 0.0;
  f.d22 = f.l22 > kDiagFloor ? sigmoid(r.l22) : 0.0;
  f.l11 = std::max(f.l11, kDiagFloor);
  f.l22 = std::max(f.l22, kDiagFloor);
  f.l21 = r.l21;
  return f;
}

Mat2 cov_of(const CholFactor& f) {
  Mat2 l;
  l << f.l11, 0.0, f.l21, f.l22;
  return l * l.transpose();
}

// dNLL/dSigma for NLL = 1/2 log det Sigma + 1/2 e^T Sigma^-1 e.
Mat2 nll_sigma_grad(const geometry::Vec2& e, const Mat2& sigma) {
  const Mat2 inv = sigma.inverse();
  const geometry::Vec2 u = inv * e;
  return 0.5 * (inv - u * u.transpose());
}

RawChol chain_to_raw(const Mat2& gsigma, const CholFactor& f) {
  Mat2 l;
  l << f.l11, 0.0, f.l21, f.l22;
  const Mat2 gl = 2.0 * gsigma * l;  // gsigma symmetric
  RawChol g;
  g.l11 = gl(0, 0) * f.d11;
  g.l21 = gl(1, 0);
  g.l22 = gl(1, 1) * f.d22;
  return g;
}
}  // namespace

double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double softplus_inv(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("softplus_inv: argument must be > 0");
  if (y > 30.0) return y;
  return y + std::log1p(-std::exp(-y));
}

Mat2 build_covariance(const RawChol& raw) { return cov_of(activate(raw)); }

Mat2 build_covariance(double raw_l11, double raw_l21, double raw_l22) {
  return build_covariance(RawChol{raw_l11, raw_l21, raw_l22});
}

Mat2 propagate_error_cov(const Mat2& sigma_a, const Mat2& sigma_b, const Mat2& j_ba) {
  return sigma_a + j_ba * sigma_b * j_ba.transpose();
}

double nll_reprojection(const Vec2& e, const Mat2& sigma_err) {
  const Eigen::LLT<Mat2> llt(sigma_err);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("nll_reprojection: covariance not positive definite");
  }
  const Mat2 l = llt.matrixL();
  const double log_det = 2.0 * (std::log(l(0, 0)) + std::log(l(1, 1)));
  const Vec2 z = llt.matrixL().solve(e);
  return 0.5 * log_det + 0.5 * z.squaredNorm();
}

namespace {
// One direction of the bidirectional term; "src" reprojects into "dst".
double directional_nll(const Vec2& x_dst, const Vec2& x_src, const Mat2& sigma_dst,
                       const Mat2& sigma_src, const geometry::Homography& h_src_to_dst,
                       Mat2* gsigma_dst = nullptr, Mat2* gsigma_src = nullptr) {
  const Vec2 e = x_dst - geometry::apply_homography(h_src_to_dst, x_src);
  const Mat2 j = geometry::homography_jacobian(h_src_to_dst, x_src);
  const Mat2 sigma_err = propagate_error_cov(sigma_dst, sigma_src, j);
  const double nll = nll_reprojection(e, sigma_err);
  if (gsigma_dst) {
    const Mat2 g = nll_sigma_grad(e, sigma_err);
    *gsigma_dst = g;
    *gsigma_src = j.transpose() * g * j;
  }
  return nll;
}
}  // namespace

double covariance_loss(const std::vector<std::pair<int, int>>& matches,
                       const detector::KeypointSet& kps_a, const detector::KeypointSet& kps_b,
                       const std::vector<Mat2>& sigmas_a, const std::vector<Mat2>& sigmas_b,
                       const geometry::Homography& h_ab) {
  if (matches.empty()) throw std::invalid_argument("covariance_loss: empty match set");
  const geometry::Homography h_ba = h_ab.inverse();
  double sum = 0.0;
  for (const auto& [ia, ib] : matches) {
    if (ia < 0 || ia >= static_cast<int>(kps_a.size()) || ib < 0 ||
        ib >= static_cast<int>(kps_b.size())) {
      throw std::out_of_range("covariance_loss: match index out of range");
    }
    sum += directional_nll(kps_a.coords[ia], kps_b.coords[ib], sigmas_a[ia], sigmas_b[ib], h_ba);
    sum += directional_nll(kps_b.coords[ib], kps_a.coords[ia], sigmas_b[ib], sigmas_a[ia], h_ab);
  }
  return sum / (2.0 * matches.size());
}

CovLossGrad covariance_loss_with_grad(const std::vector<std::pair<int, int>>& matches,
                                      const detector::KeypointSet& kps_a,
                                      const detector::KeypointSet& kps_b,
                                      const std::vector<RawChol>& raws_a,
                                      const std::vector<RawChol>& raws_b,
                                      const geometry::Homography& h_ab) {
  if (matches.empty()) throw std::invalid_argument("covariance_loss_with_grad: empty match set");
  const geometry::Homography h_ba = h_ab.inverse();

  std::vector<CholFactor> fa, fb;
  fa.reserve(raws_a.size());
  fb.reserve(raws_b.size());
  for (const auto& r : raws_a) fa.push_back(activate(r));
  for (const auto& r : raws_b) fb.push_back(activate(r));

  CovLossGrad out;
  out.grad_raw_a.assign(raws_a.size(), {});
  out.grad_raw_b.assign(raws_b.size(), {});
  std::vector<Mat2> gsig_a(raws_a.size(), Mat2::Zero());
  std::vector<Mat2> gsig_b(raws_b.size(), Mat2::Zero());

  const double scale = 1.0 / (2.0 * matches.size());
  double sum = 0.0;
  for (const auto& [ia, ib] : matches) {
    if (ia < 0 || ia >= static_cast<int>(kps_a.size()) || ib < 0 ||
        ib >= static_cast<int>(kps_b.size())) {
      throw std::out_of_range("covariance_loss_with_grad: match index out of range");
    }
    const Mat2 sa = cov_of(fa[ia]), sb = cov_of(fb[ib]);
    Mat2 gd, gs;
    sum += directional_nll(kps_a.coords[ia], kps_b.coords[ib], sa, sb, h_ba, &gd, &gs);
    gsig_a[ia] += scale * gd;
    gsig_b[ib] += scale * gs;
    sum += directional_nll(kps_b.coords[ib], kps_a.coords[ia], sb, sa, h_ab, &gd, &gs);
    gsig_b[ib] += scale * gd;
    gsig_a[ia] += scale * gs;
  }
  out.loss = sum * scale;

  for (size_t i = 0; i < raws_a.size(); ++i) out.grad_raw_a[i] = chain_to_raw(gsig_a[i], fa[i]);
  for (size_t i = 0; i < raws_b.size(); ++i) out.grad_raw_b[i] = chain_to_raw(gsig_b[i], fb[i]);
  return out;
}

std::vector<RawChol> sample_raws(const nn::Tensor& chol_map, const std::vector<Vec2>& coords) {
  if (chol_map.c != 3) throw std::invalid_argument("sample_raws: expected 3-channel map");
  std::vector<RawChol> out;
  out.reserve(coords.size());
  for (const auto& p : coords) {
    const nn::BilinearTaps taps = nn::bilinear_taps(chol_map.h, chol_map.w, p.x(), p.y());
    out.push_back({nn::sample_channel(chol_map, 0, taps), nn::sample_channel(chol_map, 1, taps),
                   nn::sample_channel(chol_map, 2, taps)});
  }
  return out;
}

std::vector<Mat2> raws_to_covs(const std::vector<RawChol>& raws) {
  std::vector<Mat2> covs;
  covs.reserve(raws.size());
  for (const auto& r : raws) covs.push_back(build_covariance(r));
  return covs;
}

namespace {
uint64_t config_hash(const CovTrainConfig& cfg) {
  nlohmann::json j{{"steps", cfg.steps},
                   {"keypoints", cfg.keypoints_per_image},
                   {"nms_radius", cfg.nms_radius},
                   {"lr0", cfg.lr0},
                   {"lr_min", cfg.lr_min},
                   {"match_radius", cfg.match_radius},
                   {"seed", cfg.seed}};
  return fnv1a(j.dump());
}

detector::KeypointSet detect_with_cov(models::DetectorNet& net, const nn::Tensor& in, int k,
                                      int nms_radius, nn::Tensor* chol_out) {
  net.forward(in, true);
  const nn::Tensor prob = detector::global_softmax(net.score());
  detector::KeypointSet kps = detector::select_keypoints(prob, nms_radius, k);
  detector::subpixel_refine_all(prob, kps);
  *chol_out = net.chol();
  return kps;
}
}  // namespace

CovTrainResult train_covariance(const std::vector<image::ImageBuffer>& corpus,
                                const CovTrainConfig& cfg, models::DetectorNet& net,
                                const std::string& out_dir) {
  if (corpus.empty()) throw std::invalid_argument("train_covariance: empty dataset");
  std::filesystem::create_directories(out_dir);
  const std::string ckpt_path = (std::filesystem::path(out_dir) / "covariance.ckpt").string();
  const std::string log_path =
      (std::filesystem::path(out_dir) / "covariance_train_log.jsonl").string();
  std::ofstream log(log_path);

  std::vector<const nn::Param*> frozen;
  for (auto* p : net.detector_params()) frozen.push_back(p);
  const uint64_t frozen_hash = nn::hash_params(frozen);

  nn::AdamW opt(net.cov_params());
  CovTrainResult result;
  result.frozen_hash = frozen_hash;

  auto save_ckpt = [&](int64_t step) {
    nlohmann::json header{{"module", "covariance"},
                          {"base_channels", net.base_channels()},
                          {"step", step},
                          {"config_hash", config_hash(cfg)},
                          {"frozen_hash", frozen_hash}};
    std::vector<const nn::Param*> params;
    for (auto* p : net.all_params()) params.push_back(p);
    nn::save_checkpoint(ckpt_path, header.dump(), params);
  };

  for (int64_t t = 0; t < cfg.steps; ++t) {
    Rng step_rng(derive_seed(cfg.seed, "cov_step_" + std::to_string(t)));
    const auto& img = corpus[step_rng.uniform_int(0, corpus.size() - 1)];
    const data::TrainingPair pair =
        data::make_training_pair(img, cfg.geo, cfg.photo, cfg.synthesis, step_rng);

    const nn::Tensor in_a = nn::image_to_input(pair.view_a);
    const nn::Tensor in_b = nn::image_to_input(pair.view_b);

    nn::Tensor chol_a, chol_b;
    const detector::KeypointSet kps_a =
        detect_with_cov(net, in_a, cfg.keypoints_per_image, cfg.nms_radius, &chol_a);
    const detector::KeypointSet kps_b =
        detect_with_cov(net, in_b, cfg.keypoints_per_image, cfg.nms_radius, &chol_b);
    if (kps_a.size() < 2 || kps_b.size() < 2) continue;

    const evalbench::MatchSet matches =
        evalbench::mutual_matches(kps_a, kps_b, pair.h_a_to_b, cfg.match_radius);
    if (matches.pairs.empty()) continue;

    const std::vector<RawChol> raws_a = sample_raws(chol_a, kps_a.coords);
    const std::vector<RawChol> raws_b = sample_raws(chol_b, kps_b.coords);
    const CovLossGrad lg =
        covariance_loss_with_grad(matches.pairs, kps_a, kps_b, raws_a, raws_b, pair.h_a_to_b);
    if (!std::isfinite(lg.loss)) {
      throw std::runtime_error("train_covariance: non-finite loss at step " + std::to_string(t));
    }

    opt.zero_grad();
    nn::Tensor gchol_b(3, chol_b.h, chol_b.w);
    for (size_t i = 0; i < kps_b.size(); ++i) {
      const auto taps = nn::bilinear_taps(chol_b.h, chol_b.w, kps_b.coords[i].x(),
                                          kps_b.coords[i].y());
      nn::scatter_channel(gchol_b, 0, taps, lg.grad_raw_b[i].l11);
      nn::scatter_channel(gchol_b, 1, taps, lg.grad_raw_b[i].l21);
      nn::scatter_channel(gchol_b, 2, taps, lg.grad_raw_b[i].l22);
    }
    net.backward_chol(gchol_b);  // caches currently hold view B
    net.forward(in_a, true);
    nn::Tensor gchol_a(3, chol_a.h, chol_a.w);
    for (size_t i = 0; i < kps_a.size(); ++i) {
      const auto taps = nn::bilinear_taps(chol_a.h, chol_a.w, kps_a.coords[i].x(),
                                          kps_a.coords[i].y());
      nn::scatter_channel(gchol_a, 0, taps, lg.grad_raw_a[i].l11);
      nn::scatter_channel(gchol_a, 1, taps, lg.grad_raw_a[i].l21);
      nn::scatter_channel(gchol_a, 2, taps, lg.grad_raw_a[i].l22);
    }
    net.backward_chol(gchol_a);
    opt.step(nn::cosine_lr(cfg.lr0, cfg.lr_min, t, cfg.steps));

    result.final_loss = lg.loss;
    log << nlohmann::json{{"step", t},
                          {"loss", lg.loss},
                          {"num_matches", matches.pairs.size()}}
               .dump()
        << "\n";
    if (cfg.checkpoint_interval > 0 && (t + 1) % cfg.checkpoint_interval == 0) save_ckpt(t + 1);
  }

  save_ckpt(cfg.steps);
  result.checkpoint_path = ckpt_path;

  if (nn::hash_params(frozen) != frozen_hash) {
    throw std::logic_error("train_covariance: frozen parameters changed");
  }
  return result;
}

std::vector<Mat2> predict_covariances(models::DetectorNet& net, const image::ImageBuffer& img,
                                      const detector::KeypointSet& kps) {
  net.forward(nn::image_to_input(img), true);
  return raws_to_covs(sample_raws(net.chol(), kps.coords));
}

}  // namespace raco::covariance
