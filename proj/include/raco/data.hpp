#pragma once

#include <string>
#include <vector>

#include "raco/geometry.hpp"
#include "raco/image.hpp"

namespace raco::data {

using image::ImageBuffer;
using image::Mask;

struct PhotometricConfig {
  double brightness_delta = 0.0;       // additive, [0,1] scale
  double contrast_min = 1.0;           // multiplicative around 0.5
  double contrast_max = 1.0;
  double hue_delta = 0.0;              // radians of rotation about the gray axis
  double gaussian_noise_sigma = 0.0;   // intensity units on the [0,255] scale
  double blur_probability = 0.0;
  double jpeg_like_quality_min = 100.0;
  double jpeg_like_quality_max = 100.0;
  uint64_t rng_seed = 0;

  void validate() const;
  static PhotometricConfig strong(uint64_t seed);
};

struct TrainingPair {
  ImageBuffer view_a;
  ImageBuffer view_b;
  geometry::Homography h_a_to_b;
  Mask valid_mask_b;  // pixels of B covered by warped A
};

struct PairSynthesisConfig {
  int crop_size = 192;
  int out_size = 160;
  double min_overlap = 0.25;
  int max_resample_attempts = 16;
};

ImageBuffer apply_photometric(const ImageBuffer& img, const PhotometricConfig& cfg);
ImageBuffer apply_photometric(const ImageBuffer& img, const PhotometricConfig& cfg, Rng& rng);

TrainingPair make_training_pair(const ImageBuffer& img,
                                const geometry::HomographySamplerConfig& geo_cfg,
                                const PhotometricConfig& photo_cfg,
                                const PairSynthesisConfig& syn_cfg, Rng& rng);

// HPatches layout: <seq>/1.ppm..6.ppm (or .png) plus H_1_2..H_1_6 text files.
// Returns the reference image first with an identity homography, then each
// (image, H_ref->k) pair. When resize_to > 0 both sides are resized so the
// shorter side equals resize_to and homographies are conjugated to match.
std::vector<std::pair<ImageBuffer, geometry::Homography>> load_hpatches_sequence(
    const std::string& dir_path, int resize_to = 0);

// Line-delimited JSON manifest {source_id, path}.
struct ManifestEntry {
  std::string source_id;
  std::string path;
};
std::vector<ManifestEntry> load_manifest(const std::string& path);

// Procedural corner-rich images for desk-scale training and tests.
ImageBuffer synth_toy_image(int size, uint64_t seed);
std::vector<ImageBuffer> make_toy_corpus(int count, int size, uint64_t seed);

}  // namespace raco::data
