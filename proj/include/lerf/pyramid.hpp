#pragma once

#include "lerf/common.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace lerf {

/// Crop scales are fractions of min(image width, image height).
struct PyramidConfig {
  double s_min = 0.05;
  double s_max = 0.5;
  int n_levels = 7;
  double overlap = 0.5;
  int embed_dim = 512;

  void validate() const;
};

/// Geometrically spaced crop-side fractions from s_min to s_max inclusive.
std::vector<double> level_scales(const PyramidConfig& config);

/// Crop side in pixels for a scale fraction (at least one pixel).
int crop_side_px(double fraction, int width, int height);

/// Crop centers along one image axis of `length` pixels. The first and last crops touch
/// the borders; interior centers advance by crop_side * (1 - overlap), and the final gap
/// shrinks as needed. Coordinates are continuous (pixel u spans [u, u+1)).
std::vector<double> axis_centers(int length, int crop_side, double overlap);

struct CropCenter {
  double x = 0, y = 0;
};

/// Row-major (y outer, x inner) lattice of crop centers.
std::vector<CropCenter> build_grid_layout(int width, int height, int crop_side, double overlap);

/// One pyramid level of one image: unit embeddings on a crop lattice.
struct EmbeddingGrid {
  std::uint32_t crop_side = 0;
  std::uint32_t nx = 0, ny = 0;
  std::vector<float> embeddings;  // [ny][nx][d]

  std::span<const float> embedding(std::uint32_t ix, std::uint32_t iy, int dim) const {
    return {embeddings.data() + (static_cast<size_t>(iy) * nx + ix) * dim, static_cast<size_t>(dim)};
  }
};

/// Per-image feature pyramid. The lattice geometry (crop centers and the scale fraction of
/// each level) is attached from the image size and PyramidConfig before interpolation.
struct FeaturePyramid {
  std::vector<EmbeddingGrid> levels;

  int image_width = 0, image_height = 0;
  std::vector<double> level_fraction;
  std::vector<std::vector<double>> centers_x, centers_y;

  bool has_layout() const { return !level_fraction.empty(); }
};

/// Pixel-aligned regularizer features, [height][width][dim]. Feature node (i, j) sits at
/// continuous image position ((j + 0.5) * stride_x, (i + 0.5) * stride_y).
struct DinoFeatureMap {
  std::uint32_t height = 0, width = 0;
  int dim = 0;
  std::vector<float> features;
  double stride_x = 1.0, stride_y = 1.0;

  std::span<const float> at(std::uint32_t i, std::uint32_t j) const {
    return {features.data() + (static_cast<size_t>(i) * width + j) * dim, static_cast<size_t>(dim)};
  }
};

/// Everything stored in one embedding container file.
struct EmbeddingContainer {
  std::uint32_t version = 1;
  int embed_dim = 0;
  int dino_dim = 0;
  int n_levels = 0;
  std::vector<FeaturePyramid> frames;
  std::vector<DinoFeatureMap> dino;
};

/// Fills crop centers and level fractions; throws if stored grid sizes disagree with
/// build_grid_layout for this image size and config.
void attach_layout(FeaturePyramid& pyramid, int width, int height, const PyramidConfig& config);
void attach_layout(EmbeddingContainer& container, int width, int height, const PyramidConfig& config);

/// Blend of the 4 nearest crops at the levels bracketing s_img (log-scale blend across
/// levels), renormalized. (x, y) is a continuous image position; positions outside the
/// crop-center hull are clamped onto it.
Eigen::VectorXd interpolate_language_target(const FeaturePyramid& pyramid, double x, double y, double s_img);

/// Bilinear sample at a continuous image position.
Eigen::VectorXd sample_dino_target(const DinoFeatureMap& map, double x, double y);

std::vector<std::uint8_t> encode_container(const EmbeddingContainer& container);
EmbeddingContainer decode_container(std::span<const std::uint8_t> bytes);
void write_pyramid(const std::filesystem::path& path, const EmbeddingContainer& container);
EmbeddingContainer read_pyramid(const std::filesystem::path& path);

/// Sets DINO strides from the image size (stride = image extent / feature extent).
void attach_dino_strides(EmbeddingContainer& container, int width, int height);

}  // namespace lerf
