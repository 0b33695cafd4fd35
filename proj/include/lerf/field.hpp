#pragma once

#include "lerf/common.hpp"
#include "lerf/hash_grid.hpp"
#include "lerf/mlp.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace lerf {

/// Architecture of both fields. The language grid and heads default to the published
/// LERF sizes; the radiance grid is a typical RGB hash grid.
struct FieldConfig {
  HashGridConfig language_grid{32, 16, 512, 1u << 21, 8};
  MLPConfig clip_head{3, 256, 512};
  MLPConfig dino_head{1, 256, 384};
  HashGridConfig radiance_grid{16, 16, 1024, 1u << 19, 2};
  /// Output 0 is raw density; the rest are geometry features fed to the color head.
  MLPConfig density_head{1, 64, 16};
  MLPConfig color_head{2, 64, 3};

  void validate() const;
  int embed_dim() const { return clip_head.out_dim; }
  int dino_dim() const { return dino_head.out_dim; }
};

enum class Component { Language, Radiance };

struct ParamBlock {
  std::string name;
  size_t offset = 0;
  size_t size = 0;
  Component component = Component::Language;
};

/// Flat parameter layout. All language parameters precede all radiance parameters.
struct FieldLayout {
  FieldConfig config;
  HashGridLayout language_grid;
  MlpLayout clip_head, dino_head;
  HashGridLayout radiance_grid;
  MlpLayout density_head, color_head;

  size_t language_grid_offset = 0, clip_offset = 0, dino_offset = 0;
  size_t radiance_grid_offset = 0, density_offset = 0, color_offset = 0;
  size_t language_begin = 0, language_end = 0;
  size_t radiance_begin = 0, radiance_end = 0;
  size_t total = 0;
  std::vector<ParamBlock> blocks;
};

FieldLayout make_field_layout(const FieldConfig& config);

/// Maps a contracted position (ball of radius 2) into the encoder's unit cube.
template <typename Scalar>
Matrix3X<Scalar> to_unit_cube(const Eigen::Ref<const Matrix3X<Scalar>>& contracted) {
  return ((contracted.array() + Scalar(2)) / Scalar(4)).matrix();
}

/// Scale input to the CLIP head: log(s / 1 world unit).
template <typename Scalar>
Scalar scale_feature(Scalar s) {
  if (!(s > Scalar(0))) throw Error("language field: scale must be positive");
  return std::log(s);
}

template <typename Scalar>
struct GradientBuffer {
  VectorX<Scalar> values;

  explicit GradientBuffer(size_t n = 0) : values(VectorX<Scalar>::Zero(static_cast<Eigen::Index>(n))) {}
  void zero() { values.setZero(); }
};

template <typename Scalar>
struct LanguageOutput {
  MatrixX<Scalar> clip;  // d x N
  MatrixX<Scalar> dino;  // d_dino x N
};

template <typename Scalar>
struct LanguageTape {
  bool recorded = false;
  HashEncodingTape<Scalar> grid;
  MlpTape<Scalar> clip, dino;
};

template <typename Scalar>
struct RadianceOutput {
  Matrix3X<Scalar> rgb;  // in [0,1]
  VectorX<Scalar> sigma;  // >= 0
};

template <typename Scalar>
struct RadianceTape {
  bool recorded = false;
  HashEncodingTape<Scalar> grid;
  MlpTape<Scalar> density, color;
  VectorX<Scalar> raw_density;
  Matrix3X<Scalar> rgb;
};

/// Radiance field (color, density) and language field (CLIP and DINO heads sharing one
/// hash grid) over one flat parameter vector, with exact reverse-mode gradients.
template <typename Scalar>
class FieldModel {
 public:
  explicit FieldModel(const FieldConfig& config);
  FieldModel(const FieldLayout& layout, VectorX<Scalar> params);

  const FieldLayout& layout() const { return layout_; }
  const FieldConfig& config() const { return layout_.config; }
  VectorX<Scalar>& params() { return params_; }
  const VectorX<Scalar>& params() const { return params_; }
  GradientBuffer<Scalar> make_gradient() const { return GradientBuffer<Scalar>(layout_.total); }

  /// Hash tables uniform in [-hash_range, hash_range]; MLP weights uniform with
  /// bound sqrt(6 / fan_in); biases zero.
  // density_bias: initial raw density output; negative values start from a transparent field
  void initialize(std::uint64_t seed, double hash_range = 1e-4, double density_bias = 0.0);

  template <typename Other>
  FieldModel<Other> cast() const {
    return FieldModel<Other>(layout_, params_.template cast<Other>());
  }

  // Language field. Positions are contracted (|x| < 2); scales in world units.
  LanguageOutput<Scalar> eval_language(const Eigen::Ref<const Matrix3X<Scalar>>& contracted,
                                       const Eigen::Ref<const VectorX<Scalar>>& scales,
                                       LanguageTape<Scalar>* tape = nullptr) const;
  /// Accumulates parameter gradients; optionally d(loss)/d(contracted position).
  void language_backward(LanguageTape<Scalar>& tape, const MatrixX<Scalar>& grad_clip, const MatrixX<Scalar>& grad_dino,
                         GradientBuffer<Scalar>& grad, Matrix3X<Scalar>* grad_positions = nullptr) const;

  /// Scale-independent part of the language field (hash features).
  MatrixX<Scalar> language_features(const Eigen::Ref<const Matrix3X<Scalar>>& contracted) const;
  /// CLIP head on precomputed features at one scale.
  MatrixX<Scalar> clip_from_features(const MatrixX<Scalar>& features, Scalar scale) const;

  // Radiance field. Directions are unit vectors.
  RadianceOutput<Scalar> eval_radiance(const Eigen::Ref<const Matrix3X<Scalar>>& contracted,
                                       const Eigen::Ref<const Matrix3X<Scalar>>& directions,
                                       RadianceTape<Scalar>* tape = nullptr) const;
  VectorX<Scalar> eval_density(const Eigen::Ref<const Matrix3X<Scalar>>& contracted) const;
  void radiance_backward(RadianceTape<Scalar>& tape, const Matrix3X<Scalar>& grad_rgb, const VectorX<Scalar>& grad_sigma,
                         GradientBuffer<Scalar>& grad, Matrix3X<Scalar>* grad_positions = nullptr) const;

 private:
  FieldLayout layout_;
  VectorX<Scalar> params_;
};

template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > Scalar(20) ? x : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar logistic(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

extern template class FieldModel<float>;
extern template class FieldModel<double>;

}  // namespace lerf
