#include "lerf/field.hpp"

#include <random>

namespace lerf {

void MLPConfig::validate() const {
  if (hidden_layers < 0) throw Error("mlp: hidden_layers must be >= 0");
  if (hidden_width < 1) throw Error("mlp: hidden_width must be >= 1");
  if (out_dim < 1) throw Error("mlp: out_dim must be >= 1");
}

MlpLayout make_mlp_layout(int in_dim, const MLPConfig& config) {
  config.validate();
  MlpLayout layout;
  layout.config = config;
  layout.in_dim = in_dim;
  size_t offset = 0;
  int in = in_dim;
  for (int i = 0; i <= config.hidden_layers; ++i) {
    DenseLayout d;
    d.in = in;
    d.out = i < config.hidden_layers ? config.hidden_width : config.out_dim;
    d.weight_offset = offset;
    offset += static_cast<size_t>(d.in) * d.out;
    d.bias_offset = offset;
    offset += d.out;
    layout.layers.push_back(d);
    in = d.out;
  }
  layout.param_count = offset;
  return layout;
}

void FieldConfig::validate() const {
  language_grid.validate();
  radiance_grid.validate();
  clip_head.validate();
  dino_head.validate();
  density_head.validate();
  color_head.validate();
  if (color_head.out_dim != 3) throw Error("field config: color head must output 3 channels");
}

namespace {

void add_grid_blocks(FieldLayout& f, const HashGridLayout& grid, size_t base, const std::string& name,
                     Component component) {
  for (size_t l = 0; l < grid.levels.size(); ++l) {
    f.blocks.push_back({name + ".level" + std::to_string(l), base + grid.levels[l].offset,
                        static_cast<size_t>(grid.levels[l].entries) * grid.config.features_per_level, component});
  }
}

void add_mlp_blocks(FieldLayout& f, const MlpLayout& mlp, size_t base, const std::string& name, Component component) {
  for (size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& d = mlp.layers[i];
    const std::string prefix = name + ".layer" + std::to_string(i);
    f.blocks.push_back({prefix + ".weight", base + d.weight_offset, static_cast<size_t>(d.in) * d.out, component});
    f.blocks.push_back({prefix + ".bias", base + d.bias_offset, static_cast<size_t>(d.out), component});
  }
}

}  // namespace

FieldLayout make_field_layout(const FieldConfig& config) {
  config.validate();
  FieldLayout f;
  f.config = config;
  f.language_grid = make_hash_layout(config.language_grid);
  const int lang_feats = config.language_grid.output_dim();
  f.clip_head = make_mlp_layout(lang_feats + 1, config.clip_head);
  f.dino_head = make_mlp_layout(lang_feats, config.dino_head);
  f.radiance_grid = make_hash_layout(config.radiance_grid);
  f.density_head = make_mlp_layout(config.radiance_grid.output_dim(), config.density_head);
  f.color_head = make_mlp_layout(config.density_head.out_dim - 1 + 3, config.color_head);

  size_t offset = 0;
  f.language_begin = offset;
  f.language_grid_offset = offset;
  offset += f.language_grid.param_count;
  f.clip_offset = offset;
  offset += f.clip_head.param_count;
  f.dino_offset = offset;
  offset += f.dino_head.param_count;
  f.language_end = offset;
  f.radiance_begin = offset;
  f.radiance_grid_offset = offset;
  offset += f.radiance_grid.param_count;
  f.density_offset = offset;
  offset += f.density_head.param_count;
  f.color_offset = offset;
  offset += f.color_head.param_count;
  f.radiance_end = offset;
  f.total = offset;

  add_grid_blocks(f, f.language_grid, f.language_grid_offset, "language_grid", Component::Language);
  add_mlp_blocks(f, f.clip_head, f.clip_offset, "clip_head", Component::Language);
  add_mlp_blocks(f, f.dino_head, f.dino_offset, "dino_head", Component::Language);
  add_grid_blocks(f, f.radiance_grid, f.radiance_grid_offset, "radiance_grid", Component::Radiance);
  add_mlp_blocks(f, f.density_head, f.density_offset, "density_head", Component::Radiance);
  add_mlp_blocks(f, f.color_head, f.color_offset, "color_head", Component::Radiance);
  return f;
}

template <typename Scalar>
FieldModel<Scalar>::FieldModel(const FieldConfig& config)
    : layout_(make_field_layout(config)), params_(VectorX<Scalar>::Zero(static_cast<Eigen::Index>(layout_.total))) {}

template <typename Scalar>
FieldModel<Scalar>::FieldModel(const FieldLayout& layout, VectorX<Scalar> params)
    : layout_(layout), params_(std::move(params)) {
  if (static_cast<size_t>(params_.size()) != layout_.total) throw Error("field: parameter count mismatch");
}

template <typename Scalar>
void FieldModel<Scalar>::initialize(std::uint64_t seed, double hash_range, double density_bias) {
  std::mt19937_64 rng(seed);
  const auto fill_uniform = [&](size_t offset, size_t n, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (size_t i = 0; i < n; ++i) params_[static_cast<Eigen::Index>(offset + i)] = static_cast<Scalar>(dist(rng));
  };
  const auto init_mlp = [&](const MlpLayout& mlp, size_t base) {
    for (const auto& d : mlp.layers) {
      fill_uniform(base + d.weight_offset, static_cast<size_t>(d.in) * d.out, std::sqrt(6.0 / d.in));
      params_.segment(static_cast<Eigen::Index>(base + d.bias_offset), d.out).setZero();
    }
  };
  fill_uniform(layout_.language_grid_offset, layout_.language_grid.param_count, hash_range);
  init_mlp(layout_.clip_head, layout_.clip_offset);
  init_mlp(layout_.dino_head, layout_.dino_offset);
  fill_uniform(layout_.radiance_grid_offset, layout_.radiance_grid.param_count, hash_range);
  init_mlp(layout_.density_head, layout_.density_offset);
  params_[static_cast<Eigen::Index>(layout_.density_offset + layout_.density_head.layers.back().bias_offset)] =
      static_cast<Scalar>(density_bias);
  init_mlp(layout_.color_head, layout_.color_offset);
}

template <typename Scalar>
LanguageOutput<Scalar> FieldModel<Scalar>::eval_language(const Eigen::Ref<const Matrix3X<Scalar>>& contracted,
                                                         const Eigen::Ref<const VectorX<Scalar>>& scales,
                                                         LanguageTape<Scalar>* tape) const {
  if (scales.size() != contracted.cols()) throw Error("eval_language: one scale per position required");
  const Scalar* p = params_.data();
  const Matrix3X<Scalar> unit = to_unit_cube<Scalar>(contracted);
  MatrixX<Scalar> features =
      hash_encode<Scalar>(layout_.language_grid, p + layout_.language_grid_offset, unit, tape ? &tape->grid : nullptr);
  MatrixX<Scalar> clip_in(features.rows() + 1, features.cols());
  clip_in.topRows(features.rows()) = features;
  for (Eigen::Index i = 0; i < scales.size(); ++i) clip_in(features.rows(), i) = scale_feature(scales[i]);

  LanguageOutput<Scalar> out;
  out.clip = mlp_forward<Scalar>(layout_.clip_head, p + layout_.clip_offset, clip_in, tape ? &tape->clip : nullptr);
  out.dino = mlp_forward<Scalar>(layout_.dino_head, p + layout_.dino_offset, features, tape ? &tape->dino : nullptr);
  if (tape) tape->recorded = true;
  return out;
}

template <typename Scalar>
void FieldModel<Scalar>::language_backward(LanguageTape<Scalar>& tape, const MatrixX<Scalar>& grad_clip,
                                           const MatrixX<Scalar>& grad_dino, GradientBuffer<Scalar>& grad,
                                           Matrix3X<Scalar>* grad_positions) const {
  if (!tape.recorded) throw Error("language_backward: no matching forward pass recorded");
  if (static_cast<size_t>(grad.values.size()) != layout_.total) throw Error("language_backward: gradient buffer has wrong size");
  const Scalar* p = params_.data();
  Scalar* g = grad.values.data();
  const MatrixX<Scalar> g_clip_in = mlp_backward<Scalar>(layout_.clip_head, p + layout_.clip_offset, tape.clip, grad_clip,
                                                         g + layout_.clip_offset);
  MatrixX<Scalar> g_features =
      mlp_backward<Scalar>(layout_.dino_head, p + layout_.dino_offset, tape.dino, grad_dino, g + layout_.dino_offset);
  g_features += g_clip_in.topRows(g_features.rows());
  hash_backward<Scalar>(layout_.language_grid, p + layout_.language_grid_offset, tape.grid, g_features,
                        g + layout_.language_grid_offset, grad_positions);
  if (grad_positions) *grad_positions /= Scalar(4);
  tape.recorded = false;
}

template <typename Scalar>
MatrixX<Scalar> FieldModel<Scalar>::language_features(const Eigen::Ref<const Matrix3X<Scalar>>& contracted) const {
  const Matrix3X<Scalar> unit = to_unit_cube<Scalar>(contracted);
  return hash_encode<Scalar>(layout_.language_grid, params_.data() + layout_.language_grid_offset, unit);
}

template <typename Scalar>
MatrixX<Scalar> FieldModel<Scalar>::clip_from_features(const MatrixX<Scalar>& features, Scalar scale) const {
  MatrixX<Scalar> clip_in(features.rows() + 1, features.cols());
  clip_in.topRows(features.rows()) = features;
  clip_in.row(features.rows()).setConstant(scale_feature(scale));
  return mlp_forward<Scalar>(layout_.clip_head, params_.data() + layout_.clip_offset, clip_in);
}

template <typename Scalar>
RadianceOutput<Scalar> FieldModel<Scalar>::eval_radiance(const Eigen::Ref<const Matrix3X<Scalar>>& contracted,
                                                         const Eigen::Ref<const Matrix3X<Scalar>>& directions,
                                                         RadianceTape<Scalar>* tape) const {
  if (directions.cols() != contracted.cols()) throw Error("eval_radiance: one direction per position required");
  const Scalar* p = params_.data();
  const Matrix3X<Scalar> unit = to_unit_cube<Scalar>(contracted);
  const MatrixX<Scalar> features =
      hash_encode<Scalar>(layout_.radiance_grid, p + layout_.radiance_grid_offset, unit, tape ? &tape->grid : nullptr);
  const MatrixX<Scalar> density_out =
      mlp_forward<Scalar>(layout_.density_head, p + layout_.density_offset, features, tape ? &tape->density : nullptr);

  const Eigen::Index n = contracted.cols();
  const Eigen::Index geo = density_out.rows() - 1;
  MatrixX<Scalar> color_in(geo + 3, n);
  color_in.topRows(geo) = density_out.bottomRows(geo);
  color_in.bottomRows(3) = directions;
  const MatrixX<Scalar> color_raw =
      mlp_forward<Scalar>(layout_.color_head, p + layout_.color_offset, color_in, tape ? &tape->color : nullptr);

  RadianceOutput<Scalar> out;
  out.sigma.resize(n);
  out.rgb.resize(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.sigma[i] = softplus(density_out(0, i));
    for (int c = 0; c < 3; ++c) out.rgb(c, i) = logistic(color_raw(c, i));
  }
  if (tape) {
    tape->raw_density = density_out.row(0).transpose();
    tape->rgb = out.rgb;
    tape->recorded = true;
  }
  return out;
}

template <typename Scalar>
VectorX<Scalar> FieldModel<Scalar>::eval_density(const Eigen::Ref<const Matrix3X<Scalar>>& contracted) const {
  const Scalar* p = params_.data();
  const Matrix3X<Scalar> unit = to_unit_cube<Scalar>(contracted);
  const MatrixX<Scalar> features = hash_encode<Scalar>(layout_.radiance_grid, p + layout_.radiance_grid_offset, unit);
  const MatrixX<Scalar> density_out = mlp_forward<Scalar>(layout_.density_head, p + layout_.density_offset, features);
  VectorX<Scalar> sigma(contracted.cols());
  for (Eigen::Index i = 0; i < sigma.size(); ++i) sigma[i] = softplus(density_out(0, i));
  return sigma;
}

template <typename Scalar>
void FieldModel<Scalar>::radiance_backward(RadianceTape<Scalar>& tape, const Matrix3X<Scalar>& grad_rgb,
                                           const VectorX<Scalar>& grad_sigma, GradientBuffer<Scalar>& grad,
                                           Matrix3X<Scalar>* grad_positions) const {
  if (!tape.recorded) throw Error("radiance_backward: no matching forward pass recorded");
  const Eigen::Index n = tape.rgb.cols();
  if (grad_rgb.cols() != n || grad_sigma.size() != n) {
    throw Error("radiance_backward: gradient shape does not match the recorded forward pass");
  }
  if (static_cast<size_t>(grad.values.size()) != layout_.total) throw Error("radiance_backward: gradient buffer has wrong size");
  const Scalar* p = params_.data();
  Scalar* g = grad.values.data();

  const MatrixX<Scalar> g_color_raw = (grad_rgb.array() * tape.rgb.array() * (Scalar(1) - tape.rgb.array())).matrix();
  const MatrixX<Scalar> g_color_in =
      mlp_backward<Scalar>(layout_.color_head, p + layout_.color_offset, tape.color, g_color_raw, g + layout_.color_offset);

  const Eigen::Index geo = layout_.density_head.layers.back().out - 1;
  MatrixX<Scalar> g_density_out(geo + 1, n);
  for (Eigen::Index i = 0; i < n; ++i) g_density_out(0, i) = grad_sigma[i] * logistic(tape.raw_density[i]);
  g_density_out.bottomRows(geo) = g_color_in.topRows(geo);

  const MatrixX<Scalar> g_features = mlp_backward<Scalar>(layout_.density_head, p + layout_.density_offset, tape.density,
                                                          g_density_out, g + layout_.density_offset);
  hash_backward<Scalar>(layout_.radiance_grid, p + layout_.radiance_grid_offset, tape.grid, g_features,
                        g + layout_.radiance_grid_offset, grad_positions);
  if (grad_positions) *grad_positions /= Scalar(4);
  tape.recorded = false;
}

template class FieldModel<float>;
template class FieldModel<double>;

}  // namespace lerf
