#pragma once

#include "lerf/common.hpp"
#include "lerf/field.hpp"
#include "lerf/scene_io.hpp"

#include <span>
#include <vector>

namespace lerf {

/// How the world-space scale of a language sample grows along the ray.
enum class FrustumScaleMode {
  BackProjection,  // s = s_img * min(H, W) * t / f  (crop side back-projected to depth t)
  AsPrinted,       // s = s_img * f / t, kept for comparison only
};

struct RenderSettings {
  double near = 0.05;
  double far = 8.0;
  int n_coarse = 24;
  int n_fine = 24;
  int n_language = 24;
  Vec3 background = Vec3::Zero();
  FrustumScaleMode frustum = FrustumScaleMode::BackProjection;
  // World distance mapped to the contraction's unit ball; the region of interest should fit inside it.
  double scene_radius = 1.0;

  void validate() const;
};

/// Discretized transmittance and weights: alpha_i = 1 - exp(-sigma_i delta_i),
/// T_i = prod_{j<i} (1 - alpha_j), w_i = T_i alpha_i.
template <typename Scalar>
struct CompositeWeights {
  VectorX<Scalar> transmittance;  // T_0 .. T_{N-1}
  VectorX<Scalar> weights;
  Scalar final_transmittance = 1;  // T_N
  Scalar accumulation = 0;         // sum of weights
};

template <typename Scalar>
CompositeWeights<Scalar> compute_weights(std::span<const Scalar> sigma, std::span<const Scalar> delta) {
  if (sigma.size() != delta.size()) throw Error("compute_weights: sigma and delta sizes differ");
  const auto n = static_cast<Eigen::Index>(sigma.size());
  CompositeWeights<Scalar> out;
  out.transmittance.resize(n);
  out.weights.resize(n);
  // Transmittance via the running optical depth keeps T exactly nonincreasing.
  Scalar optical_depth = 0;
  Scalar t_prev = 1;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(sigma[i] >= Scalar(0))) throw Error("compute_weights: negative or non-finite density");
    if (!(delta[i] > Scalar(0))) throw Error("compute_weights: non-positive sample spacing");
    out.transmittance[i] = t_prev;
    optical_depth += sigma[i] * delta[i];
    const Scalar t_next = std::exp(-optical_depth);
    out.weights[i] = t_prev - t_next;
    t_prev = t_next;
  }
  out.final_transmittance = t_prev;
  out.accumulation = Scalar(1) - t_prev;
  return out;
}

template <typename Scalar>
CompositeWeights<Scalar> compute_weights(const VectorX<Scalar>& sigma, const VectorX<Scalar>& delta) {
  return compute_weights<Scalar>(std::span<const Scalar>(sigma.data(), static_cast<size_t>(sigma.size())),
                                 std::span<const Scalar>(delta.data(), static_cast<size_t>(delta.size())));
}

/// Midpoints of n equal bins of [near, far], shifted by jitter[i] * bin width - 0.5 bin
/// when jitter (uniforms in [0,1)) is given.
std::vector<double> stratified_depths(double near, double far, int n, std::span<const double> jitter = {});

/// Inverse-CDF resampling of a piecewise-constant pdf over bins (edges.size() == weights.size() + 1).
/// Uses `uniforms` when given, else the deterministic quantiles (k + 0.5) / n. All-zero weights
/// fall back to a uniform pdf.
std::vector<double> inverse_cdf_depths(std::span<const double> edges, std::span<const double> weights, int n,
                                       std::span<const double> uniforms = {});

/// Interval widths for sorted sample depths: bins bounded by near, the midpoints
/// between neighbours, and far.
std::vector<double> sample_deltas(std::span<const double> depths, double near, double far);

/// Indices of the k largest weights, returned in ascending index order (ties keep the lower index).
std::vector<int> top_weight_subset(std::span<const double> weights, int k);

/// World-space side of the supervision volume at depth t for a crop of s_img * min(H, W) px.
double scale_along_ray(double s_img, const CameraIntrinsics& intrinsics, double t,
                       FrustumScaleMode mode = FrustumScaleMode::BackProjection);

/// Uniform variates for one ray's sampler.
struct RayJitter {
  std::vector<double> coarse;
  std::vector<double> fine;
};

struct SamplePlan {
  std::vector<double> depths;
  std::vector<double> deltas;
};

/// Weighted sum of the columns of `values` (d x N).
template <typename Scalar>
VectorX<Scalar> composite(const MatrixX<Scalar>& values, const VectorX<Scalar>& weights) {
  return values * weights;
}

template <typename Scalar>
struct NormalizedEmbedding {
  VectorX<Scalar> value;    // unit norm unless empty
  VectorX<Scalar> raw;      // pre-normalization sum
  bool empty = true;        // accumulation below threshold
};

inline constexpr double kEmptyAccumulation = 1e-6;

/// Weighted Euclidean average followed by normalization to the unit sphere. Rays with
/// total weight below kEmptyAccumulation are flagged empty and return a zero vector.
template <typename Scalar>
NormalizedEmbedding<Scalar> composite_normalized(const MatrixX<Scalar>& values, const VectorX<Scalar>& weights) {
  NormalizedEmbedding<Scalar> out;
  out.raw = values * weights;
  const Scalar norm = out.raw.norm();
  out.empty = !(weights.sum() >= Scalar(kEmptyAccumulation)) || !(norm > Scalar(0));
  out.value = out.empty ? VectorX<Scalar>::Zero(out.raw.size()) : VectorX<Scalar>(out.raw / norm);
  return out;
}

template <typename Scalar>
struct RgbRender {
  Vec3 color = Vec3::Zero();
  double depth = 0;
  double accumulation = 0;
  SamplePlan plan;
  CompositeWeights<Scalar> weights;
};

template <typename Scalar>
struct LanguageSampleRecord {
  std::vector<int> indices;        // into the ray's sample plan
  std::vector<double> depths;
  std::vector<double> scales;      // world units
  Matrix3X<Scalar> positions;      // contracted
  VectorX<Scalar> weights;
};

template <typename Scalar>
struct LanguageRender {
  NormalizedEmbedding<Scalar> embedding;
  VectorX<Scalar> dino;
  LanguageSampleRecord<Scalar> samples;
};

/// Contracted sample positions (o + t d) / scene_radius.
template <typename Scalar>
Matrix3X<Scalar> sample_positions(const Ray& ray, std::span<const double> depths, double scene_radius = 1.0) {
  Matrix3X<Scalar> out(3, static_cast<Eigen::Index>(depths.size()));
  for (size_t i = 0; i < depths.size(); ++i) {
    const Vec3 x = ray.origin + depths[i] * ray.direction;
    out.col(static_cast<Eigen::Index>(i)) = contract(Vec3(x / scene_radius)).template cast<Scalar>();
  }
  return out;
}

/// Volume renderer over a frozen field.
template <typename Scalar>
class Renderer {
 public:
  Renderer(const FieldModel<Scalar>& field, RenderSettings settings);

  const RenderSettings& settings() const { return settings_; }
  const FieldModel<Scalar>& field() const { return field_; }

  /// Stratified coarse pass on density, then inverse-CDF fine samples; the sorted union.
  /// Without jitter the sampler is deterministic.
  SamplePlan sample_ray(const Ray& ray, const RayJitter* jitter = nullptr) const;

  RgbRender<Scalar> render_rgb_depth(const Ray& ray, const RayJitter* jitter = nullptr) const;
  RgbRender<Scalar> render_rgb_depth(const Ray& ray, const SamplePlan& plan) const;

  /// Language samples: the n_language highest-weight samples of the radiance pass.
  LanguageSampleRecord<Scalar> language_samples(const Ray& ray, const RgbRender<Scalar>& rgb, double s_img,
                                                const CameraIntrinsics& intrinsics) const;
  /// Same subset at one fixed world scale for every sample (query time).
  LanguageSampleRecord<Scalar> language_samples_fixed_scale(const Ray& ray, const RgbRender<Scalar>& rgb,
                                                            double scale) const;

  LanguageRender<Scalar> render_language(const Ray& ray, double s_img, const CameraIntrinsics& intrinsics,
                                         const RayJitter* jitter = nullptr) const;
  LanguageRender<Scalar> render_language(const LanguageSampleRecord<Scalar>& samples) const;
  VectorX<Scalar> render_dino(const Ray& ray, const RayJitter* jitter = nullptr) const;

 private:
  const FieldModel<Scalar>& field_;
  RenderSettings settings_;
};

extern template class Renderer<float>;
extern template class Renderer<double>;

}  // namespace lerf
