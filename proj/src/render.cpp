#include "lerf/render.hpp"

#include <algorithm>
#include <numeric>

namespace lerf {

void RenderSettings::validate() const {
  if (!(near > 0 && far > near)) throw Error("render settings: require 0 < near < far");
  if (n_coarse < 1 || n_fine < 0 || n_language < 1) throw Error("render settings: invalid sample counts");
  if (!(scene_radius > 0)) throw Error("render settings: scene_radius must be positive");
}

std::vector<double> stratified_depths(double near, double far, int n, std::span<const double> jitter) {
  if (!(near > 0 && far > near)) throw Error("stratified_depths: require 0 < near < far");
  if (n < 1) throw Error("stratified_depths: need at least one sample");
  if (!jitter.empty() && jitter.size() != static_cast<size_t>(n)) throw Error("stratified_depths: jitter size mismatch");
  const double width = (far - near) / n;
  std::vector<double> depths(n);
  for (int i = 0; i < n; ++i) {
    const double offset = jitter.empty() ? 0.5 : jitter[i];
    depths[i] = near + (i + offset) * width;
  }
  return depths;
}

std::vector<double> inverse_cdf_depths(std::span<const double> edges, std::span<const double> weights, int n,
                                       std::span<const double> uniforms) {
  if (edges.size() != weights.size() + 1 || weights.empty()) throw Error("inverse_cdf_depths: need one weight per bin");
  if (!uniforms.empty() && uniforms.size() != static_cast<size_t>(n)) throw Error("inverse_cdf_depths: uniform count mismatch");
  std::vector<double> cdf(edges.size(), 0.0);
  double total = 0;
  for (double w : weights) total += std::max(w, 0.0);
  const bool fallback = !(total > 0);
  for (size_t i = 0; i < weights.size(); ++i) {
    const double w = fallback ? (edges[i + 1] - edges[i]) : std::max(weights[i], 0.0);
    cdf[i + 1] = cdf[i] + w;
  }
  const double norm = cdf.back();
  for (double& c : cdf) c /= norm;
  cdf.back() = 1.0;

  std::vector<double> out(n);
  for (int k = 0; k < n; ++k) {
    const double u = uniforms.empty() ? (k + 0.5) / n : uniforms[k];
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    size_t bin = static_cast<size_t>(std::distance(cdf.begin(), it));
    bin = std::clamp<size_t>(bin == 0 ? 0 : bin - 1, 0, weights.size() - 1);
    const double span = cdf[bin + 1] - cdf[bin];
    const double t = span > 0 ? (u - cdf[bin]) / span : 0.5;
    out[k] = edges[bin] + std::clamp(t, 0.0, 1.0) * (edges[bin + 1] - edges[bin]);
  }
  return out;
}

std::vector<double> sample_deltas(std::span<const double> depths, double near, double far) {
  std::vector<double> deltas(depths.size());
  for (size_t i = 0; i < depths.size(); ++i) {
    const double lo = i == 0 ? near : 0.5 * (depths[i - 1] + depths[i]);
    const double hi = i + 1 == depths.size() ? far : 0.5 * (depths[i] + depths[i + 1]);
    // Coincident samples still get a tiny positive width.
    deltas[i] = std::max(hi - lo, 1e-10);
  }
  return deltas;
}

std::vector<int> top_weight_subset(std::span<const double> weights, int k) {
  std::vector<int> idx(weights.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (static_cast<size_t>(k) >= idx.size()) return idx;
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return weights[a] > weights[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double scale_along_ray(double s_img, const CameraIntrinsics& k, double t, FrustumScaleMode mode) {
  if (!(t > 0)) throw Error("scale_along_ray: depth must be positive");
  if (mode == FrustumScaleMode::AsPrinted) return s_img * k.focal() / t;
  return s_img * k.min_side() * t / k.focal();
}

template <typename Scalar>
Renderer<Scalar>::Renderer(const FieldModel<Scalar>& field, RenderSettings settings)
    : field_(field), settings_(std::move(settings)) {
  settings_.validate();
}

template <typename Scalar>
SamplePlan Renderer<Scalar>::sample_ray(const Ray& ray, const RayJitter* jitter) const {
  const auto& s = settings_;
  const auto coarse = stratified_depths(s.near, s.far, s.n_coarse,
                                        jitter ? std::span<const double>(jitter->coarse) : std::span<const double>());
  SamplePlan plan;
  plan.depths = coarse;
  if (s.n_fine > 0) {
    const Matrix3X<Scalar> x = sample_positions<Scalar>(ray, coarse, s.scene_radius);
    const VectorX<Scalar> sigma = field_.eval_density(x);
    const Scalar bin = static_cast<Scalar>((s.far - s.near) / s.n_coarse);
    const VectorX<Scalar> delta = VectorX<Scalar>::Constant(sigma.size(), bin);
    const auto cw = compute_weights<Scalar>(sigma, delta);

    std::vector<double> edges(s.n_coarse + 1);
    for (int i = 0; i <= s.n_coarse; ++i) edges[i] = s.near + i * (s.far - s.near) / s.n_coarse;
    std::vector<double> w(s.n_coarse);
    for (int i = 0; i < s.n_coarse; ++i) w[i] = static_cast<double>(cw.weights[i]);
    const auto fine = inverse_cdf_depths(edges, w, s.n_fine,
                                         jitter ? std::span<const double>(jitter->fine) : std::span<const double>());
    plan.depths.insert(plan.depths.end(), fine.begin(), fine.end());
    std::sort(plan.depths.begin(), plan.depths.end());
  }
  plan.deltas = sample_deltas(plan.depths, s.near, s.far);
  return plan;
}

template <typename Scalar>
RgbRender<Scalar> Renderer<Scalar>::render_rgb_depth(const Ray& ray, const RayJitter* jitter) const {
  return render_rgb_depth(ray, sample_ray(ray, jitter));
}

template <typename Scalar>
RgbRender<Scalar> Renderer<Scalar>::render_rgb_depth(const Ray& ray, const SamplePlan& plan) const {
  RgbRender<Scalar> out;
  out.plan = plan;
  const auto n = static_cast<Eigen::Index>(plan.depths.size());
  const Matrix3X<Scalar> x = sample_positions<Scalar>(ray, plan.depths, settings_.scene_radius);
  const Matrix3X<Scalar> dirs = ray.direction.cast<Scalar>().replicate(1, n);
  const auto radiance = field_.eval_radiance(x, dirs);
  VectorX<Scalar> delta(n);
  for (Eigen::Index i = 0; i < n; ++i) delta[i] = static_cast<Scalar>(plan.deltas[i]);
  out.weights = compute_weights<Scalar>(radiance.sigma, delta);

  const VectorX<Scalar>& w = out.weights.weights;
  out.color = (radiance.rgb * w).template cast<double>() +
              static_cast<double>(out.weights.final_transmittance) * settings_.background;
  out.accumulation = static_cast<double>(out.weights.accumulation);
  double wt = 0;
  for (Eigen::Index i = 0; i < n; ++i) wt += static_cast<double>(w[i]) * plan.depths[i];
  out.depth = out.accumulation > kEmptyAccumulation ? wt / out.accumulation : 0.0;
  return out;
}

namespace {

template <typename Scalar>
LanguageSampleRecord<Scalar> select_language_samples(const Ray& ray, const RgbRender<Scalar>& rgb, int n_language,
                                                     double scene_radius) {
  const auto& w = rgb.weights.weights;
  std::vector<double> wd(w.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) wd[i] = static_cast<double>(w[i]);
  LanguageSampleRecord<Scalar> rec;
  rec.indices = top_weight_subset(wd, n_language);
  rec.weights.resize(static_cast<Eigen::Index>(rec.indices.size()));
  for (size_t j = 0; j < rec.indices.size(); ++j) {
    rec.depths.push_back(rgb.plan.depths[rec.indices[j]]);
    rec.weights[static_cast<Eigen::Index>(j)] = w[rec.indices[j]];
  }
  rec.positions = sample_positions<Scalar>(ray, rec.depths, scene_radius);
  return rec;
}

}  // namespace

template <typename Scalar>
LanguageSampleRecord<Scalar> Renderer<Scalar>::language_samples(const Ray& ray, const RgbRender<Scalar>& rgb,
                                                                double s_img, const CameraIntrinsics& k) const {
  auto rec = select_language_samples(ray, rgb, settings_.n_language, settings_.scene_radius);
  for (double t : rec.depths) rec.scales.push_back(scale_along_ray(s_img, k, t, settings_.frustum));
  return rec;
}

template <typename Scalar>
LanguageSampleRecord<Scalar> Renderer<Scalar>::language_samples_fixed_scale(const Ray& ray, const RgbRender<Scalar>& rgb,
                                                                            double scale) const {
  auto rec = select_language_samples(ray, rgb, settings_.n_language, settings_.scene_radius);
  rec.scales.assign(rec.depths.size(), scale);
  return rec;
}

template <typename Scalar>
LanguageRender<Scalar> Renderer<Scalar>::render_language(const LanguageSampleRecord<Scalar>& samples) const {
  VectorX<Scalar> scales(static_cast<Eigen::Index>(samples.scales.size()));
  for (size_t i = 0; i < samples.scales.size(); ++i) scales[static_cast<Eigen::Index>(i)] = static_cast<Scalar>(samples.scales[i]);
  const auto out = field_.eval_language(samples.positions, scales);
  LanguageRender<Scalar> r;
  r.embedding = composite_normalized<Scalar>(out.clip, samples.weights);
  r.dino = composite<Scalar>(out.dino, samples.weights);
  r.samples = samples;
  return r;
}

template <typename Scalar>
LanguageRender<Scalar> Renderer<Scalar>::render_language(const Ray& ray, double s_img, const CameraIntrinsics& k,
                                                         const RayJitter* jitter) const {
  const auto rgb = render_rgb_depth(ray, jitter);
  return render_language(language_samples(ray, rgb, s_img, k));
}

template <typename Scalar>
VectorX<Scalar> Renderer<Scalar>::render_dino(const Ray& ray, const RayJitter* jitter) const {
  const auto rgb = render_rgb_depth(ray, jitter);
  auto rec = select_language_samples(ray, rgb, settings_.n_language, settings_.scene_radius);
  // DINO does not depend on scale; any positive scale works for the shared forward pass.
  rec.scales.assign(rec.depths.size(), 1.0);
  return render_language(rec).dino;
}

template class Renderer<float>;
template class Renderer<double>;

}  // namespace lerf
