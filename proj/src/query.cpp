#include "lerf/query.hpp"

#include <tbb/parallel_for.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

namespace lerf {

void QueryContext::validate() const {
  if (canonicals.empty()) throw Error("relevancy: at least one canonical embedding required");
  const auto check = [&](const Eigen::VectorXd& v, const std::string& what) {
    if (v.size() != query.size()) throw Error("relevancy: " + what + " has dimension " + std::to_string(v.size()) +
                                              ", query has " + std::to_string(query.size()));
    if (std::abs(v.norm() - 1.0) > 1e-3) throw Error("relevancy: " + what + " is not unit norm");
  };
  check(query, "query");
  for (size_t i = 0; i < canonicals.size(); ++i) check(canonicals[i], "canonical " + std::to_string(i));
}

double relevancy_score(const Eigen::VectorXd& phi, const QueryContext& ctx) {
  if (ctx.canonicals.empty()) throw Error("relevancy: at least one canonical embedding required");
  const double q = ctx.temperature * phi.dot(ctx.query);
  double best = 1.0;
  for (const auto& c : ctx.canonicals) {
    // exp(q) / (exp(c) + exp(q)) written as a logistic for stability.
    const double s = 1.0 / (1.0 + std::exp(ctx.temperature * phi.dot(c) - q));
    best = std::min(best, s);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Visibility

VisibilityResult visibility_filter(const Vec3& point, std::span<const DepthView> views, int min_views, double tolerance) {
  VisibilityResult r;
  for (const auto& view : views) {
    const auto px = project(view.pose, view.intrinsics, point);
    if (!px) continue;
    const long u = std::lround((*px).x());
    const long v = std::lround((*px).y());
    if (u < 0 || v < 0 || u >= view.intrinsics.width || v >= view.intrinsics.height) continue;
    const size_t i = static_cast<size_t>(v) * view.intrinsics.width + static_cast<size_t>(u);
    if (!view.accumulation.empty() && view.accumulation[i] < 0.5f) continue;
    const double rendered = view.depth[i];
    if (!(rendered > 0)) continue;
    const double distance = (point - view.pose.center()).norm();
    if (std::abs(distance - rendered) <= tolerance * rendered) ++r.view_count;
  }
  r.keep = r.view_count >= min_views;
  return r;
}

CameraIntrinsics downsample_intrinsics(const CameraIntrinsics& k, int factor) {
  if (factor < 1) throw Error("downsample factor must be >= 1");
  CameraIntrinsics out = k;
  out.width = std::max(1, k.width / factor);
  out.height = std::max(1, k.height / factor);
  const double sx = static_cast<double>(out.width) / k.width;
  const double sy = static_cast<double>(out.height) / k.height;
  out.fx = k.fx * sx;
  out.fy = k.fy * sy;
  out.cx = k.cx * sx;
  out.cy = k.cy * sy;
  return out;
}

std::vector<DepthView> render_depth_views(const FieldModel<float>& field, const RenderSettings& settings,
                                          const SceneDataset& dataset, int downsample) {
  const Renderer<float> renderer(field, settings);
  std::vector<DepthView> views;
  for (const auto& frame : dataset.frames) {
    DepthView dv;
    dv.pose = frame.pose;
    dv.intrinsics = downsample_intrinsics(frame.intrinsics, downsample);
    const int w = dv.intrinsics.width, h = dv.intrinsics.height;
    dv.depth.assign(static_cast<size_t>(w) * h, 0.0f);
    dv.accumulation.assign(static_cast<size_t>(w) * h, 0.0f);
    tbb::parallel_for(0, h, [&](int v) {
      for (int u = 0; u < w; ++u) {
        const auto r = renderer.render_rgb_depth(generate_ray(dv.pose, dv.intrinsics, u, v));
        dv.depth[static_cast<size_t>(v) * w + u] = static_cast<float>(r.depth);
        dv.accumulation[static_cast<size_t>(v) * w + u] = static_cast<float>(r.accumulation);
      }
    });
    views.push_back(std::move(dv));
  }
  return views;
}

// ---------------------------------------------------------------------------
// View preparation

namespace {

struct PixelRecord {
  Eigen::MatrixXf features;
  Eigen::VectorXf weights;
  Vec3 color = Vec3::Zero();
  float depth = 0, accumulation = 0;
};

PixelRecord render_pixel(const Renderer<float>& renderer, const Ray& ray) {
  PixelRecord rec;
  const auto rgb = renderer.render_rgb_depth(ray);
  rec.color = rgb.color;
  rec.depth = static_cast<float>(rgb.depth);
  rec.accumulation = static_cast<float>(rgb.accumulation);
  const auto samples = renderer.language_samples_fixed_scale(ray, rgb, 1.0);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < samples.weights.size(); ++i) {
    if (samples.weights[i] > kNegligibleWeight) keep.push_back(i);
  }
  Matrix3X<float> pos(3, static_cast<Eigen::Index>(keep.size()));
  rec.weights.resize(static_cast<Eigen::Index>(keep.size()));
  for (size_t j = 0; j < keep.size(); ++j) {
    pos.col(static_cast<Eigen::Index>(j)) = samples.positions.col(keep[j]);
    rec.weights[static_cast<Eigen::Index>(j)] = samples.weights[keep[j]];
  }
  rec.features = renderer.field().language_features(pos);
  return rec;
}

}  // namespace

PreparedView prepare_view(const FieldModel<float>& field, const RenderSettings& settings, const CameraPose& pose,
                          const CameraIntrinsics& intrinsics, int view_id) {
  intrinsics.validate();
  const Renderer<float> renderer(field, settings);
  PreparedView view;
  view.view_id = view_id;
  view.pose = pose;
  view.intrinsics = intrinsics;
  const int w = intrinsics.width, h = intrinsics.height;
  const size_t n = view.pixels();
  std::vector<PixelRecord> records(n);
  tbb::parallel_for(0, h, [&](int v) {
    for (int u = 0; u < w; ++u) {
      records[static_cast<size_t>(v) * w + u] = render_pixel(renderer, generate_ray(pose, intrinsics, u, v));
    }
  });

  view.color = Image(w, h);
  view.depth.resize(n);
  view.accumulation.resize(n);
  view.visible.resize(n);
  view.sample_begin.resize(n + 1);
  Eigen::Index total = 0;
  for (size_t i = 0; i < n; ++i) {
    view.sample_begin[i] = static_cast<int>(total);
    total += records[i].weights.size();
  }
  view.sample_begin[n] = static_cast<int>(total);
  const int feats = field.config().language_grid.output_dim();
  view.features.resize(feats, total);
  view.weights.resize(total);
  for (size_t i = 0; i < n; ++i) {
    const auto& r = records[i];
    const Eigen::Index b = view.sample_begin[i];
    const Eigen::Index k = r.weights.size();
    if (k > 0) {
      view.features.middleCols(b, k) = r.features;
      view.weights.segment(b, k) = r.weights;
    }
    view.color.set(static_cast<int>(i % w), static_cast<int>(i / w), r.color.cast<float>());
    view.depth[i] = r.depth;
    view.accumulation[i] = r.accumulation;
    view.visible[i] = (r.weights.sum() >= static_cast<float>(kEmptyAccumulation)) ? 1 : 0;
  }
  return view;
}

void apply_visibility(PreparedView& view, std::span<const DepthView> views, int min_views) {
  const int w = view.width();
  for (size_t i = 0; i < view.pixels(); ++i) {
    if (!view.visible[i]) continue;
    const Ray ray = generate_ray(view.pose, view.intrinsics, static_cast<int>(i % w), static_cast<int>(i / w));
    const Vec3 surface = ray.origin + static_cast<double>(view.depth[i]) * ray.direction;
    if (!visibility_filter(surface, views, min_views).keep) view.visible[i] = 0;
  }
}

// ---------------------------------------------------------------------------
// Relevancy maps

std::vector<Eigen::VectorXf> render_embeddings(const PreparedView& view, const FieldModel<float>& field, double scale) {
  const Eigen::MatrixXf clip = view.features.cols() > 0 ? field.clip_from_features(view.features, static_cast<float>(scale))
                                                        : Eigen::MatrixXf(field.config().embed_dim(), 0);
  std::vector<Eigen::VectorXf> out(view.pixels());
  for (size_t i = 0; i < view.pixels(); ++i) {
    const Eigen::Index b = view.sample_begin[i];
    const Eigen::Index k = view.sample_begin[i + 1] - b;
    if (k == 0) {
      out[i] = Eigen::VectorXf::Zero(clip.rows());
      continue;
    }
    const Eigen::VectorXf raw = clip.middleCols(b, k) * view.weights.segment(b, k);
    const float norm = raw.norm();
    out[i] = norm > 0 ? Eigen::VectorXf(raw / norm) : Eigen::VectorXf::Zero(clip.rows());
  }
  return out;
}

RelevancyMap render_relevancy_map(const PreparedView& view, const FieldModel<float>& field, const QueryContext& ctx,
                                  double scale) {
  if (!(scale > 0)) throw Error("render_relevancy_map: scale must be positive");
  ctx.validate();
  RelevancyMap map;
  map.width = view.width();
  map.height = view.height();
  map.view_id = view.view_id;
  map.scale = scale;
  map.raw.assign(view.pixels(), 0.0f);
  map.mask = view.visible;
  const auto embeddings = render_embeddings(view, field, scale);
  for (size_t i = 0; i < view.pixels(); ++i) {
    if (!map.mask[i]) continue;
    if (!(embeddings[i].squaredNorm() > 0)) {
      map.mask[i] = 0;
      continue;
    }
    map.raw[i] = static_cast<float>(relevancy_score(embeddings[i].cast<double>(), ctx));
  }
  return map;
}

float RelevancyMap::max_score() const {
  float best = -1.0f;
  for (size_t i = 0; i < raw.size(); ++i) {
    if (mask[i]) best = std::max(best, raw[i]);
  }
  return best;
}

std::vector<float> RelevancyMap::display() const {
  const float top = max_score();
  std::vector<float> out(raw.size(), 0.0f);
  if (!(top > 0.5f)) return out;
  for (size_t i = 0; i < raw.size(); ++i) {
    if (mask[i]) out[i] = std::clamp((raw[i] - 0.5f) / (top - 0.5f), 0.0f, 1.0f);
  }
  return out;
}

std::vector<std::uint8_t> RelevancyMap::overlay_rgba() const {
  const auto shown = display();
  std::vector<std::uint8_t> out(raw.size() * 4, 0);
  for (size_t i = 0; i < raw.size(); ++i) {
    const auto c = turbo_colormap(shown[i]);
    out[i * 4 + 0] = c[0];
    out[i * 4 + 1] = c[1];
    out[i * 4 + 2] = c[2];
    out[i * 4 + 3] = (mask[i] && raw[i] >= 0.5f) ? 255 : 0;
  }
  return out;
}

std::vector<double> candidate_scales(double range, int n_increments) {
  if (!(range > 0) || n_increments < 1) throw Error("candidate_scales: need a positive range and increment count");
  std::vector<double> out(n_increments);
  for (int i = 0; i < n_increments; ++i) out[i] = range * (i + 1) / n_increments;
  return out;
}

namespace {

double map_objective(const RelevancyMap& map, ScaleObjective objective) {
  if (objective == ScaleObjective::MaxPixel) return map.max_score();
  std::vector<float> scores;
  for (size_t i = 0; i < map.raw.size(); ++i) {
    if (map.mask[i]) scores.push_back(map.raw[i]);
  }
  if (scores.empty()) return -1.0;
  const size_t top = std::max<size_t>(1, scores.size() / 100);
  std::partial_sort(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(top), scores.end(), std::greater<>());
  double sum = 0;
  for (size_t i = 0; i < top; ++i) sum += scores[i];
  return sum / static_cast<double>(top);
}

bool any_visible(const PreparedView& view) {
  return std::any_of(view.visible.begin(), view.visible.end(), [](std::uint8_t m) { return m != 0; });
}

}  // namespace

ScaleSelection select_scale(const PreparedView& view, const PreparedView& search_view, const FieldModel<float>& field,
                            const QueryContext& ctx, std::span<const double> scales, ScaleObjective objective) {
  if (scales.empty()) throw Error("select_scale: no candidate scales");
  if (!any_visible(view) || !any_visible(search_view)) throw Error("select_scale: no visible geometry");
  ScaleSelection sel;
  double best = -2.0;
  for (double s : scales) {
    const double value = map_objective(render_relevancy_map(search_view, field, ctx, s), objective);
    sel.objective.push_back(value);
    if (value > best) {
      best = value;
      sel.scale = s;
    }
  }
  sel.map = render_relevancy_map(view, field, ctx, sel.scale);
  return sel;
}

std::array<int, 2> localize(const RelevancyMap& map) {
  int best = -1;
  for (size_t i = 0; i < map.raw.size(); ++i) {
    if (!map.mask[i]) continue;
    if (best < 0 || map.raw[i] > map.raw[static_cast<size_t>(best)]) best = static_cast<int>(i);
  }
  if (best < 0) throw Error("localize: relevancy map is fully masked");
  return {best % map.width, best / map.width};
}

// ---------------------------------------------------------------------------
// Point cloud and existence

ScenePointCloud build_point_cloud(const FieldModel<float>& field, const RenderSettings& settings,
                                  const SceneDataset& dataset, std::span<const DepthView> depth_views,
                                  double voxel_size, int block, int min_views) {
  if (!(voxel_size > 0) || block < 1) throw Error("build_point_cloud: invalid voxel size or block");
  const Renderer<float> renderer(field, settings);
  ScenePointCloud cloud;
  std::map<std::tuple<long, long, long>, size_t> voxels;
  for (const auto& frame : dataset.frames) {
    const auto& k = frame.intrinsics;
    std::vector<std::pair<int, int>> pixels;
    for (int v = block / 2; v < k.height; v += block) {
      for (int u = block / 2; u < k.width; u += block) pixels.emplace_back(u, v);
    }
    std::vector<PixelRecord> records(pixels.size());
    std::vector<Vec3> points(pixels.size());
    tbb::parallel_for(size_t{0}, pixels.size(), [&](size_t i) {
      const Ray ray = generate_ray(frame.pose, k, pixels[i].first, pixels[i].second);
      records[i] = render_pixel(renderer, ray);
      points[i] = ray.origin + static_cast<double>(records[i].depth) * ray.direction;
    });
    for (size_t i = 0; i < pixels.size(); ++i) {
      if (records[i].accumulation < 0.5f || records[i].weights.size() == 0) continue;
      const Vec3& p = points[i];
      const auto key = std::make_tuple(static_cast<long>(std::floor(p.x() / voxel_size)),
                                       static_cast<long>(std::floor(p.y() / voxel_size)),
                                       static_cast<long>(std::floor(p.z() / voxel_size)));
      if (voxels.count(key)) continue;
      voxels.emplace(key, cloud.points.size());
      CloudPoint cp;
      cp.position = p;
      const auto vis = visibility_filter(p, depth_views, min_views);
      cp.view_count = vis.view_count;
      cp.kept = vis.keep;
      cp.features = std::move(records[i].features);
      cp.weights = std::move(records[i].weights);
      cloud.points.push_back(std::move(cp));
    }
  }
  return cloud;
}

ExistenceResult existence_check(const QueryContext& ctx, const ScenePointCloud& cloud, const FieldModel<float>& field,
                                double threshold, std::span<const double> scales) {
  ctx.validate();
  ExistenceResult result;
  result.max_score = 0;
  std::vector<const CloudPoint*> kept;
  for (const auto& p : cloud.points) {
    if (p.kept) kept.push_back(&p);
  }
  if (kept.empty()) {
    result.empty_cloud = true;
    return result;
  }
  // Concatenate all kept samples so each scale is one batched CLIP-head pass.
  Eigen::Index total = 0;
  for (const auto* p : kept) total += p->weights.size();
  Eigen::MatrixXf features(field.config().language_grid.output_dim(), total);
  Eigen::Index offset = 0;
  for (const auto* p : kept) {
    features.middleCols(offset, p->weights.size()) = p->features;
    offset += p->weights.size();
  }
  double best = -1.0;
  for (double s : scales) {
    const Eigen::MatrixXf clip = field.clip_from_features(features, static_cast<float>(s));
    offset = 0;
    for (const auto* p : kept) {
      const Eigen::Index k = p->weights.size();
      const Eigen::VectorXf raw = clip.middleCols(offset, k) * p->weights;
      offset += k;
      if (!(raw.norm() > 0)) continue;
      const double score = relevancy_score(raw.normalized().cast<double>(), ctx);
      if (score > best) {
        best = score;
        result.best_scale = s;
      }
    }
  }
  result.max_score = best;
  result.exists = best > threshold;
  return result;
}

std::array<std::uint8_t, 3> turbo_colormap(double x) {
  x = std::clamp(x, 0.0, 1.0);
  const double x2 = x * x, x3 = x2 * x, x4 = x3 * x, x5 = x4 * x;
  const double r = 0.13572138 + 4.61539260 * x - 42.66032258 * x2 + 132.13108234 * x3 - 152.94239396 * x4 + 59.28637943 * x5;
  const double g = 0.09140261 + 2.19418839 * x + 4.84296658 * x2 - 14.18503333 * x3 + 4.27729857 * x4 + 2.82956604 * x5;
  const double b = 0.10667330 + 12.64194608 * x - 60.58204836 * x2 + 110.36276771 * x3 - 89.90310912 * x4 + 27.34824973 * x5;
  const auto to_byte = [](double c) { return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0)); };
  return {to_byte(r), to_byte(g), to_byte(b)};
}

}  // namespace lerf
