#pragma once

#include "lerf/common.hpp"
#include "lerf/field.hpp"
#include "lerf/image_io.hpp"
#include "lerf/render.hpp"
#include "lerf/scene_io.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lerf {

inline const std::vector<std::string> kCanonicalPhrases = {"object", "things", "stuff", "texture"};
inline constexpr double kDefaultTemperature = 10.0;
inline constexpr int kMinVisibleViews = 5;
inline constexpr double kOcclusionTolerance = 0.01;  // fraction of rendered depth

struct QueryContext {
  Eigen::VectorXd query;
  std::vector<Eigen::VectorXd> canonicals;
  std::vector<std::string> labels;
  double temperature = kDefaultTemperature;

  void validate() const;
};

/// min over canonicals of exp(t q) / (exp(t c_i) + exp(t q)), where q and c_i are the
/// similarities of the rendered embedding to the query and to canonical i.
double relevancy_score(const Eigen::VectorXd& phi, const QueryContext& ctx);

/// Rendered depth of one training view, for visibility tests.
struct DepthView {
  CameraPose pose;
  CameraIntrinsics intrinsics;
  std::vector<float> depth;
  std::vector<float> accumulation;
};

struct VisibilityResult {
  int view_count = 0;
  bool keep = false;
};

/// Counts views in which the point projects inside the image and its distance from the
/// camera agrees with that pixel's rendered depth within `tolerance` * depth.
VisibilityResult visibility_filter(const Vec3& point, std::span<const DepthView> views, int min_views = kMinVisibleViews,
                                   double tolerance = kOcclusionTolerance);

std::vector<DepthView> render_depth_views(const FieldModel<float>& field, const RenderSettings& settings,
                                          const SceneDataset& dataset, int downsample = 1);

/// Intrinsics for an image reduced by an integer factor.
CameraIntrinsics downsample_intrinsics(const CameraIntrinsics& k, int factor);

/// Scale-independent rendering state of one view: radiance outputs plus the language
/// samples (grid features and fixed weights) of every pixel. Relevancy maps at any scale
/// only re-run the CLIP head.
struct PreparedView {
  int view_id = 0;
  CameraPose pose;
  CameraIntrinsics intrinsics;
  Image color;
  std::vector<float> depth;
  std::vector<float> accumulation;
  std::vector<std::uint8_t> visible;  // 1: scored pixel

  Eigen::MatrixXf features;  // language grid features, one column per retained sample
  Eigen::VectorXf weights;
  std::vector<int> sample_begin;  // per pixel, size pixels + 1

  int width() const { return intrinsics.width; }
  int height() const { return intrinsics.height; }
  size_t pixels() const { return static_cast<size_t>(intrinsics.width) * intrinsics.height; }
};

/// Samples whose weight is at most this are dropped from PreparedView.
inline constexpr float kNegligibleWeight = 1e-7f;

PreparedView prepare_view(const FieldModel<float>& field, const RenderSettings& settings, const CameraPose& pose,
                          const CameraIntrinsics& intrinsics, int view_id);

/// Masks pixels whose surface point is seen by fewer than `min_views` depth views.
/// Empty rays are always masked.
void apply_visibility(PreparedView& view, std::span<const DepthView> views, int min_views = kMinVisibleViews);

struct RelevancyMap {
  int width = 0, height = 0;
  int view_id = 0;
  double scale = 0;  // world units
  std::vector<float> raw;
  std::vector<std::uint8_t> mask;  // 1: scored

  float max_score() const;  // -1 when fully masked
  /// Raw score mapped affinely from 0.5 -> 0 to max -> 1 (clamped); masked pixels are 0.
  std::vector<float> display() const;
  /// RGBA overlay: colormapped display value; alpha 0 where raw < 0.5 or masked.
  std::vector<std::uint8_t> overlay_rgba() const;
};

/// Rendered language embedding of every pixel at one scale.
std::vector<Eigen::VectorXf> render_embeddings(const PreparedView& view, const FieldModel<float>& field, double scale);

RelevancyMap render_relevancy_map(const PreparedView& view, const FieldModel<float>& field, const QueryContext& ctx,
                                  double scale);

enum class ScaleObjective { MaxPixel, MeanTopPercent };

/// n increments evenly spaced over (0, range], excluding 0.
std::vector<double> candidate_scales(double range, int n_increments);

struct ScaleSelection {
  double scale = 0;
  RelevancyMap map;
  std::vector<double> objective;  // per candidate
};

/// Evaluates every candidate scale on `search_view` (the view itself or a downsampled
/// copy) and keeps the first scale attaining the best objective; the returned map is
/// rendered on `view` at that scale.
ScaleSelection select_scale(const PreparedView& view, const PreparedView& search_view, const FieldModel<float>& field,
                            const QueryContext& ctx, std::span<const double> scales,
                            ScaleObjective objective = ScaleObjective::MaxPixel);

/// Highest raw score pixel among unmasked pixels, ties to the lowest (v, then u).
std::array<int, 2> localize(const RelevancyMap& map);

struct CloudPoint {
  Vec3 position = Vec3::Zero();
  int view_count = 0;
  bool kept = false;
  Eigen::MatrixXf features;
  Eigen::VectorXf weights;
};

struct ScenePointCloud {
  std::vector<CloudPoint> points;
};

/// One point per `block` x `block` pixel block per view at the rendered depth, merged on a
/// voxel grid of `voxel_size` world units; visibility filtering marks kept points.
ScenePointCloud build_point_cloud(const FieldModel<float>& field, const RenderSettings& settings,
                                  const SceneDataset& dataset, std::span<const DepthView> depth_views,
                                  double voxel_size, int block = 4, int min_views = kMinVisibleViews);

struct ExistenceResult {
  bool exists = false;
  double max_score = 0;
  double best_scale = 0;
  bool empty_cloud = false;
};

/// True when any kept point scores above `threshold` at any candidate scale.
ExistenceResult existence_check(const QueryContext& ctx, const ScenePointCloud& cloud, const FieldModel<float>& field,
                                double threshold, std::span<const double> scales);

/// Approximate Turbo colormap, x in [0, 1].
std::array<std::uint8_t, 3> turbo_colormap(double x);

}  // namespace lerf
