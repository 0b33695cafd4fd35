#pragma once

#include "lerf/checkpoint.hpp"
#include "lerf/field.hpp"
#include "lerf/pyramid.hpp"
#include "lerf/render.hpp"
#include "lerf/scene_io.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace lerf {

struct TrainConfig {
  double lambda_lang = 0.01;
  double lambda_dino = 1.0;
  double lr_start = 1e-2;
  double lr_end = 1e-3;
  int lr_warm_steps = 5000;
  int max_steps = 30000;
  int rays_per_step = 1024;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-15;
  double weight_decay = 1e-9;
  std::uint64_t rng_seed = 0;

  bool enable_language = true;
  int checkpoint_interval = 0;  // 0: final checkpoint only
  int n_chunks = 8;             // fixed work split; part of the determinism contract
  // Per-ray uniform random background during training. Only valid when every ray ends on
  // opaque geometry; it removes the fog solution that matches a constant background.
  bool random_background = false;
  double init_hash_range = 1e-4;
  double init_density_bias = 0.0;

  FieldConfig field;
  RenderSettings render;
  PyramidConfig pyramid;

  void validate() const;
};

/// Reads the JSON config; keys mirror the TrainConfig field names, nested objects
/// "field", "render" and "pyramid" hold the sub-configs. Missing keys keep defaults.
TrainConfig load_train_config(const std::filesystem::path& path);
TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& config);

/// Independent random streams. Each purpose draws only from its own stream, so turning a
/// loss on or off never shifts the others.
struct RngStreams {
  std::mt19937_64 rays;
  std::mt19937_64 scales;
  std::mt19937_64 jitter;
  std::mt19937_64 background;

  explicit RngStreams(std::uint64_t seed);
};

struct TrainingRay {
  Ray ray;
  int frame_index = 0;
  double s_img = 0;
  Vec3 rgb = Vec3::Zero();
  Eigen::VectorXd lang_target;
  Eigen::VectorXd dino_target;
  RayJitter jitter;
  std::optional<Vec3> background;  // overrides the render background for this ray
};

/// Rays uniform over all pixels of all frames, s_img uniform in (s_min, s_max) per ray,
/// targets from the pyramid (whose layout must be attached).
std::vector<TrainingRay> sample_training_batch(const SceneDataset& dataset, const EmbeddingContainer& embeddings,
                                               const PyramidConfig& pyramid, const RenderSettings& render, int n_rays,
                                               RngStreams& rng, bool random_background = false);

/// -lambda * (phi . phi_gt); both inputs must be unit vectors (within 1e-3).
double language_loss(const Eigen::VectorXd& phi, const Eigen::VectorXd& phi_gt, double lambda_lang);
/// lambda * mean squared error.
double dino_loss(const Eigen::VectorXd& phi, const Eigen::VectorXd& phi_gt, double lambda_dino);
/// Mean squared error over all rays and channels.
double rgb_loss(std::span<const Vec3> colors, std::span<const Vec3> targets);

/// Exponential decay from lr_start to lr_end over lr_warm_steps, then constant.
double lr_at(std::int64_t step, const TrainConfig& config);

struct AdamState {
  Eigen::VectorXf m, v;
  std::int64_t steps = 0;
};

/// Adam with bias correction and decoupled weight decay. Throws, naming the parameter
/// block, on a non-finite gradient.
void adam_step(FieldModel<float>& field, AdamState& state, const GradientBuffer<float>& grad, double lr,
               const TrainConfig& config);

struct LossWeights {
  double lambda_lang = 0.01;
  double lambda_dino = 1.0;
  bool language = true;
  double batch_scale = 1.0;  // 1 / rays in batch
};

struct LossBreakdown {
  double rgb = 0, lang = 0, dino = 0;

  double total() const { return rgb + lang + dino; }
  LossBreakdown& operator+=(const LossBreakdown& o) {
    rgb += o.rgb;
    lang += o.lang;
    dino += o.dino;
    return *this;
  }
};

/// Batch-averaged loss contribution of one ray with a fixed sample plan; accumulates
/// exact gradients into `grad` when given. Language weights come from the radiance pass
/// as constants, so language terms never reach radiance parameters.
template <typename Scalar>
LossBreakdown ray_loss(const Renderer<Scalar>& renderer, const TrainingRay& sample, const SamplePlan& plan,
                       const CameraIntrinsics& intrinsics, const LossWeights& weights, GradientBuffer<Scalar>* grad);

extern template LossBreakdown ray_loss<float>(const Renderer<float>&, const TrainingRay&, const SamplePlan&,
                                              const CameraIntrinsics&, const LossWeights&, GradientBuffer<float>*);
extern template LossBreakdown ray_loss<double>(const Renderer<double>&, const TrainingRay&, const SamplePlan&,
                                               const CameraIntrinsics&, const LossWeights&, GradientBuffer<double>*);

struct LossRow {
  std::int64_t step = 0;
  double rgb = 0, lang = 0, dino = 0, lr = 0;
};

/// Raised when a loss becomes non-finite; the message carries the step and batch summary.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// Joint optimization of both fields.
class Trainer {
 public:
  /// `embeddings` gets its crop layout attached against the dataset's image size.
  Trainer(TrainConfig config, const SceneDataset& dataset, EmbeddingContainer embeddings);

  /// One optimizer step; returns the batch losses.
  LossRow step();
  /// Runs until max_steps. `on_checkpoint` fires at every checkpoint interval and at the end.
  std::vector<LossRow> run(const std::function<void(const Checkpoint&)>& on_checkpoint = {});

  Checkpoint checkpoint() const;
  const FieldModel<float>& field() const { return field_; }
  std::int64_t current_step() const { return step_; }
  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  const SceneDataset& dataset_;
  EmbeddingContainer embeddings_;
  FieldModel<float> field_;
  AdamState adam_;
  RngStreams rng_;
  std::int64_t step_ = 0;
};

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows);

}  // namespace lerf
