#include "lerf/train.hpp"

#include "json.hpp"

#include <tbb/parallel_for.h>

#include <cmath>
#include <fstream>
#include <sstream>

namespace lerf {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (!(lambda_lang > 0)) throw Error("train config: lambda_lang must be positive");
  if (!(lambda_dino >= 0)) throw Error("train config: lambda_dino must be non-negative");
  if (!(lr_start > lr_end && lr_end > 0)) throw Error("train config: require lr_start > lr_end > 0");
  if (lr_warm_steps < 1) throw Error("train config: lr_warm_steps must be >= 1");
  if (max_steps < 0) throw Error("train config: max_steps must be >= 0");
  if (rays_per_step < 1) throw Error("train config: rays_per_step must be >= 1");
  if (n_chunks < 1) throw Error("train config: n_chunks must be >= 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw Error("train config: Adam betas must lie in [0, 1)");
  }
  field.validate();
  render.validate();
  pyramid.validate();
  if (pyramid.embed_dim != field.embed_dim()) throw Error("train config: pyramid embed_dim differs from clip head output");
}

namespace {

void read_grid(const json& j, HashGridConfig& g) {
  g.n_levels = j.value("n_levels", g.n_levels);
  g.base_resolution = j.value("base_resolution", g.base_resolution);
  g.max_resolution = j.value("max_resolution", g.max_resolution);
  g.table_size = j.value("table_size", g.table_size);
  g.features_per_level = j.value("features_per_level", g.features_per_level);
}

json write_grid(const HashGridConfig& g) {
  return {{"n_levels", g.n_levels},
          {"base_resolution", g.base_resolution},
          {"max_resolution", g.max_resolution},
          {"table_size", g.table_size},
          {"features_per_level", g.features_per_level}};
}

void read_mlp(const json& j, MLPConfig& m) {
  m.hidden_layers = j.value("hidden_layers", m.hidden_layers);
  m.hidden_width = j.value("hidden_width", m.hidden_width);
  m.out_dim = j.value("out_dim", m.out_dim);
}

json write_mlp(const MLPConfig& m) {
  return {{"hidden_layers", m.hidden_layers}, {"hidden_width", m.hidden_width}, {"out_dim", m.out_dim}};
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw LoadError(std::string("train config: ") + e.what());
  }
  TrainConfig c;
  try {
    c.lambda_lang = j.value("lambda_lang", c.lambda_lang);
    c.lambda_dino = j.value("lambda_dino", c.lambda_dino);
    c.lr_start = j.value("lr_start", c.lr_start);
    c.lr_end = j.value("lr_end", c.lr_end);
    c.lr_warm_steps = j.value("lr_warm_steps", c.lr_warm_steps);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.rays_per_step = j.value("rays_per_step", c.rays_per_step);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.enable_language = j.value("enable_language", c.enable_language);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.n_chunks = j.value("n_chunks", c.n_chunks);
    c.random_background = j.value("random_background", c.random_background);
    c.init_hash_range = j.value("init_hash_range", c.init_hash_range);
    c.init_density_bias = j.value("init_density_bias", c.init_density_bias);
    if (j.contains("field")) {
      const auto& f = j["field"];
      if (f.contains("language_grid")) read_grid(f["language_grid"], c.field.language_grid);
      if (f.contains("clip_head")) read_mlp(f["clip_head"], c.field.clip_head);
      if (f.contains("dino_head")) read_mlp(f["dino_head"], c.field.dino_head);
      if (f.contains("radiance_grid")) read_grid(f["radiance_grid"], c.field.radiance_grid);
      if (f.contains("density_head")) read_mlp(f["density_head"], c.field.density_head);
      if (f.contains("color_head")) read_mlp(f["color_head"], c.field.color_head);
    }
    if (j.contains("render")) {
      const auto& r = j["render"];
      c.render.near = r.value("near", c.render.near);
      c.render.far = r.value("far", c.render.far);
      c.render.n_coarse = r.value("n_coarse", c.render.n_coarse);
      c.render.n_fine = r.value("n_fine", c.render.n_fine);
      c.render.n_language = r.value("n_language", c.render.n_language);
      c.render.scene_radius = r.value("scene_radius", c.render.scene_radius);
      if (r.contains("background")) {
        const auto bg = r["background"].get<std::vector<double>>();
        if (bg.size() != 3) throw Error("train config: render.background needs 3 values");
        c.render.background = Vec3(bg[0], bg[1], bg[2]);
      }
      const std::string mode = r.value("frustum", std::string("backprojection"));
      if (mode == "printed") {
        c.render.frustum = FrustumScaleMode::AsPrinted;
      } else if (mode == "backprojection") {
        c.render.frustum = FrustumScaleMode::BackProjection;
      } else {
        throw Error("train config: render.frustum must be 'backprojection' or 'printed'");
      }
    }
    if (j.contains("pyramid")) {
      const auto& p = j["pyramid"];
      c.pyramid.s_min = p.value("s_min", c.pyramid.s_min);
      c.pyramid.s_max = p.value("s_max", c.pyramid.s_max);
      c.pyramid.n_levels = p.value("n_levels", c.pyramid.n_levels);
      c.pyramid.overlap = p.value("overlap", c.pyramid.overlap);
      c.pyramid.embed_dim = p.value("embed_dim", c.pyramid.embed_dim);
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("train config: ") + e.what());
  }
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return train_config_from_json(ss.str());
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["lambda_lang"] = c.lambda_lang;
  j["lambda_dino"] = c.lambda_dino;
  j["lr_start"] = c.lr_start;
  j["lr_end"] = c.lr_end;
  j["lr_warm_steps"] = c.lr_warm_steps;
  j["max_steps"] = c.max_steps;
  j["rays_per_step"] = c.rays_per_step;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["weight_decay"] = c.weight_decay;
  j["rng_seed"] = c.rng_seed;
  j["enable_language"] = c.enable_language;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["n_chunks"] = c.n_chunks;
  j["random_background"] = c.random_background;
  j["init_hash_range"] = c.init_hash_range;
  j["init_density_bias"] = c.init_density_bias;
  j["field"] = {{"language_grid", write_grid(c.field.language_grid)},
                {"clip_head", write_mlp(c.field.clip_head)},
                {"dino_head", write_mlp(c.field.dino_head)},
                {"radiance_grid", write_grid(c.field.radiance_grid)},
                {"density_head", write_mlp(c.field.density_head)},
                {"color_head", write_mlp(c.field.color_head)}};
  j["render"] = {{"near", c.render.near},
                 {"far", c.render.far},
                 {"n_coarse", c.render.n_coarse},
                 {"n_fine", c.render.n_fine},
                 {"n_language", c.render.n_language},
                 {"scene_radius", c.render.scene_radius},
                 {"background", {c.render.background.x(), c.render.background.y(), c.render.background.z()}},
                 {"frustum", c.render.frustum == FrustumScaleMode::AsPrinted ? "printed" : "backprojection"}};
  j["pyramid"] = {{"s_min", c.pyramid.s_min},
                  {"s_max", c.pyramid.s_max},
                  {"n_levels", c.pyramid.n_levels},
                  {"overlap", c.pyramid.overlap},
                  {"embed_dim", c.pyramid.embed_dim}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Sampling

RngStreams::RngStreams(std::uint64_t seed) {
  const auto stream = [seed](std::uint64_t id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(id)};
    return std::mt19937_64(seq);
  };
  rays = stream(1);
  scales = stream(2);
  jitter = stream(3);
  background = stream(4);
}

std::vector<TrainingRay> sample_training_batch(const SceneDataset& dataset, const EmbeddingContainer& embeddings,
                                               const PyramidConfig& pyramid, const RenderSettings& render, int n_rays,
                                               RngStreams& rng, bool random_background) {
  if (dataset.frames.empty()) throw Error("sample_training_batch: empty dataset");
  if (embeddings.frames.size() != dataset.frames.size() || embeddings.dino.size() != dataset.frames.size()) {
    throw Error("sample_training_batch: embedding container frame count differs from dataset");
  }
  const auto& k = dataset.frames.front().intrinsics;
  const std::uint64_t pixels_per_frame = static_cast<std::uint64_t>(k.width) * k.height;
  std::uniform_int_distribution<std::uint64_t> pick(0, pixels_per_frame * dataset.frames.size() - 1);
  std::uniform_real_distribution<double> scale(pyramid.s_min, pyramid.s_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<TrainingRay> batch(n_rays);
  for (auto& s : batch) {
    const std::uint64_t idx = pick(rng.rays);
    s.frame_index = static_cast<int>(idx / pixels_per_frame);
    const int pixel = static_cast<int>(idx % pixels_per_frame);
    const int u = pixel % k.width, v = pixel / k.width;
    const Frame& frame = dataset.frames[s.frame_index];
    s.ray = generate_ray(frame, u, v);
    s.rgb = frame.image.at(u, v).cast<double>();
    s.s_img = scale(rng.scales);
    s.jitter.coarse.resize(render.n_coarse);
    s.jitter.fine.resize(render.n_fine);
    for (double& x : s.jitter.coarse) x = unit(rng.jitter);
    for (double& x : s.jitter.fine) x = unit(rng.jitter);
    if (random_background) s.background = Vec3(unit(rng.background), unit(rng.background), unit(rng.background));
    s.lang_target = interpolate_language_target(embeddings.frames[s.frame_index], u + 0.5, v + 0.5, s.s_img);
    s.dino_target = sample_dino_target(embeddings.dino[s.frame_index], u + 0.5, v + 0.5);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Losses and schedule

double language_loss(const Eigen::VectorXd& phi, const Eigen::VectorXd& phi_gt, double lambda_lang) {
  if (phi.size() != phi_gt.size()) throw Error("language_loss: dimension mismatch");
  if (std::abs(phi.norm() - 1.0) > 1e-3 || std::abs(phi_gt.norm() - 1.0) > 1e-3) {
    throw Error("language_loss: inputs must be unit vectors");
  }
  return -lambda_lang * phi.dot(phi_gt);
}

double dino_loss(const Eigen::VectorXd& phi, const Eigen::VectorXd& phi_gt, double lambda_dino) {
  if (phi.size() != phi_gt.size() || phi.size() == 0) throw Error("dino_loss: dimension mismatch");
  return lambda_dino * (phi - phi_gt).squaredNorm() / static_cast<double>(phi.size());
}

double rgb_loss(std::span<const Vec3> colors, std::span<const Vec3> targets) {
  if (colors.size() != targets.size() || colors.empty()) throw Error("rgb_loss: size mismatch");
  double sum = 0;
  for (size_t i = 0; i < colors.size(); ++i) sum += (colors[i] - targets[i]).squaredNorm();
  return sum / (3.0 * static_cast<double>(colors.size()));
}

double lr_at(std::int64_t step, const TrainConfig& config) {
  const double progress =
      static_cast<double>(std::clamp<std::int64_t>(step, 0, config.lr_warm_steps)) / config.lr_warm_steps;
  return config.lr_start * std::pow(config.lr_end / config.lr_start, progress);
}

void adam_step(FieldModel<float>& field, AdamState& state, const GradientBuffer<float>& grad, double lr,
               const TrainConfig& config) {
  const auto& layout = field.layout();
  const auto n = static_cast<Eigen::Index>(layout.total);
  if (grad.values.size() != n) throw Error("adam_step: gradient size mismatch");
  if (!grad.values.allFinite()) {
    for (const auto& block : layout.blocks) {
      if (!grad.values.segment(static_cast<Eigen::Index>(block.offset), static_cast<Eigen::Index>(block.size)).allFinite()) {
        throw Error("adam_step: non-finite gradient in parameter block '" + block.name + "'");
      }
    }
  }
  if (state.m.size() != n) {
    state.m = Eigen::VectorXf::Zero(n);
    state.v = Eigen::VectorXf::Zero(n);
    state.steps = 0;
  }
  ++state.steps;
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.steps));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.steps));
  const float step_size = static_cast<float>(lr / c1);
  const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  const float eps = static_cast<float>(config.adam_eps);
  const float decay = static_cast<float>(lr * config.weight_decay);
  const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);

  auto& p = field.params();
  for (Eigen::Index i = 0; i < n; ++i) {
    const float g = grad.values[i];
    state.m[i] = fb1 * state.m[i] + (1.0f - fb1) * g;
    state.v[i] = fb2 * state.v[i] + (1.0f - fb2) * g * g;
    const float denom = std::sqrt(state.v[i]) * inv_sqrt_c2 + eps;
    p[i] -= step_size * state.m[i] / denom + decay * p[i];
  }
}

// ---------------------------------------------------------------------------
// Per-ray loss and gradients

template <typename Scalar>
LossBreakdown ray_loss(const Renderer<Scalar>& renderer, const TrainingRay& sample, const SamplePlan& plan,
                       const CameraIntrinsics& intrinsics, const LossWeights& lw, GradientBuffer<Scalar>* grad) {
  const auto& field = renderer.field();
  const auto& settings = renderer.settings();
  const Ray& ray = sample.ray;
  const auto n = static_cast<Eigen::Index>(plan.depths.size());
  const Scalar batch = static_cast<Scalar>(lw.batch_scale);
  LossBreakdown loss;

  // Radiance pass.
  const Matrix3X<Scalar> x = sample_positions<Scalar>(ray, plan.depths, settings.scene_radius);
  const Matrix3X<Scalar> dirs = ray.direction.template cast<Scalar>().replicate(1, n);
  RadianceTape<Scalar> rtape;
  const auto radiance = field.eval_radiance(x, dirs, grad ? &rtape : nullptr);
  VectorX<Scalar> delta(n);
  for (Eigen::Index i = 0; i < n; ++i) delta[i] = static_cast<Scalar>(plan.deltas[i]);
  const auto cw = compute_weights<Scalar>(radiance.sigma, delta);
  const Eigen::Matrix<Scalar, 3, 1> bg = sample.background.value_or(settings.background).template cast<Scalar>();
  const Eigen::Matrix<Scalar, 3, 1> color = radiance.rgb * cw.weights + cw.final_transmittance * bg;
  const Eigen::Matrix<Scalar, 3, 1> diff = color - sample.rgb.template cast<Scalar>();
  loss.rgb = static_cast<double>(diff.squaredNorm() / Scalar(3) * batch);

  if (grad) {
    const Eigen::Matrix<Scalar, 3, 1> g_color = Scalar(2) * diff / Scalar(3) * batch;
    const Matrix3X<Scalar> g_rgb = g_color * cw.weights.transpose();
    // d color / d tau_k = T_{k+1} c_k - sum_{i>k} w_i c_i - T_N bg, with tau = sigma * delta.
    VectorX<Scalar> g_sigma(n);
    const Scalar bg_term = cw.final_transmittance * bg.dot(g_color);
    Scalar suffix = 0;
    for (Eigen::Index k = n - 1; k >= 0; --k) {
      const Scalar q = radiance.rgb.col(k).dot(g_color);
      const Scalar t_next = k + 1 < n ? cw.transmittance[k + 1] : cw.final_transmittance;
      g_sigma[k] = delta[k] * (t_next * q - suffix - bg_term);
      suffix += cw.weights[k] * q;
    }
    field.radiance_backward(rtape, g_rgb, g_sigma, *grad);
  }

  if (!lw.language) return loss;

  // Language pass over the top-weight subset, weights held constant.
  RgbRender<Scalar> rgb;
  rgb.plan = plan;
  rgb.weights = cw;
  const auto rec = renderer.language_samples(ray, rgb, sample.s_img, intrinsics);
  VectorX<Scalar> scales(static_cast<Eigen::Index>(rec.scales.size()));
  for (size_t i = 0; i < rec.scales.size(); ++i) scales[static_cast<Eigen::Index>(i)] = static_cast<Scalar>(rec.scales[i]);
  LanguageTape<Scalar> ltape;
  const auto lang = field.eval_language(rec.positions, scales, grad ? &ltape : nullptr);

  const auto emb = composite_normalized<Scalar>(lang.clip, rec.weights);
  const VectorX<Scalar> gt_lang = sample.lang_target.cast<Scalar>();
  MatrixX<Scalar> g_clip = MatrixX<Scalar>::Zero(lang.clip.rows(), lang.clip.cols());
  if (!emb.empty) {
    const Scalar lambda = static_cast<Scalar>(lw.lambda_lang);
    loss.lang = static_cast<double>(-lambda * emb.value.dot(gt_lang) * batch);
    if (grad) {
      const VectorX<Scalar> g_phi = -lambda * batch * gt_lang;
      const VectorX<Scalar> g_raw = (g_phi - emb.value * emb.value.dot(g_phi)) / emb.raw.norm();
      g_clip = g_raw * rec.weights.transpose();
    }
  }

  const VectorX<Scalar> dino = composite<Scalar>(lang.dino, rec.weights);
  const VectorX<Scalar> d_diff = dino - sample.dino_target.cast<Scalar>();
  const Scalar lambda_dino = static_cast<Scalar>(lw.lambda_dino);
  const Scalar dims = static_cast<Scalar>(d_diff.size());
  loss.dino = static_cast<double>(lambda_dino * d_diff.squaredNorm() / dims * batch);

  if (grad) {
    const VectorX<Scalar> g_dino_vec = Scalar(2) * lambda_dino * batch / dims * d_diff;
    const MatrixX<Scalar> g_dino = g_dino_vec * rec.weights.transpose();
    field.language_backward(ltape, g_clip, g_dino, *grad);
  }
  return loss;
}

template LossBreakdown ray_loss<float>(const Renderer<float>&, const TrainingRay&, const SamplePlan&,
                                       const CameraIntrinsics&, const LossWeights&, GradientBuffer<float>*);
template LossBreakdown ray_loss<double>(const Renderer<double>&, const TrainingRay&, const SamplePlan&,
                                        const CameraIntrinsics&, const LossWeights&, GradientBuffer<double>*);

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, const SceneDataset& dataset, EmbeddingContainer embeddings)
    : config_(std::move(config)),
      dataset_(dataset),
      embeddings_(std::move(embeddings)),
      field_(config_.field),
      rng_(config_.rng_seed) {
  config_.validate();
  if (dataset_.frames.size() < 2) throw Error("trainer: dataset needs at least 2 frames");
  if (embeddings_.frames.size() != dataset_.frames.size()) {
    throw Error("trainer: embedding container has " + std::to_string(embeddings_.frames.size()) +
                " frames, dataset has " + std::to_string(dataset_.frames.size()));
  }
  if (embeddings_.dino_dim != config_.field.dino_dim()) {
    throw Error("trainer: container DINO dim " + std::to_string(embeddings_.dino_dim) + " differs from dino head output " +
                std::to_string(config_.field.dino_dim()));
  }
  const auto& k = dataset_.frames.front().intrinsics;
  attach_layout(embeddings_, k.width, k.height, config_.pyramid);
  attach_dino_strides(embeddings_, k.width, k.height);
  field_.initialize(config_.rng_seed, config_.init_hash_range, config_.init_density_bias);
}

LossRow Trainer::step() {
  const double lr = lr_at(step_, config_);
  const auto batch = sample_training_batch(dataset_, embeddings_, config_.pyramid, config_.render,
                                           config_.rays_per_step, rng_, config_.random_background);
  const Renderer<float> renderer(field_, config_.render);
  LossWeights lw;
  lw.lambda_lang = config_.lambda_lang;
  lw.lambda_dino = config_.lambda_dino;
  lw.language = config_.enable_language;
  lw.batch_scale = 1.0 / static_cast<double>(batch.size());

  const int chunks = std::min<int>(config_.n_chunks, static_cast<int>(batch.size()));
  std::vector<GradientBuffer<float>> grads(chunks, GradientBuffer<float>(field_.layout().total));
  std::vector<LossBreakdown> losses(chunks);
  tbb::parallel_for(0, chunks, [&](int c) {
    const size_t begin = batch.size() * c / chunks;
    const size_t end = batch.size() * (c + 1) / chunks;
    for (size_t i = begin; i < end; ++i) {
      const auto& s = batch[i];
      const auto& k = dataset_.frames[s.frame_index].intrinsics;
      const SamplePlan plan = renderer.sample_ray(s.ray, &s.jitter);
      losses[c] += ray_loss<float>(renderer, s, plan, k, lw, &grads[c]);
    }
  });
  LossBreakdown total;
  for (int c = 0; c < chunks; ++c) total += losses[c];
  for (int c = 1; c < chunks; ++c) grads[0].values += grads[c].values;

  if (!std::isfinite(total.total())) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step_ << " (rgb=" << total.rgb << ", lang=" << total.lang
        << ", dino=" << total.dino << ", lr=" << lr << ", rays=" << batch.size() << ", first frame="
        << batch.front().frame_index << ")";
    throw TrainingDiverged(msg.str());
  }
  adam_step(field_, adam_, grads[0], lr, config_);
  LossRow row{step_, total.rgb, total.lang, total.dino, lr};
  ++step_;
  return row;
}

std::vector<LossRow> Trainer::run(const std::function<void(const Checkpoint&)>& on_checkpoint) {
  std::vector<LossRow> rows;
  while (step_ < config_.max_steps) {
    rows.push_back(step());
    if (on_checkpoint && config_.checkpoint_interval > 0 && step_ % config_.checkpoint_interval == 0 &&
        step_ < config_.max_steps) {
      on_checkpoint(checkpoint());
    }
  }
  if (on_checkpoint) on_checkpoint(checkpoint());
  return rows;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.field = config_.field;
  c.render = config_.render;
  c.step = static_cast<std::uint64_t>(step_);
  c.params = field_.params();
  return c;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write loss trace " + path.string());
  out << "step,rgb,lang,dino,lr\n";
  out.precision(9);
  for (const auto& r : rows) out << r.step << ',' << r.rgb << ',' << r.lang << ',' << r.dino << ',' << r.lr << '\n';
}

}  // namespace lerf
