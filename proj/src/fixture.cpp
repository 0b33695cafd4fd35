#include "lerf/fixture.hpp"

#include "json.hpp"
#include "lerf/query.hpp"

#include <Eigen/Geometry>
#include <Eigen/QR>

#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace lerf {

using json = nlohmann::json;

namespace {

// Slab test; returns entry distance and the outward normal of the entry face.
std::optional<std::pair<double, Vec3>> intersect_box(const Ray& ray, const AxisBox& box) {
  double t0 = 0, t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0;
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.direction[a];
    if (std::abs(d) < 1e-12) {
      if (o < box.lo[a] || o > box.hi[a]) return std::nullopt;
      continue;
    }
    double near = (box.lo[a] - o) / d, far = (box.hi[a] - o) / d;
    double s = -1;
    if (near > far) {
      std::swap(near, far);
      s = 1;
    }
    if (near > t0) {
      t0 = near;
      axis = a;
      sign = s;
    }
    t1 = std::min(t1, far);
    if (t0 > t1) return std::nullopt;
  }
  if (axis < 0) return std::nullopt;  // origin inside the box
  Vec3 n = Vec3::Zero();
  n[axis] = sign;
  return std::make_pair(t0, n);
}

double shade(const Vec3& normal, const Vec3& light) { return 0.35 + 0.65 * std::max(0.0, normal.dot(light)); }

// Lattice value noise in [0, 1]: smooth and non-periodic, so multi-view matching has one answer.
double value_noise(const Vec3& p) {
  const auto lattice = [](long x, long y, long z) {
    std::uint64_t h = static_cast<std::uint64_t>(x) * 0x9E3779B97F4A7C15ull ^ static_cast<std::uint64_t>(y) * 0xC2B2AE3D27D4EB4Full ^
                      static_cast<std::uint64_t>(z) * 0x165667B19E3779F9ull;
    h ^= h >> 31;
    h *= 0xBF58476D1CE4E5B9ull;
    h ^= h >> 29;
    return static_cast<double>(h >> 11) / static_cast<double>(1ull << 53);
  };
  const Vec3 f = p.array().floor();
  const Vec3 t = p - f;
  const Vec3 w = t.array() * t.array() * (3.0 - 2.0 * t.array());  // smoothstep
  const long x0 = static_cast<long>(f.x()), y0 = static_cast<long>(f.y()), z0 = static_cast<long>(f.z());
  double out = 0;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    out += (dx ? w.x() : 1 - w.x()) * (dy ? w.y() : 1 - w.y()) * (dz ? w.z() : 1 - w.z()) *
           lattice(x0 + dx, y0 + dy, z0 + dz);
  }
  return out;
}

// Albedo modulation in [0.55, 1.1]. Untextured surfaces leave depth unconstrained by photometric loss.
double texture(const Vec3& p) { return 0.55 + 0.35 * value_noise(p / 0.25) + 0.2 * value_noise(p / 0.07); }

}  // namespace

FixtureScene::Hit FixtureScene::trace(const Ray& ray) const {
  Hit hit;
  hit.t = std::numeric_limits<double>::infinity();
  if (ray.direction.y() < -1e-9) {
    const double t = -ray.origin.y() / ray.direction.y();
    if (t > 0) {
      const Vec3 p = ray.origin + t * ray.direction;
      const bool on_rug = p.x() >= rug.lo.x() && p.x() <= rug.hi.x() && p.z() >= rug.lo.z() && p.z() <= rug.hi.z();
      hit.t = t;
      hit.region = on_rug ? kRug : kFloor;
      hit.color = (on_rug ? rug.albedo : floor_albedo) * texture(p) * shade(Vec3::UnitY(), light_dir);
    }
  }
  const std::array<std::pair<const AxisBox*, int>, 2> boxes = {{{&box_a, kBoxA}, {&box_b, kBoxB}}};
  for (const auto& [box, region] : boxes) {
    const auto h = intersect_box(ray, *box);
    if (h && h->first < hit.t) {
      hit.t = h->first;
      hit.region = region;
      hit.color = box->albedo * texture(ray.origin + h->first * ray.direction) * shade(h->second, light_dir);
    }
  }
  return hit;
}

CameraIntrinsics fixture_intrinsics(const FixtureOptions& o) {
  CameraIntrinsics k;
  k.fx = k.fy = o.focal;
  k.cx = o.width / 2.0;
  k.cy = o.height / 2.0;
  k.width = o.width;
  k.height = o.height;
  return k;
}

std::vector<CameraPose> fixture_cameras(const FixtureOptions& o) {
  const Vec3 target(0.0, 0.1, 0.0);
  std::vector<CameraPose> poses;
  for (int i = 0; i < o.n_cameras; ++i) {
    const double theta = 2.0 * M_PI * i / o.n_cameras;
    // Alternate heights a little so the views are not coplanar.
    const double h = o.ring_height + ((i % 2) ? 0.15 : -0.15);
    const Vec3 center(o.ring_radius * std::cos(theta), h, o.ring_radius * std::sin(theta));
    const Vec3 forward = (target - center).normalized();
    const Vec3 right = forward.cross(Vec3::UnitY()).normalized();
    const Vec3 up = right.cross(forward);
    CameraPose pose;
    pose.camera_to_world.block<3, 1>(0, 0) = right;
    pose.camera_to_world.block<3, 1>(0, 1) = up;
    pose.camera_to_world.block<3, 1>(0, 2) = -forward;
    pose.camera_to_world.block<3, 1>(0, 3) = center;
    poses.push_back(pose);
  }
  return poses;
}

std::vector<int> render_labels(const FixtureScene& scene, const CameraPose& pose, const CameraIntrinsics& k) {
  std::vector<int> labels(static_cast<size_t>(k.width) * k.height);
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      labels[static_cast<size_t>(v) * k.width + u] = scene.trace(generate_ray(pose, k, u, v)).region;
    }
  }
  return labels;
}

Image render_image(const FixtureScene& scene, const CameraPose& pose, const CameraIntrinsics& k) {
  Image img(k.width, k.height);
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      img.set(u, v, scene.trace(generate_ray(pose, k, u, v)).color.cast<float>());
    }
  }
  return img;
}

FixtureEmbeddings fixture_embeddings(std::uint64_t seed, int dim) {
  if (dim < 2 * kNumRegions) throw Error("fixture embeddings need at least " + std::to_string(2 * kNumRegions) + " dims");
  std::mt19937_64 rng(seed ^ 0x5eedf1c7u);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd m(dim, dim);
  for (int i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
  FixtureEmbeddings out;
  for (int i = 0; i < kNumRegions; ++i) out.regions.push_back(q.col(i));
  for (int i = kNumRegions; i < 2 * kNumRegions; ++i) out.negatives.push_back(q.col(i));
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
  for (const auto& r : out.regions) sum += r;
  for (size_t i = 0; i < kCanonicalPhrases.size(); ++i) {
    out.canonicals.push_back((sum + out.regions[i % out.regions.size()]).normalized());
  }
  return out;
}

FeaturePyramid label_pyramid(const std::vector<int>& labels, int width, int height, const PyramidConfig& config,
                             const std::vector<Eigen::VectorXd>& regions) {
  const int d = static_cast<int>(regions.front().size());
  FeaturePyramid pyramid;
  for (double fraction : level_scales(config)) {
    const int side = crop_side_px(fraction, width, height);
    const auto xs = axis_centers(width, side, config.overlap);
    const auto ys = axis_centers(height, side, config.overlap);
    EmbeddingGrid grid;
    grid.crop_side = static_cast<std::uint32_t>(side);
    grid.nx = static_cast<std::uint32_t>(xs.size());
    grid.ny = static_cast<std::uint32_t>(ys.size());
    grid.embeddings.resize(static_cast<size_t>(grid.nx) * grid.ny * d);
    for (size_t j = 0; j < ys.size(); ++j) {
      for (size_t i = 0; i < xs.size(); ++i) {
        const int u0 = std::clamp(static_cast<int>(std::lround(xs[i] - side / 2.0)), 0, width - side);
        const int v0 = std::clamp(static_cast<int>(std::lround(ys[j] - side / 2.0)), 0, height - side);
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(d);
        for (int v = v0; v < v0 + side; ++v) {
          for (int u = u0; u < u0 + side; ++u) {
            const int label = labels[static_cast<size_t>(v) * width + u];
            if (label >= 0) acc += regions[static_cast<size_t>(label)];
          }
        }
        if (!(acc.norm() > 0)) throw Error("label_pyramid: crop without any labelled pixel");
        acc.normalize();
        float* dst = grid.embeddings.data() + (j * grid.nx + i) * d;
        for (int c = 0; c < d; ++c) dst[c] = static_cast<float>(acc[c]);
      }
    }
    pyramid.levels.push_back(std::move(grid));
  }
  return pyramid;
}

DinoFeatureMap label_dino(const std::vector<int>& labels, int width, int height, int stride, int dim) {
  if (dim < kNumRegions) throw Error("label_dino: dim must cover every region");
  DinoFeatureMap map;
  map.width = static_cast<std::uint32_t>(width / stride);
  map.height = static_cast<std::uint32_t>(height / stride);
  map.dim = dim;
  map.features.assign(static_cast<size_t>(map.width) * map.height * dim, 0.0f);
  const float share = 1.0f / static_cast<float>(stride * stride);
  for (std::uint32_t i = 0; i < map.height; ++i) {
    for (std::uint32_t j = 0; j < map.width; ++j) {
      float* dst = map.features.data() + (static_cast<size_t>(i) * map.width + j) * dim;
      for (int dv = 0; dv < stride; ++dv) {
        for (int du = 0; du < stride; ++du) {
          const int label = labels[static_cast<size_t>(i * stride + dv) * width + j * stride + du];
          if (label >= 0) dst[label] += share;
        }
      }
    }
  }
  return map;
}

TrainConfig fixture_train_config(const FixtureOptions& o) {
  TrainConfig c;
  c.max_steps = 3000;
  c.lr_warm_steps = 3000;
  c.rays_per_step = 256;
  c.n_chunks = 4;
  c.rng_seed = o.seed;
  c.init_density_bias = -3.0;
  c.random_background = true;  // every fixture ray ends on the floor or a box
  c.field.radiance_grid = {8, 16, 512, 1u << 16, 2};
  c.field.density_head = {1, 32, 8};
  c.field.color_head = {1, 32, 3};
  c.field.language_grid = {8, 8, 128, 1u << 14, 4};
  c.field.clip_head = {2, 32, o.embed_dim};
  c.field.dino_head = {1, 32, o.dino_dim};
  c.render.near = 1.0;  // nearest fixture geometry is ~1.7 from every camera; a tighter bound removes floaters
  c.render.far = 6.0;
  c.render.scene_radius = 2.5;
  c.render.n_coarse = 24;
  c.render.n_fine = 24;
  c.render.n_language = 24;
  c.pyramid.embed_dim = o.embed_dim;
  return c;
}

namespace {

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

void write_json(const std::filesystem::path& path, const json& doc) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace

FixtureManifest make_fixture(const std::filesystem::path& root, const FixtureOptions& o) {
  std::filesystem::create_directories(root);
  const FixtureScene scene;
  const auto k = fixture_intrinsics(o);
  const auto poses = fixture_cameras(o);
  const auto emb = fixture_embeddings(o.seed, o.embed_dim);
  const TrainConfig config = fixture_train_config(o);

  FixtureManifest manifest;
  SceneDataset train, holdout;
  EmbeddingContainer container;
  container.embed_dim = o.embed_dim;
  container.dino_dim = o.dino_dim;
  container.n_levels = config.pyramid.n_levels;
  for (int i = 0; i < o.n_cameras; ++i) {
    Frame frame;
    frame.pose = poses[static_cast<size_t>(i)];
    frame.intrinsics = k;
    frame.frame_id = i;
    char name[32];
    std::snprintf(name, sizeof(name), "images/frame_%03d.png", i);
    frame.file_path = name;
    frame.image = render_image(scene, frame.pose, k);
    const auto labels = render_labels(scene, frame.pose, k);
    const bool held = std::find(o.holdout.begin(), o.holdout.end(), i) != o.holdout.end();
    if (held) {
      for (int r : {kBoxA, kBoxB}) {
        std::array<int, 4> box = {o.width, o.height, -1, -1};
        for (int v = 0; v < o.height; ++v) {
          for (int u = 0; u < o.width; ++u) {
            if (labels[static_cast<size_t>(v) * o.width + u] != r) continue;
            box = {std::min(box[0], u), std::min(box[1], v), std::max(box[2], u), std::max(box[3], v)};
          }
        }
        if (box[2] >= 0) manifest.boxes[kRegionNames[static_cast<size_t>(r)]][i] = box;
      }
      holdout.frames.push_back(std::move(frame));
    } else {
      container.frames.push_back(label_pyramid(labels, o.width, o.height, config.pyramid, emb.regions));
      container.dino.push_back(label_dino(labels, o.width, o.height, o.dino_stride, o.dino_dim));
      train.frames.push_back(std::move(frame));
    }
  }
  write_dataset(root / manifest.train_manifest, train);
  write_dataset(root / manifest.holdout_manifest, holdout);
  write_pyramid(root / manifest.embeddings, container);
  {
    std::ofstream out(root / manifest.config);
    out << train_config_to_json(config) << "\n";
  }

  json canon, phrases;
  for (size_t i = 0; i < kCanonicalPhrases.size(); ++i) {
    canon[kCanonicalPhrases[i]] = vec_json(emb.canonicals[i]);
    phrases[kCanonicalPhrases[i]] = vec_json(emb.canonicals[i]);
  }
  const std::array<const char*, kNumRegions> spoken = {"floor", "rug", "red box", "green box"};
  for (int r = 0; r < kNumRegions; ++r) {
    const std::string name = kRegionNames[static_cast<size_t>(r)];
    const std::string file = "queries/" + name + ".json";
    write_json(root / file, json{{"embedding", vec_json(emb.regions[static_cast<size_t>(r)])}});
    manifest.positive_queries[name] = file;
    phrases[spoken[static_cast<size_t>(r)]] = vec_json(emb.regions[static_cast<size_t>(r)]);
  }
  for (size_t i = 0; i < emb.negatives.size(); ++i) {
    const std::string file = "queries/negative_" + std::to_string(i) + ".json";
    write_json(root / file, json{{"embedding", vec_json(emb.negatives[i])}});
    manifest.negative_queries.push_back(file);
  }
  write_json(root / manifest.canonicals, canon);
  write_json(root / manifest.phrases, phrases);
  manifest.save(root / "fixture.json");
  return manifest;
}

void FixtureManifest::save(const std::filesystem::path& path) const {
  json doc;
  doc["train"] = train_manifest;
  doc["holdout"] = holdout_manifest;
  doc["embeddings"] = embeddings;
  doc["config"] = config;
  doc["canonicals"] = canonicals;
  doc["phrases"] = phrases;
  doc["positives"] = positive_queries;
  doc["negatives"] = negative_queries;
  json boxes_doc = json::object();
  for (const auto& [name, views] : boxes) {
    for (const auto& [id, b] : views) boxes_doc[name][std::to_string(id)] = b;
  }
  doc["boxes"] = boxes_doc;
  write_json(path, doc);
}

FixtureManifest FixtureManifest::load(const std::filesystem::path& path) {
  const json doc = read_json(path);
  FixtureManifest m;
  try {
    m.train_manifest = doc.at("train");
    m.holdout_manifest = doc.at("holdout");
    m.embeddings = doc.at("embeddings");
    m.config = doc.at("config");
    m.canonicals = doc.at("canonicals");
    m.phrases = doc.at("phrases");
    m.positive_queries = doc.at("positives").get<std::map<std::string, std::string>>();
    m.negative_queries = doc.at("negatives").get<std::vector<std::string>>();
    for (const auto& [name, views] : doc.at("boxes").items()) {
      for (const auto& [id, b] : views.items()) m.boxes[name][std::stoi(id)] = b.get<std::array<int, 4>>();
    }
  } catch (const json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return m;
}

namespace {

Eigen::VectorXd to_unit(const json& arr, const std::string& where) {
  if (!arr.is_array() || arr.empty()) throw LoadError(where + ": expected a non-empty array of numbers");
  Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
  for (size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) throw LoadError(where + ": element " + std::to_string(i) + " is not a number");
    v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
  }
  if (!v.allFinite() || !(v.norm() > 0)) throw LoadError(where + ": embedding must be finite and nonzero");
  return v.normalized();
}

}  // namespace

Eigen::VectorXd read_embedding_file(const std::filesystem::path& path) {
  const json doc = read_json(path);
  if (doc.is_object()) {
    if (!doc.contains("embedding")) throw LoadError(path.string() + ": missing \"embedding\"");
    return to_unit(doc["embedding"], path.string());
  }
  return to_unit(doc, path.string());
}

std::map<std::string, Eigen::VectorXd> read_phrase_table(const std::filesystem::path& path) {
  const json doc = read_json(path);
  if (!doc.is_object()) throw LoadError(path.string() + ": expected an object of phrase -> embedding");
  std::map<std::string, Eigen::VectorXd> out;
  for (const auto& [text, v] : doc.items()) out[text] = to_unit(v, path.string() + " [" + text + "]");
  return out;
}

}  // namespace lerf
