#pragma once

#include "lerf/pyramid.hpp"
#include "lerf/scene_io.hpp"
#include "lerf/train.hpp"

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace lerf {

/// Synthetic scene: an infinite floor (y = 0) with a flat rug and two boxes on it.
/// Region labels index the semantic regions.
enum Region : int { kFloor = 0, kRug = 1, kBoxA = 2, kBoxB = 3, kNumRegions = 4 };

inline const std::array<const char*, kNumRegions> kRegionNames = {"floor", "rug", "box_a", "box_b"};

struct AxisBox {
  Vec3 lo, hi;
  Vec3 albedo;
};

struct FixtureScene {
  AxisBox box_a{{-0.5, 0.0, -0.05}, {-0.2, 0.4, 0.25}, {0.85, 0.15, 0.1}};
  AxisBox box_b{{0.15, 0.0, -0.4}, {0.45, 0.3, -0.15}, {0.15, 0.7, 0.2}};
  // Rug footprint on the floor: x in [lo.x, hi.x], z in [lo.z, hi.z].
  AxisBox rug{{-0.1, 0.0, 0.15}, {0.55, 0.0, 0.65}, {0.2, 0.3, 0.8}};
  Vec3 floor_albedo{0.55, 0.55, 0.5};
  Vec3 light_dir = Vec3(0.4, 1.0, 0.3).normalized();

  struct Hit {
    double t = 0;
    int region = -1;  // -1: miss
    Vec3 color = Vec3::Zero();
  };
  Hit trace(const Ray& ray) const;
};

struct FixtureOptions {
  std::uint64_t seed = 0;
  int n_cameras = 20;
  int width = 128, height = 96;
  double focal = 100.0;
  double ring_radius = 1.5;
  double ring_height = 1.8;
  std::vector<int> holdout = {3, 10, 16};
  int embed_dim = 8;
  int dino_dim = 4;
  int dino_stride = 2;
};

/// Everything make_fixture writes, with paths relative to the fixture root.
struct FixtureManifest {
  std::string train_manifest = "transforms.json";
  std::string holdout_manifest = "transforms_holdout.json";
  std::string embeddings = "embeddings.lerf";
  std::string config = "train_config.json";
  std::string canonicals = "canonicals.json";
  std::string phrases = "phrases.json";
  /// Region name -> query embedding file.
  std::map<std::string, std::string> positive_queries;
  std::vector<std::string> negative_queries;
  /// Object name -> frame id -> [u0, v0, u1, v1] inclusive pixel bounds.
  std::map<std::string, std::map<int, std::array<int, 4>>> boxes;

  static FixtureManifest load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

/// Small configuration sized for the fixture on one CPU core.
TrainConfig fixture_train_config(const FixtureOptions& options);

/// Camera ring looking at the scene center; frame id i for camera i.
std::vector<CameraPose> fixture_cameras(const FixtureOptions& options);
CameraIntrinsics fixture_intrinsics(const FixtureOptions& options);

/// Per-pixel region labels of one view (-1 where the ray misses everything).
std::vector<int> render_labels(const FixtureScene& scene, const CameraPose& pose, const CameraIntrinsics& k);
Image render_image(const FixtureScene& scene, const CameraPose& pose, const CameraIntrinsics& k);

/// One fixed unit vector per region plus orthogonal negatives, from a seeded random basis.
struct FixtureEmbeddings {
  std::vector<Eigen::VectorXd> regions;
  std::vector<Eigen::VectorXd> negatives;
  std::vector<Eigen::VectorXd> canonicals;  // in kCanonicalPhrases order
};
FixtureEmbeddings fixture_embeddings(std::uint64_t seed, int dim);

/// Pyramid of area-weighted, normalized averages of region vectors over each crop.
FeaturePyramid label_pyramid(const std::vector<int>& labels, int width, int height, const PyramidConfig& config,
                             const std::vector<Eigen::VectorXd>& regions);
/// Region one-hot features averaged over stride x stride pixel blocks.
DinoFeatureMap label_dino(const std::vector<int>& labels, int width, int height, int stride, int dim);

/// Writes the full fixture (images, manifests, embeddings, config, queries) under `root`.
FixtureManifest make_fixture(const std::filesystem::path& root, const FixtureOptions& options);

/// Reads {"embedding": [...]} or a bare JSON array; the result is normalized.
Eigen::VectorXd read_embedding_file(const std::filesystem::path& path);
/// Reads a phrase table {"text": [floats], ...}.
std::map<std::string, Eigen::VectorXd> read_phrase_table(const std::filesystem::path& path);

}  // namespace lerf
