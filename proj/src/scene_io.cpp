#include "lerf/scene_io.hpp"

#include <Eigen/LU>
#include <Eigen/SVD>
#include "json.hpp"

#include <fstream>
#include <sstream>

namespace lerf {

using nlohmann::json;

void CameraIntrinsics::validate() const {
  if (!(fx > 0) || !(fy > 0)) throw Error("intrinsics: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw Error("intrinsics: image size must be positive");
  if (!(cx > 0 && cx < width) || !(cy > 0 && cy < height)) {
    throw Error("intrinsics: principal point must lie strictly inside the image");
  }
}

const Frame& SceneDataset::frame_by_id(int id) const {
  for (const auto& f : frames) {
    if (f.frame_id == id) return f;
  }
  throw Error("unknown frame id " + std::to_string(id));
}

Mat3 orthonormalize(const Mat3& m) {
  if (!m.allFinite()) throw Error("rotation block is not finite");
  const double det = m.determinant();
  if (std::abs(det) < 1e-8) throw Error("rotation block is singular");
  if (det < 0) throw Error("rotation block has negative determinant (reflection)");
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

Ray generate_ray(const CameraPose& pose, const CameraIntrinsics& k, int u, int v) {
  if (u < 0 || v < 0 || u >= k.width || v >= k.height) {
    throw Error("pixel (" + std::to_string(u) + ", " + std::to_string(v) + ") outside " +
                std::to_string(k.width) + "x" + std::to_string(k.height) + " image");
  }
  const Vec3 camera_dir((u + 0.5 - k.cx) / k.fx, -((v + 0.5 - k.cy) / k.fy), -1.0);
  Ray ray;
  ray.origin = pose.center();
  ray.direction = (pose.rotation() * camera_dir).normalized();
  ray.u = u;
  ray.v = v;
  return ray;
}

std::optional<Vec2> project(const CameraPose& pose, const CameraIntrinsics& k, const Vec3& point) {
  const Vec3 local = pose.rotation().transpose() * (point - pose.center());
  const double depth = -local.z();
  if (!(depth > 1e-12)) return std::nullopt;
  const double x = local.x() / depth;
  const double y = -local.y() / depth;
  return Vec2(x * k.fx + k.cx - 0.5, y * k.fy + k.cy - 0.5);
}

namespace {

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("malformed manifest " + path.string() + ": " + e.what());
  }
}

double number_field(const json& doc, const char* key, const std::filesystem::path& path) {
  if (!doc.contains(key) || !doc[key].is_number()) {
    throw LoadError("manifest " + path.string() + ": missing or non-numeric field '" + key + "'");
  }
  return doc[key].get<double>();
}

SceneDataset parse_manifest(const std::filesystem::path& manifest_path, bool load_images) {
  const json doc = read_json(manifest_path);

  CameraIntrinsics k;
  k.fx = number_field(doc, "fl_x", manifest_path);
  k.fy = number_field(doc, "fl_y", manifest_path);
  k.cx = number_field(doc, "cx", manifest_path);
  k.cy = number_field(doc, "cy", manifest_path);
  k.width = static_cast<int>(number_field(doc, "w", manifest_path));
  k.height = static_cast<int>(number_field(doc, "h", manifest_path));
  try {
    k.validate();
  } catch (const Error& e) {
    throw LoadError("manifest " + manifest_path.string() + ": " + e.what());
  }

  SceneDataset dataset;
  if (doc.contains("scene_scale")) {
    dataset.scene_scale = number_field(doc, "scene_scale", manifest_path);
    if (!(dataset.scene_scale > 0)) throw LoadError("manifest: scene_scale must be positive");
  }
  if (!doc.contains("frames") || !doc["frames"].is_array()) {
    throw LoadError("manifest " + manifest_path.string() + ": missing 'frames' array");
  }

  const auto base = manifest_path.parent_path();
  int index = 0;
  for (const auto& entry : doc["frames"]) {
    const std::string label = "frame " + std::to_string(index);
    if (!entry.contains("file_path") || !entry["file_path"].is_string()) {
      throw LoadError(label + ": missing file_path");
    }
    Frame frame;
    frame.file_path = entry["file_path"].get<std::string>();
    frame.frame_id = entry.value("frame_id", index);
    frame.intrinsics = k;

    const auto& tm = entry.contains("transform_matrix") ? entry["transform_matrix"] : json();
    std::vector<double> values;
    if (tm.is_array() && tm.size() == 4 && tm[0].is_array()) {
      for (const auto& row : tm) {
        for (const auto& x : row) values.push_back(x.get<double>());
      }
    } else if (tm.is_array()) {
      for (const auto& x : tm) {
        if (!x.is_number()) throw LoadError(label + " (" + frame.file_path + "): non-numeric transform entry");
        values.push_back(x.get<double>());
      }
    }
    if (values.size() != 16) {
      throw LoadError(label + " (" + frame.file_path + "): transform_matrix must hold 16 numbers");
    }
    Mat4 m;
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) m(r, c) = values[r * 4 + c];
    }
    try {
      m.topLeftCorner<3, 3>() = orthonormalize(m.topLeftCorner<3, 3>());
    } catch (const Error& e) {
      throw LoadError(label + " (" + frame.file_path + "): " + e.what());
    }
    m.row(3) << 0, 0, 0, 1;
    frame.pose.camera_to_world = m;

    if (load_images) {
      frame.image = read_png(base / frame.file_path);
      if (frame.image.width != k.width || frame.image.height != k.height) {
        throw LoadError(label + " (" + frame.file_path + "): image is " + std::to_string(frame.image.width) +
                        "x" + std::to_string(frame.image.height) + ", manifest says " +
                        std::to_string(k.width) + "x" + std::to_string(k.height));
      }
    }
    dataset.frames.push_back(std::move(frame));
    ++index;
  }
  if (dataset.frames.size() < 2) throw LoadError("manifest " + manifest_path.string() + ": need at least 2 frames");
  return dataset;
}

}  // namespace

SceneDataset load_dataset(const std::filesystem::path& manifest_path) {
  return parse_manifest(manifest_path, true);
}

SceneDataset load_manifest(const std::filesystem::path& manifest_path) {
  return parse_manifest(manifest_path, false);
}

void write_dataset(const std::filesystem::path& manifest_path, const SceneDataset& dataset) {
  if (dataset.frames.empty()) throw Error("write_dataset: no frames");
  const auto& k = dataset.frames.front().intrinsics;
  json doc;
  doc["fl_x"] = k.fx;
  doc["fl_y"] = k.fy;
  doc["cx"] = k.cx;
  doc["cy"] = k.cy;
  doc["w"] = k.width;
  doc["h"] = k.height;
  doc["scene_scale"] = dataset.scene_scale;
  json frames = json::array();
  const auto base = manifest_path.parent_path();
  for (const auto& f : dataset.frames) {
    json entry;
    entry["file_path"] = f.file_path;
    entry["frame_id"] = f.frame_id;
    std::vector<double> tm;
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) tm.push_back(f.pose.camera_to_world(r, c));
    }
    entry["transform_matrix"] = tm;
    frames.push_back(entry);
    if (f.image.width > 0) {
      std::filesystem::create_directories((base / f.file_path).parent_path());
      write_png(base / f.file_path, f.image);
    }
  }
  doc["frames"] = frames;
  std::ofstream out(manifest_path);
  if (!out) throw Error("cannot write manifest " + manifest_path.string());
  out << doc.dump(2) << "\n";
}

}  // namespace lerf
