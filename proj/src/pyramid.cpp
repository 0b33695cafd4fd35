#include "lerf/pyramid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace lerf {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

void PyramidConfig::validate() const {
  if (!(s_min > 0 && s_min <= 1)) throw Error("pyramid config: s_min must lie in (0, 1]");
  if (!(s_max > s_min && s_max <= 1)) throw Error("pyramid config: require s_min < s_max <= 1");
  if (n_levels < 2) throw Error("pyramid config: n_levels must be >= 2");
  if (!(overlap >= 0 && overlap < 1)) throw Error("pyramid config: overlap must lie in [0, 1)");
  if (embed_dim < 1) throw Error("pyramid config: embed_dim must be positive");
}

std::vector<double> level_scales(const PyramidConfig& config) {
  config.validate();
  std::vector<double> scales(config.n_levels);
  const double ratio = config.s_max / config.s_min;
  for (int i = 0; i < config.n_levels; ++i) {
    scales[i] = config.s_min * std::pow(ratio, static_cast<double>(i) / (config.n_levels - 1));
  }
  scales.front() = config.s_min;
  scales.back() = config.s_max;
  return scales;
}

int crop_side_px(double fraction, int width, int height) {
  return std::max(1, static_cast<int>(std::lround(fraction * std::min(width, height))));
}

std::vector<double> axis_centers(int length, int crop_side, double overlap) {
  if (crop_side <= 0) throw Error("grid layout: crop side must be positive");
  if (crop_side > length) {
    throw Error("grid layout: crop side " + std::to_string(crop_side) + " exceeds image extent " +
                std::to_string(length));
  }
  if (!(overlap >= 0 && overlap < 1)) throw Error("grid layout: overlap must lie in [0, 1)");
  const double first = crop_side / 2.0;
  const double last = length - crop_side / 2.0;
  const double stride = crop_side * (1.0 - overlap);
  std::vector<double> centers;
  for (double c = first; c < last - 1e-9 * stride; c += stride) centers.push_back(c);
  centers.push_back(last);
  return centers;
}

std::vector<CropCenter> build_grid_layout(int width, int height, int crop_side, double overlap) {
  const auto xs = axis_centers(width, crop_side, overlap);
  const auto ys = axis_centers(height, crop_side, overlap);
  std::vector<CropCenter> centers;
  centers.reserve(xs.size() * ys.size());
  for (double y : ys) {
    for (double x : xs) centers.push_back({x, y});
  }
  return centers;
}

void attach_layout(FeaturePyramid& pyramid, int width, int height, const PyramidConfig& config) {
  const auto fractions = level_scales(config);
  if (pyramid.levels.size() != fractions.size()) {
    throw Error("pyramid has " + std::to_string(pyramid.levels.size()) + " levels, config expects " +
                std::to_string(fractions.size()));
  }
  pyramid.image_width = width;
  pyramid.image_height = height;
  pyramid.level_fraction = fractions;
  pyramid.centers_x.clear();
  pyramid.centers_y.clear();
  for (size_t l = 0; l < fractions.size(); ++l) {
    const auto& grid = pyramid.levels[l];
    const int expected_side = crop_side_px(fractions[l], width, height);
    if (static_cast<int>(grid.crop_side) != expected_side) {
      throw Error("pyramid level " + std::to_string(l) + ": crop side " + std::to_string(grid.crop_side) +
                  " px, layout expects " + std::to_string(expected_side));
    }
    auto xs = axis_centers(width, expected_side, config.overlap);
    auto ys = axis_centers(height, expected_side, config.overlap);
    if (xs.size() != grid.nx || ys.size() != grid.ny) {
      throw Error("pyramid level " + std::to_string(l) + ": grid " + std::to_string(grid.nx) + "x" +
                  std::to_string(grid.ny) + ", layout expects " + std::to_string(xs.size()) + "x" +
                  std::to_string(ys.size()));
    }
    pyramid.centers_x.push_back(std::move(xs));
    pyramid.centers_y.push_back(std::move(ys));
  }
}

void attach_layout(EmbeddingContainer& container, int width, int height, const PyramidConfig& config) {
  if (config.embed_dim != container.embed_dim) {
    throw Error("embedding dim " + std::to_string(container.embed_dim) + " does not match config " +
                std::to_string(config.embed_dim));
  }
  for (size_t f = 0; f < container.frames.size(); ++f) {
    try {
      attach_layout(container.frames[f], width, height, config);
    } catch (const Error& e) {
      throw Error("frame " + std::to_string(f) + ": " + e.what());
    }
  }
}

void attach_dino_strides(EmbeddingContainer& container, int width, int height) {
  for (auto& map : container.dino) {
    map.stride_x = static_cast<double>(width) / map.width;
    map.stride_y = static_cast<double>(height) / map.height;
  }
}

namespace {

struct Bracket {
  size_t lo = 0, hi = 0;
  double t = 0;  // weight of hi
};

Bracket bracket(const std::vector<double>& nodes, double x) {
  if (nodes.size() == 1) return {0, 0, 0.0};
  x = std::clamp(x, nodes.front(), nodes.back());
  auto it = std::upper_bound(nodes.begin(), nodes.end(), x);
  size_t i = static_cast<size_t>(std::distance(nodes.begin(), it));
  i = std::min(i == 0 ? 0 : i - 1, nodes.size() - 2);
  return {i, i + 1, (x - nodes[i]) / (nodes[i + 1] - nodes[i])};
}

void accumulate_level(const FeaturePyramid& p, size_t level, double x, double y, double weight, int dim,
                      Eigen::VectorXd& out) {
  const auto bx = bracket(p.centers_x[level], x);
  const auto by = bracket(p.centers_y[level], y);
  const auto& grid = p.levels[level];
  const auto add = [&](size_t ix, size_t iy, double w) {
    if (w == 0.0) return;
    const auto e = grid.embedding(static_cast<std::uint32_t>(ix), static_cast<std::uint32_t>(iy), dim);
    for (int k = 0; k < dim; ++k) out[k] += weight * w * e[k];
  };
  add(bx.lo, by.lo, (1 - bx.t) * (1 - by.t));
  add(bx.hi, by.lo, bx.t * (1 - by.t));
  add(bx.lo, by.hi, (1 - bx.t) * by.t);
  add(bx.hi, by.hi, bx.t * by.t);
}

}  // namespace

Eigen::VectorXd interpolate_language_target(const FeaturePyramid& p, double x, double y, double s_img) {
  if (!p.has_layout()) throw Error("interpolate_language_target: pyramid layout not attached");
  if (p.levels.empty()) throw Error("interpolate_language_target: empty pyramid");
  const auto& first = p.levels.front();
  const int dim = static_cast<int>(first.embeddings.size() / (static_cast<size_t>(first.nx) * first.ny));

  std::vector<double> log_levels(p.level_fraction.size());
  std::transform(p.level_fraction.begin(), p.level_fraction.end(), log_levels.begin(),
                 [](double s) { return std::log(s); });
  const double clamped = std::clamp(s_img, p.level_fraction.front(), p.level_fraction.back());
  const auto level = bracket(log_levels, std::log(clamped));

  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
  if (level.t != 1.0) accumulate_level(p, level.lo, x, y, 1.0 - level.t, dim, out);
  if (level.t != 0.0) accumulate_level(p, level.hi, x, y, level.t, dim, out);
  const double norm = out.norm();
  if (!(norm > 0)) throw Error("interpolate_language_target: interpolated embedding has zero norm");
  return out / norm;
}

Eigen::VectorXd sample_dino_target(const DinoFeatureMap& map, double x, double y) {
  if (map.width == 0 || map.height == 0) throw Error("sample_dino_target: empty feature map");
  const auto axis = [](double pos, double stride, std::uint32_t n) {
    const double g = std::clamp(pos / stride - 0.5, 0.0, static_cast<double>(n - 1));
    if (n == 1) return Bracket{0, 0, 0.0};
    const auto lo = std::min(static_cast<std::uint32_t>(std::floor(g)), n - 2);
    return Bracket{lo, lo + 1, g - lo};
  };
  const auto bx = axis(x, map.stride_x, map.width);
  const auto by = axis(y, map.stride_y, map.height);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(map.dim);
  const auto add = [&](size_t i, size_t j, double w) {
    if (w == 0.0) return;
    const auto f = map.at(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
    for (int k = 0; k < map.dim; ++k) out[k] += w * f[k];
  };
  add(by.lo, bx.lo, (1 - bx.t) * (1 - by.t));
  add(by.lo, bx.hi, bx.t * (1 - by.t));
  add(by.hi, bx.lo, (1 - bx.t) * by.t);
  add(by.hi, bx.hi, bx.t * by.t);
  return out;
}

// ---------------------------------------------------------------------------
// Container format

namespace {

constexpr char kMagic[4] = {'L', 'E', 'R', 'F'};
constexpr std::uint32_t kVersion = 1;
constexpr double kNormTolerance = 1e-4;

class ByteWriter {
 public:
  void bytes(const void* p, size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void f32s(const std::vector<float>& v) { bytes(v.data(), v.size() * sizeof(float)); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  void bytes(void* p, size_t n, const std::string& what) {
    if (n > data_.size() - pos_) throw LoadError("embedding container truncated while reading " + what + at());
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32(const std::string& what) {
    std::uint32_t v;
    bytes(&v, sizeof v, what);
    return v;
  }
  std::vector<float> f32s(size_t count, const std::string& what) {
    if (count > (data_.size() - pos_) / sizeof(float)) {
      throw LoadError("embedding container truncated while reading " + what + at());
    }
    std::vector<float> v(count);
    bytes(v.data(), count * sizeof(float), what);
    return v;
  }
  size_t remaining() const { return data_.size() - pos_; }
  std::string at() const { return " at byte " + std::to_string(pos_); }

 private:
  std::span<const std::uint8_t> data_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_container(const EmbeddingContainer& c) {
  if (c.dino.size() != c.frames.size()) throw Error("container: one DINO map per frame required");
  ByteWriter w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(c.frames.size()));
  w.u32(static_cast<std::uint32_t>(c.n_levels));
  w.u32(static_cast<std::uint32_t>(c.embed_dim));
  w.u32(static_cast<std::uint32_t>(c.dino_dim));
  for (const auto& frame : c.frames) {
    if (static_cast<int>(frame.levels.size()) != c.n_levels) throw Error("container: level count mismatch");
    for (const auto& grid : frame.levels) {
      if (grid.embeddings.size() != static_cast<size_t>(grid.nx) * grid.ny * c.embed_dim) {
        throw Error("container: embedding grid size mismatch");
      }
      w.u32(grid.crop_side);
      w.u32(grid.nx);
      w.u32(grid.ny);
      w.f32s(grid.embeddings);
    }
  }
  for (const auto& map : c.dino) {
    if (map.features.size() != static_cast<size_t>(map.height) * map.width * c.dino_dim) {
      throw Error("container: DINO map size mismatch");
    }
    w.u32(map.height);
    w.u32(map.width);
    w.f32s(map.features);
  }
  return w.take();
}

EmbeddingContainer decode_container(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw LoadError("embedding container: bad magic (expected 'LERF') at byte 0");
  EmbeddingContainer c;
  c.version = r.u32("version");
  if (c.version != kVersion) {
    throw LoadError("embedding container: unsupported version " + std::to_string(c.version) + " at byte 4");
  }
  const auto n_frames = r.u32("n_frames");
  c.n_levels = static_cast<int>(r.u32("n_levels"));
  c.embed_dim = static_cast<int>(r.u32("embed_dim"));
  c.dino_dim = static_cast<int>(r.u32("dino_dim"));
  if (n_frames == 0 || c.n_levels == 0 || c.embed_dim <= 0 || c.dino_dim <= 0) {
    throw LoadError("embedding container: header has zero-sized dimension in bytes 8-23");
  }
  if (n_frames > r.remaining()) throw LoadError("embedding container: frame count exceeds file size");

  c.frames.resize(n_frames);
  for (std::uint32_t f = 0; f < n_frames; ++f) {
    for (int l = 0; l < c.n_levels; ++l) {
      const std::string where = "frame " + std::to_string(f) + " level " + std::to_string(l);
      EmbeddingGrid grid;
      grid.crop_side = r.u32(where + " crop_side");
      grid.nx = r.u32(where + " grid_nx");
      grid.ny = r.u32(where + " grid_ny");
      if (grid.crop_side == 0 || grid.nx == 0 || grid.ny == 0) {
        throw LoadError("embedding container: " + where + " has zero-sized grid");
      }
      grid.embeddings = r.f32s(static_cast<size_t>(grid.nx) * grid.ny * c.embed_dim, where + " embeddings");
      for (std::uint32_t iy = 0; iy < grid.ny; ++iy) {
        for (std::uint32_t ix = 0; ix < grid.nx; ++ix) {
          const auto e = grid.embedding(ix, iy, c.embed_dim);
          double sq = 0;
          for (float v : e) sq += static_cast<double>(v) * v;
          const double norm = std::sqrt(sq);
          if (!(std::abs(norm - 1.0) <= kNormTolerance)) {
            throw LoadError("embedding container: " + where + " crop (" + std::to_string(ix) + ", " +
                            std::to_string(iy) + ") has norm " + std::to_string(norm) + ", expected 1");
          }
        }
      }
      c.frames[f].levels.push_back(std::move(grid));
    }
  }
  c.dino.resize(n_frames);
  for (std::uint32_t f = 0; f < n_frames; ++f) {
    const std::string where = "frame " + std::to_string(f) + " DINO block";
    auto& map = c.dino[f];
    map.height = r.u32(where + " Hf");
    map.width = r.u32(where + " Wf");
    map.dim = c.dino_dim;
    if (map.height == 0 || map.width == 0) throw LoadError("embedding container: " + where + " is empty");
    map.features = r.f32s(static_cast<size_t>(map.height) * map.width * c.dino_dim, where);
    for (float v : map.features) {
      if (!std::isfinite(v)) throw LoadError("embedding container: " + where + " has non-finite feature");
    }
  }
  if (r.remaining() != 0) throw LoadError("embedding container: trailing bytes after last DINO block");
  return c;
}

void write_pyramid(const std::filesystem::path& path, const EmbeddingContainer& container) {
  const auto bytes = encode_container(container);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

EmbeddingContainer read_pyramid(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open embedding container " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace lerf
