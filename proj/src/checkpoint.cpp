#include "lerf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace lerf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'L', 'E', 'R', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), b, b + sizeof(T));
  }
  void grid(const HashGridConfig& g) {
    put<std::uint32_t>(g.n_levels);
    put<std::uint32_t>(g.base_resolution);
    put<std::uint32_t>(g.max_resolution);
    put<std::uint32_t>(g.table_size);
    put<std::uint32_t>(g.features_per_level);
  }
  void mlp(const MLPConfig& m) {
    put<std::uint32_t>(m.hidden_layers);
    put<std::uint32_t>(m.hidden_width);
    put<std::uint32_t>(m.out_dim);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> d) : data(d) {}
  template <typename T>
  T get(const char* what) {
    T v;
    if (sizeof(T) > data.size() - pos) throw LoadError(std::string("checkpoint truncated while reading ") + what + at());
    std::memcpy(&v, data.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string at() const { return " at byte " + std::to_string(pos); }
  int u32(const char* what) {
    const auto v = get<std::uint32_t>(what);
    if (v > (1u << 30)) throw LoadError(std::string("checkpoint: implausible value for ") + what + " before byte " + std::to_string(pos));
    return static_cast<int>(v);
  }
  HashGridConfig grid(const char* what) {
    HashGridConfig g;
    g.n_levels = u32(what);
    g.base_resolution = u32(what);
    g.max_resolution = u32(what);
    g.table_size = get<std::uint32_t>(what);
    g.features_per_level = u32(what);
    return g;
  }
  MLPConfig mlp(const char* what) {
    MLPConfig m;
    m.hidden_layers = u32(what);
    m.hidden_width = u32(what);
    m.out_dim = u32(what);
    return m;
  }
  std::span<const std::uint8_t> data;
  size_t pos = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  const auto layout = make_field_layout(c.field);
  if (static_cast<size_t>(c.params.size()) != layout.total) throw Error("checkpoint: parameter count does not match config");
  Writer w;
  w.out.insert(w.out.end(), kMagic, kMagic + sizeof kMagic);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(c.step);
  w.grid(c.field.language_grid);
  w.mlp(c.field.clip_head);
  w.mlp(c.field.dino_head);
  w.grid(c.field.radiance_grid);
  w.mlp(c.field.density_head);
  w.mlp(c.field.color_head);
  w.put<double>(c.render.near);
  w.put<double>(c.render.far);
  w.put<std::uint32_t>(c.render.n_coarse);
  w.put<std::uint32_t>(c.render.n_fine);
  w.put<std::uint32_t>(c.render.n_language);
  for (int i = 0; i < 3; ++i) w.put<double>(c.render.background[i]);
  w.put<std::uint32_t>(c.render.frustum == FrustumScaleMode::AsPrinted ? 1u : 0u);
  w.put<double>(c.render.scene_radius);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(c.params.size()));
  const auto* p = reinterpret_cast<const std::uint8_t*>(c.params.data());
  w.out.insert(w.out.end(), p, p + c.params.size() * sizeof(float));
  return std::move(w.out);
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw LoadError("checkpoint: bad magic (expected 'LERFCKPT') at byte 0");
  }
  r.pos = sizeof kMagic;
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw LoadError("checkpoint: unsupported version " + std::to_string(version) + " at byte 8");
  Checkpoint c;
  c.step = r.get<std::uint64_t>("step");
  c.field.language_grid = r.grid("language grid config");
  c.field.clip_head = r.mlp("clip head config");
  c.field.dino_head = r.mlp("dino head config");
  c.field.radiance_grid = r.grid("radiance grid config");
  c.field.density_head = r.mlp("density head config");
  c.field.color_head = r.mlp("color head config");
  c.render.near = r.get<double>("near");
  c.render.far = r.get<double>("far");
  c.render.n_coarse = r.u32("n_coarse");
  c.render.n_fine = r.u32("n_fine");
  c.render.n_language = r.u32("n_language");
  for (int i = 0; i < 3; ++i) c.render.background[i] = r.get<double>("background");
  c.render.frustum = r.get<std::uint32_t>("frustum mode") == 1 ? FrustumScaleMode::AsPrinted : FrustumScaleMode::BackProjection;
  c.render.scene_radius = r.get<double>("scene radius");

  const size_t header_end = r.pos;
  FieldLayout layout;
  try {
    layout = make_field_layout(c.field);
    c.render.validate();
  } catch (const Error& e) {
    throw LoadError(std::string("checkpoint: invalid config header (bytes 12-") + std::to_string(header_end) +
                    "): " + e.what());
  }
  const auto count = r.get<std::uint64_t>("parameter count");
  if (count != layout.total) {
    throw LoadError("checkpoint: parameter count " + std::to_string(count) + " at byte " + std::to_string(header_end) +
                    " does not match config (" + std::to_string(layout.total) + ")");
  }
  if (bytes.size() - r.pos != count * sizeof(float)) {
    throw LoadError("checkpoint: parameter block is " + std::to_string(bytes.size() - r.pos) + " bytes, expected " +
                    std::to_string(count * sizeof(float)));
  }
  c.params.resize(static_cast<Eigen::Index>(count));
  std::memcpy(c.params.data(), bytes.data() + r.pos, count * sizeof(float));
  if (!c.params.allFinite()) throw LoadError("checkpoint: non-finite parameter");
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

std::uint64_t checkpoint_hash(const Checkpoint& checkpoint) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::uint8_t b : encode_checkpoint(checkpoint)) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace lerf
