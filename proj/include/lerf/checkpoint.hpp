#pragma once

#include "lerf/field.hpp"
#include "lerf/render.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace lerf {

/// Trained field snapshot: both field configs, the sampler settings used in training,
/// and the raw f32 parameters in layout order.
struct Checkpoint {
  FieldConfig field;
  RenderSettings render;
  std::uint64_t step = 0;
  Eigen::VectorXf params;

  FieldModel<float> model() const { return FieldModel<float>(make_field_layout(field), params); }
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// 64-bit FNV-1a over the encoded checkpoint; identifies a snapshot in caches.
std::uint64_t checkpoint_hash(const Checkpoint& checkpoint);

}  // namespace lerf
