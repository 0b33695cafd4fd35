#pragma once

#include "lerf/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace lerf {

struct HashGridConfig {
  int n_levels = 16;
  int base_resolution = 16;
  int max_resolution = 1024;
  std::uint32_t table_size = 1u << 19;
  int features_per_level = 2;

  void validate() const;
  int output_dim() const { return n_levels * features_per_level; }
};

struct HashLevel {
  int resolution = 0;        // cells per axis; vertices per axis = resolution + 1
  bool dense = false;        // direct indexing when all vertices fit in the table
  std::uint32_t entries = 0;
  size_t offset = 0;         // first parameter of this level, relative to the grid block
};

struct HashGridLayout {
  HashGridConfig config;
  std::vector<HashLevel> levels;
  size_t param_count = 0;
};

HashGridLayout make_hash_layout(const HashGridConfig& config);

/// Table slot for an integer vertex: dense row-major index, or the spatial hash
/// (x * 1) ^ (y * 2654435761) ^ (z * 805459861) mod table size.
inline std::uint32_t vertex_index(const HashLevel& level, std::uint32_t x, std::uint32_t y, std::uint32_t z) {
  if (level.dense) {
    const std::uint32_t n = static_cast<std::uint32_t>(level.resolution) + 1;
    return x + n * (y + n * z);
  }
  const std::uint32_t h = x ^ (y * 2654435761u) ^ (z * 805459861u);
  return h & (level.entries - 1);
}

/// Per-sample record of the corner slots and trilinear weights, kept for backward.
template <typename Scalar>
struct HashEncodingTape {
  int n_samples = 0;
  int n_levels = 0;
  std::vector<std::uint32_t> slots;  // [sample][level][corner]
  std::vector<Scalar> weights;       // [sample][level][corner]
  std::vector<Scalar> fractions;     // [sample][level][axis], for input gradients
};

/// Multi-resolution hash encoding of positions in [0,1]^3 (columns of `unit_positions`).
/// `table` points at the grid's parameter block. Returns (n_levels * F) x N features.
template <typename Scalar>
MatrixX<Scalar> hash_encode(const HashGridLayout& layout, const Scalar* table,
                            const Eigen::Ref<const Matrix3X<Scalar>>& unit_positions,
                            HashEncodingTape<Scalar>* tape = nullptr) {
  const int n = static_cast<int>(unit_positions.cols());
  const int n_levels = layout.config.n_levels;
  const int feats = layout.config.features_per_level;
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(n_levels * feats, n);
  if (tape) {
    tape->n_samples = n;
    tape->n_levels = n_levels;
    tape->slots.resize(static_cast<size_t>(n) * n_levels * 8);
    tape->weights.resize(static_cast<size_t>(n) * n_levels * 8);
    tape->fractions.resize(static_cast<size_t>(n) * n_levels * 3);
  }
  for (int s = 0; s < n; ++s) {
    for (int l = 0; l < n_levels; ++l) {
      const HashLevel& level = layout.levels[l];
      const Scalar res = static_cast<Scalar>(level.resolution);
      std::array<std::uint32_t, 3> base{};
      std::array<Scalar, 3> frac{};
      for (int a = 0; a < 3; ++a) {
        const Scalar p = std::clamp(unit_positions(a, s), Scalar(0), Scalar(1)) * res;
        const int cell = std::min(static_cast<int>(std::floor(p)), level.resolution - 1);
        base[a] = static_cast<std::uint32_t>(cell);
        frac[a] = p - static_cast<Scalar>(cell);
      }
      const Scalar* level_table = table + level.offset;
      for (int c = 0; c < 8; ++c) {
        const std::uint32_t dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
        const Scalar w = (dx ? frac[0] : 1 - frac[0]) * (dy ? frac[1] : 1 - frac[1]) * (dz ? frac[2] : 1 - frac[2]);
        const std::uint32_t slot = vertex_index(level, base[0] + dx, base[1] + dy, base[2] + dz);
        const Scalar* entry = level_table + static_cast<size_t>(slot) * feats;
        for (int f = 0; f < feats; ++f) out(l * feats + f, s) += w * entry[f];
        if (tape) {
          const size_t k = (static_cast<size_t>(s) * n_levels + l) * 8 + c;
          tape->slots[k] = slot;
          tape->weights[k] = w;
        }
      }
      if (tape) {
        for (int a = 0; a < 3; ++a) tape->fractions[(static_cast<size_t>(s) * n_levels + l) * 3 + a] = frac[a];
      }
    }
  }
  return out;
}

/// Scatters feature gradients into the table gradient block. When `grad_positions` is
/// given, also returns d(loss)/d(unit position) per sample.
template <typename Scalar>
void hash_backward(const HashGridLayout& layout, const Scalar* table, const HashEncodingTape<Scalar>& tape,
                   const Eigen::Ref<const MatrixX<Scalar>>& grad_features, Scalar* grad_table,
                   Matrix3X<Scalar>* grad_positions = nullptr) {
  const int feats = layout.config.features_per_level;
  const int n_levels = tape.n_levels;
  if (grad_features.cols() != tape.n_samples || grad_features.rows() != n_levels * feats) {
    throw Error("hash_backward: gradient shape does not match the recorded forward pass");
  }
  if (grad_positions) grad_positions->setZero(3, tape.n_samples);
  for (int s = 0; s < tape.n_samples; ++s) {
    for (int l = 0; l < n_levels; ++l) {
      const HashLevel& level = layout.levels[l];
      Scalar* level_grad = grad_table + level.offset;
      const Scalar* frac = &tape.fractions[(static_cast<size_t>(s) * n_levels + l) * 3];
      for (int c = 0; c < 8; ++c) {
        const size_t k = (static_cast<size_t>(s) * n_levels + l) * 8 + c;
        const Scalar w = tape.weights[k];
        Scalar* entry_grad = level_grad + static_cast<size_t>(tape.slots[k]) * feats;
        for (int f = 0; f < feats; ++f) entry_grad[f] += w * grad_features(l * feats + f, s);
        if (grad_positions) {
          const Scalar* entry = table + level.offset + static_cast<size_t>(tape.slots[k]) * feats;
          Scalar dot = 0;
          for (int f = 0; f < feats; ++f) dot += entry[f] * grad_features(l * feats + f, s);
          const int bits[3] = {c & 1, (c >> 1) & 1, (c >> 2) & 1};
          for (int a = 0; a < 3; ++a) {
            Scalar dw = bits[a] ? Scalar(1) : Scalar(-1);
            for (int b = 0; b < 3; ++b) {
              if (b != a) dw *= bits[b] ? frac[b] : 1 - frac[b];
            }
            (*grad_positions)(a, s) += dw * static_cast<Scalar>(level.resolution) * dot;
          }
        }
      }
    }
  }
}

}  // namespace lerf
