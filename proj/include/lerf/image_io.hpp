#pragma once

#include "lerf/common.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace lerf {

/// Row-major RGB image with channel values in [0,1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;  // height * width * 3

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, 0.0f) {}

  Eigen::Vector3f at(int u, int v) const {
    const size_t i = (static_cast<size_t>(v) * width + u) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  void set(int u, int v, const Eigen::Vector3f& c) {
    const size_t i = (static_cast<size_t>(v) * width + u) * 3;
    rgb[i] = c.x();
    rgb[i + 1] = c.y();
    rgb[i + 2] = c.z();
  }
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
/// 8-bit RGBA, row-major, 4 bytes per pixel.
void write_png_rgba(const std::filesystem::path& path, int width, int height,
                    std::span<const std::uint8_t> rgba);
std::vector<std::uint8_t> encode_png_rgba(int width, int height, std::span<const std::uint8_t> rgba);
std::vector<std::uint8_t> encode_png(const Image& image);

/// Raw little-endian f32 raster, row-major, no header (dims live in the JSON sidecar).
void write_raster_f32(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_raster_f32(const std::filesystem::path& path);

}  // namespace lerf
