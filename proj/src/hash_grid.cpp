#include "lerf/hash_grid.hpp"

#include <string>

namespace lerf {

void HashGridConfig::validate() const {
  if (n_levels < 1) throw Error("hash grid: n_levels must be >= 1");
  if (base_resolution < 1) throw Error("hash grid: base_resolution must be >= 1");
  if (n_levels > 1 && base_resolution >= max_resolution) {
    throw Error("hash grid: base_resolution must be below max_resolution");
  }
  if (table_size == 0 || (table_size & (table_size - 1)) != 0) {
    throw Error("hash grid: table_size must be a power of two");
  }
  if (features_per_level < 1) throw Error("hash grid: features_per_level must be >= 1");
}

HashGridLayout make_hash_layout(const HashGridConfig& config) {
  config.validate();
  HashGridLayout layout;
  layout.config = config;
  const double growth = config.n_levels > 1
                            ? std::exp((std::log(static_cast<double>(config.max_resolution)) -
                                        std::log(static_cast<double>(config.base_resolution))) /
                                       (config.n_levels - 1))
                            : 1.0;
  size_t offset = 0;
  for (int l = 0; l < config.n_levels; ++l) {
    HashLevel level;
    // Small epsilon so exact powers (e.g. 16 * 2^k) do not floor one below.
    level.resolution = static_cast<int>(std::floor(config.base_resolution * std::pow(growth, l) + 1e-9));
    const double vertices = std::pow(static_cast<double>(level.resolution) + 1.0, 3.0);
    level.dense = vertices <= static_cast<double>(config.table_size);
    level.entries = level.dense ? static_cast<std::uint32_t>(vertices) : config.table_size;
    level.offset = offset;
    offset += static_cast<size_t>(level.entries) * config.features_per_level;
    layout.levels.push_back(level);
  }
  layout.param_count = offset;
  return layout;
}

}  // namespace lerf
