#pragma once

#include "lerf/checkpoint.hpp"
#include "lerf/provider.hpp"
#include "lerf/query.hpp"
#include "lerf/scene_io.hpp"

#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace lerf {

/// Raised for requests that name a view the engine does not know.
class UnknownView : public Error {
 public:
  using Error::Error;
};

struct QueryRequest {
  int view_id = 0;
  std::optional<std::string> text;
  std::optional<Eigen::VectorXd> embedding;
  std::optional<double> scale;  // skips scale selection
  std::vector<std::string> canonicals = kCanonicalPhrases;
  double temperature = kDefaultTemperature;
};

struct QueryResult {
  std::string query;  // text or "<embedding>"
  RelevancyMap map;
  double selected_scale = 0;
  std::string scale_source;  // "selected" or "manual"
  std::vector<std::string> canonicals;
  double temperature = kDefaultTemperature;

  /// Little-endian f32 raster, row-major.
  std::vector<std::uint8_t> raster_bytes() const;
  std::vector<std::uint8_t> overlay_png() const;
  std::string sidecar_json() const;
};

struct EngineOptions {
  bool visibility = true;
  int search_downsample = 1;
  int scale_increments = 30;
  double scale_range = 2.0;  // world units
  ScaleObjective objective = ScaleObjective::MaxPixel;
  size_t max_cached_views = 8;
};

/// Read-only query pipeline over one checkpoint snapshot. Safe for concurrent use.
class QueryEngine {
 public:
  /// `views` are the cameras that may be queried; `training` supplies the depth views used
  /// for visibility filtering. Canonical embeddings come from `canonical_table` when given,
  /// otherwise from the provider.
  QueryEngine(Checkpoint checkpoint, SceneDataset views, SceneDataset training, EngineOptions options,
              std::shared_ptr<const TextEmbeddingProvider> provider,
              std::map<std::string, Eigen::VectorXd> canonical_table = {});

  QueryResult run(const QueryRequest& request) const;
  /// Rendered RGB of a view, PNG encoded; cached.
  std::vector<std::uint8_t> render_png(int view_id) const;
  std::shared_ptr<const PreparedView> prepared(int view_id) const;

  const Checkpoint& checkpoint() const { return checkpoint_; }
  std::uint64_t snapshot_hash() const { return hash_; }
  const SceneDataset& views() const { return views_; }
  bool has_provider() const { return provider_ != nullptr; }

 private:
  const Frame& frame(int view_id) const;
  const std::vector<DepthView>& depth_views() const;
  std::shared_ptr<const PreparedView> search_view(int view_id) const;

  Checkpoint checkpoint_;
  FieldModel<float> field_;
  std::uint64_t hash_;
  SceneDataset views_;
  SceneDataset training_;
  EngineOptions options_;
  std::shared_ptr<const TextEmbeddingProvider> provider_;
  std::map<std::string, Eigen::VectorXd> canonical_table_;

  mutable std::once_flag depth_once_;
  mutable std::vector<DepthView> depth_views_;
  mutable std::shared_mutex cache_mutex_;
  mutable std::map<std::pair<int, bool>, std::shared_ptr<const PreparedView>> view_cache_;
  mutable std::vector<std::pair<int, bool>> cache_order_;
  mutable std::map<std::pair<int, std::uint64_t>, std::vector<std::uint8_t>> png_cache_;
};

/// Binds the HTTP endpoints to an engine. The caller owns the listen loop lifetime.
class Service {
 public:
  explicit Service(std::shared_ptr<const QueryEngine> engine);
  ~Service();

  /// Returns the bound port, or throws when the port is taken.
  int bind(const std::string& host, int port);
  void listen();  // blocks until stop()
  void stop();

 private:
  void handle_query(const std::string& body, int& status, std::string& out) const;

  std::shared_ptr<const QueryEngine> engine_;
  std::unique_ptr<httplib::Server> server_;
  mutable std::mutex raster_mutex_;
  mutable std::map<std::string, std::vector<std::uint8_t>> rasters_;
  mutable std::vector<std::string> raster_order_;
  std::mutex run_mutex_;
  bool listening_ = false;
  bool stopping_ = false;
};

/// Raised when the requested port cannot be bound.
class PortBusy : public Error {
 public:
  using Error::Error;
};

}  // namespace lerf
