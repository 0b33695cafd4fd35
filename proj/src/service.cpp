#include "lerf/service.hpp"

#include "httplib.h"
#include "json.hpp"
#include "lerf/image_io.hpp"

#include <cstring>
#include <sstream>

namespace lerf {

using json = nlohmann::json;

std::vector<std::uint8_t> QueryResult::raster_bytes() const {
  std::vector<std::uint8_t> out(map.raw.size() * sizeof(float));
  std::memcpy(out.data(), map.raw.data(), out.size());
  return out;
}

std::vector<std::uint8_t> QueryResult::overlay_png() const {
  const auto rgba = map.overlay_rgba();
  return encode_png_rgba(map.width, map.height, rgba);
}

std::string QueryResult::sidecar_json() const {
  json doc;
  doc["query"] = query;
  doc["view"] = map.view_id;
  doc["width"] = map.width;
  doc["height"] = map.height;
  doc["selected_scale"] = selected_scale;
  doc["scale_source"] = scale_source;
  doc["max_score"] = map.max_score();
  doc["canonicals"] = canonicals;
  doc["temperature"] = temperature;
  return doc.dump(2);
}

QueryEngine::QueryEngine(Checkpoint checkpoint, SceneDataset views, SceneDataset training, EngineOptions options,
                         std::shared_ptr<const TextEmbeddingProvider> provider,
                         std::map<std::string, Eigen::VectorXd> canonical_table)
    : checkpoint_(std::move(checkpoint)),
      field_(checkpoint_.model()),
      hash_(checkpoint_hash(checkpoint_)),
      views_(std::move(views)),
      training_(std::move(training)),
      options_(options),
      provider_(std::move(provider)),
      canonical_table_(std::move(canonical_table)) {
  if (views_.frames.empty()) throw Error("query engine: no views");
  if (options_.search_downsample < 1) throw Error("query engine: search downsample must be >= 1");
}

const Frame& QueryEngine::frame(int view_id) const {
  for (const auto& f : views_.frames) {
    if (f.frame_id == view_id) return f;
  }
  throw UnknownView("unknown view id " + std::to_string(view_id));
}

const std::vector<DepthView>& QueryEngine::depth_views() const {
  std::call_once(depth_once_, [&] { depth_views_ = render_depth_views(field_, checkpoint_.render, training_); });
  return depth_views_;
}

namespace {

std::shared_ptr<const PreparedView> build_view(const FieldModel<float>& field, const RenderSettings& settings,
                                               const Frame& f, int downsample, const std::vector<DepthView>* depth) {
  auto view = std::make_shared<PreparedView>(
      prepare_view(field, settings, f.pose, downsample_intrinsics(f.intrinsics, downsample), f.frame_id));
  if (depth) apply_visibility(*view, *depth);
  return view;
}

}  // namespace

std::shared_ptr<const PreparedView> QueryEngine::prepared(int view_id) const {
  const auto key = std::make_pair(view_id, false);
  {
    std::shared_lock lock(cache_mutex_);
    if (auto it = view_cache_.find(key); it != view_cache_.end()) return it->second;
  }
  const Frame& f = frame(view_id);
  const auto* depth = options_.visibility ? &depth_views() : nullptr;
  auto view = build_view(field_, checkpoint_.render, f, 1, depth);
  std::unique_lock lock(cache_mutex_);
  if (auto it = view_cache_.find(key); it != view_cache_.end()) return it->second;
  view_cache_[key] = view;
  cache_order_.push_back(key);
  while (cache_order_.size() > options_.max_cached_views) {
    view_cache_.erase(cache_order_.front());
    cache_order_.erase(cache_order_.begin());
  }
  return view;
}

std::shared_ptr<const PreparedView> QueryEngine::search_view(int view_id) const {
  if (options_.search_downsample == 1) return prepared(view_id);
  const auto key = std::make_pair(view_id, true);
  {
    std::shared_lock lock(cache_mutex_);
    if (auto it = view_cache_.find(key); it != view_cache_.end()) return it->second;
  }
  const auto* depth = options_.visibility ? &depth_views() : nullptr;
  auto view = build_view(field_, checkpoint_.render, frame(view_id), options_.search_downsample, depth);
  std::unique_lock lock(cache_mutex_);
  view_cache_.try_emplace(key, view);
  cache_order_.push_back(key);
  while (cache_order_.size() > options_.max_cached_views) {
    view_cache_.erase(cache_order_.front());
    cache_order_.erase(cache_order_.begin());
  }
  return view;
}

std::vector<std::uint8_t> QueryEngine::render_png(int view_id) const {
  const auto key = std::make_pair(view_id, hash_);
  {
    std::shared_lock lock(cache_mutex_);
    if (auto it = png_cache_.find(key); it != png_cache_.end()) return it->second;
  }
  const Frame& f = frame(view_id);
  const Renderer<float> renderer(field_, checkpoint_.render);
  Image img(f.intrinsics.width, f.intrinsics.height);
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      const auto r = renderer.render_rgb_depth(generate_ray(f.pose, f.intrinsics, u, v));
      img.set(u, v, r.color.cast<float>());
    }
  }
  auto png = encode_png(img);
  std::unique_lock lock(cache_mutex_);
  png_cache_[key] = png;
  return png;
}

QueryResult QueryEngine::run(const QueryRequest& request) const {
  frame(request.view_id);  // validates the id before any expensive work
  QueryContext ctx;
  ctx.temperature = request.temperature;
  if (!(ctx.temperature > 0)) throw Error("temperature must be positive");
  QueryResult result;
  if (request.embedding) {
    ctx.query = request.embedding->normalized();
    result.query = request.text.value_or("<embedding>");
  } else if (request.text) {
    if (request.text->empty()) throw Error("query text is empty");
    if (!provider_) throw ProviderUnavailable("no embedding provider configured; pass --embedding-file");
    ctx.query = provider_->embed({*request.text}).front();
    result.query = *request.text;
  } else {
    throw Error("query needs text or an embedding");
  }
  if (request.canonicals.empty()) throw Error("at least one canonical phrase is required");
  std::vector<std::string> missing;
  for (const auto& label : request.canonicals) {
    if (!canonical_table_.count(label)) missing.push_back(label);
  }
  std::map<std::string, Eigen::VectorXd> fetched;
  if (!missing.empty()) {
    if (!provider_) throw ProviderUnavailable("no embedding for canonical phrase '" + missing.front() + "'");
    const auto vecs = provider_->embed(missing);
    for (size_t i = 0; i < missing.size(); ++i) fetched[missing[i]] = vecs[i];
  }
  for (const auto& label : request.canonicals) {
    const auto it = canonical_table_.find(label);
    ctx.canonicals.push_back(it != canonical_table_.end() ? it->second : fetched.at(label));
    ctx.labels.push_back(label);
  }
  ctx.validate();

  const auto view = prepared(request.view_id);
  if (request.scale) {
    result.map = render_relevancy_map(*view, field_, ctx, *request.scale);
    result.selected_scale = *request.scale;
    result.scale_source = "manual";
  } else {
    const auto scales = candidate_scales(options_.scale_range, options_.scale_increments);
    const auto search = search_view(request.view_id);
    auto sel = select_scale(*view, *search, field_, ctx, scales, options_.objective);
    result.map = std::move(sel.map);
    result.selected_scale = sel.scale;
    result.scale_source = "selected";
  }
  result.canonicals = request.canonicals;
  result.temperature = ctx.temperature;
  return result;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 1469598103934665603ull) {
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

QueryRequest parse_query(const std::string& body) {
  const json doc = json::parse(body);
  if (!doc.is_object()) throw Error("query body must be a JSON object");
  QueryRequest req;
  if (!doc.contains("view")) throw Error("query needs a view");
  req.view_id = doc.at("view").get<int>();
  if (doc.contains("text")) req.text = doc.at("text").get<std::string>();
  if (doc.contains("embedding")) {
    const auto values = doc.at("embedding").get<std::vector<double>>();
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
    if (v.size() == 0 || !v.allFinite() || !(v.norm() > 0)) throw Error("embedding must be finite and nonzero");
    req.embedding = v;
  }
  if (doc.contains("scale")) req.scale = doc.at("scale").get<double>();
  if (doc.contains("canonicals")) req.canonicals = doc.at("canonicals").get<std::vector<std::string>>();
  if (doc.contains("temperature")) req.temperature = doc.at("temperature").get<double>();
  if (req.text && req.text->empty() && !req.embedding) throw Error("query text is empty");
  return req;
}

}  // namespace

Service::Service(std::shared_ptr<const QueryEngine> engine)
    : engine_(std::move(engine)), server_(std::make_unique<httplib::Server>()) {
  auto& svr = *server_;
  // Plain SO_REUSEADDR: the library default of SO_REUSEPORT would let a second server
  // share a busy port silently.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  svr.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"checkpoint_step", engine_->checkpoint().step}});
  });
  svr.Get("/views", [this](const httplib::Request&, httplib::Response& res) {
    json views = json::array();
    for (const auto& f : engine_->views().frames) {
      const auto& k = f.intrinsics;
      std::vector<double> tm;
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) tm.push_back(f.pose.camera_to_world(r, c));
      }
      views.push_back({{"id", f.frame_id},
                       {"width", k.width},
                       {"height", k.height},
                       {"fl_x", k.fx},
                       {"fl_y", k.fy},
                       {"cx", k.cx},
                       {"cy", k.cy},
                       {"transform_matrix", tm}});
    }
    send_json(res, 200, {{"views", views}});
  });
  svr.Get("/render", [this](const httplib::Request& req, httplib::Response& res) {
    if (!req.has_param("view")) return send_json(res, 400, {{"error", "missing view parameter"}});
    try {
      const auto png = engine_->render_png(std::stoi(req.get_param_value("view")));
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    } catch (const UnknownView& e) {
      send_json(res, 404, {{"error", e.what()}});
    } catch (const std::logic_error&) {  // stoi: invalid_argument or out_of_range
      send_json(res, 400, {{"error", "view must be an integer"}});
    }
  });
  svr.Post("/query", [this](const httplib::Request& req, httplib::Response& res) {
    int status = 200;
    std::string out;
    handle_query(req.body, status, out);
    res.status = status;
    res.set_content(out, "application/json");
  });
  svr.Get(R"(/rasters/([0-9a-f]+\.(f32|png|json)))", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    std::lock_guard lock(raster_mutex_);
    const auto it = rasters_.find(id);
    if (it == rasters_.end()) return send_json(res, 404, {{"error", "unknown raster " + id}});
    const std::string ext = req.matches[2];
    const char* type = ext == "png" ? "image/png" : ext == "json" ? "application/json" : "application/octet-stream";
    res.set_content(std::string(it->second.begin(), it->second.end()), type);
  });
}

Service::~Service() = default;

void Service::handle_query(const std::string& body, int& status, std::string& out) const {
  QueryRequest request;
  try {
    request = parse_query(body);
  } catch (const std::exception& e) {
    status = 400;
    out = json{{"error", e.what()}}.dump();
    return;
  }
  try {
    const QueryResult result = engine_->run(request);
    const auto raster = result.raster_bytes();
    const auto overlay = result.overlay_png();
    const std::string sidecar = result.sidecar_json();
    std::uint64_t h = fnv1a(raster, engine_->snapshot_hash());
    h = fnv1a({reinterpret_cast<const std::uint8_t*>(sidecar.data()), sidecar.size()}, h);
    const std::string id = hex64(h);
    {
      std::lock_guard lock(raster_mutex_);
      // Identical queries share one id; only new ids enter the eviction order.
      if (rasters_.emplace(id + ".f32", raster).second) {
        rasters_[id + ".png"] = overlay;
        rasters_[id + ".json"] = std::vector<std::uint8_t>(sidecar.begin(), sidecar.end());
        raster_order_.push_back(id);
      }
      while (raster_order_.size() > 64) {
        for (const char* ext : {".f32", ".png", ".json"}) rasters_.erase(raster_order_.front() + ext);
        raster_order_.erase(raster_order_.begin());
      }
    }
    out = json{{"max_score", result.map.max_score()},
               {"selected_scale", result.selected_scale},
               {"scale_source", result.scale_source},
               {"width", result.map.width},
               {"height", result.map.height},
               {"raster_url", "/rasters/" + id + ".f32"},
               {"overlay_url", "/rasters/" + id + ".png"},
               {"sidecar_url", "/rasters/" + id + ".json"}}
              .dump();
  } catch (const UnknownView& e) {
    status = 404;
    out = json{{"error", e.what()}}.dump();
  } catch (const ProviderUnavailable& e) {
    status = 502;
    out = json{{"error", e.what()}}.dump();
  } catch (const Error& e) {
    status = 400;
    out = json{{"error", e.what()}}.dump();
  }
}

int Service::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = server_->bind_to_any_port(host);
    if (bound < 0) throw PortBusy("cannot bind any port on " + host);
    return bound;
  }
  if (!server_->bind_to_port(host, port)) throw PortBusy("port " + std::to_string(port) + " on " + host + " is busy");
  return port;
}

void Service::listen() {
  {
    std::lock_guard lock(run_mutex_);
    if (stopping_) return;
    listening_ = true;
  }
  server_->listen_after_bind();
}

// httplib ignores stop() before its loop is running, so a stop racing a starting listen()
// waits for the loop first.
void Service::stop() {
  {
    std::lock_guard lock(run_mutex_);
    stopping_ = true;
    if (!listening_) return;
  }
  server_->wait_until_ready();
  server_->stop();
}

}  // namespace lerf
