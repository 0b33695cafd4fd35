#include "doctest.h"
#include "json.hpp"
#include "lerf/fixture.hpp"
#include "lerf/service.hpp"
#include "lerf/train.hpp"
#include "test_util.hpp"

// After Eigen: <resolv.h> defines an _res macro that clashes with Eigen internals.
#include "httplib.h"

#include <thread>

using namespace lerf;
using nlohmann::json;

namespace {

// Tiny fixture with a barely trained checkpoint; visibility off so every pixel scores.
struct EngineFixture {
  TempDir dir;
  FixtureManifest manifest;
  std::shared_ptr<QueryEngine> engine;

  explicit EngineFixture(EngineOptions options = {}) {
    FixtureOptions o;
    o.width = 32;
    o.height = 24;
    o.focal = 25;
    manifest = make_fixture(dir.path, o);
    const auto train = load_dataset(dir.path / manifest.train_manifest);
    auto config = load_train_config(dir.path / manifest.config);
    config.rays_per_step = 16;
    config.max_steps = 2;
    Trainer trainer(config, train, read_pyramid(dir.path / manifest.embeddings));
    trainer.run();
    options.visibility = false;
    auto provider = std::make_shared<TableTextProvider>(read_phrase_table(dir.path / manifest.phrases));
    engine = std::make_shared<QueryEngine>(trainer.checkpoint(), load_dataset(dir.path / manifest.holdout_manifest),
                                           train, options, provider,
                                           read_phrase_table(dir.path / manifest.canonicals));
  }

  Eigen::VectorXd query(const std::string& region) const {
    return read_embedding_file(dir.path / manifest.positive_queries.at(region));
  }
};

struct RunningService {
  Service service;
  int port;
  std::thread thread;

  explicit RunningService(std::shared_ptr<const QueryEngine> engine)
      : service(std::move(engine)), port(service.bind("127.0.0.1", 0)), thread([this] { service.listen(); }) {}
  ~RunningService() {
    service.stop();
    thread.join();
  }
};

}  // namespace

TEST_CASE("query engine runs selected and manual scale queries") {
  EngineFixture fx;
  QueryRequest req;
  req.view_id = 3;
  req.embedding = fx.query("rug");
  const auto selected = fx.engine->run(req);
  CHECK(selected.scale_source == "selected");
  CHECK(selected.map.width == 32);
  CHECK(selected.map.height == 24);
  CHECK(selected.query == "<embedding>");
  const auto scales = candidate_scales(2.0, 30);
  CHECK(std::find(scales.begin(), scales.end(), selected.selected_scale) != scales.end());

  req.scale = 0.7;
  const auto manual = fx.engine->run(req);
  CHECK(manual.scale_source == "manual");
  CHECK(manual.selected_scale == 0.7);
  const auto sidecar = json::parse(manual.sidecar_json());
  CHECK(sidecar["scale_source"] == "manual");
  CHECK(sidecar["view"] == 3);
  CHECK(sidecar["canonicals"].size() == 4);

  // Same request, same bytes.
  CHECK(fx.engine->run(req).raster_bytes() == manual.raster_bytes());
  CHECK(manual.raster_bytes().size() == 32u * 24u * 4u);
}

TEST_CASE("query engine resolves text through the provider and rejects bad requests") {
  EngineFixture fx;
  QueryRequest req;
  req.view_id = 10;
  req.text = "rug";
  req.scale = 0.5;
  const auto by_text = fx.engine->run(req);
  req.text.reset();
  req.embedding = fx.query("rug");
  CHECK(fx.engine->run(req).raster_bytes() == by_text.raster_bytes());

  req.view_id = 4;  // a training view, not one of the served views
  CHECK_THROWS_AS(fx.engine->run(req), UnknownView);
  req.view_id = 10;
  req.embedding.reset();
  req.text = "purple elephant";
  CHECK_THROWS_AS(fx.engine->run(req), Error);
  req.text.reset();
  CHECK_THROWS_AS(fx.engine->run(req), Error);  // neither text nor embedding
}

TEST_CASE("http endpoints") {
  EngineFixture fx;
  RunningService rs(fx.engine);
  httplib::Client cli("127.0.0.1", rs.port);

  auto res = cli.Get("/health");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(json::parse(res->body) == json{{"status", "ok"}, {"checkpoint_step", 2}});

  res = cli.Get("/views");
  REQUIRE(res);
  const auto views = json::parse(res->body)["views"];
  REQUIRE(views.size() == 3);
  CHECK(views[0]["id"] == 3);
  CHECK(views[0]["transform_matrix"].size() == 16);

  res = cli.Get("/render?view=3");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(res->get_header_value("Content-Type") == "image/png");
  CHECK(res->body.substr(1, 3) == "PNG");
  CHECK(cli.Get("/render?view=999")->status == 404);
  CHECK(cli.Get("/render?view=abc")->status == 400);
  CHECK(cli.Get("/render?view=99999999999999")->status == 400);

  CHECK(cli.Post("/query", R"({"text": "", "view": 3})", "application/json")->status == 400);
  CHECK(cli.Post("/query", "{not json", "application/json")->status == 400);
  CHECK(cli.Post("/query", R"({"text": "rug", "view": 42})", "application/json")->status == 404);

  const auto q = fx.query("box_a");
  const json body = {{"embedding", std::vector<double>(q.data(), q.data() + q.size())}, {"view", 10}};
  res = cli.Post("/query", body.dump(), "application/json");
  REQUIRE(res);
  REQUIRE(res->status == 200);
  const auto reply = json::parse(res->body);
  for (const char* key : {"max_score", "selected_scale", "raster_url", "overlay_url"}) CHECK(reply.contains(key));
  CHECK(reply["scale_source"] == "selected");

  const std::string raster_url = reply["raster_url"];
  const auto raster1 = cli.Get(raster_url);
  REQUIRE(raster1);
  CHECK(raster1->body.size() == 32u * 24u * 4u);
  const auto reply2 = json::parse(cli.Post("/query", body.dump(), "application/json")->body);
  CHECK(reply2["raster_url"] == raster_url);
  CHECK(cli.Get(raster_url)->body == raster1->body);
  const auto overlay = cli.Get(reply["overlay_url"].get<std::string>());
  CHECK(overlay->body.substr(1, 3) == "PNG");
  CHECK(cli.Get("/rasters/0123456789abcdef.f32")->status == 404);

  const auto manual = json::parse(
      cli.Post("/query", json{{"text", "red box"}, {"view", 10}, {"scale", 0.4}}.dump(), "application/json")->body);
  CHECK(manual["scale_source"] == "manual");
  CHECK(manual["selected_scale"] == 0.4);
}

TEST_CASE("binding a busy port fails") {
  EngineFixture fx;
  RunningService rs(fx.engine);
  Service second(fx.engine);
  CHECK_THROWS_AS(second.bind("127.0.0.1", rs.port), PortBusy);
}

TEST_CASE("http provider talks to an embedding service and reports an unreachable one") {
  httplib::Server mock;
  mock.Post("/embed", [](const httplib::Request& req, httplib::Response& res) {
    const auto texts = json::parse(req.body)["texts"];
    json out = json::array();
    for (size_t i = 0; i < texts.size(); ++i) out.push_back({3.0 * (i + 1), 4.0 * (i + 1)});
    res.set_content(json{{"embeddings", out}}.dump(), "application/json");
  });
  const int port = mock.bind_to_any_port("127.0.0.1");
  std::thread t([&] { mock.listen_after_bind(); });
  mock.wait_until_ready();

  HttpTextProvider provider("http://127.0.0.1:" + std::to_string(port));
  const auto e = provider.embed({"a", "b"});
  REQUIRE(e.size() == 2);
  CHECK(e[0][0] == doctest::Approx(0.6));
  CHECK(e[1][1] == doctest::Approx(0.8));
  mock.stop();
  t.join();

  HttpTextProvider down("127.0.0.1:" + std::to_string(port), 1.0);
  CHECK_THROWS_WITH_AS(down.embed({"a"}), doctest::Contains("--embedding-file"), ProviderUnavailable);
}

TEST_CASE("phrase table provider rejects unknown phrases") {
  TableTextProvider p({{"rug", Eigen::VectorXd::Unit(3, 0)}});
  CHECK(p.embed({"rug"})[0] == Eigen::VectorXd::Unit(3, 0));
  CHECK_THROWS_AS(p.embed({"cat"}), Error);
}
