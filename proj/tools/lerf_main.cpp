#include "CLI11.hpp"
#include "lerf/checkpoint.hpp"
#include "lerf/fixture.hpp"
#include "lerf/image_io.hpp"
#include "lerf/provider.hpp"
#include "lerf/service.hpp"
#include "lerf/train.hpp"

#include <csignal>
#include <cmath>
#include <fstream>
#include <iostream>
#include <pthread.h>
#include <thread>

namespace fs = std::filesystem;
using namespace lerf;

namespace {

// Input problems the user can fix (missing files, unknown ids, busy port).
struct UsageError : Error {
  using Error::Error;
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  bool verbose = false;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string(what) + " path is required");
  if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

TrainConfig load_config(const Globals& g) {
  TrainConfig c;
  if (!g.config.empty()) {
    require_file(g.config, "config");
    c = load_train_config(g.config);
  }
  if (g.seed) c.rng_seed = *g.seed;
  return c;
}

struct TrainArgs {
  std::string dataset, embeddings, out = "checkpoint.lerfckpt", loss_csv;
  std::optional<int> max_steps;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  require_file(a.dataset, "dataset manifest");
  require_file(a.embeddings, "embeddings file");
  TrainConfig config = load_config(g);
  if (a.max_steps) config.max_steps = *a.max_steps;
  const SceneDataset dataset = load_dataset(a.dataset);
  Trainer trainer(config, dataset, read_pyramid(a.embeddings));
  std::vector<LossRow> rows;
  const int every = std::max(1, config.max_steps / 20);
  while (trainer.current_step() < config.max_steps) {
    rows.push_back(trainer.step());
    const auto& r = rows.back();
    const auto done = trainer.current_step();
    if (config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.max_steps) {
      write_checkpoint(a.out, trainer.checkpoint());
    }
    if (g.verbose && (r.step % every == 0 || r.step == 1)) {
      std::cerr << "step " << r.step << " rgb " << r.rgb << " lang " << r.lang << " dino " << r.dino << " lr " << r.lr
                << "\n";
    }
  }
  write_checkpoint(a.out, trainer.checkpoint());
  const std::string csv = a.loss_csv.empty() ? (fs::path(a.out).replace_extension(".loss.csv")).string() : a.loss_csv;
  write_loss_csv(csv, rows);
  std::cout << "wrote " << a.out << " and " << csv << " after " << trainer.current_step() << " steps\n";
  return 0;
}

struct RenderArgs {
  std::string checkpoint, dataset, out_dir = "renders";
  std::optional<int> view;
};

int cmd_render(const Globals& g, const RenderArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.dataset, "dataset manifest");
  const Checkpoint ckpt = read_checkpoint(a.checkpoint);
  const auto field = ckpt.model();
  const SceneDataset dataset = load_dataset(a.dataset);
  const Renderer<float> renderer(field, ckpt.render);
  fs::create_directories(a.out_dir);
  bool found = false;
  for (const auto& f : dataset.frames) {
    if (a.view && f.frame_id != *a.view) continue;
    found = true;
    Image img(f.intrinsics.width, f.intrinsics.height);
    std::vector<float> depth(static_cast<size_t>(img.width) * img.height);
    double se = 0;
    for (int v = 0; v < img.height; ++v) {
      for (int u = 0; u < img.width; ++u) {
        const auto r = renderer.render_rgb_depth(generate_ray(f.pose, f.intrinsics, u, v));
        const Eigen::Vector3f c = r.color.cast<float>().cwiseMax(0.0f).cwiseMin(1.0f);
        img.set(u, v, c);
        depth[static_cast<size_t>(v) * img.width + u] = static_cast<float>(r.depth);
        se += (c - f.image.at(u, v)).squaredNorm();
      }
    }
    const double mse = se / (3.0 * img.width * img.height);
    const std::string stem = "view_" + std::to_string(f.frame_id);
    write_png(fs::path(a.out_dir) / (stem + ".png"), img);
    write_raster_f32(fs::path(a.out_dir) / (stem + "_depth.f32"), depth);
    std::cout << "view " << f.frame_id << " psnr " << -10.0 * std::log10(std::max(mse, 1e-12)) << " dB\n";
  }
  if (!found) throw UsageError("unknown view id " + std::to_string(*a.view));
  (void)g;
  return 0;
}

struct QueryArgs {
  std::string checkpoint, dataset, views, text, embedding_file, canonicals_file, provider, out = "relevancy";
  std::vector<std::string> canonicals = kCanonicalPhrases;
  int view = 0;
  std::optional<double> scale;
  double temperature = kDefaultTemperature;
  bool no_visibility = false;
  int search_downsample = 1;
};

std::shared_ptr<QueryEngine> make_engine(const std::string& checkpoint, const std::string& dataset,
                                         const std::string& views, const std::string& canonicals_file,
                                         std::shared_ptr<const TextEmbeddingProvider> provider, EngineOptions opts) {
  require_file(checkpoint, "checkpoint");
  require_file(dataset, "dataset manifest");
  if (!views.empty()) require_file(views, "views manifest");
  std::map<std::string, Eigen::VectorXd> table;
  if (!canonicals_file.empty()) {
    require_file(canonicals_file, "canonicals file");
    table = read_phrase_table(canonicals_file);
  }
  SceneDataset training = load_manifest(dataset);
  SceneDataset query_views = views.empty() ? training : load_manifest(views);
  return std::make_shared<QueryEngine>(read_checkpoint(checkpoint), std::move(query_views), std::move(training), opts,
                                       std::move(provider), std::move(table));
}

int cmd_query(const Globals& g, const QueryArgs& a) {
  if (a.text.empty() == a.embedding_file.empty()) throw UsageError("give exactly one of --text or --embedding-file");
  QueryRequest req;
  req.view_id = a.view;
  req.scale = a.scale;
  req.canonicals = a.canonicals;
  req.temperature = a.temperature;
  std::shared_ptr<const TextEmbeddingProvider> provider;
  if (!a.embedding_file.empty()) {
    require_file(a.embedding_file, "embedding file");
    req.embedding = read_embedding_file(a.embedding_file);
  } else {
    req.text = a.text;
    if (a.provider.empty()) throw UsageError("text queries need --provider; or pass --embedding-file");
  }
  if (!a.provider.empty()) provider = std::make_shared<HttpTextProvider>(a.provider);
  EngineOptions opts;
  opts.visibility = !a.no_visibility;
  opts.search_downsample = a.search_downsample;
  const auto engine = make_engine(a.checkpoint, a.dataset, a.views, a.canonicals_file, provider, opts);
  QueryResult result;
  try {
    result = engine->run(req);
  } catch (const UnknownView& e) {
    throw UsageError(e.what());
  }
  const fs::path prefix(a.out);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  const auto raster = result.raster_bytes();
  const auto overlay = result.overlay_png();
  std::ofstream(prefix.string() + ".f32", std::ios::binary)
      .write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  std::ofstream(prefix.string() + ".png", std::ios::binary)
      .write(reinterpret_cast<const char*>(overlay.data()), static_cast<std::streamsize>(overlay.size()));
  std::ofstream(prefix.string() + ".json") << result.sidecar_json() << "\n";
  const auto px = localize(result.map);
  std::cout << "view " << a.view << " scale " << result.selected_scale << " (" << result.scale_source << ") max "
            << result.map.max_score() << " at " << px[0] << "," << px[1] << "\n";
  if (g.verbose) std::cerr << "wrote " << prefix.string() << ".{f32,png,json}\n";
  return 0;
}

struct ServeArgs {
  std::string checkpoint, dataset, views, provider, canonicals_file, phrases_file, host = "127.0.0.1";
  int port = 8080;
  bool no_visibility = false;
  int search_downsample = 4;
};

int cmd_serve(const Globals& g, const ServeArgs& a) {
  std::shared_ptr<const TextEmbeddingProvider> provider;
  if (!a.provider.empty() && !a.phrases_file.empty()) throw UsageError("--provider and --phrases-file are exclusive");
  if (!a.provider.empty()) provider = std::make_shared<HttpTextProvider>(a.provider);
  if (!a.phrases_file.empty()) {
    require_file(a.phrases_file, "phrases file");
    provider = std::make_shared<TableTextProvider>(read_phrase_table(a.phrases_file));
  }
  EngineOptions opts;
  opts.visibility = !a.no_visibility;
  opts.search_downsample = a.search_downsample;
  const auto engine = make_engine(a.checkpoint, a.dataset, a.views, a.canonicals_file, provider, opts);

  // Signals go to a dedicated waiter thread; the server threads inherit the mask.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  Service service(engine);
  int port = 0;
  try {
    port = service.bind(a.host, a.port);
  } catch (const PortBusy& e) {
    throw UsageError(e.what());
  }
  std::cout << "listening on http://" << a.host << ":" << port << std::endl;
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    if (g.verbose) std::cerr << "signal " << sig << ", shutting down\n";
    service.stop();
  });
  service.listen();
  // listen() also returns if the server fails; wake the waiter in that case.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}

struct FixtureArgs {
  std::string out = "fixture";
};

int cmd_make_fixture(const Globals& g, const FixtureArgs& a) {
  FixtureOptions opts;
  if (g.seed) opts.seed = *g.seed;
  const auto manifest = make_fixture(a.out, opts);
  std::cout << "wrote fixture to " << a.out << " (" << opts.n_cameras - opts.holdout.size() << " training views, "
            << opts.holdout.size() << " held out)\n";
  if (g.verbose) {
    for (const auto& [name, views] : manifest.boxes) {
      for (const auto& [id, b] : views) {
        std::cerr << name << " view " << id << ": " << b[0] << "," << b[1] << " - " << b[2] << "," << b[3] << "\n";
      }
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-embedded radiance fields on the CPU"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "RNG seed");
  app.add_option("--config", g.config, "training config JSON");
  app.add_flag("-v,--verbose", g.verbose, "progress on stderr");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a field on a dataset and its embeddings");
  train->add_option("--dataset", ta.dataset, "transforms.json")->required();
  train->add_option("--embeddings", ta.embeddings, "embedding container")->required();
  train->add_option("--out", ta.out, "checkpoint path");
  train->add_option("--loss-csv", ta.loss_csv, "loss trace (default: next to the checkpoint)");
  train->add_option("--max-steps", ta.max_steps, "override max_steps");

  RenderArgs ra;
  auto* render = app.add_subcommand("render", "render dataset views and report PSNR");
  render->add_option("--checkpoint", ra.checkpoint)->required();
  render->add_option("--dataset", ra.dataset)->required();
  render->add_option("--view", ra.view, "frame id (default: all)");
  render->add_option("--out-dir", ra.out_dir);

  QueryArgs qa;
  auto* query = app.add_subcommand("query", "relevancy map for one view");
  query->add_option("--checkpoint", qa.checkpoint)->required();
  query->add_option("--dataset", qa.dataset, "training manifest (visibility views)")->required();
  query->add_option("--views", qa.views, "manifest of queryable cameras (default: --dataset)");
  query->add_option("--view", qa.view, "frame id")->required();
  query->add_option("--text", qa.text, "query text, embedded by --provider");
  query->add_option("--embedding-file", qa.embedding_file, "query embedding JSON");
  query->add_option("--canonicals-file", qa.canonicals_file, "phrase -> embedding JSON");
  query->add_option("--canonicals", qa.canonicals, "canonical phrases");
  query->add_option("--provider", qa.provider, "text embedding service host:port");
  query->add_option("--scale", qa.scale, "fixed scale in world units; skips selection");
  query->add_option("--temperature", qa.temperature);
  query->add_flag("--no-visibility", qa.no_visibility, "skip visibility filtering");
  query->add_option("--search-downsample", qa.search_downsample);
  query->add_option("--out", qa.out, "output prefix");

  ServeArgs sa;
  auto* serve = app.add_subcommand("serve", "HTTP query service");
  serve->add_option("--checkpoint", sa.checkpoint)->required();
  serve->add_option("--dataset", sa.dataset)->required();
  serve->add_option("--views", sa.views);
  serve->add_option("--host", sa.host);
  serve->add_option("--port", sa.port, "0 picks a free port");
  serve->add_option("--provider", sa.provider, "text embedding service host:port");
  serve->add_option("--phrases-file", sa.phrases_file, "synthetic provider: phrase -> embedding JSON");
  serve->add_option("--canonicals-file", sa.canonicals_file);
  serve->add_flag("--no-visibility", sa.no_visibility);
  serve->add_option("--search-downsample", sa.search_downsample);

  FixtureArgs fa;
  auto* fixture = app.add_subcommand("make-fixture", "write the synthetic two-box scene");
  fixture->add_option("--out", fa.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*train) return cmd_train(g, ta);
    if (*render) return cmd_render(g, ra);
    if (*query) return cmd_query(g, qa);
    if (*serve) return cmd_serve(g, sa);
    if (*fixture) return cmd_make_fixture(g, fa);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
