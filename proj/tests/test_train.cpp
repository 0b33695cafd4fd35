#include "doctest.h"
#include "lerf/fixture.hpp"
#include "lerf/train.hpp"
#include "test_util.hpp"

#include <cmath>
#include <fstream>

using namespace lerf;

TEST_CASE("learning rate decays exponentially then holds") {
  TrainConfig c;
  CHECK(lr_at(0, c) == doctest::Approx(1e-2).epsilon(1e-12));
  CHECK(lr_at(2500, c) == doctest::Approx(std::sqrt(1e-2 * 1e-3)).epsilon(1e-12));
  CHECK(lr_at(5000, c) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(20000, c) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(1000, c) / lr_at(0, c) == doctest::Approx(lr_at(2000, c) / lr_at(1000, c)));
}

TEST_CASE("first Adam step moves each parameter by lr against the gradient sign") {
  FieldConfig fc;
  fc.language_grid = {2, 2, 4, 1u << 8, 2};
  fc.clip_head = {1, 4, 3};
  fc.dino_head = {1, 4, 2};
  fc.radiance_grid = {2, 2, 4, 1u << 8, 2};
  fc.density_head = {1, 4, 3};
  fc.color_head = {1, 4, 3};
  FieldModel<float> field(fc);
  field.initialize(1, 0.1);
  const Eigen::VectorXf before = field.params();
  auto grad = field.make_gradient();
  for (Eigen::Index i = 0; i < grad.values.size(); ++i) grad.values[i] = (i % 3 == 0 ? -1.0f : 1.0f) * (1e-3f + i);
  TrainConfig tc;
  AdamState state;
  adam_step(field, state, grad, 0.01, tc);
  for (Eigen::Index i = 0; i < before.size(); i += 97) {
    const double expected = before[i] - 0.01 * (grad.values[i] > 0 ? 1 : -1) - 0.01 * 1e-9 * before[i];
    CHECK(field.params()[i] == doctest::Approx(expected).epsilon(1e-5));
  }
  grad.values[5] = std::nanf("");
  CHECK_THROWS_WITH_AS(adam_step(field, state, grad, 0.01, tc), doctest::Contains("language_grid.level0"), Error);
}

TEST_CASE("loss functions") {
  Eigen::VectorXd a(2), b(2);
  a << 1, 0;
  b << std::sqrt(0.5), std::sqrt(0.5);
  CHECK(language_loss(a, b, 0.01) == doctest::Approx(-0.01 * std::sqrt(0.5)));
  CHECK_THROWS_AS(language_loss(2 * a, b, 0.01), Error);
  CHECK(dino_loss(a, b, 1.0) == doctest::Approx(((1 - std::sqrt(0.5)) * (1 - std::sqrt(0.5)) + 0.5) / 2));
  const std::vector<Vec3> c = {Vec3(1, 0, 0)}, t = {Vec3(0, 0, 0)};
  CHECK(rgb_loss(c, t) == doctest::Approx(1.0 / 3));
}

TEST_CASE("train config JSON round trips and keeps defaults for missing keys") {
  TrainConfig c;
  c.lambda_lang = 0.02;
  c.max_steps = 123;
  c.field.clip_head = {2, 16, 8};
  c.pyramid.embed_dim = 8;
  c.render.frustum = FrustumScaleMode::AsPrinted;
  c.render.scene_radius = 2.5;
  c.random_background = true;
  c.init_density_bias = -3;
  const auto back = train_config_from_json(train_config_to_json(c));
  CHECK(back.lambda_lang == 0.02);
  CHECK(back.max_steps == 123);
  CHECK(back.field.clip_head.hidden_width == 16);
  CHECK(back.render.frustum == FrustumScaleMode::AsPrinted);
  CHECK(back.render.scene_radius == 2.5);
  CHECK(back.random_background);
  CHECK(back.init_density_bias == -3);
  CHECK(train_config_to_json(back) == train_config_to_json(c));
  const auto partial = train_config_from_json(R"({"max_steps": 7})");
  CHECK(partial.max_steps == 7);
  CHECK(partial.lambda_lang == 0.01);
  CHECK_THROWS(train_config_from_json("{not json"));
}

TEST_CASE("random streams are independent of each other") {
  RngStreams a(5), b(5);
  for (int i = 0; i < 100; ++i) a.scales();
  CHECK(a.rays() == b.rays());
  CHECK(a.jitter() == b.jitter());
  RngStreams c(6);
  CHECK(RngStreams(5).rays() != c.rays());
}

TEST_CASE("random backgrounds come from their own stream and leave the other streams untouched") {
  TempDir dir;
  FixtureOptions o;
  o.width = 32;
  o.height = 24;
  o.focal = 25;
  make_fixture(dir.path, o);
  const auto dataset = load_dataset(dir.path / "transforms.json");
  auto cont = read_pyramid(dir.path / "embeddings.lerf");
  const auto config = load_train_config(dir.path / "train_config.json");
  attach_layout(cont, o.width, o.height, config.pyramid);
  RngStreams a(5), b(5);
  const auto plain = sample_training_batch(dataset, cont, config.pyramid, config.render, 16, a, false);
  const auto random = sample_training_batch(dataset, cont, config.pyramid, config.render, 16, b, true);
  REQUIRE(plain.size() == random.size());
  for (size_t i = 0; i < plain.size(); ++i) {
    CHECK_FALSE(plain[i].background.has_value());
    REQUIRE(random[i].background.has_value());
    CHECK((random[i].background->array() >= 0).all());
    CHECK((random[i].background->array() <= 1).all());
    CHECK(plain[i].ray.u == random[i].ray.u);
    CHECK(plain[i].s_img == random[i].s_img);
  }
  CHECK(a.rays() == b.rays());
}

TEST_CASE("scene radius divides positions before contraction") {
  Ray r;
  r.origin = Vec3(0, 0, 0);
  r.direction = Vec3(1, 0, 0);
  const std::vector<double> depths = {0.5, 2.0, 5.0};
  const auto unit = sample_positions<double>(r, depths, 1.0);
  const auto wide = sample_positions<double>(r, depths, 2.5);
  CHECK(unit(0, 0) == doctest::Approx(0.5));
  CHECK(wide(0, 0) == doctest::Approx(0.2));
  CHECK(wide(0, 1) == doctest::Approx(0.8));  // still inside the unit ball
  CHECK(unit(0, 1) == doctest::Approx(1.5));  // 2 - 1/2
}

TEST_CASE("trainer is deterministic and writes a loss trace") {
  TempDir dir;
  FixtureOptions o;
  o.width = 32;
  o.height = 24;
  o.focal = 25;
  make_fixture(dir.path, o);
  const auto dataset = load_dataset(dir.path / "transforms.json");
  auto config = load_train_config(dir.path / "train_config.json");
  config.rays_per_step = 32;
  config.max_steps = 3;
  Trainer t1(config, dataset, read_pyramid(dir.path / "embeddings.lerf"));
  Trainer t2(config, dataset, read_pyramid(dir.path / "embeddings.lerf"));
  const auto rows = t1.run();
  t2.run();
  CHECK(rows.size() == 3);
  CHECK(t1.field().params() == t2.field().params());
  const auto ck = t1.checkpoint();
  CHECK(ck.step == 3);
  write_loss_csv(dir.path / "loss.csv", rows);
  std::ifstream in(dir.path / "loss.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,rgb,lang,dino,lr");
}

TEST_CASE("trainer rejects a container whose dimension differs from the config") {
  TempDir dir;
  FixtureOptions o;
  o.width = 32;
  o.height = 24;
  o.focal = 25;
  make_fixture(dir.path, o);
  const auto dataset = load_dataset(dir.path / "transforms.json");
  auto config = load_train_config(dir.path / "train_config.json");
  config.field.clip_head.out_dim = 16;
  config.pyramid.embed_dim = 16;
  CHECK_THROWS_AS(Trainer(config, dataset, read_pyramid(dir.path / "embeddings.lerf")), Error);
}
