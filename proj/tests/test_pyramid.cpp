#include "doctest.h"
#include "lerf/pyramid.hpp"
#include "generators.hpp"
#include "oracles.hpp"

#include <cstring>
#include <random>

using namespace lerf;

using gen::random_container;

TEST_CASE("level scales are geometric with exact endpoints") {
  const PyramidConfig c;
  const auto s = level_scales(c);
  REQUIRE(s.size() == 7);
  CHECK(s.front() == 0.05);
  CHECK(s.back() == 0.5);
  for (size_t i = 1; i + 1 < s.size(); ++i) CHECK(s[i] * s[i] == doctest::Approx(s[i - 1] * s[i + 1]));
}

TEST_CASE("axis centers cover the image with the configured overlap") {
  const auto c = axis_centers(128, 24, 0.5);
  CHECK(c.front() == 12);
  CHECK(c.back() == 116);
  for (size_t i = 1; i + 1 < c.size(); ++i) CHECK(c[i] - c[i - 1] == doctest::Approx(12));
  CHECK(c == oracle::centers(128, 24, 0.5));
  CHECK(axis_centers(10, 10, 0.5) == std::vector<double>{5});
  CHECK_THROWS_AS(axis_centers(10, 12, 0.5), Error);
}

TEST_CASE("grid layout is row-major") {
  const auto g = build_grid_layout(40, 20, 10, 0.5);
  REQUIRE(g.size() == 7 * 3);
  CHECK(g[0].x == 5);
  CHECK(g[0].y == 5);
  CHECK(g[1].x == 10);
  CHECK(g[7].y == 10);
}

TEST_CASE("interpolation agrees with the tent-function oracle and hits stored crops") {
  PyramidConfig c;
  c.embed_dim = 6;
  const int w = 64, h = 48;
  auto cont = random_container(1, w, h, c, 2, 17);
  attach_layout(cont, w, h, c);
  const auto& p = cont.frames[0];
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> ux(-3, w + 3), uy(-3, h + 3), us(0.03, 0.6);
  for (int i = 0; i < 500; ++i) {
    const double x = ux(rng), y = uy(rng), s = us(rng);
    const auto got = interpolate_language_target(p, x, y, s);
    const auto ref = oracle::pyramid_target(p, w, h, c, x, y, s);
    REQUIRE((got - ref).cwiseAbs().maxCoeff() < 1e-9);
  }
  const auto fr = level_scales(c);
  for (size_t l = 0; l < fr.size(); ++l) {
    const auto& g = p.levels[l];
    for (std::uint32_t j = 0; j < g.ny; ++j) {
      for (std::uint32_t i = 0; i < g.nx; ++i) {
        const auto got = interpolate_language_target(p, p.centers_x[l][i], p.centers_y[l][j], fr[l]);
        const auto e = g.embedding(i, j, c.embed_dim);
        const Eigen::VectorXd stored =
            Eigen::Map<const Eigen::VectorXf>(e.data(), static_cast<Eigen::Index>(e.size())).cast<double>();
        CHECK((got - stored.normalized()).cwiseAbs().maxCoeff() == 0.0);
      }
    }
  }
}

TEST_CASE("interpolation needs an attached layout") {
  PyramidConfig c;
  c.embed_dim = 4;
  auto cont = random_container(1, 32, 32, c, 2, 1);
  CHECK_THROWS_AS(interpolate_language_target(cont.frames[0], 5, 5, 0.1), Error);
}

TEST_CASE("attach_layout rejects a grid that disagrees with the configuration") {
  PyramidConfig c;
  c.embed_dim = 4;
  auto cont = random_container(1, 32, 32, c, 2, 1);
  cont.frames[0].levels[2].nx += 1;
  CHECK_THROWS_AS(attach_layout(cont, 32, 32, c), Error);
}

TEST_CASE("dino sampling reproduces grid nodes") {
  PyramidConfig c;
  c.embed_dim = 4;
  auto cont = random_container(1, 64, 48, c, 3, 5);
  attach_dino_strides(cont, 64, 48);
  const auto& m = cont.dino[0];
  CHECK(m.stride_x == 4.0);
  for (std::uint32_t i = 0; i < m.height; i += 3) {
    for (std::uint32_t j = 0; j < m.width; j += 5) {
      const auto v = sample_dino_target(m, (j + 0.5) * m.stride_x, (i + 0.5) * m.stride_y);
      const auto f = m.at(i, j);
      for (int k = 0; k < 3; ++k) CHECK(v[k] == doctest::Approx(f[k]).epsilon(1e-12));
    }
  }
}

TEST_CASE("container round trip is byte identical") {
  PyramidConfig c;
  c.embed_dim = 8;
  const auto cont = random_container(2, 40, 30, c, 4, 9);
  const auto bytes = encode_container(cont);
  const auto back = decode_container(bytes);
  CHECK(encode_container(back) == bytes);
  CHECK(back.frames.size() == 2);
  CHECK(back.dino[1].features == cont.dino[1].features);
}

TEST_CASE("corrupted containers are rejected with a location") {
  PyramidConfig c;
  c.embed_dim = 4;
  const auto bytes = encode_container(random_container(1, 32, 24, c, 2, 3));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_container(bad), doctest::Contains("magic"), LoadError);
  bad = bytes;
  bad[4] = 9;
  CHECK_THROWS_WITH_AS(decode_container(bad), doctest::Contains("version"), LoadError);
  bad = bytes;
  bad.resize(bad.size() - 3);
  CHECK_THROWS_AS(decode_container(bad), LoadError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_container(bad), LoadError);
  // Break the unit norm of the first crop of level 0.
  bad = bytes;
  const size_t first_value = 4 + 5 * 4 + 3 * 4;
  float v = 3.0f;
  std::memcpy(bad.data() + first_value, &v, 4);
  CHECK_THROWS_WITH_AS(decode_container(bad), doctest::Contains("frame 0"), LoadError);
}
