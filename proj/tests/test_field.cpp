#include "doctest.h"
#include "lerf/field.hpp"

#include <algorithm>
#include <random>
#include <vector>

using namespace lerf;

namespace {

FieldConfig tiny_config() {
  FieldConfig c;
  c.language_grid = {4, 4, 16, 1u << 10, 2};
  c.clip_head = {2, 8, 5};
  c.dino_head = {1, 8, 3};
  c.radiance_grid = {4, 4, 16, 1u << 10, 2};
  c.density_head = {1, 8, 4};
  c.color_head = {1, 8, 3};
  return c;
}

Matrix3X<double> random_points(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(-1.6, 1.6);
  Matrix3X<double> x(3, n);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  return x;
}

}  // namespace

TEST_CASE("parameter blocks tile the vector with language first") {
  const auto layout = make_field_layout(tiny_config());
  size_t cursor = 0;
  bool seen_radiance = false;
  for (const auto& b : layout.blocks) {
    CHECK(b.offset == cursor);
    cursor += b.size;
    if (b.component == Component::Radiance) seen_radiance = true;
    if (seen_radiance) CHECK(b.component == Component::Radiance);
  }
  CHECK(cursor == layout.total);
  CHECK(layout.language_end == layout.radiance_begin);
  CHECK(layout.radiance_end == layout.total);
}

TEST_CASE("field outputs respect their ranges") {
  FieldModel<double> field(tiny_config());
  field.initialize(1, 0.5);
  std::mt19937_64 rng(2);
  const auto x = random_points(rng, 50);
  Matrix3X<double> dirs = random_points(rng, 50).colwise().normalized();
  const auto r = field.eval_radiance(x, dirs);
  CHECK((r.sigma.array() >= 0).all());
  CHECK((r.rgb.array() >= 0).all());
  CHECK((r.rgb.array() <= 1).all());
  CHECK(field.eval_density(x).isApprox(r.sigma));
}

TEST_CASE("clip_from_features agrees with eval_language") {
  FieldModel<double> field(tiny_config());
  field.initialize(4, 0.5);
  std::mt19937_64 rng(5);
  const auto x = random_points(rng, 10);
  const VectorX<double> s = VectorX<double>::Constant(10, 0.3);
  const auto out = field.eval_language(x, s);
  const auto clip = field.clip_from_features(field.language_features(x), 0.3);
  CHECK((out.clip - clip).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("language scale must be positive") {
  FieldModel<double> field(tiny_config());
  field.initialize(0);
  CHECK_THROWS_AS(field.eval_language(Matrix3X<double>::Zero(3, 1), VectorX<double>::Zero(1)), Error);
}

TEST_CASE("backward passes match central differences") {
  FieldModel<double> field(tiny_config());
  field.initialize(9, 0.5);
  std::mt19937_64 rng(10);
  const auto x = random_points(rng, 6);
  const Matrix3X<double> dirs = random_points(rng, 6).colwise().normalized();
  VectorX<double> scales(6);
  for (int i = 0; i < 6; ++i) scales[i] = 0.1 + 0.3 * i;
  const MatrixX<double> pc = MatrixX<double>::Random(5, 6), pd = MatrixX<double>::Random(3, 6);
  const MatrixX<double> prgb = MatrixX<double>::Random(3, 6);
  const VectorX<double> psig = VectorX<double>::Random(6);

  const auto loss = [&](const FieldModel<double>& f) {
    const auto l = f.eval_language(x, scales);
    const auto r = f.eval_radiance(x, dirs);
    return (l.clip.array() * pc.array()).sum() + (l.dino.array() * pd.array()).sum() +
           (r.rgb.array() * prgb.array()).sum() + r.sigma.dot(psig);
  };

  auto grad = field.make_gradient();
  LanguageTape<double> lt;
  RadianceTape<double> rt;
  field.eval_language(x, scales, &lt);
  field.eval_radiance(x, dirs, &rt);
  field.language_backward(lt, pc, pd, grad);
  field.radiance_backward(rt, prgb, psig, grad);

  // Fourth-order central stencil; h large enough that roundoff stays far below 1e-5 relative.
  const auto fd_at = [&](size_t k) {
    const double h = 1e-4;
    const auto shifted = [&](double dx) {
      FieldModel<double> f = field;
      f.params()[k] += dx;
      return loss(f);
    };
    return (8 * (shifted(h) - shifted(-h)) - (shifted(2 * h) - shifted(-2 * h))) / (12 * h);
  };
  std::vector<size_t> active, inactive;
  for (Eigen::Index k = 0; k < grad.values.size(); ++k) (grad.values[k] != 0 ? active : inactive).push_back(k);
  REQUIRE(active.size() > 150);
  std::shuffle(active.begin(), active.end(), rng);
  std::shuffle(inactive.begin(), inactive.end(), rng);
  for (size_t i = 0; i < 150; ++i) {
    const size_t k = active[i];
    const double a = grad.values[k], fd = fd_at(k);
    INFO("param ", k, " analytic ", a, " fd ", fd);
    CHECK(std::abs(a - fd) / std::max(std::abs(a), std::abs(fd)) < 1e-5);
  }
  for (size_t i = 0; i < std::min<size_t>(50, inactive.size()); ++i) CHECK(std::abs(fd_at(inactive[i])) < 1e-9);
}

TEST_CASE("backward without a recorded forward pass throws") {
  FieldModel<double> field(tiny_config());
  field.initialize(0);
  auto grad = field.make_gradient();
  LanguageTape<double> lt;
  RadianceTape<double> rt;
  CHECK_THROWS_AS(field.language_backward(lt, MatrixX<double>::Zero(5, 1), MatrixX<double>::Zero(3, 1), grad), Error);
  CHECK_THROWS_AS(field.radiance_backward(rt, Matrix3X<double>::Zero(3, 1), VectorX<double>::Zero(1), grad), Error);
}

TEST_CASE("initialization is deterministic in the seed") {
  FieldModel<float> a(tiny_config()), b(tiny_config()), c(tiny_config());
  a.initialize(42);
  b.initialize(42);
  c.initialize(43);
  CHECK(a.params() == b.params());
  CHECK_FALSE(a.params() == c.params());
}
