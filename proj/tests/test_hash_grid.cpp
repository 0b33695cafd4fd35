#include "doctest.h"
#include "lerf/field.hpp"
#include "lerf/hash_grid.hpp"

#include <cmath>
#include <random>

using namespace lerf;

namespace {

// Straight-line trilinear interpolation, one corner at a time, with its own index math.
std::vector<double> brute_encode(const HashGridConfig& c, const std::vector<double>& table, const Vec3& x) {
  std::vector<double> out;
  const double b = std::exp((std::log(double(c.max_resolution)) - std::log(double(c.base_resolution))) /
                            std::max(1, c.n_levels - 1));
  size_t offset = 0;
  for (int l = 0; l < c.n_levels; ++l) {
    const int n = static_cast<int>(std::floor(c.base_resolution * std::pow(b, l) + 1e-9));
    const unsigned long long verts = static_cast<unsigned long long>(n + 1) * (n + 1) * (n + 1);
    const bool dense = verts <= c.table_size;
    const size_t entries = dense ? verts : c.table_size;
    for (int f = 0; f < c.features_per_level; ++f) {
      double acc = 0;
      for (int corner = 0; corner < 8; ++corner) {
        double w = 1;
        unsigned long long idx[3];
        for (int a = 0; a < 3; ++a) {
          const double p = std::clamp(x[a], 0.0, 1.0) * n;
          const int cell = std::min(static_cast<int>(std::floor(p)), n - 1);
          const int bit = (corner >> a) & 1;
          const double t = p - cell;
          w *= bit ? t : 1 - t;
          idx[a] = static_cast<unsigned long long>(cell + bit);
        }
        unsigned long long slot;
        if (dense) {
          slot = idx[0] + (n + 1) * (idx[1] + (n + 1) * idx[2]);
        } else {
          const std::uint32_t h = static_cast<std::uint32_t>(idx[0]) ^ static_cast<std::uint32_t>(idx[1] * 2654435761ull) ^
                                  static_cast<std::uint32_t>(idx[2] * 805459861ull);
          slot = h % c.table_size;
        }
        acc += w * table[offset + slot * c.features_per_level + f];
      }
      out.push_back(acc);
    }
    offset += entries * c.features_per_level;
  }
  return out;
}

}  // namespace

TEST_CASE("hash grid levels grow geometrically and switch to hashing when the table is full") {
  const HashGridConfig c{6, 4, 128, 1u << 12, 2};
  const auto layout = make_hash_layout(c);
  REQUIRE(layout.levels.size() == 6);
  CHECK(layout.levels.front().resolution == 4);
  CHECK(layout.levels.back().resolution == 128);
  for (size_t l = 1; l < layout.levels.size(); ++l) CHECK(layout.levels[l].resolution > layout.levels[l - 1].resolution);
  CHECK(layout.levels.front().dense);
  CHECK_FALSE(layout.levels.back().dense);
  CHECK(layout.levels.back().entries == c.table_size);
}

TEST_CASE("hash grid rejects non power of two tables") {
  HashGridConfig c{4, 4, 32, 1000, 2};
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("hash_encode matches a brute-force trilinear oracle") {
  const HashGridConfig c{5, 3, 60, 1u << 10, 3};
  const auto layout = make_hash_layout(c);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1, 1), pos(-0.05, 1.05);
  std::vector<double> table(layout.param_count);
  for (auto& v : table) v = u(rng);
  Matrix3X<double> x(3, 200);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = pos(rng);
  const auto enc = hash_encode<double>(layout, table.data(), x);
  for (int s = 0; s < x.cols(); ++s) {
    const auto ref = brute_encode(c, table, x.col(s));
    for (int k = 0; k < enc.rows(); ++k) REQUIRE(enc(k, s) == doctest::Approx(ref[k]).epsilon(1e-12));
  }
}

TEST_CASE("hash_backward gives table and position gradients of a linear probe") {
  const HashGridConfig c{3, 4, 16, 1u << 8, 2};
  const auto layout = make_hash_layout(c);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1), pos(0.05, 0.95);
  std::vector<double> table(layout.param_count);
  for (auto& v : table) v = u(rng);
  Matrix3X<double> x(3, 4);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = pos(rng);
  MatrixX<double> probe = MatrixX<double>::Random(c.output_dim(), x.cols());
  HashEncodingTape<double> tape;
  hash_encode<double>(layout, table.data(), x, &tape);
  std::vector<double> gtable(table.size(), 0.0);
  Matrix3X<double> gpos;
  hash_backward<double>(layout, table.data(), tape, probe, gtable.data(), &gpos);

  const auto f = [&](const std::vector<double>& t, const Matrix3X<double>& p) {
    return (hash_encode<double>(layout, t.data(), p).array() * probe.array()).sum();
  };
  const double h = 1e-6;
  for (int trial = 0; trial < 30; ++trial) {
    const size_t k = std::uniform_int_distribution<size_t>(0, table.size() - 1)(rng);
    auto tp = table, tm = table;
    tp[k] += h;
    tm[k] -= h;
    CHECK(gtable[k] == doctest::Approx((f(tp, x) - f(tm, x)) / (2 * h)).epsilon(1e-6).scale(1));
  }
  for (int i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    CHECK(gpos.data()[i] == doctest::Approx((f(table, xp) - f(table, xm)) / (2 * h)).epsilon(1e-5).scale(1));
  }
}

TEST_CASE("hash_backward rejects a gradient that does not match the tape") {
  const auto layout = make_hash_layout({2, 4, 8, 1u << 8, 2});
  std::vector<double> table(layout.param_count, 0.0), grad(layout.param_count, 0.0);
  HashEncodingTape<double> tape;
  hash_encode<double>(layout, table.data(), Matrix3X<double>::Constant(3, 2, 0.5), &tape);
  CHECK_THROWS_AS(hash_backward<double>(layout, table.data(), tape, MatrixX<double>::Zero(4, 3), grad.data()), Error);
}

TEST_CASE("mlp_forward matches a scalar loop reference") {
  const MLPConfig cfg{2, 5, 3};
  const auto layout = make_mlp_layout(4, cfg);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> params(layout.param_count);
  for (auto& p : params) p = u(rng);
  MatrixX<double> in(4, 6);
  for (int i = 0; i < in.size(); ++i) in.data()[i] = u(rng);
  const auto out = mlp_forward<double>(layout, params.data(), in);
  for (int s = 0; s < in.cols(); ++s) {
    std::vector<double> h(in.col(s).data(), in.col(s).data() + 4);
    for (size_t li = 0; li < layout.layers.size(); ++li) {
      const auto& d = layout.layers[li];
      std::vector<double> z(d.out);
      for (int o = 0; o < d.out; ++o) {
        double acc = params[d.bias_offset + o];
        for (int i = 0; i < d.in; ++i) acc += params[d.weight_offset + static_cast<size_t>(i) * d.out + o] * h[i];
        z[o] = (li + 1 < layout.layers.size()) ? std::max(0.0, acc) : acc;
      }
      h = z;
    }
    for (int o = 0; o < 3; ++o) CHECK(out(o, s) == doctest::Approx(h[o]).epsilon(1e-12));
  }
}

TEST_CASE("mlp_backward without a recorded forward pass throws") {
  const auto layout = make_mlp_layout(2, {1, 3, 1});
  std::vector<double> params(layout.param_count, 0.1), grad(layout.param_count, 0.0);
  MlpTape<double> tape;
  CHECK_THROWS_AS(mlp_backward<double>(layout, params.data(), tape, MatrixX<double>::Zero(1, 1), grad.data()), Error);
}
