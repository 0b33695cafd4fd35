#include "doctest.h"
#include "lerf/checkpoint.hpp"
#include "test_util.hpp"

#include <cstring>

using namespace lerf;

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.field.language_grid = {3, 4, 16, 1u << 10, 2};
  c.field.clip_head = {2, 8, 6};
  c.field.dino_head = {1, 8, 3};
  c.field.radiance_grid = {3, 4, 16, 1u << 10, 2};
  c.field.density_head = {1, 8, 4};
  c.field.color_head = {1, 8, 3};
  c.render.near = 0.2;
  c.render.background = Vec3(0.1, 0.2, 0.3);
  c.step = 1234;
  FieldModel<float> m(c.field);
  m.initialize(7, 0.5);
  c.params = m.params();
  return c;
}

}  // namespace

TEST_CASE("checkpoint write and read are byte identical") {
  TempDir dir;
  const auto c = sample_checkpoint();
  write_checkpoint(dir.path / "a.ckpt", c);
  const auto back = read_checkpoint(dir.path / "a.ckpt");
  CHECK(back.step == 1234);
  CHECK(back.params == c.params);
  CHECK(back.render.background == c.render.background);
  CHECK(encode_checkpoint(back) == encode_checkpoint(c));
  CHECK(checkpoint_hash(back) == checkpoint_hash(c));
}

TEST_CASE("checkpoint corruption is located") {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  auto bad = bytes;
  bad[3] = '!';
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("byte 0"), LoadError);
  bad = bytes;
  bad[8] = 2;
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("byte 8"), LoadError);
  bad = bytes;
  bad.resize(bytes.size() - 4);
  CHECK_THROWS_AS(decode_checkpoint(bad), LoadError);
  bad = bytes;
  const std::uint32_t zero = 0;
  std::memcpy(bad.data() + 20, &zero, 4);  // language grid level count
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("config"), LoadError);
}

TEST_CASE("different parameters hash differently") {
  auto a = sample_checkpoint();
  auto b = a;
  b.params[0] += 1.0f;
  CHECK(checkpoint_hash(a) != checkpoint_hash(b));
}
