#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "lcv2i/encoders.hpp"

using namespace lcv2i;
using lcv2i::testing::random_tensor;

namespace {

GridSpec small_spec() {
  GridSpec s;
  s.x_range = 4;
  s.y_range = 4;
  s.cell_size = 1.0;
  s.channels = 4;
  return s;
}

}  // namespace

TEST_CASE("voxelize: single point at a cell center") {
  GridSpec spec = small_spec();
  // center of column 2, row 1: x = -2 + 2.5, y = -2 + 1.5
  std::vector<GlobalPoint> pts{{0.5, -0.5, 1.0, 0.25}};
  VoxelGrid g = voxelize(pts, spec);
  CHECK(g.count_at(0, 1, 2) == 1.0);
  CHECK(g.stat_at(0, 1, 2, 1) == Catch::Approx(0.0).margin(1e-12));
  CHECK(g.stat_at(0, 1, 2, 2) == Catch::Approx(0.0).margin(1e-12));
  CHECK(g.stat_at(0, 1, 2, 4) == 0.25);
  CHECK(g.total_points() == 1.0);
}

TEST_CASE("voxelize: boundary point goes to the lower-index cell") {
  GridSpec spec = small_spec();
  // x = 0 is the exact boundary between columns 1 and 2
  std::vector<GlobalPoint> pts{{0.0, -1.5, 1.0, 1.0}};
  VoxelGrid g = voxelize(pts, spec);
  CHECK(g.count_at(0, 0, 1) == 1.0);
  CHECK(g.count_at(0, 0, 2) == 0.0);

  // the global minimum edge is out of range under (lo, hi] cells
  std::vector<GlobalPoint> edge{{-2.0, 0.5, 1.0, 1.0}};
  CHECK(voxelize(edge, spec).total_points() == 0.0);
}

TEST_CASE("voxelize matches brute-force binning on 1000 random points") {
  GridSpec spec;
  spec.x_range = 8;
  spec.y_range = 8;
  spec.cell_size = 0.5;
  Rng rng(3);
  std::vector<GlobalPoint> pts;
  for (int i = 0; i < 1000; ++i)
    pts.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-1, 9), rng.uniform(0, 1)});
  VoxelGrid g = voxelize(pts, spec);

  const std::size_t h = spec.grid_h(), w = spec.grid_w();
  std::size_t in_range = 0;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double xl = spec.x_min() + c * spec.cell_size, xh = xl + spec.cell_size;
      const double yl = spec.y_min() + r * spec.cell_size, yh = yl + spec.cell_size;
      std::size_t expect = 0;
      for (const auto& p : pts)
        if (p.x > xl && p.x <= xh && p.y > yl && p.y <= yh && p.z > spec.z_min && p.z <= spec.z_max)
          ++expect;
      CHECK(g.count_at(0, r, c) == static_cast<double>(expect));
      in_range += expect;
    }
  CHECK(g.total_points() == static_cast<double>(in_range));
}

TEST_CASE("voxelize is permutation invariant") {
  GridSpec spec = small_spec();
  Rng rng(4);
  std::vector<GlobalPoint> pts;
  for (int i = 0; i < 200; ++i)
    pts.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 3), rng.uniform(0, 1)});
  VoxelGrid a = voxelize(pts, spec);
  std::vector<GlobalPoint> shuffled = pts;
  for (std::size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rng.uniform_index(i)]);
  VoxelGrid b = voxelize(shuffled, spec);
  CHECK(a.stats.data == b.stats.data);
}

TEST_CASE("pillar_encode: empty grid constant, shape contract, locality") {
  GridSpec spec = small_spec();
  Rng rng(5);
  auto params = PillarEncoderParams::init(spec.channels, rng);

  VoxelGrid empty = voxelize({}, spec);
  Var f = pillar_encode(empty, params);
  REQUIRE(f.value().shape == std::vector<std::size_t>{spec.channels, 1, 4, 4});
  for (std::size_t ch = 0; ch < spec.channels; ++ch) {
    const double v0 = f.value().at(ch, 0, 0, 0);
    for (std::size_t i = 0; i < 16; ++i) CHECK(f.value().data[ch * 16 + i] == v0);
  }

  std::vector<GlobalPoint> pts{{0.5, -0.5, 1.0, 0.4}, {1.5, 1.5, 0.5, 0.9}};
  VoxelGrid g1 = voxelize(pts, spec);
  auto doubled = pts;
  for (auto& p : doubled) p.intensity *= 2;
  VoxelGrid g2 = voxelize(doubled, spec);
  Tensor f1 = pillar_encode(g1, params).value();
  Tensor f2 = pillar_encode(g2, params).value();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      bool occupied = g1.count_at(0, r, c) > 0;
      bool differs = false;
      for (std::size_t ch = 0; ch < spec.channels; ++ch)
        differs = differs || f1.at(ch, 0, r, c) != f2.at(ch, 0, r, c);
      CHECK(differs == occupied);
    }

  GridSpec wrong = spec;
  wrong.channels = 8;
  VoxelGrid gw = voxelize({}, wrong);
  CHECK_THROWS_AS(pillar_encode(gw, params), ConfigError);
}

TEST_CASE("image_encode: zero image constant, shape, shift equivariance") {
  Rng rng(6);
  auto params = ImageEncoderParams::init(6, rng);

  Tensor zero = Tensor::zeros({1, 16, 16});
  Tensor f0 = image_encode(zero, params).value();
  REQUIRE(f0.shape == std::vector<std::size_t>{6, 4, 4});
  for (std::size_t ch = 0; ch < 6; ++ch)
    for (std::size_t i = 0; i < 16; ++i)
      CHECK(f0.data[ch * 16 + i] == Catch::Approx(f0.data[ch * 16]).margin(1e-12));

  Tensor img = random_tensor({1, 32, 32}, rng, 0, 1);
  Tensor shifted = Tensor::zeros({1, 32, 32});
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 4; j < 32; ++j) shifted.at(0, i, j) = img.at(0, i, j - 4);
  Tensor fa = image_encode(img, params).value();
  Tensor fb = image_encode(shifted, params).value();
  for (std::size_t ch = 0; ch < 6; ++ch)
    for (std::size_t i = 2; i < 6; ++i)
      for (std::size_t j = 2; j < 6; ++j)
        CHECK(fb.at(ch, i, j) == Catch::Approx(fa.at(ch, i, j - 1)).margin(1e-9));

  CHECK_THROWS_AS(image_encode(zero, params, 32, 32), ConfigError);
}

TEST_CASE("encoders are reproducible under a fixed seed") {
  GridSpec spec = small_spec();
  Rng ra(7), rb(7);
  auto pa = PillarEncoderParams::init(spec.channels, ra);
  auto pb = PillarEncoderParams::init(spec.channels, rb);
  CHECK(pa.w1.value().data == pb.w1.value().data);

  std::vector<GlobalPoint> pts{{0.5, -0.5, 1.0, 0.4}};
  VoxelGrid g = voxelize(pts, spec);
  Tensor f1 = pillar_encode(g, pa).value();
  Tensor f2 = pillar_encode(g, pb).value();
  CHECK(f1.data == f2.data);
  CHECK(Tensor(f1).all_finite());
}

TEST_CASE("pose transforms round-trip within 1e-9") {
  Pose2 pose{3.2, -1.7, 0.8};
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    Vec3 p{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(0, 3)};
    Vec3 rt = pose.to_local(pose.to_global(p));
    CHECK(std::abs(rt.x - p.x) < 1e-9);
    CHECK(std::abs(rt.y - p.y) < 1e-9);
    CHECK(std::abs(rt.z - p.z) < 1e-9);
  }
}

TEST_CASE("to_global_frame on features: identity, shift round trip, rotation") {
  GridSpec spec = small_spec();
  Rng rng(9);
  Tensor feat = random_tensor({2, 4, 4}, rng);

  Tensor same = to_global_frame(Var(feat), spec, Pose2{0, 0, 0}).value();
  for (std::size_t i = 0; i < feat.numel(); ++i)
    CHECK(same.data[i] == Catch::Approx(feat.data[i]).margin(1e-12));

  // +1 cell then -1 cell: interior cells recover the original
  Var a = to_global_frame(Var(feat), spec, Pose2{spec.cell_size, 0, 0});
  Tensor b = to_global_frame(a, spec, Pose2{-spec.cell_size, 0, 0}).value();
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t r = 1; r < 3; ++r)
      for (std::size_t c = 1; c < 3; ++c)
        CHECK(b.at(ch, r, c) == Catch::Approx(feat.at(ch, r, c)).margin(1e-9));

  // 90 degree yaw sends the impulse to the hand-rotated cell
  Tensor impulse = Tensor::zeros({1, 4, 4});
  impulse.at(0, 1, 3) = 1.0;  // cell center x=1.5, y=-0.5
  Tensor rot = to_global_frame(Var(impulse), spec, Pose2{0, 0, 3.14159265358979323846 / 2}).value();
  // to_global of (1.5, -0.5) under 90deg yaw is (0.5, 1.5): col 2, row 3
  CHECK(rot.at(0, 3, 2) == Catch::Approx(1.0).margin(1e-9));
  double total = 0;
  for (double v : rot.data) total += v;
  CHECK(total == Catch::Approx(1.0).margin(1e-9));
}
