#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "lcv2i/rfea.hpp"

using namespace lcv2i;
using lcv2i::testing::random_tensor;

namespace {

// Independent double-loop re-implementation of the difference rule used as
// the oracle for the library path.
Tensor brute_force_vd(const Tensor& feature, double sigma, std::size_t kernel) {
  const std::size_t c = feature.shape[0], h = feature.shape[1], w = feature.shape[2];
  std::vector<std::vector<double>> mag(h, std::vector<double>(w, 0.0));
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t col = 0; col < w; ++col) {
      double s = 0;
      for (std::size_t ch = 0; ch < c; ++ch) s += std::abs(feature.at(ch, r, col));
      mag[r][col] = s / static_cast<double>(c);
    }
  std::vector<std::vector<double>> sm(h, std::vector<double>(w, 0.0));
  if (sigma == 0.0) {
    sm = mag;
  } else {
    const long rad = static_cast<long>(kernel) / 2;
    std::vector<double> ker(kernel * kernel);
    double total = 0;
    for (long i = -rad; i <= rad; ++i)
      for (long j = -rad; j <= rad; ++j) {
        const double v = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
        ker[(i + rad) * kernel + (j + rad)] = v;
        total += v;
      }
    for (auto& v : ker) v /= total;
    for (long r = 0; r < static_cast<long>(h); ++r)
      for (long col = 0; col < static_cast<long>(w); ++col) {
        double acc = 0;
        for (long i = -rad; i <= rad; ++i)
          for (long j = -rad; j <= rad; ++j) {
            const long rr = r + i, cc = col + j;
            if (rr < 0 || rr >= static_cast<long>(h) || cc < 0 || cc >= static_cast<long>(w)) continue;
            acc += mag[rr][cc] * ker[(i + rad) * kernel + (j + rad)];
          }
        sm[r][col] = acc;
      }
  }
  Tensor out = Tensor::zeros({h, w});
  for (long r = 0; r < static_cast<long>(h); ++r)
    for (long col = 0; col < static_cast<long>(w); ++col) {
      if (h == 1 && w == 1) {
        out.data[0] = sm[0][0];
        continue;
      }
      auto get = [&](long rr, long cc) {
        if (rr < 0 || rr >= static_cast<long>(h) || cc < 0 || cc >= static_cast<long>(w)) return 0.0;
        return sm[rr][cc];
      };
      const double vc = sm[r][col];
      out.data[r * w + col] = (std::abs(vc - get(r - 1, col)) + std::abs(vc - get(r + 1, col)) +
                               std::abs(vc - get(r, col - 1)) + std::abs(vc - get(r, col + 1))) /
                              4.0;
    }
  return out;
}

}  // namespace

TEST_CASE("channel magnitude: zeros, single channel, hand value") {
  Tensor zero = Tensor::zeros({3, 2, 2});
  for (double v : channel_magnitude(zero).data) CHECK(v == 0.0);

  Tensor one({1, 2, 2}, {1, -2, 3, -4});
  CHECK(channel_magnitude(one).data == std::vector<double>{1, 2, 3, 4});

  Tensor two = Tensor::zeros({2, 1, 1});
  two.data = {1, -3};
  CHECK(channel_magnitude(two).data[0] == 2.0);
}

TEST_CASE("regional difference map: constant input, 1x1 branch, 3x3 hand trace") {
  Tensor flat = Tensor::full({2, 4, 4}, 0.2);
  auto md = regional_difference_map(flat, 0.0, 3, 0.5);
  CHECK(md.mask.popcount() == 0);
  Tensor vd = feature_difference_matrix(flat, 0.0, 3);
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t c = 1; c < 3; ++c) CHECK(vd.at(r, c) == 0.0);

  Tensor single({1, 1, 1}, {0.7});
  CHECK(feature_difference_matrix(single, 0.0, 3).data[0] == 0.7);
  CHECK(regional_difference_map(single, 0.0, 3, 0.5).mask.bits[0] == 1);
  CHECK(regional_difference_map(single, 0.0, 3, 0.9).mask.bits[0] == 0);
  // tie maps to zero
  CHECK(regional_difference_map(single, 0.0, 3, 0.7).mask.bits[0] == 0);

  Tensor impulse = Tensor::zeros({1, 3, 3});
  impulse.at(0, 1, 1) = 1.0;
  Tensor v = feature_difference_matrix(impulse, 0.0, 3);
  CHECK(v.at(1, 1) == 1.0);
  CHECK(v.at(0, 1) == 0.25);
  CHECK(v.at(1, 0) == 0.25);
  CHECK(v.at(0, 0) == 0.0);
  auto m = regional_difference_map(impulse, 0.0, 3, 0.5);
  CHECK(m.mask.popcount() == 1);
  CHECK(m.mask.at(1, 1) == 1);
  CHECK(m.threshold_used == 0.5);
  CHECK(m.sigma_used == 0.0);
}

TEST_CASE("difference matrix equals the pre-threshold field and the oracle") {
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const double sigma = rep % 2 == 0 ? 0.0 : 1.0;
    Tensor f = random_tensor({3, 16, 16}, rng, -2, 2);
    Tensor vd = feature_difference_matrix(f, sigma, 3);
    Tensor oracle = brute_force_vd(f, sigma, 3);
    for (std::size_t i = 0; i < vd.numel(); ++i)
      CHECK(vd.data[i] == Catch::Approx(oracle.data[i]).margin(sigma == 0 ? 0.0 : 1e-12));

    auto md = regional_difference_map(f, sigma, 3, 0.1);
    CHECK(md.mask.is_binary());
    for (std::size_t i = 0; i < vd.numel(); ++i)
      CHECK(md.mask.bits[i] == (vd.data[i] > 0.1 ? 1 : 0));
  }
}

TEST_CASE("raising the threshold never adds mask cells") {
  Rng rng(4);
  Tensor f = random_tensor({2, 12, 12}, rng, -1, 1);
  std::size_t prev = regional_difference_map(f, 1.0, 3, 0.01).mask.popcount();
  for (double t : {0.05, 0.1, 0.2, 0.4, 0.8}) {
    const std::size_t cur = regional_difference_map(f, 1.0, 3, t).mask.popcount();
    CHECK(cur <= prev);
    prev = cur;
  }
}

TEST_CASE("scaling the features scales the difference field linearly") {
  Rng rng(5);
  Tensor f = random_tensor({2, 10, 10}, rng, -1, 1);
  const double lambda = 3.5;
  Tensor scaled = f;
  for (double& v : scaled.data) v *= lambda;

  Tensor vd = feature_difference_matrix(f, 1.0, 3);
  Tensor vds = feature_difference_matrix(scaled, 1.0, 3);
  for (std::size_t i = 0; i < vd.numel(); ++i)
    CHECK(vds.data[i] == Catch::Approx(lambda * vd.data[i]).margin(1e-10));

  auto a = regional_difference_map(f, 1.0, 3, 0.1);
  auto b = regional_difference_map(scaled, 1.0, 3, lambda * 0.1);
  CHECK(a.mask.bits == b.mask.bits);
}

TEST_CASE("non-positive threshold is rejected") {
  Tensor f = Tensor::zeros({1, 2, 2});
  CHECK_THROWS_AS(regional_difference_map(f, 0.0, 3, 0.0), ConfigError);
  CHECK_THROWS_AS(regional_difference_map(f, 0.0, 3, -1.0), ConfigError);
}
