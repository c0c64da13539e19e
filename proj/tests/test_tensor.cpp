#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "lcv2i/tensor.hpp"

using namespace lcv2i;
using lcv2i::testing::grad_check;
using lcv2i::testing::random_tensor;

TEST_CASE("linear identity and hand evaluation") {
  Var x(Tensor({1, 2}, {1, 2}));
  Var w(Tensor({2, 2}, {1, 0, 0, 1}));
  Var b(Tensor({2}, {0, 0}));
  Var y = linear(x, w, b);
  CHECK(y.value().data == std::vector<double>{1, 2});

  Var x2(Tensor({1, 2}, {1, 1}));
  Var w2(Tensor({2, 1}, {2, 3}));
  Var b2(Tensor({1}, {1}));
  CHECK(linear(x2, w2, b2).value().data[0] == Catch::Approx(6.0));
}

TEST_CASE("linear shape contract and mismatch error") {
  Rng rng(1);
  Var x(random_tensor({3, 4}, rng));
  Var w(random_tensor({4, 2}, rng));
  Var b(Tensor::zeros({2}));
  CHECK(linear(x, w, b).value().shape == std::vector<std::size_t>{3, 2});

  Var wbad(random_tensor({5, 2}, rng));
  CHECK_THROWS_AS(linear(x, wbad, b), DimensionError);
  CHECK_THROWS_WITH(linear(x, wbad, b),
                    Catch::Matchers::ContainsSubstring("(3, 4)") &&
                        Catch::Matchers::ContainsSubstring("(5, 2)"));
}

TEST_CASE("softmax uniform, shift invariance, hand case") {
  Var z(Tensor({3}, {0, 0, 0}));
  auto y = softmax(z, 0).value();
  for (double v : y.data) CHECK(v == Catch::Approx(1.0 / 3.0));

  Rng rng(2);
  Tensor x = random_tensor({5}, rng);
  Tensor xc = x;
  for (double& v : xc.data) v += 7.25;
  auto a = softmax(Var(x), 0).value();
  auto b = softmax(Var(xc), 0).value();
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data[i] == Catch::Approx(b.data[i]).margin(1e-12));

  Var two(Tensor({2}, {0.0, std::log(3.0)}));
  auto s = softmax(two, 0).value();
  CHECK(s.data[0] == Catch::Approx(0.25));
  CHECK(s.data[1] == Catch::Approx(0.75));
}

TEST_CASE("softmax sums to one along axis") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor({4, 6}, rng, -5, 5);
    std::size_t axis = rep % 2;
    auto y = softmax(Var(x), axis).value();
    std::size_t outer = axis == 0 ? 6 : 4;
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0;
      for (std::size_t l = 0; l < y.shape[axis]; ++l)
        s += axis == 0 ? y.at(l, o) : y.at(o, l);
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("maxpool constant map, 2x2 case, brute force oracle") {
  Var c(Tensor::full({1, 4, 4}, 2.5));
  auto y = maxpool2d(c, 2, 2).value();
  CHECK(y.shape == std::vector<std::size_t>{1, 2, 2});
  for (double v : y.data) CHECK(v == 2.5);

  Var m(Tensor({1, 2, 2}, {1, 2, 3, 4}));
  CHECK(maxpool2d(m, 2, 2).value().data == std::vector<double>{4});

  Rng rng(4);
  Tensor x = random_tensor({3, 7, 9}, rng);
  std::size_t window = 3, stride = 2;
  auto out = maxpool2d(Var(x), window, stride).value();
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t i = 0; i < out.shape[1]; ++i)
      for (std::size_t j = 0; j < out.shape[2]; ++j) {
        double best = -1e300;
        for (std::size_t di = 0; di < window; ++di)
          for (std::size_t dj = 0; dj < window; ++dj)
            best = std::max(best, x.at(ch, i * stride + di, j * stride + dj));
        CHECK(out.at(ch, i, j) == best);
      }
}

TEST_CASE("maxpool window larger than input errors") {
  Var x(Tensor::zeros({1, 2, 2}));
  CHECK_THROWS_AS(maxpool2d(x, 3, 1), DimensionError);
}

TEST_CASE("gaussian filter identity, interior constant, impulse center") {
  Rng rng(5);
  Tensor x = random_tensor({2, 5, 5}, rng);
  auto y = gaussian_filter2d(Var(x), 0.0, 3).value();
  CHECK(y.data == x.data);

  Var c(Tensor::full({1, 9, 9}, 3.0));
  auto f = gaussian_filter2d(c, 1.0, 3).value();
  // interior cells see the full kernel, which sums to 1
  for (std::size_t i = 1; i < 8; ++i)
    for (std::size_t j = 1; j < 8; ++j) CHECK(f.at(0, i, j) == Catch::Approx(3.0).margin(1e-12));

  Tensor imp = Tensor::zeros({1, 3, 3});
  imp.at(0, 1, 1) = 1.0;
  auto k = gaussian_kernel(1.0, 3);
  auto g = gaussian_filter2d(Var(imp), 1.0, 3).value();
  CHECK(g.at(0, 1, 1) == Catch::Approx(k[4]));

  double ksum = 0;
  for (double v : gaussian_kernel(0.7, 5)) ksum += v;
  CHECK(std::abs(ksum - 1.0) < 1e-12);

  CHECK_THROWS_AS(gaussian_filter2d(Var(imp), 1.0, 4), ConfigError);
}

TEST_CASE("bilinear sample: integer points, center mean, out of bounds") {
  Tensor f({1, 2, 2}, {1, 2, 3, 4});
  Var feat(f);

  Var p0(Tensor({1, 2}, {1.0, 0.0}));  // (x=1, y=0)
  CHECK(bilinear_sample(feat, p0).value().data[0] == 2.0);

  Var pc(Tensor({1, 2}, {0.5, 0.5}));
  CHECK(bilinear_sample(feat, pc).value().data[0] == Catch::Approx(2.5));

  Var pf(Tensor({1, 2}, {-10.0, -10.0}));
  CHECK(bilinear_sample(feat, pf).value().data[0] == 0.0);
}

TEST_CASE("bilinear sample stays within corner bounds") {
  Rng rng(6);
  Tensor f = random_tensor({2, 6, 6}, rng);
  for (int rep = 0; rep < 100; ++rep) {
    double x = rng.uniform(0, 4.999);
    double y = rng.uniform(0, 4.999);
    auto out = bilinear_sample(Var(f), Var(Tensor({1, 2}, {x, y}))).value();
    long x0 = static_cast<long>(std::floor(x)), y0 = static_cast<long>(std::floor(y));
    for (std::size_t ch = 0; ch < 2; ++ch) {
      double lo = 1e300, hi = -1e300;
      for (long dy = 0; dy <= 1; ++dy)
        for (long dx = 0; dx <= 1; ++dx) {
          double v = f.at(ch, y0 + dy, x0 + dx);
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      CHECK(out.at(0, ch) >= lo - 1e-12);
      CHECK(out.at(0, ch) <= hi + 1e-12);
    }
  }
}

TEST_CASE("backward: analytic gradient of sum(xW), unused parameter") {
  Tensor xv({2, 3}, {1, 2, 3, 4, 5, 6});
  Parameter w("w", Tensor({3, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}));
  Parameter unused("unused", Tensor::zeros({4}));
  Var y = matmul(Var(xv), w.var());
  backward(sum_all(y));
  // d sum(xW) / dW[p][j] = sum_i x[i][p]
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t j = 0; j < 2; ++j)
      CHECK(w.grad().at(p, j) == Catch::Approx(xv.at(0, p) + xv.at(1, p)));
  for (double g : unused.grad().data) CHECK(g == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Var x(Tensor({2}, {1, 2}), true);
  CHECK_THROWS_AS(backward(x), ContractError);
}

TEST_CASE("sgd_step: lr 0, hand arithmetic, determinism, non-finite error") {
  Parameter p("p", Tensor({1}, {1.0}));
  p.mutable_grad().data[0] = 2.0;
  std::vector<Parameter*> ps{&p};
  sgd_step(ps, 0.0);
  CHECK(p.value().data[0] == 1.0);

  p.mutable_grad().data[0] = 2.0;
  sgd_step(ps, 0.1);
  CHECK(p.value().data[0] == Catch::Approx(0.8));

  Parameter a("a", Tensor({1}, {0.5})), b("b", Tensor({1}, {0.5}));
  a.mutable_grad().data[0] = 0.25;
  b.mutable_grad().data[0] = 0.25;
  std::vector<Parameter*> pa{&a}, pb{&b};
  sgd_step(pa, 0.3);
  sgd_step(pb, 0.3);
  CHECK(a.value().data[0] == b.value().data[0]);
  CHECK(a.grad().data[0] == 0.0);

  Parameter bad("theta", Tensor({1}, {1.0}));
  bad.mutable_grad().data[0] = std::numeric_limits<double>::quiet_NaN();
  std::vector<Parameter*> pbad{&bad};
  CHECK_THROWS_WITH(sgd_step(pbad, 0.1), Catch::Matchers::ContainsSubstring("theta"));
}

TEST_CASE("finite-difference checks across the op vocabulary") {
  Rng rng(7);
  auto check = [&](const char* name, auto&& builder, std::vector<Tensor> inputs) {
    const double err = grad_check(builder, inputs);
    INFO(name);
    CHECK(err <= 1e-4);
  };

  for (int rep = 0; rep < 3; ++rep) {
    check("linear",
          [](const std::vector<Var>& v) { return sum_all(tanh_act(linear(v[0], v[1], v[2]))); },
          {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng), random_tensor({2}, rng)});
    check("matmul-mul-add",
          [](const std::vector<Var>& v) {
            return mean_all(mul(add(v[0], v[1]), sub(v[0], v[1])));
          },
          {random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)});
    check("softmax",
          [](const std::vector<Var>& v) {
            Var s = softmax(v[0], 1);
            return sum_all(mul(s, v[1]));
          },
          {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)});
    check("logistic",
          [](const std::vector<Var>& v) { return sum_all(logistic(v[0])); },
          {random_tensor({2, 3}, rng)});
    check("maxpool",
          [](const std::vector<Var>& v) { return sum_all(mul(maxpool2d(v[0], 2, 2), v[1])); },
          {random_tensor({2, 4, 4}, rng), random_tensor({2, 2, 2}, rng)});
    check("gaussian",
          [](const std::vector<Var>& v) {
            return sum_all(mul(gaussian_filter2d(v[0], 0.8, 3), v[1]));
          },
          {random_tensor({1, 4, 4}, rng), random_tensor({1, 4, 4}, rng)});
    check("conv2d",
          [](const std::vector<Var>& v) { return sum_all(tanh_act(conv2d(v[0], v[1], v[2], 2, 1))); },
          {random_tensor({2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
    check("bilinear",
          [](const std::vector<Var>& v) { return sum_all(bilinear_sample(v[0], v[1])); },
          {random_tensor({2, 5, 5}, rng),
           random_tensor({4, 2}, rng, 0.3, 3.4)});
    check("rowwise_scale",
          [](const std::vector<Var>& v) { return sum_all(rowwise_scale(v[0], v[1])); },
          {random_tensor({3, 4}, rng), random_tensor({3}, rng)});
    check("concat-slice",
          [](const std::vector<Var>& v) {
            Var c = concat({v[0], v[1]}, 1);
            return sum_all(mul(slice_cols(c, 1, 4), slice_cols(c, 2, 5)));
          },
          {random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)});
    check("sum_axis",
          [](const std::vector<Var>& v) { return sum_all(tanh_act(sum_axis(v[0], 1))); },
          {random_tensor({3, 4, 2}, rng)});
  }
}

TEST_CASE("tensor values stay finite through a composite graph") {
  Rng rng(8);
  Var x(random_tensor({4, 6}, rng), true);
  Var w(random_tensor({6, 6}, rng), true);
  Var b(random_tensor({6}, rng), true);
  Var y = softmax(linear(tanh_act(linear(x, w, b)), w, b), 1);
  CHECK(y.value().all_finite());
  backward(mean_all(y));
  CHECK(x.grad().all_finite());
}
