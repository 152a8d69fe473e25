#include <doctest.h>

#include <cmath>

#include "brnpa/autograd.hpp"
#include "brnpa/error.hpp"
#include "brnpa/rng.hpp"
#include "brnpa/tensor.hpp"
#include "support/finite_difference.hpp"

using namespace brnpa;
using brnpa::testing::numeric_gradient;
using brnpa::testing::relative_error;

namespace {

std::vector<double> random_values(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("elementwise arithmetic") {
  auto a = Tensor::from({2}, {1, 2});
  auto b = Tensor::from({2}, {3, 4});
  CHECK(to_vec(add(a, b).values()) == std::vector<double>{4, 6});

  auto x = Tensor::parameter({3}, {1, -2, 3});
  auto zero = mul(x, Tensor::scalar(0.0));
  CHECK(to_vec(zero.values()) == std::vector<double>{0, 0, 0});
  backward(sum(zero));
  CHECK(x.grad() == std::vector<double>{0, 0, 0});

  auto y = Tensor::parameter({2}, {5, 7});
  auto diff = sub(y, y);
  CHECK(to_vec(diff.values()) == std::vector<double>{0, 0});
  backward(sum(diff));
  CHECK(y.grad() == std::vector<double>{0, 0});
}

TEST_CASE("elementwise shape mismatch names both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("matmul") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(to_vec(matmul(eye, x).values()) == to_vec(x.values()));
  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item() == 11.0);
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);

  Rng rng(7);
  auto a = Tensor::parameter({3, 4}, random_values(rng, 12));
  auto b = Tensor::parameter({4, 2}, random_values(rng, 8));
  auto probe = Tensor::from({3, 2}, random_values(rng, 6));
  auto loss = [&] { return sum(mul(matmul(a, b), probe)); };
  backward(loss());
  const auto fd_a = numeric_gradient(a, [&] { NoGradGuard g; return loss().item(); });
  const auto fd_b = numeric_gradient(b, [&] { NoGradGuard g; return loss().item(); });
  CHECK(relative_error(a.grad(), fd_a) < 1e-6);
  CHECK(relative_error(b.grad(), fd_b) < 1e-6);
}

TEST_CASE("conv2d values and shapes") {
  auto in = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  auto one = Tensor::from({1, 1, 1, 1}, {1});
  CHECK(to_vec(conv2d(in, one, 1, 0).values()) == to_vec(in.values()));

  auto ones_in = Tensor::full({1, 3, 3}, 1.0);
  auto ones_k = Tensor::full({1, 1, 3, 3}, 1.0);
  auto out = conv2d(ones_in, ones_k, 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1});
  CHECK(out.item() == 9.0);

  auto big = Tensor::full({1, 8, 8}, 1.0);
  CHECK(conv2d(big, ones_k, 1, 1).shape() == Shape{1, 8, 8});
  CHECK(conv2d(big, ones_k, 2, 1).shape() == Shape{1, 4, 4});

  CHECK_THROWS_AS(conv2d(big, ones_k, 0, 1), ValidationError);
  CHECK_THROWS_AS(conv2d(Tensor::full({1, 2, 2}, 1.0), ones_k, 1, 0), ShapeError);
}

TEST_CASE("conv2d output extents follow the floor formula (exhaustive sweep)") {
  for (std::size_t stride = 1; stride <= 4; ++stride)
    for (std::size_t pad = 0; pad <= 2; ++pad)
      for (std::size_t k = 1; k <= 5; ++k)
        for (std::size_t h = 1; h <= 9; ++h) {
          if (k > h + 2 * pad) continue;
          auto in = Tensor::full({1, h, h + 1}, 1.0);
          auto kern = Tensor::full({2, 1, k, k}, 1.0);
          auto out = conv2d(in, kern, stride, pad);
          CHECK(out.dim(1) == (h + 2 * pad - k) / stride + 1);
          CHECK(out.dim(2) == (h + 1 + 2 * pad - k) / stride + 1);
        }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(11);
  for (std::size_t stride : {1u, 2u, 3u})
    for (std::size_t pad : {0u, 1u, 2u}) {
      auto in = Tensor::parameter({2, 7, 6}, random_values(rng, 2 * 7 * 6));
      auto kern = Tensor::parameter({3, 2, 3, 3}, random_values(rng, 54));
      auto bias = Tensor::parameter({3}, random_values(rng, 3));
      const auto oh = conv_output_extent(7, 3, stride, pad);
      const auto ow = conv_output_extent(6, 3, stride, pad);
      auto probe = Tensor::from({3, oh, ow}, random_values(rng, 3 * oh * ow));
      auto loss = [&] { return sum(mul(conv2d(in, kern, stride, pad, bias), probe)); };
      backward(loss());
      auto value = [&] { NoGradGuard g; return loss().item(); };
      CHECK(relative_error(in.grad(), numeric_gradient(in, value)) < 1e-6);
      CHECK(relative_error(kern.grad(), numeric_gradient(kern, value)) < 1e-6);
      CHECK(relative_error(bias.grad(), numeric_gradient(bias, value)) < 1e-6);
    }
}

TEST_CASE("reductions") {
  CHECK(sum(Tensor::from({3}, {1, 2, 3})).item() == 6.0);
  CHECK(argmax(Tensor::from({3}, {5, 5, 1})).item() == 0.0);
  CHECK_THROWS_AS(sum(Tensor::zeros({0})), ValidationError);
  CHECK_THROWS_AS(sum(Tensor::zeros({2}), 1), ValidationError);

  auto x = Tensor::parameter({4}, {1, 2, 3, 4});
  backward(mean(x));
  CHECK(x.grad() == std::vector<double>{0.25, 0.25, 0.25, 0.25});

  auto m = Tensor::from({2, 3}, {1, 9, 3, 7, 7, 2});
  CHECK(to_vec(sum(m, 0).values()) == std::vector<double>{8, 16, 5});
  CHECK(to_vec(sum(m, 1).values()) == std::vector<double>{13, 16});
  CHECK(to_vec(max(m, 0).values()) == std::vector<double>{7, 9, 3});
  CHECK(to_vec(argmax(m, 1).values()) == std::vector<double>{1, 0});

  auto t = Tensor::parameter({3}, {2, 2, 1});
  backward(max(t));
  CHECK(t.grad() == std::vector<double>{1, 0, 0});
}

TEST_CASE("softmax, cross entropy and KL") {
  CHECK(cross_entropy(Tensor::from({2}, {0, 0}), 0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  auto l = Tensor::from({4}, {0.3, -1.2, 2.0, 0.1});
  CHECK(kl_divergence(l, l).item() == 0.0);
  CHECK_THROWS_AS(cross_entropy(l, 4), ValidationError);

  // Extended-precision direct evaluation.
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto pv = random_values(rng, 5);
    auto qv = random_values(rng, 5);
    for (auto& v : pv) v *= 4;
    for (auto& v : qv) v *= 4;
    long double zp = 0, zq = 0;
    for (int i = 0; i < 5; ++i) {
      zp += std::exp(static_cast<long double>(pv[i]));
      zq += std::exp(static_cast<long double>(qv[i]));
    }
    long double kl = 0;
    for (int i = 0; i < 5; ++i) {
      const long double p = std::exp(static_cast<long double>(pv[i])) / zp;
      const long double q = std::exp(static_cast<long double>(qv[i])) / zq;
      kl += p * (std::log(p) - std::log(q));
    }
    const std::size_t label = static_cast<std::size_t>(trial % 5);
    const long double ce = -(static_cast<long double>(pv[label]) - std::log(zp));
    auto p = Tensor::from({5}, pv);
    auto q = Tensor::from({5}, qv);
    CHECK(std::abs(kl_divergence(p, q).item() - static_cast<double>(kl)) < 1e-10);
    CHECK(std::abs(cross_entropy(p, label).item() - static_cast<double>(ce)) < 1e-10);
  }
}

TEST_CASE("activation gradients match finite differences") {
  Rng rng(5);
  auto x = Tensor::parameter({6}, random_values(rng, 6));
  auto y = Tensor::parameter({6}, random_values(rng, 6));
  auto probe = Tensor::from({6}, random_values(rng, 6));
  auto loss = [&] {
    auto r = relu(x);
    auto s = softmax(mul(x, y));
    auto lg = log(add(mul(y, y), 0.5));
    auto sq = sqrt(add(mul(x, x), 1.0));
    auto kl = kl_divergence(x, y);
    auto ce = cross_entropy(y, 2);
    return add(add(sum(mul(add(add(r, s), add(lg, sq)), probe)), kl), ce);
  };
  backward(loss());
  auto value = [&] { NoGradGuard g; return loss().item(); };
  CHECK(relative_error(x.grad(), numeric_gradient(x, value)) < 1e-6);
  CHECK(relative_error(y.grad(), numeric_gradient(y, value)) < 1e-6);
}

TEST_CASE("backward contract") {
  auto x = Tensor::parameter({3}, {1, 2, 3});
  auto loss = sum(x);
  auto rec = backward(loss);
  CHECK(x.grad() == std::vector<double>{1, 1, 1});
  REQUIRE(rec.find(x) != nullptr);
  CHECK(*rec.find(x) == std::vector<double>{1, 1, 1});
  CHECK_THROWS_AS(backward(loss), ValidationError);
  CHECK_THROWS_AS(backward(mul(x, 2.0)), ShapeError);
}

TEST_CASE("stop_gradient") {
  auto x = Tensor::parameter({3}, {1, -2, 3.5});
  auto s = stop_gradient(x);
  CHECK(to_vec(s.values()) == to_vec(x.values()));

  backward(add(sum(stop_gradient(x)), Tensor::scalar(0.0)));
  CHECK(x.grad() == std::vector<double>{0, 0, 0});

  backward(add(sum(x), sum(stop_gradient(x))));
  CHECK(x.grad() == std::vector<double>{1, 1, 1});
}

TEST_CASE("stop_gradient leaves forward values bit-identical and zeroes upstream") {
  Rng rng(9);
  auto w = Tensor::parameter({2, 3}, random_values(rng, 6));
  auto v = Tensor::parameter({3, 2}, random_values(rng, 6));
  auto plain = matmul(w, v);
  auto cut = matmul(stop_gradient(w), v);
  CHECK(to_vec(plain.values()) == to_vec(cut.values()));
  backward(sum(relu(cut)));
  CHECK(w.grad() == std::vector<double>(6, 0.0));
  CHECK(v.has_grad());
}

TEST_CASE("sgd step") {
  auto p = Tensor::parameter({2}, {1.0, 2.0});
  {
    Sgd opt(0.1, 0.0);
    std::vector<Tensor> ps{p};
    opt.step(ps);
    CHECK(to_vec(p.values()) == std::vector<double>{1.0, 2.0});
  }
  {
    Sgd opt(1.0, 0.0);
    backward(sum(mul(p, Tensor::from({2}, {0.5, -0.25}))));
    std::vector<Tensor> ps{p};
    opt.step(ps);
    CHECK(to_vec(p.values()) == std::vector<double>{0.5, 2.25});
  }
  {
    // Two steps with momentum 0.9, constant gradient g:
    // v1 = g, p1 = p0 - lr g; v2 = 1.9 g, p2 = p1 - 1.9 lr g.
    auto q = Tensor::parameter({1}, {3.0});
    Sgd opt(0.1, 0.9);
    std::vector<Tensor> ps{q};
    for (int i = 0; i < 2; ++i) {
      backward(mul(sum(q), 2.0));
      opt.step(ps);
    }
    CHECK(q.item() == doctest::Approx(3.0 - 0.1 * 2.0 - 0.1 * 1.9 * 2.0).epsilon(1e-15));
  }
  CHECK_THROWS_AS(Sgd(0.1, 1.0), ValidationError);
  CHECK_THROWS_AS(Sgd(-1.0, 0.0), ValidationError);
}

TEST_CASE("sgd rejects mismatched gradient records") {
  auto p = Tensor::parameter({2}, {1, 2});
  auto other = Tensor::parameter({3}, {1, 2, 3});
  GradientRecord rec;
  rec.entries.push_back({p, {1, 2, 3}});
  Sgd opt(0.1, 0.0);
  std::vector<Tensor> ps{p};
  CHECK_THROWS_AS(opt.step(ps, rec), ShapeError);
}

TEST_CASE("determinism: same sequence gives bit-identical values") {
  auto run = [] {
    Rng rng(42);
    auto in = Tensor::from({3, 9, 9}, random_values(rng, 243));
    auto k = Tensor::from({4, 3, 3, 3}, random_values(rng, 108));
    return to_vec(softmax(reshape(conv2d(in, k, 2, 1), {4, 25})).values());
  };
  CHECK(run() == run());
}
