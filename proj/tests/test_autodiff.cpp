#include <doctest.h>

#include <cmath>
#include <random>

#include "grad_sweep.hpp"
#include "qmri/autodiff.hpp"

using namespace qmri;
using namespace qmri::ad;

namespace {

TensorPtr<double> rnd(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel(s));
  for (auto& x : v) x = u(rng);
  return make_tensor<double>(std::move(s), std::move(v), true);
}

template <typename T>
std::vector<T> vec(const Buffer<T>& b) {
  return {b.begin(), b.end()};
}

std::vector<double> values(const Var<double>& v) { return vec(v.value().data); }

}  // namespace

TEST_CASE("conv2d forward examples") {
  Graph<double> g;
  auto x = g.constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
  auto one = g.constant(Tensor<double>({1, 1, 1, 1}, {1}));
  auto two = g.constant(Tensor<double>({1, 1, 1, 1}, {2}));
  auto b0 = g.constant(Tensor<double>({1}, {0}));
  auto b1 = g.constant(Tensor<double>({1}, {1}));
  CHECK(values(conv2d(x, one, b0)) == std::vector<double>{1, 2, 3, 4});
  CHECK(values(conv2d(x, two, b1)) == std::vector<double>{3, 5, 7, 9});

  auto z = g.constant(Tensor<double>::zeros({2, 5, 5}));
  std::mt19937_64 rng(1);
  auto w = g.leaf(rnd({3, 2, 3, 3}, rng));
  auto zb = g.constant(Tensor<double>::zeros({3}));
  const auto out = conv2d(z, w, zb, 1, 1);
  CHECK(out.shape() == Shape{3, 5, 5});
  for (double v : out.value().data) CHECK(v == 0.0);
}

TEST_CASE("conv2d 3x3 matches a direct cross-correlation") {
  std::mt19937_64 rng(7);
  auto xt = rnd({2, 6, 5}, rng);
  auto wt = rnd({3, 2, 3, 3}, rng);
  auto bt = rnd({3}, rng);
  Graph<double> g;
  const auto y = conv2d(g.leaf(xt), g.leaf(wt), g.leaf(bt), 1, 1);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 5; ++j) {
        double s = bt->data[c];
        for (int ci = 0; ci < 2; ++ci)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int ii = i + di, jj = j + dj;
              if (ii < 0 || ii >= 6 || jj < 0 || jj >= 5) continue;
              s += xt->data[(ci * 6 + ii) * 5 + jj] * wt->data[((c * 2 + ci) * 3 + di + 1) * 3 + dj + 1];
            }
        CHECK(y.value().data[(c * 6 + i) * 5 + j] == doctest::Approx(s).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("conv2d stride 2 gives ceil sizes") {
  std::mt19937_64 rng(3);
  Graph<double> g;
  const auto y = conv2d(g.leaf(rnd({1, 7, 6}, rng)), g.leaf(rnd({2, 1, 3, 3}, rng)), g.leaf(rnd({2}, rng)), 2, 1);
  CHECK(y.shape() == Shape{2, 4, 3});
}

TEST_CASE("conv2d shape errors name the dimension") {
  Graph<double> g;
  auto x = g.constant(Tensor<double>::zeros({2, 4, 4}));
  auto w = g.constant(Tensor<double>::zeros({1, 3, 3, 3}));
  auto b = g.constant(Tensor<double>::zeros({1}));
  CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), ShapeError);
  auto w5 = g.constant(Tensor<double>::zeros({1, 2, 5, 5}));
  CHECK_THROWS(conv2d(x, w5, b, 1, 2));
  auto wrong_b = g.constant(Tensor<double>::zeros({2}));
  auto w2 = g.constant(Tensor<double>::zeros({1, 2, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, w2, wrong_b, 1, 1), ShapeError);
}

TEST_CASE("relu forward and gradient") {
  Graph<double> g;
  CHECK(values(relu(g.constant(Tensor<double>({3}, {-1, 0, 2})))) == std::vector<double>{0, 0, 2});
  CHECK(values(relu(g.constant(Tensor<double>({3}, {0.5, 1, 2})))) == std::vector<double>{0.5, 1, 2});

  auto xt = make_tensor<double>({2}, {-1, 2}, true);
  Graph<double> g2;
  g2.backward(sum(relu(g2.leaf(xt))));
  CHECK(vec(xt->grad) == std::vector<double>{0, 1});
  // finite-difference oracle
  const double h = 1e-6;
  for (int i = 0; i < 2; ++i) {
    auto f = [&](double d) {
      double s = 0;
      for (int j = 0; j < 2; ++j) s += std::max(0.0, xt->data[j] + (i == j ? d : 0.0));
      return s;
    };
    CHECK(xt->grad[i] == doctest::Approx((f(h) - f(-h)) / (2 * h)).epsilon(1e-8));
  }
  auto zt = make_tensor<double>({1}, {0.0}, true);
  Graph<double> g3;
  g3.backward(sum(relu(g3.leaf(zt))));
  CHECK(zt->grad[0] == 0.0);
}

TEST_CASE("maxpool2 examples and tie rule") {
  Graph<double> g;
  CHECK(values(maxpool2(g.constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4})))) == std::vector<double>{4});
  const auto c = maxpool2(g.constant(Tensor<double>({2, 4, 4}, std::vector<double>(32, 3.5))));
  CHECK(c.shape() == Shape{2, 2, 2});
  for (double v : c.value().data) CHECK(v == 3.5);

  auto t = make_tensor<double>({1, 2, 2}, {5, 5, 5, 5}, true);
  Graph<double> g2;
  const auto y = maxpool2(g2.leaf(t));
  CHECK(y.value().data[0] == 5.0);
  g2.backward(sum(y));
  CHECK(vec(t->grad) == std::vector<double>{1, 0, 0, 0});

  CHECK_THROWS(maxpool2(g.constant(Tensor<double>::zeros({1, 3, 4}))));
}

TEST_CASE("upsample_nearest2 replicates and sums gradients") {
  Graph<double> g;
  CHECK(values(upsample_nearest2(g.constant(Tensor<double>({1, 1, 1}, {1})))) == std::vector<double>{1, 1, 1, 1});
  auto t = make_tensor<double>({2, 2, 3}, std::vector<double>(12, 0.25), true);
  Graph<double> g2;
  g2.backward(sum(upsample_nearest2(g2.leaf(t))));
  for (double v : t->grad) CHECK(v == 4.0);
  std::mt19937_64 rng(4);
  CHECK(grad_check([](Graph<double>&, std::span<const Var<double>> v) { return upsample_nearest2(v[0]); },
                   {rnd({2, 3, 2}, rng)}, 1e-6) < 1e-6);
}

TEST_CASE("maxpool after upsample of a constant image is the identity") {
  Graph<double> g;
  auto x = g.constant(Tensor<double>({1, 3, 3}, std::vector<double>(9, 2.0)));
  CHECK(values(maxpool2(upsample_nearest2(x))) == values(x));
  auto y = g.constant(Tensor<double>({1, 4, 4}, std::vector<double>(16, 2.0)));
  CHECK(values(upsample_nearest2(maxpool2(y))) == values(y));
}

TEST_CASE("concat_channels and split round trip") {
  std::mt19937_64 rng(5);
  Graph<double> g;
  auto a = g.leaf(rnd({1, 2, 2}, rng));
  auto b = g.leaf(rnd({2, 2, 2}, rng));
  std::vector<Var<double>> one{a};
  CHECK(values(concat_channels<double>(one)) == values(a));
  std::vector<Var<double>> two{a, b};
  const auto c = concat_channels<double>(two);
  CHECK(c.shape() == Shape{3, 2, 2});
  CHECK(values(slice_channels(c, 0, 1)) == values(a));
  CHECK(values(slice_channels(c, 1, 2)) == values(b));
  std::vector<Var<double>> bad{a, g.constant(Tensor<double>::zeros({1, 3, 2}))};
  CHECK_THROWS_AS(concat_channels<double>(bad), ShapeError);

  // slice-sum backward recovers the per-input gradients
  auto at = rnd({1, 2, 2}, rng), bt = rnd({2, 2, 2}, rng);
  Graph<double> g2;
  std::vector<Var<double>> vs{g2.leaf(at), g2.leaf(bt)};
  const auto cc = concat_channels<double>(vs);
  g2.backward(add(scale(sum(slice_channels(cc, 0, 1)), 2.0), scale(sum(slice_channels(cc, 1, 2)), 3.0)));
  for (double v : at->grad) CHECK(v == 2.0);
  for (double v : bt->grad) CHECK(v == 3.0);
  CHECK(grad_check(
            [](Graph<double>&, std::span<const Var<double>> v) {
              std::vector<Var<double>> xs{v[0], v[1]};
              return concat_channels<double>(xs);
            },
            {rnd({1, 2, 2}, rng), rnd({2, 2, 2}, rng)}, 1e-6) < 1e-6);
}

TEST_CASE("linear examples") {
  Graph<double> g;
  auto v = g.constant(Tensor<double>({2}, {1, 2}));
  CHECK(values(linear(v, g.constant(Tensor<double>({2, 2}, {1, 0, 0, 1})), g.constant(Tensor<double>({2}, {0, 0})))) ==
        std::vector<double>{1, 2});
  CHECK(values(linear(v, g.constant(Tensor<double>({2, 2}, {1, 1, 0, 1})), g.constant(Tensor<double>({2}, {1, 0})))) ==
        std::vector<double>{4, 2});
  CHECK(values(linear(g.constant(Tensor<double>({2}, {0, 0})), g.constant(Tensor<double>({2, 2}, {3, 1, 4, 1})),
                      g.constant(Tensor<double>({2}, {5, 9})))) == std::vector<double>{5, 9});
  CHECK_THROWS_AS(linear(v, g.constant(Tensor<double>::zeros({2, 3})), g.constant(Tensor<double>::zeros({2}))),
                  ShapeError);
}

TEST_CASE("broadcast_spatial is constant per channel") {
  std::mt19937_64 rng(6);
  Graph<double> g;
  auto v = g.leaf(rnd({3}, rng));
  const auto p = broadcast_spatial(v, 4, 5);
  CHECK(p.shape() == Shape{3, 4, 5});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t k = 0; k < 20; ++k) CHECK(p.value().data[c * 20 + k] == v.value().data[c]);
  }
}

TEST_CASE("backward basics") {
  auto x = make_tensor<double>({3}, {1, -2, 5}, true);
  Graph<double> g;
  g.backward(sum(g.leaf(x)));
  CHECK(vec(x->grad) == std::vector<double>{1, 1, 1});

  auto y = make_tensor<double>({2}, {1, 2}, true);
  auto unused = make_tensor<double>({2}, {7, 7}, true);
  Graph<double> g2;
  auto yv = g2.leaf(y);
  g2.leaf(unused);
  g2.backward(mean_square(yv));  // sum(x^2)/N
  CHECK(y->grad[0] == doctest::Approx(1.0));
  CHECK(y->grad[1] == doctest::Approx(2.0));
  REQUIRE(unused->grad.size() == 2);
  CHECK(vec(unused->grad) == std::vector<double>{0, 0});

  Graph<double> g3;
  CHECK_THROWS(g3.backward(g3.leaf(make_tensor<double>({2}, {1, 2}, true))));
}

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(11);
  CHECK(grad_check([](Graph<double>&, std::span<const Var<double>> v) { return linear(v[0], v[1], v[2]); },
                   {rnd({3}, rng), rnd({3, 3}, rng), rnd({3}, rng)}, 1e-6) < 1e-6);
  CHECK(grad_check([](Graph<double>&, std::span<const Var<double>> v) { return conv2d(v[0], v[1], v[2], 1, 1); },
                   {rnd({2, 8, 8}, rng), rnd({2, 2, 3, 3}, rng), rnd({2}, rng)}, 1e-6) < 1e-4);
  // relu away from its kink
  auto x = rnd({4, 4}, rng, 0.2, 1.0);
  for (std::size_t i = 0; i < x->data.size(); i += 2) x->data[i] = -x->data[i];
  CHECK(grad_check([](Graph<double>&, std::span<const Var<double>> v) { return relu(v[0]); }, {x}, 1e-6) < 1e-6);
  CHECK_THROWS(grad_check([](Graph<double>&, std::span<const Var<double>> v) { return relu(v[0]); }, {x}, 1e-3));
}

TEST_CASE("every differentiable op passes grad_check on 10 random shapes") {
  const auto errors = sweep::op_gradient_errors(2024, 10);
  CHECK(errors.size() == 150);
  for (const auto& [name, err] : errors) {
    CAPTURE(name);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("adam_step examples") {
  auto p = make_tensor<double>({4}, {1, 2, 3, 4}, true);
  p->grad.assign(4, 1.0);
  std::vector<TensorPtr<double>> ps{p};
  AdamState<double> st;
  adam_step<double>(ps, st, 0.001);
  CHECK(st.step == 1);
  // m_hat = 1, v_hat = 1 at t = 1
  const double expected = -0.001 * 1.0 / (1.0 + 1e-8);
  for (int i = 0; i < 4; ++i) CHECK(p->data[i] - (i + 1) == doctest::Approx(expected).epsilon(1e-9));

  auto q = make_tensor<double>({2}, {0.5, -0.5}, true);
  q->grad.assign(2, 0.0);
  std::vector<TensorPtr<double>> qs{q};
  AdamState<double> st2;
  adam_step<double>(qs, st2, 0.001);
  CHECK(vec(q->data) == std::vector<double>{0.5, -0.5});

  auto r = make_tensor<double>({1}, {0.0}, true);
  std::vector<TensorPtr<double>> rs{r};
  AdamState<double> st3;
  r->grad = {2.0};
  adam_step<double>(rs, st3, 0.001);
  const double m1 = st3.m[0][0];
  CHECK(m1 == doctest::Approx(0.2));
  r->grad = {-2.0};
  adam_step<double>(rs, st3, 0.001);
  CHECK(st3.m[0][0] == doctest::Approx(0.9 * 0.2 - 0.2));
  CHECK(std::abs(st3.m[0][0]) < std::abs(m1));

  r->grad = {std::nan("")};
  CHECK_THROWS_AS(adam_step<double>(rs, st3, 0.001), NumericError);
}

TEST_CASE("forward is deterministic and float graphs work") {
  std::mt19937_64 rng(9);
  auto xt = rnd({2, 8, 8}, rng);
  auto wt = rnd({4, 2, 3, 3}, rng);
  auto bt = rnd({4}, rng);
  Graph<double> g1, g2;
  const auto a = relu(conv2d(g1.leaf(xt), g1.leaf(wt), g1.leaf(bt), 1, 1));
  const auto b = relu(conv2d(g2.leaf(xt), g2.leaf(wt), g2.leaf(bt), 1, 1));
  CHECK(a.value().data == b.value().data);

  Graph<float> gf;
  auto xf = make_tensor<float>({1, 2, 2}, {1, 2, 3, 4});
  auto wf = make_tensor<float>({1, 1, 1, 1}, {2});
  auto bf = make_tensor<float>({1}, {1});
  CHECK(vec(conv2d(gf.leaf(xf), gf.leaf(wf), gf.leaf(bf)).value().data) == std::vector<float>{3, 5, 7, 9});
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK(numel({2, 3, 4}) == 24);
}
