#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "gabic/conv.hpp"
#include "gabic/tensor.hpp"

using namespace gabic;

namespace {

// Naive quadruple-loop convolution, kept independent of the library path.
std::vector<double> conv_oracle(const std::vector<double>& x, int N, int IC, int H, int W,
                                const std::vector<double>& wt, int OC, int K, int s, int p,
                                const std::vector<double>& bias) {
  int OH = (H + 2 * p - K) / s + 1;
  int OW = (W + 2 * p - K) / s + 1;
  std::vector<double> y(static_cast<long>(N) * OC * OH * OW, 0.0);
  for (int b = 0; b < N; ++b)
    for (int oc = 0; oc < OC; ++oc)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = bias.empty() ? 0.0 : bias[oc];
          for (int ic = 0; ic < IC; ++ic)
            for (int kh = 0; kh < K; ++kh)
              for (int kw = 0; kw < K; ++kw) {
                int iy = oh * s - p + kh, ix = ow * s - p + kw;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x[((static_cast<long>(b) * IC + ic) * H + iy) * W + ix] *
                       wt[((static_cast<long>(oc) * IC + ic) * K + kh) * K + kw];
              }
          y[((static_cast<long>(b) * OC + oc) * OH + oh) * OW + ow] = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("rng determinism and stream properties") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  // resuming from a serialized (seed, counter) continues the same stream
  Rng c(7);
  for (int i = 0; i < 10; ++i) c.next_u64();
  Rng d(7, c.counter);
  Rng e(7);
  for (int i = 0; i < 10; ++i) e.next_u64();
  for (int i = 0; i < 20; ++i) REQUIRE(d.next_u64() == e.next_u64());

  Rng f(3);
  for (int i = 0; i < 10000; ++i) {
    double u = f.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  Rng g(4);
  for (int i = 0; i < 1000; ++i) REQUIRE(g.uniform_int(13) < 13);
}

TEST_CASE("softmax basic values") {
  auto x = Tensor<double>::from_data({3}, {0.0, 0.0, 0.0});
  auto y = softmax(x, 0);
  for (int i = 0; i < 3; ++i) REQUIRE(y.data()[i] == Catch::Approx(1.0 / 3).epsilon(1e-12));

  auto big = Tensor<double>::from_data({2}, {1000.0, 0.0});
  auto yb = softmax(big, 0);
  REQUIRE(yb.data()[0] == Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE(yb.data()[1] < 1e-300);
  REQUIRE(std::isfinite(yb.data()[0]));
}

TEST_CASE("softmax matches exp/sum oracle") {
  Rng rng(11);
  auto x = Tensor<double>::rand_uniform({7}, rng, -3.0, 3.0);
  auto y = softmax(x, 0);
  double denom = 0.0;
  for (int i = 0; i < 7; ++i) denom += std::exp(x.data()[i]);
  for (int i = 0; i < 7; ++i)
    REQUIRE(y.data()[i] == Catch::Approx(std::exp(x.data()[i]) / denom).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one on random shapes and axes") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    int d0 = 1 + static_cast<int>(rng.uniform_int(4));
    int d1 = 1 + static_cast<int>(rng.uniform_int(5));
    int d2 = 1 + static_cast<int>(rng.uniform_int(6));
    auto x = Tensor<float>::rand_uniform({d0, d1, d2}, rng, -20.0, 20.0);
    int axis = static_cast<int>(rng.uniform_int(3));
    auto y = softmax(x, axis);
    long outer = 1, inner = 1;
    long n = y.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= y.dim(i);
    for (int i = axis + 1; i < 3; ++i) inner *= y.dim(i);
    for (long o = 0; o < outer; ++o)
      for (long in = 0; in < inner; ++in) {
        double s = 0.0;
        for (long j = 0; j < n; ++j) s += y.data()[o * n * inner + j * inner + in];
        REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
      }
  }
}

TEST_CASE("softmax rejects non-finite input") {
  auto x = Tensor<double>::from_data({2}, {1.0, std::numeric_limits<double>::infinity()});
  REQUIRE_THROWS_AS(softmax(x, 0), std::invalid_argument);
}

TEST_CASE("conv2d trivial cases") {
  auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, Tensor<double>(), 1, 0);
  REQUIRE(y.shape() == std::vector<int>{1, 1, 1, 1});
  REQUIRE(y.data()[0] == Catch::Approx(9.0));

  Rng rng(1);
  auto xi = Tensor<double>::rand_uniform({2, 3, 5, 4}, rng, -1.0, 1.0);
  auto ident = Tensor<double>::zeros({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) ident.data()[c * 3 + c] = 1.0;
  auto yi = conv2d(xi, ident, Tensor<double>(), 1, 0);
  REQUIRE(yi.shape() == xi.shape());
  for (long i = 0; i < xi.numel(); ++i) REQUIRE(yi.data()[i] == Catch::Approx(xi.data()[i]));
}

TEST_CASE("conv2d matches quadruple-loop oracle") {
  Rng rng(2);
  auto x = Tensor<double>::rand_uniform({2, 4, 8, 8}, rng, -1.0, 1.0);
  auto w = Tensor<double>::rand_uniform({6, 4, 3, 3}, rng, -1.0, 1.0);
  auto b = Tensor<double>::rand_uniform({6}, rng, -1.0, 1.0);
  auto y = conv2d(x, w, b, 2, 1);
  REQUIRE(y.shape() == std::vector<int>{2, 6, 4, 4});
  auto ref = conv_oracle(x.vec(), 2, 4, 8, 8, w.vec(), 6, 3, 2, 1, b.vec());
  for (long i = 0; i < y.numel(); ++i) REQUIRE(y.data()[i] == Catch::Approx(ref[i]).margin(1e-10));
}

TEST_CASE("conv2d direct and im2col paths agree") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    int s = 1 + static_cast<int>(rng.uniform_int(2));
    int p = static_cast<int>(rng.uniform_int(2));
    auto x = Tensor<float>::rand_uniform({2, 3, 9, 7}, rng, -1.0, 1.0);
    auto w = Tensor<float>::rand_uniform({4, 3, 3, 3}, rng, -1.0, 1.0);
    auto b = Tensor<float>::rand_uniform({4}, rng, -1.0, 1.0);
    conv_impl() = ConvImpl::im2col;
    auto y1 = conv2d(x, w, b, s, p);
    conv_impl() = ConvImpl::direct;
    auto y2 = conv2d(x, w, b, s, p);
    conv_impl() = ConvImpl::im2col;
    for (long i = 0; i < y1.numel(); ++i)
      REQUIRE(y1.data()[i] == Catch::Approx(y2.data()[i]).margin(1e-6));
  }
}

TEST_CASE("conv2d rejects incompatible shapes") {
  auto x = Tensor<double>::full({1, 2, 4, 4}, 1.0);
  auto w = Tensor<double>::full({1, 3, 3, 3}, 1.0);
  REQUIRE_THROWS_WITH(conv2d(x, w, Tensor<double>(), 1, 0),
                      Catch::Matchers::ContainsSubstring("[1,3,3,3]"));
  auto w2 = Tensor<double>::full({1, 2, 3, 3}, 1.0);
  REQUIRE_THROWS_AS(conv2d(x, w2, Tensor<double>(), 0, 0), std::invalid_argument);
}

TEST_CASE("conv_transpose2d overlap-add and shape law") {
  auto x = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  auto w = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  auto y = conv_transpose2d(x, w, Tensor<double>(), 2, 0);
  REQUIRE(y.shape() == std::vector<int>{1, 1, 4, 4});
  // stride equals kernel: each input pixel tiles its own 2x2 block
  for (long i = 0; i < 16; ++i) REQUIRE(y.data()[i] == Catch::Approx(1.0));

  // zero input -> bias broadcast
  auto zx = Tensor<double>::zeros({1, 2, 3, 3});
  auto zw = Tensor<double>::zeros({2, 3, 3, 3});
  auto zb = Tensor<double>::from_data({3}, {1.0, 2.0, 3.0});
  auto zy = conv_transpose2d(zx, zw, zb, 2, 1);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 5 * 5; ++i)
      REQUIRE(zy.data()[static_cast<long>(c) * 25 + i] == Catch::Approx(static_cast<double>(c + 1)));

  // output extent (H-1)*s - 2p + K over a grid
  for (int H : {2, 3, 5, 8})
    for (int s : {1, 2, 3})
      for (int p : {0, 1})
        for (int K : {2, 3, 4, 5}) {
          int expect = (H - 1) * s - 2 * p + K;
          if (expect < 1) continue;
          auto xi = Tensor<float>::full({1, 1, H, H}, 1.0f);
          auto wi = Tensor<float>::full({1, 1, K, K}, 0.5f);
          auto yo = conv_transpose2d(xi, wi, Tensor<float>(), s, p);
          REQUIRE(yo.dim(2) == expect);
          REQUIRE(yo.dim(3) == expect);
        }
}

TEST_CASE("conv then transpose restores spatial extent") {
  Rng rng(9);
  auto x = Tensor<double>::rand_uniform({1, 2, 8, 8}, rng, -1.0, 1.0);
  auto w1 = Tensor<double>::rand_uniform({4, 2, 3, 3}, rng, -0.5, 0.5);
  auto y = conv2d(x, w1, Tensor<double>(), 2, 1);
  REQUIRE(y.dim(2) == 4);
  auto w2 = Tensor<double>::rand_uniform({4, 2, 4, 4}, rng, -0.5, 0.5);
  auto z = conv_transpose2d(y, w2, Tensor<double>(), 2, 1);
  REQUIRE(z.dim(2) == 8);
  REQUIRE(z.dim(3) == 8);
}

TEST_CASE("backward basic rules") {
  Rng rng(21);
  auto x = Tensor<double>::rand_uniform({5}, rng, -2.0, 2.0);
  x.set_requires_grad(true);

  auto loss = sum(x);
  backward(loss);
  for (int i = 0; i < 5; ++i) REQUIRE(x.grad()[i] == Catch::Approx(1.0));

  x.zero_grad();
  auto loss2 = sum(mul(x, x));
  backward(loss2);
  for (int i = 0; i < 5; ++i) REQUIRE(x.grad()[i] == Catch::Approx(2.0 * x.data()[i]));

  // fan-out accumulates additively
  x.zero_grad();
  auto loss3 = sum(add(x, x));
  backward(loss3);
  for (int i = 0; i < 5; ++i) REQUIRE(x.grad()[i] == Catch::Approx(2.0));

  auto vec = Tensor<double>::full({3}, 1.0);
  vec.set_requires_grad(true);
  REQUIRE_THROWS_AS(backward(vec), std::invalid_argument);
}

TEST_CASE("detached tensors never receive gradient") {
  auto x = Tensor<double>::full({3}, 2.0);
  x.set_requires_grad(true);
  auto d = x.detach();
  auto loss = sum(mul(d, d));
  backward(loss);  // no-op: loss is not tape-connected
  REQUIRE_FALSE(d.requires_grad());
  for (int i = 0; i < 3; ++i) REQUIRE(x.grad()[i] == 0.0);
}

TEST_CASE("finite_diff_check on simple functions") {
  Rng rng(31);
  auto x = Tensor<double>::rand_uniform({6}, rng, -1.0, 1.0);
  double e1 = finite_diff_check([](const Tensor<double>& t) { return sum(t); }, x, 1e-5);
  REQUIRE(e1 < 1e-10);

  // sum of softmax is constant 1, so both gradients vanish
  auto x2 = Tensor<double>::rand_uniform({6}, rng, -1.0, 1.0);
  double e2 = finite_diff_check([](const Tensor<double>& t) { return sum(softmax(t, 0)); }, x2, 1e-5);
  REQUIRE(e2 < 1e-7);
}

TEST_CASE("gradients of core ops match finite differences") {
  Rng rng(41);
  for (int seed = 0; seed < 3; ++seed) {
    auto x = Tensor<double>::rand_uniform({4, 3}, rng, -1.5, 1.5);
    double e = finite_diff_check(
        [](const Tensor<double>& t) {
          auto s = softmax(t, 1);
          return sum(mul(s, exp_op(mul_scalar(t, 0.3))));
        },
        x, 1e-5);
    REQUIRE(e < 1e-8);
  }

  auto a = Tensor<double>::rand_uniform({3, 4}, rng, -1.0, 1.0);
  auto b = Tensor<double>::rand_uniform({4, 2}, rng, -1.0, 1.0);
  b.set_requires_grad(true);
  double em = finite_diff_check(
      [&b](const Tensor<double>& t) { return sum(mul(matmul(t, b), matmul(t, b))); }, a, 1e-5);
  REQUIRE(em < 1e-8);

  auto xc = Tensor<double>::rand_uniform({2, 3, 6, 6}, rng, -1.0, 1.0);
  auto wc = Tensor<double>::rand_uniform({4, 3, 3, 3}, rng, -0.5, 0.5);
  auto bc = Tensor<double>::rand_uniform({4}, rng, -0.5, 0.5);
  double ec = finite_diff_check(
      [&xc, &bc](const Tensor<double>& w) {
        auto y = conv2d(xc, w, bc, 2, 1);
        return sum(mul(y, y));
      },
      wc, 1e-5);
  REQUIRE(ec < 1e-8);

  auto wt = Tensor<double>::rand_uniform({3, 2, 4, 4}, rng, -0.5, 0.5);
  double et = finite_diff_check(
      [&xc](const Tensor<double>& w) {
        auto y = conv_transpose2d(xc, w, Tensor<double>(), 2, 1);
        return sum(mul(y, y));
      },
      wt, 1e-5);
  REQUIRE(et < 1e-8);

  auto xl = Tensor<double>::rand_uniform({20}, rng, -2.0, 2.0);
  double el = finite_diff_check(
      [](const Tensor<double>& t) { return sum(mul(leaky_relu(t, 0.1), tanh_op(t))); }, xl, 1e-6);
  REQUIRE(el < 1e-7);
}

TEST_CASE("slice and concat round trips with gradients") {
  Rng rng(51);
  auto x = Tensor<double>::rand_uniform({2, 6, 3, 3}, rng, -1.0, 1.0);
  auto a = slice_channels(x, 0, 2);
  auto b = slice_channels(x, 2, 6);
  auto back = concat_channels<double>({a, b});
  for (long i = 0; i < x.numel(); ++i) REQUIRE(back.data()[i] == x.data()[i]);

  double e = finite_diff_check(
      [](const Tensor<double>& t) {
        auto lo = slice_channels(t, 0, 2);
        auto hi = slice_channels(t, 2, 6);
        auto cat = concat_channels<double>({hi, lo});
        return sum(mul(cat, cat));
      },
      x, 1e-5);
  REQUIRE(e < 1e-8);

  REQUIRE_THROWS_AS(slice_channels(x, 4, 3), std::invalid_argument);
}

TEST_CASE("matmul variants match naive oracles") {
  Rng rng(61);
  auto a = Tensor<double>::rand_uniform({3, 5}, rng, -1.0, 1.0);
  auto b = Tensor<double>::rand_uniform({5, 4}, rng, -1.0, 1.0);
  auto c = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int p = 0; p < 5; ++p) acc += a.data()[i * 5 + p] * b.data()[p * 4 + j];
      REQUIRE(c.data()[i * 4 + j] == Catch::Approx(acc).margin(1e-12));
    }

  auto bt = Tensor<double>::rand_uniform({4, 5}, rng, -1.0, 1.0);
  auto cnt = matmul_nt(a, bt);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int p = 0; p < 5; ++p) acc += a.data()[i * 5 + p] * bt.data()[j * 5 + p];
      REQUIRE(cnt.data()[i * 4 + j] == Catch::Approx(acc).margin(1e-12));
    }

  auto batched = Tensor<double>::rand_uniform({2, 3, 5}, rng, -1.0, 1.0);
  auto cb = matmul(batched, b);
  REQUIRE(cb.shape() == std::vector<int>{2, 3, 4});

  auto u = Tensor<double>::rand_uniform({2, 3, 4}, rng, -1.0, 1.0);
  auto v = Tensor<double>::rand_uniform({2, 4, 5}, rng, -1.0, 1.0);
  auto w = bmm(u, v);
  for (int bidx = 0; bidx < 2; ++bidx)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) {
        double acc = 0.0;
        for (int p = 0; p < 4; ++p)
          acc += u.data()[(bidx * 3 + i) * 4 + p] * v.data()[(bidx * 4 + p) * 5 + j];
        REQUIRE(w.data()[(bidx * 3 + i) * 5 + j] == Catch::Approx(acc).margin(1e-12));
      }

  double e = finite_diff_check(
      [&v](const Tensor<double>& t) {
        auto y = bmm_nt(t, v);  // [2,3,4] x [2,5,4]^T is invalid; use v as [2,4,5] -> nt needs same last dim
        return sum(mul(y, y));
      },
      Tensor<double>::rand_uniform({2, 3, 5}, rng, -1.0, 1.0), 1e-5);
  REQUIRE(e < 1e-8);
}

TEST_CASE("deterministic forward under fixed seed") {
  auto run = [] {
    Rng rng(123);
    auto x = Tensor<float>::rand_uniform({2, 3, 8, 8}, rng, -1.0, 1.0);
    auto w = Tensor<float>::rand_uniform({4, 3, 3, 3}, rng, -0.5, 0.5);
    auto y = conv2d(x, w, Tensor<float>(), 2, 1);
    auto s = softmax(y, 1);
    return sum(s).item();
  };
  float a = run();
  float b = run();
  REQUIRE(std::memcmp(&a, &b, sizeof(float)) == 0);
}
