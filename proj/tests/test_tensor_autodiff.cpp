#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "fvlab/gradcheck.hpp"
#include "fvlab/rng.hpp"
#include "fvlab/tape.hpp"
#include "fvlab/tensor.hpp"
#include "test_util.hpp"

using namespace fvlab;
using fvtest::random_tensor;
using fvtest::random_tensor_away_from_zero;

namespace {

constexpr float kEps = 1e-3f;
constexpr double kTol = 1e-2;  // 32-bit finite-difference budget

BnState fresh_bn_state(int c) {
  BnState st;
  st.running_mean = Tensor::zeros({c});
  st.running_var = Tensor::full({c}, 1.0f);
  return st;
}

}  // namespace

TEST_CASE("conv2d forward matches hand examples") {
  SECTION("scalar kernel scales input") {
    Graph g;
    const int x = g.constant(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}));
    const int k = g.constant(Tensor::from({1, 1, 1, 1}, {2}));
    const int b = g.constant(Tensor::zeros({1}));
    const int y = g.conv2d(x, k, b, 1, 0);
    REQUIRE(g.value(y).shape == std::vector<int>{1, 1, 2, 2});
    REQUIRE(g.value(y).data == std::vector<float>{2, 4, 6, 8});
  }
  SECTION("center delta kernel with pad 1 is identity") {
    Tensor xin = random_tensor({2, 3, 5, 4}, 11);
    Graph g;
    Tensor kt = Tensor::zeros({3, 3, 3, 3});
    for (int c = 0; c < 3; ++c) kt.at({c, c, 1, 1}) = 1.0f;
    const int x = g.constant(xin);
    const int k = g.constant(kt);
    const int b = g.constant(Tensor::zeros({3}));
    const int y = g.conv2d(x, k, b, 1, 1);
    REQUIRE(g.value(y).shape == xin.shape);
    REQUIRE(g.value(y).data == xin.data);
  }
  SECTION("output extents follow the floor rule") {
    Graph g;
    const int x = g.constant(Tensor::zeros({1, 1, 7, 9}));
    const int k = g.constant(Tensor::zeros({2, 1, 3, 3}));
    const int b = g.constant(Tensor::zeros({2}));
    const int y = g.conv2d(x, k, b, 2, 1);
    REQUIRE(g.value(y).shape == std::vector<int>{1, 2, 4, 5});
  }
  SECTION("shape mismatches name the offending dimension") {
    Graph g;
    const int x = g.constant(Tensor::zeros({1, 3, 4, 4}));
    const int k = g.constant(Tensor::zeros({2, 4, 3, 3}));
    const int b = g.constant(Tensor::zeros({2}));
    REQUIRE_THROWS_WITH(g.conv2d(x, k, b, 1, 0),
                        Catch::Matchers::ContainsSubstring("Cin"));
    const int k2 = g.constant(Tensor::zeros({2, 3, 6, 3}));
    REQUIRE_THROWS_WITH(g.conv2d(x, k2, b, 1, 0), Catch::Matchers::ContainsSubstring("kh"));
    const int b2 = g.constant(Tensor::zeros({3}));
    const int k3 = g.constant(Tensor::zeros({2, 3, 3, 3}));
    REQUIRE_THROWS_WITH(g.conv2d(x, k3, b2, 1, 0), Catch::Matchers::ContainsSubstring("bias"));
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  const Tensor x0 = random_tensor({2, 3, 5, 5}, 21);
  const Tensor k0 = random_tensor({4, 3, 3, 3}, 22);
  const Tensor b0 = random_tensor({4}, 23);

  SECTION("wrt input") {
    auto f = [&](Graph& g, int x) {
      return g.sum_squares(g.conv2d(x, g.constant(k0), g.constant(b0), 1, 1));
    };
    REQUIRE(finite_diff_check(f, x0, kEps).max_rel_err < kTol);
  }
  SECTION("wrt kernel") {
    auto f = [&](Graph& g, int k) {
      return g.sum_squares(g.conv2d(g.constant(x0), k, g.constant(b0), 1, 1));
    };
    REQUIRE(finite_diff_check(f, k0, kEps).max_rel_err < kTol);
  }
  SECTION("wrt bias") {
    auto f = [&](Graph& g, int b) {
      return g.sum_squares(g.conv2d(g.constant(x0), g.constant(k0), b, 1, 1));
    };
    REQUIRE(finite_diff_check(f, b0, kEps).max_rel_err < kTol);
  }
  SECTION("wrt input, strided") {
    auto f = [&](Graph& g, int x) {
      return g.sum_squares(g.conv2d(x, g.constant(k0), g.constant(b0), 2, 1));
    };
    REQUIRE(finite_diff_check(f, x0, kEps).max_rel_err < kTol);
  }
}

TEST_CASE("relu semantics") {
  SECTION("clamps negatives") {
    Graph g;
    const int y = g.relu(g.constant(Tensor::from({3}, {-1, 0, 2})));
    REQUIRE(g.value(y).data == std::vector<float>{0, 0, 2});
  }
  SECTION("all-negative input passes zero gradient") {
    Tensor x = Tensor::from({2, 2}, {-1, -2, -3, -4});
    Graph g;
    const int id = g.leaf(x);
    const int loss = g.sum(g.relu(id));
    g.backward(loss);
    REQUIRE(g.value(loss).data[0] == 0.0f);
    REQUIRE(x.grad == std::vector<float>{0, 0, 0, 0});
  }
  SECTION("gradient mask is indicator(x>0)") {
    const Tensor x0 = random_tensor_away_from_zero({4, 5}, 31);
    auto f = [](Graph& g, int x) { return g.sum_squares(g.relu(x)); };
    REQUIRE(finite_diff_check(f, x0, kEps).max_rel_err < kTol);
  }
}

TEST_CASE("batchnorm2d semantics") {
  SECTION("constant channel normalizes to ~0 in train mode") {
    Graph g;
    BnState st = fresh_bn_state(2);
    const int x = g.constant(Tensor::full({2, 2, 3, 3}, 0.7f));
    const int y = g.batchnorm2d(x, g.constant(Tensor::full({2}, 1.0f)),
                                g.constant(Tensor::zeros({2})), &st, Mode::kTrain, 1e-5f, 0.1f);
    for (float v : g.value(y).data) REQUIRE(std::fabs(v) <= 1e-3f);
    // running stats moved toward the batch: mean 0.7, var 0
    REQUIRE(st.running_mean.data[0] == Catch::Approx(0.07).margin(1e-6));
    REQUIRE(st.running_var.data[0] == Catch::Approx(0.9).margin(1e-6));
  }
  SECTION("eval mode with unit running stats and eps=0 is identity") {
    Tensor xin = random_tensor({2, 3, 4, 4}, 41);
    Graph g;
    BnState st = fresh_bn_state(3);
    const int y = g.batchnorm2d(g.constant(xin), g.constant(Tensor::full({3}, 1.0f)),
                                g.constant(Tensor::zeros({3})), &st, Mode::kEval, 0.0f, 0.1f);
    REQUIRE(g.value(y).data == xin.data);
  }
  SECTION("train mode rejects single-element stats") {
    Graph g;
    BnState st = fresh_bn_state(3);
    const int x = g.constant(Tensor::zeros({1, 3, 1, 1}));
    REQUIRE_THROWS_AS(g.batchnorm2d(x, g.constant(Tensor::full({3}, 1.0f)),
                                    g.constant(Tensor::zeros({3})), &st, Mode::kTrain, 1e-5f,
                                    0.1f),
                      Error);
  }
  SECTION("gradients match finite differences") {
    const Tensor x0 = random_tensor({3, 2, 4, 4}, 42);
    const Tensor gamma0 = random_tensor({2}, 43, 0.5f, 1.5f);
    const Tensor beta0 = random_tensor({2}, 44);
    const BnState st0 = fresh_bn_state(2);
    for (Mode mode : {Mode::kTrain, Mode::kEval}) {
      auto wrt_x = [&](Graph& g, int x) {
        BnState st = st0;  // train-mode forward mutates; keep evals independent
        return g.sum_squares(
            g.batchnorm2d(x, g.constant(gamma0), g.constant(beta0), &st, mode, 1e-5f, 0.1f));
      };
      auto wrt_gamma = [&](Graph& g, int ga) {
        BnState st = st0;
        return g.sum_squares(
            g.batchnorm2d(g.constant(x0), ga, g.constant(beta0), &st, mode, 1e-5f, 0.1f));
      };
      auto wrt_beta = [&](Graph& g, int be) {
        BnState st = st0;
        return g.sum_squares(
            g.batchnorm2d(g.constant(x0), g.constant(gamma0), be, &st, mode, 1e-5f, 0.1f));
      };
      REQUIRE(finite_diff_check(wrt_x, x0, kEps).max_rel_err < kTol);
      REQUIRE(finite_diff_check(wrt_gamma, gamma0, kEps).max_rel_err < kTol);
      REQUIRE(finite_diff_check(wrt_beta, beta0, kEps).max_rel_err < kTol);
    }
  }
}

TEST_CASE("linear semantics") {
  SECTION("identity weight, zero bias") {
    Tensor xin = random_tensor({3, 4}, 51);
    Tensor w = Tensor::zeros({4, 4});
    for (int i = 0; i < 4; ++i) w.at({i, i}) = 1.0f;
    Graph g;
    const int y = g.linear(g.constant(xin), g.constant(w), g.constant(Tensor::zeros({4})));
    REQUIRE(g.value(y).data == xin.data);
  }
  SECTION("hand arithmetic") {
    Graph g;
    const int y = g.linear(g.constant(Tensor::from({1, 2}, {1, 2})),
                           g.constant(Tensor::from({1, 2}, {3, 4})),
                           g.constant(Tensor::from({1}, {5})));
    REQUIRE(g.value(y).data == std::vector<float>{16});
  }
  SECTION("inner dimension mismatch errors") {
    Graph g;
    REQUIRE_THROWS_AS(g.linear(g.constant(Tensor::zeros({2, 3})),
                               g.constant(Tensor::zeros({4, 5})),
                               g.constant(Tensor::zeros({4}))),
                      Error);
  }
  SECTION("gradients match finite differences") {
    const Tensor x0 = random_tensor({3, 5}, 52);
    const Tensor w0 = random_tensor({4, 5}, 53);
    const Tensor b0 = random_tensor({4}, 54);
    auto wrt_x = [&](Graph& g, int x) {
      return g.sum_squares(g.linear(x, g.constant(w0), g.constant(b0)));
    };
    auto wrt_w = [&](Graph& g, int w) {
      return g.sum_squares(g.linear(g.constant(x0), w, g.constant(b0)));
    };
    auto wrt_b = [&](Graph& g, int b) {
      return g.sum_squares(g.linear(g.constant(x0), g.constant(w0), b));
    };
    REQUIRE(finite_diff_check(wrt_x, x0, kEps).max_rel_err < kTol);
    REQUIRE(finite_diff_check(wrt_w, w0, kEps).max_rel_err < kTol);
    REQUIRE(finite_diff_check(wrt_b, b0, kEps).max_rel_err < kTol);
  }
}

TEST_CASE("global_avg_pool semantics") {
  SECTION("constant channel pools to its value") {
    Graph g;
    Tensor x = Tensor::zeros({1, 2, 3, 3});
    for (int i = 0; i < 9; ++i) x.data[static_cast<std::size_t>(i)] = 0.25f;
    for (int i = 9; i < 18; ++i) x.data[static_cast<std::size_t>(i)] = -2.0f;
    const int y = g.global_avg_pool(g.constant(x));
    REQUIRE(g.value(y).data[0] == Catch::Approx(0.25f));
    REQUIRE(g.value(y).data[1] == Catch::Approx(-2.0f));
  }
  SECTION("1x1 spatial input is identity") {
    Tensor xin = random_tensor({3, 4, 1, 1}, 61);
    Graph g;
    const int y = g.global_avg_pool(g.constant(xin));
    REQUIRE(g.value(y).data == xin.data);
  }
  SECTION("gradient is broadcast 1/(H*W)") {
    const Tensor x0 = random_tensor({2, 3, 4, 5}, 62);
    auto f = [](Graph& g, int x) { return g.sum_squares(g.global_avg_pool(x)); };
    REQUIRE(finite_diff_check(f, x0, kEps).max_rel_err < kTol);
  }
}

TEST_CASE("add semantics") {
  SECTION("adding zeros is identity; mismatch errors") {
    Tensor a = random_tensor({2, 3}, 71);
    Graph g;
    const int y = g.add(g.constant(a), g.constant(Tensor::zeros({2, 3})));
    REQUIRE(g.value(y).data == a.data);
    REQUIRE_THROWS_AS(g.add(g.constant(a), g.constant(Tensor::zeros({3, 2}))), Error);
  }
  SECTION("gradient routes upstream to both inputs") {
    Tensor a = random_tensor({4}, 72), b = random_tensor({4}, 73);
    Graph g;
    const int loss = g.sum(g.add(g.leaf(a), g.leaf(b)));
    g.backward(loss);
    REQUIRE(a.grad == std::vector<float>{1, 1, 1, 1});
    REQUIRE(b.grad == std::vector<float>{1, 1, 1, 1});
  }
  SECTION("property: commutative bitwise") {
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
      Rng rng(derive_seed(900, "add-comm", trial));
      const auto shape = fvtest::random_shape(rng, 3);
      Tensor a = random_tensor(shape, rng.next_u64(), -100.0f, 100.0f);
      Tensor b = random_tensor(shape, rng.next_u64(), -100.0f, 100.0f);
      Graph g;
      const int ab = g.add(g.constant(a), g.constant(b));
      const int ba = g.add(g.constant(b), g.constant(a));
      REQUIRE(std::memcmp(g.value(ab).data.data(), g.value(ba).data.data(),
                          a.data.size() * sizeof(float)) == 0);
    }
  }
}

TEST_CASE("softmax_cross_entropy semantics") {
  SECTION("uniform logits give ln K") {
    Graph g;
    const int loss = g.softmax_cross_entropy(g.constant(Tensor::zeros({3, 20})), {4, 0, 19});
    REQUIRE(g.value(loss).data[0] == Catch::Approx(std::log(20.0)).epsilon(1e-5));
  }
  SECTION("saturated true class gives ~0 loss") {
    Tensor logits = Tensor::zeros({1, 5});
    logits.at({0, 2}) = 50.0f;
    Graph g;
    const int loss = g.softmax_cross_entropy(g.constant(logits), {2});
    REQUIRE(g.value(loss).data[0] < 1e-6f);
  }
  SECTION("out-of-range label errors") {
    Graph g;
    const int l = g.constant(Tensor::zeros({2, 4}));
    REQUIRE_THROWS_AS(g.softmax_cross_entropy(l, {0, 4}), Error);
    REQUIRE_THROWS_AS(g.softmax_cross_entropy(l, {-1, 0}), Error);
    REQUIRE_THROWS_AS(g.softmax_cross_entropy(l, {0}), Error);
  }
  SECTION("gradient equals (softmax - onehot)/N and matches finite differences") {
    Tensor logits = random_tensor({3, 6}, 81, -2.0f, 2.0f);
    const std::vector<int> labels = {2, 0, 5};
    Graph g;
    const int id = g.leaf(logits);
    const int loss = g.softmax_cross_entropy(id, labels);
    g.backward(loss);
    for (int i = 0; i < 3; ++i) {
      const float* row = logits.data.data() + i * 6;
      float mx = *std::max_element(row, row + 6);
      double z = 0.0;
      for (int j = 0; j < 6; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      for (int j = 0; j < 6; ++j) {
        double p = std::exp(static_cast<double>(row[j] - mx)) / z;
        if (j == labels[static_cast<std::size_t>(i)]) p -= 1.0;
        REQUIRE(logits.grad[static_cast<std::size_t>(i * 6 + j)] ==
                Catch::Approx(p / 3.0).margin(1e-6));
      }
    }
    auto f = [&](Graph& gg, int x) { return gg.softmax_cross_entropy(x, labels); };
    REQUIRE(finite_diff_check(f, logits, kEps).max_rel_err < kTol);
  }
}

TEST_CASE("backward mechanics") {
  SECTION("non-scalar loss is rejected") {
    Graph g;
    Tensor x = random_tensor({3}, 91);
    const int id = g.leaf(x);
    const int y = g.relu(id);
    REQUIRE_THROWS_AS(g.backward(y), Error);
  }
  SECTION("diamond fan-out accumulates both paths") {
    const Tensor x0 = random_tensor_away_from_zero({3, 4}, 92);
    auto f = [](Graph& g, int x) {
      const int a = g.sum_squares(g.relu(x));
      const int b = g.sum(x);
      return g.combine_scalars({{1.0f, a}, {2.0f, b}});
    };
    REQUIRE(finite_diff_check(f, x0, kEps).max_rel_err < kTol);
  }
  SECTION("backward twice exactly doubles leaf gradients") {
    Tensor x = random_tensor({2, 3}, 93);
    Graph g;
    const int loss = g.sum_squares(g.leaf(x));
    g.backward(loss);
    const std::vector<float> once = x.grad;
    g.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i) REQUIRE(x.grad[i] == 2.0f * once[i]);
  }
}

TEST_CASE("finite_diff_check oracle sanity") {
  SECTION("f = sum: analytic all-ones, error near machine precision") {
    const Tensor x0 = random_tensor({4, 3}, 101);
    auto f = [](Graph& g, int x) { return g.sum(x); };
    Tensor probe = x0;
    Graph g;
    const int loss = g.sum(g.leaf(probe));
    g.backward(loss);
    for (float v : probe.grad) REQUIRE(v == 1.0f);
    REQUIRE(finite_diff_check(f, x0, kEps).max_rel_err < 1e-3);
  }
  SECTION("f = sum(x^2): analytic gradient 2x") {
    Tensor x0 = random_tensor({5}, 102);
    Tensor probe = x0;
    Graph g;
    const int loss = g.sum_squares(g.leaf(probe));
    g.backward(loss);
    for (std::size_t i = 0; i < probe.grad.size(); ++i)
      REQUIRE(probe.grad[i] == Catch::Approx(2.0f * x0.data[i]).margin(1e-6));
  }
  SECTION("rejects non-positive eps") {
    auto f = [](Graph& g, int x) { return g.sum(x); };
    REQUIRE_THROWS_AS(finite_diff_check(f, Tensor::zeros({2}), 0.0f), Error);
  }
}

TEST_CASE("invariant: randomized finite-difference sweep over every op") {
  // Reduced-trial version of the acceptance gradient suite; the full
  // 100-trial run lives in the acceptance binary.
  const int trials = 10;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(7100, "fd-sweep", static_cast<std::uint64_t>(t)));
    const int n = static_cast<int>(rng.next_int(1, 3));
    const int cin = static_cast<int>(rng.next_int(1, 4));
    const int h = static_cast<int>(rng.next_int(3, 6));
    const int w = static_cast<int>(rng.next_int(3, 6));
    const int cout = static_cast<int>(rng.next_int(1, 4));
    const int kh = static_cast<int>(rng.next_int(1, 3));
    const int kw = static_cast<int>(rng.next_int(1, 3));
    const int stride = static_cast<int>(rng.next_int(1, 2));
    const int pad = static_cast<int>(rng.next_int(0, 1));

    const Tensor x0 = random_tensor({n, cin, h, w}, rng.next_u64());
    const Tensor k0 = random_tensor({cout, cin, kh, kw}, rng.next_u64());
    const Tensor b0 = random_tensor({cout}, rng.next_u64());
    auto conv_x = [&](Graph& g, int x) {
      return g.sum_squares(g.conv2d(x, g.constant(k0), g.constant(b0), stride, pad));
    };
    auto conv_k = [&](Graph& g, int k) {
      return g.sum_squares(g.conv2d(g.constant(x0), k, g.constant(b0), stride, pad));
    };
    REQUIRE(finite_diff_check(conv_x, x0, kEps).max_rel_err < kTol);
    REQUIRE(finite_diff_check(conv_k, k0, kEps).max_rel_err < kTol);

    const Tensor r0 = random_tensor_away_from_zero({n, cin, h, w}, rng.next_u64());
    auto relu_f = [](Graph& g, int x) { return g.sum_squares(g.relu(x)); };
    REQUIRE(finite_diff_check(relu_f, r0, kEps).max_rel_err < kTol);

    auto gap_f = [](Graph& g, int x) { return g.sum_squares(g.global_avg_pool(x)); };
    REQUIRE(finite_diff_check(gap_f, x0, kEps).max_rel_err < kTol);
  }
}

TEST_CASE("invariant: forward passes are deterministic") {
  const Tensor x0 = random_tensor({2, 3, 8, 8}, 111);
  const Tensor k0 = random_tensor({4, 3, 3, 3}, 112);
  const Tensor b0 = random_tensor({4}, 113);
  std::vector<float> first;
  for (int rep = 0; rep < 3; ++rep) {
    Graph g;
    const int y = g.relu(g.conv2d(g.constant(x0), g.constant(k0), g.constant(b0), 1, 1));
    if (rep == 0)
      first = g.value(y).data;
    else
      REQUIRE(std::memcmp(first.data(), g.value(y).data.data(), first.size() * sizeof(float)) ==
              0);
  }
}

TEST_CASE("invariant: no NaN/Inf on large-magnitude inputs") {
  for (std::uint64_t t = 0; t < 10; ++t) {
    Rng rng(derive_seed(7200, "finite", t));
    const Tensor x0 = random_tensor({2, 3, 6, 6}, rng.next_u64(), -1e3f, 1e3f);
    const Tensor k0 = random_tensor({4, 3, 3, 3}, rng.next_u64(), -1e3f, 1e3f);
    const Tensor b0 = random_tensor({4}, rng.next_u64(), -1e3f, 1e3f);
    Graph g;
    BnState st = fresh_bn_state(4);
    const int conv = g.conv2d(g.constant(x0), g.constant(k0), g.constant(b0), 1, 1);
    const int bn = g.batchnorm2d(conv, g.constant(Tensor::full({4}, 1.0f)),
                                 g.constant(Tensor::zeros({4})), &st, Mode::kTrain, 1e-5f, 0.1f);
    const int act = g.relu(bn);
    const int pooled = g.global_avg_pool(act);
    const int loss = g.softmax_cross_entropy(pooled, {0, 3});
    for (int id : {conv, bn, act, pooled, loss})
      for (float v : g.value(id).data) REQUIRE(std::isfinite(v));
  }
}
