#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "das/errors.hpp"
#include "das/optim.hpp"
#include "das/tensor.hpp"
#include "test_util.hpp"

using namespace das;
using das_test::max_grad_rel_err;
using das_test::random_tensor;
using das_test::rel_err;

TEST_CASE("tensor shape and value invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), ValidationError);
  CHECK_THROWS_AS(Tensor({0}, {}), ValidationError);
  Tensor t({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK_FALSE(t.has_grad());
  CHECK_THROWS_AS(t.grad(), UsageError);
}

TEST_CASE("matmul identity and hand arithmetic") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {3, -1, 2, 7});
  Tensor out = matmul(eye, m);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(out.values()[i] == m.values()[i]);
  }

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.values()[0] == 3.0);
  CHECK(c.values()[1] == 7.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a({2, 3}, std::vector<double>(6, 1.0));
  Tensor b({2, 3}, std::vector<double>(6, 1.0));
  try {
    matmul(a, b);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(17);
  Parameter a(random_tensor({3, 4}, rng));
  Parameter b(random_tensor({4, 2}, rng));
  const double err = max_grad_rel_err(
      [&]() { return sum(matmul(a.tensor(), b.tensor())); }, {a, b});
  CHECK(err < 1e-6);
}

TEST_CASE("relu forward and subgradient") {
  Tensor x({1, 3}, {-1, 0, 2});
  Tensor y = relu(x);
  CHECK(y.values()[0] == 0.0);
  CHECK(y.values()[1] == 0.0);
  CHECK(y.values()[2] == 2.0);

  // All-negative input: zero output, zero gradient upstream.
  Parameter w(Tensor({1, 3}, {-1.0, -2.0, -0.5}));
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(relu(w.tensor()));
  CHECK(loss.item() == 0.0);
  tape.backward(loss);
  for (double g : w.tensor().grad()) CHECK(g == 0.0);
}

TEST_CASE("relu gradient away from the kink") {
  Rng rng(3);
  Parameter x(Tensor::zeros({4, 5}));
  for (double& v : x.tensor().values_mut()) {
    double g = rng.gaussian();
    v = (g >= 0 ? g + 0.1 : g - 0.1);  // keep |x| > 1e-3 under perturbation
  }
  const double err =
      max_grad_rel_err([&]() { return sum(relu(x.tensor())); }, {x});
  CHECK(err < 1e-6);
}

TEST_CASE("sigmoid closed forms") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(std::abs(sigmoid(50.0) - 1.0) < 1e-9);
  CHECK(std::abs(sigmoid(std::log(3.0)) - 0.75) < 1e-12);
  Tensor x({1, 2}, {0.0, std::log(3.0)});
  Tensor y = sigmoid(x);
  CHECK(y.values()[0] == 0.5);
  CHECK(std::abs(y.values()[1] - 0.75) < 1e-12);
}

TEST_CASE("sigmoid gradient matches central differences") {
  Rng rng(11);
  Parameter x(random_tensor({2, 3}, rng));
  const double err =
      max_grad_rel_err([&]() { return sum(sigmoid(x.tensor())); }, {x});
  CHECK(err < 1e-6);
}

TEST_CASE("softmax cross entropy closed forms") {
  // Uniform logits over 4 classes: loss = ln 4.
  Tensor uniform({2, 4}, std::vector<double>(8, 0.3));
  Tensor loss = softmax_cross_entropy(uniform, {1, 3});
  CHECK(std::abs(loss.item() - std::log(4.0)) < 1e-12);

  // Strongly favoring the true class saturates to ~0 loss.
  Tensor confident({1, 4}, {0.0, 20.0, 0.0, 0.0});
  CHECK(softmax_cross_entropy(confident, {1}).item() < 1e-6);

  CHECK_THROWS_AS(softmax_cross_entropy(confident, {4}), ValidationError);
  CHECK_THROWS_AS(softmax_cross_entropy(confident, {-1}), ValidationError);
}

TEST_CASE("softmax cross entropy gradient matches central differences") {
  Rng rng(23);
  Parameter logits(random_tensor({5, 3}, rng));
  std::vector<int> labels = {0, 2, 1, 1, 0};
  const double err = max_grad_rel_err(
      [&]() { return softmax_cross_entropy(logits.tensor(), labels); },
      {logits});
  CHECK(err < 1e-6);
}

TEST_CASE("backward trivials") {
  Parameter w(Tensor({2, 2}, {1, 2, 3, 4}));
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(w.tensor());
    tape.backward(loss);
  }
  for (double g : w.tensor().grad()) CHECK(g == 1.0);

  // Loss independent of w: no gradient lands there.
  Parameter other(Tensor({1, 1}, {5.0}));
  w.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = sum(other.tensor());
    tape.backward(loss);
  }
  CHECK_FALSE(w.tensor().has_grad());
}

TEST_CASE("backward usage errors") {
  Tape tape;
  Parameter w(Tensor({1, 2}, {2.0, 3.0}));
  // A leaf was never produced on the tape.
  CHECK_THROWS_AS(tape.backward(w.tensor()), UsageError);

  {
    TapeScope scope(tape);
    Tensor out = add(w.tensor(), w.tensor());
    CHECK_THROWS_AS(tape.backward(out), UsageError);  // not scalar
  }
}

TEST_CASE("two-layer MLP gradients match central differences") {
  Rng rng(41);
  Parameter w1(random_tensor({6, 8}, rng, 0.7));
  Parameter b1(random_tensor({8}, rng, 0.2));
  Parameter w2(random_tensor({8, 3}, rng, 0.7));
  Parameter b2(random_tensor({3}, rng, 0.2));
  Tensor x = random_tensor({4, 6}, rng);
  std::vector<int> labels = {0, 1, 2, 1};

  auto build = [&]() {
    Tensor h = relu(add_bias_row(matmul(x, w1.tensor()), b1.tensor()));
    Tensor logits = add_bias_row(matmul(h, w2.tensor()), b2.tensor());
    return softmax_cross_entropy(logits, labels);
  };
  const double err = max_grad_rel_err(build, {w1, b1, w2, b2});
  CHECK(err < 1e-5);
}

TEST_CASE("gradients accumulate until zeroed") {
  Parameter w(Tensor({1, 2}, {1.0, 2.0}));
  for (int pass = 0; pass < 2; ++pass) {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(w.tensor()));
  }
  for (double g : w.tensor().grad()) CHECK(g == 2.0);
  w.zero_grad();
  CHECK_FALSE(w.tensor().has_grad());
}

TEST_CASE("frozen parameters never accumulate gradient") {
  Parameter w(Tensor({2, 2}, {1, 1, 1, 1}));
  w.freeze();
  Parameter v(Tensor({2, 2}, {2, 2, 2, 2}));
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(matmul(w.tensor(), v.tensor()));
  tape.backward(loss);
  CHECK_FALSE(w.tensor().has_grad());
  CHECK(v.tensor().has_grad());
}

TEST_CASE("gradient flows through frozen weights to upstream parameters") {
  Parameter upstream(Tensor({1, 2}, {1.0, -1.0}));
  Parameter frozen_w(Tensor({2, 2}, {1, 2, 3, 4}));
  frozen_w.freeze();
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(matmul(upstream.tensor(), frozen_w.tensor()));
  tape.backward(loss);
  auto g = upstream.tensor().grad();
  CHECK(g[0] == 3.0);  // column sums of frozen_w
  CHECK(g[1] == 7.0);
}

TEST_CASE("sgd step and freeze contract") {
  Parameter w(Tensor({1, 1}, {1.0}));
  w.tensor().grad_accum()[0] = 1.0;
  Sgd opt({w}, 0.1);
  opt.step();
  CHECK(std::abs(w.tensor().values()[0] - 0.9) < 1e-15);

  Parameter frozen(Tensor({1, 1}, {1.0}));
  frozen.freeze();
  frozen.tensor().grad_accum()[0] = 1.0;
  Sgd opt2({frozen}, 0.1);
  opt2.step();
  CHECK(frozen.tensor().values()[0] == 1.0);
}

TEST_CASE("adamw first step matches the hand-computed update") {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
  const double w0 = 0.7, g = 0.3;
  Parameter w(Tensor({1, 1}, {w0}));
  w.tensor().grad_accum()[0] = g;
  AdamW opt({w}, {.lr = lr, .beta1 = b1, .beta2 = b2, .eps = eps,
                  .weight_decay = wd});
  opt.step();
  // From zero moments: mhat = g, vhat = g^2.
  const double expected = w0 - lr * (g / (std::sqrt(g * g) + eps) + wd * w0);
  CHECK(std::abs(w.tensor().values()[0] - expected) < 1e-14);
}

TEST_CASE("tape hygiene: clear then identical re-run") {
  Rng rng(7);
  Parameter w(random_tensor({3, 3}, rng));
  Tensor x = random_tensor({2, 3}, rng);

  Tape tape;
  std::vector<std::byte> first;
  {
    TapeScope scope(tape);
    Tensor out = relu(matmul(x, w.tensor()));
    first = das_test::snapshot_bytes(out);
    tape.backward(sum(out));
  }
  CHECK(tape.size() > 0);
  tape.clear();
  CHECK(tape.empty());
  w.zero_grad();
  {
    TapeScope scope(tape);
    Tensor out = relu(matmul(x, w.tensor()));
    CHECK(das_test::snapshot_bytes(out) == first);
  }
}

TEST_CASE("no recording without an active tape") {
  Parameter w(Tensor({1, 1}, {1.0}));
  Tensor out = sum(w.tensor());
  CHECK_FALSE(out.requires_grad());
  Tape tape;
  CHECK_THROWS_AS(tape.backward(out), UsageError);
}

TEST_CASE("bias row addition broadcasts and differentiates") {
  Rng rng(29);
  Parameter b(random_tensor({3}, rng));
  Tensor x = random_tensor({4, 3}, rng);
  Tensor out = add_bias_row(x, b.tensor());
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(out.values()[i * 3 + j] == x.values()[i * 3 + j] + b.tensor().values()[j]);
    }
  }
  const double err =
      max_grad_rel_err([&]() { return sum(add_bias_row(x, b.tensor())); }, {b});
  CHECK(err < 1e-6);

  Tensor bad({2}, {0.0, 0.0});
  CHECK_THROWS_AS(add_bias_row(x, bad), ValidationError);
}

TEST_CASE("mac counter counts matmul multiply-adds") {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({4, 5});
  MacCounterScope counter;
  matmul(a, b);
  CHECK(counter.count() == 3u * 4u * 5u);
  relu(a);  // no MACs
  CHECK(counter.count() == 3u * 4u * 5u);
}
