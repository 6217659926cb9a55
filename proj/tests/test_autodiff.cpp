#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <random>

#include "ddq/errors.hpp"
#include "ddq/ops.hpp"
#include "ddq/tensor.hpp"
#include "support/testutil.hpp"

using namespace ddq;

namespace {

// Finite-difference check of d(sum(seed * op(x...)))/dx for one input of a
// recorded op, independent of the tape's backward path.
template <typename Forward>
double fd_input_grad(Forward forward, Tensor& input, std::size_t flat_index,
                     const std::vector<double>& seed, double eps = 1e-4) {
  const double saved = input.values()[flat_index];
  auto eval = [&](double v) {
    input.values()[flat_index] = v;
    Tape t;
    Tensor y = forward(t);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += seed[i] * y.values()[i];
    return acc;
  };
  const double d = (eval(saved + eps) - eval(saved - eps)) / (2.0 * eps);
  input.values()[flat_index] = saved;
  return d;
}

template <typename Forward>
void check_op_gradients(Forward forward, std::vector<Tensor*> inputs, double tol,
                        std::uint64_t seed_val = 7) {
  Tape tape;
  Tensor y = forward(tape);
  std::mt19937_64 rng(seed_val);
  const auto seed = testutil::random_vector(rng, y.size(), -1.0, 1.0);
  tape.backward_seeded(y, seed);
  for (Tensor* in : inputs) {
    for (std::size_t i = 0; i < in->size(); ++i) {
      const double fd = fd_input_grad(forward, *in, i, seed);
      const double an = in->grad()[i];
      CHECK(testutil::rel_err(an, fd) < tol);
    }
  }
}

}  // namespace

TEST_CASE("matmul identity and small products") {
  Tape tape;
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor v({2, 1}, {3, 4});
  Tensor y = matmul(tape, eye, v);
  CHECK(y.values() == std::vector<double>{3, 4});

  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  Tensor z = matmul(tape, a, b);
  CHECK(z.values() == std::vector<double>{11});
}

TEST_CASE("matmul gradients match finite differences") {
  std::mt19937_64 rng(11);
  Tensor a({3, 4}, testutil::random_vector(rng, 12, -1, 1));
  Tensor b({4, 2}, testutil::random_vector(rng, 8, -1, 1));
  check_op_gradients([&](Tape& t) { return matmul(t, a, b); }, {&a, &b}, 1e-6);
}

TEST_CASE("linear matches matmul against transposed weight") {
  std::mt19937_64 rng(12);
  Tensor x({2, 3}, testutil::random_vector(rng, 6, -1, 1));
  Tensor w({4, 3}, testutil::random_vector(rng, 12, -1, 1));
  Tape tape;
  Tensor y = linear(tape, x, w);
  REQUIRE(y.shape() == std::vector<std::size_t>{2, 4});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o) {
      double want = 0.0;
      for (std::size_t i = 0; i < 3; ++i) want += x.values()[n * 3 + i] * w.values()[o * 3 + i];
      CHECK(y.values()[n * 4 + o] == doctest::Approx(want).epsilon(1e-15));
    }
  check_op_gradients([&](Tape& t) { return linear(t, x, w); }, {&x, &w}, 1e-6);
}

TEST_CASE("conv2d by a scalar kernel scales the input") {
  Tape tape;
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w({1, 1, 1, 1}, {2});
  Tensor y = conv2d(tape, x, w, 1, 0);
  REQUIRE(y.shape() == std::vector<std::size_t>{1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) CHECK(y.values()[i] == 2.0 * x.values()[i]);
}

TEST_CASE("conv2d all-ones 2x2 over all-ones 2x2 gives 4") {
  Tape tape;
  Tensor x({1, 1, 2, 2}, {1, 1, 1, 1});
  Tensor w({1, 1, 2, 2}, {1, 1, 1, 1});
  Tensor y = conv2d(tape, x, w, 1, 0);
  REQUIRE(y.shape() == std::vector<std::size_t>{1, 1, 1, 1});
  CHECK(y.values()[0] == 4.0);
}

TEST_CASE("conv2d gradients match finite differences") {
  std::mt19937_64 rng(13);
  Tensor x({2, 3, 5, 5}, testutil::random_vector(rng, 2 * 3 * 25, -1, 1));
  Tensor w({4, 3, 3, 3}, testutil::random_vector(rng, 4 * 3 * 9, -1, 1));
  check_op_gradients([&](Tape& t) { return conv2d(t, x, w, 2, 1); }, {&x, &w}, 1e-5);
}

TEST_CASE("grouped conv2d gradients match finite differences") {
  std::mt19937_64 rng(14);
  Tensor x({1, 4, 4, 4}, testutil::random_vector(rng, 64, -1, 1));
  Tensor w({4, 2, 3, 3}, testutil::random_vector(rng, 72, -1, 1));
  check_op_gradients([&](Tape& t) { return conv2d(t, x, w, 1, 1, 2); }, {&x, &w}, 1e-5);
}

TEST_CASE("bias_add broadcasts over features and channels") {
  std::mt19937_64 rng(15);
  Tensor x2({2, 3}, testutil::random_vector(rng, 6, -1, 1));
  Tensor b2({3}, {0.5, -0.25, 1.0});
  Tape tape;
  Tensor y2 = bias_add(tape, x2, b2);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t f = 0; f < 3; ++f)
      CHECK(y2.values()[n * 3 + f] == x2.values()[n * 3 + f] + b2.values()[f]);
  check_op_gradients([&](Tape& t) { return bias_add(t, x2, b2); }, {&x2, &b2}, 1e-6);

  Tensor x4({2, 2, 3, 3}, testutil::random_vector(rng, 36, -1, 1));
  Tensor b4({2}, {1.0, -2.0});
  check_op_gradients([&](Tape& t) { return bias_add(t, x4, b4); }, {&x4, &b4}, 1e-6);
}

TEST_CASE("relu forward and gradient") {
  Tape tape;
  Tensor x({3}, {-1.0, 0.0, 2.5});
  Tensor y = relu(tape, x);
  CHECK(y.values() == std::vector<double>{0.0, 0.0, 2.5});

  // FD away from the kink: all inputs at |x| > 0.1.
  Tensor xs({4}, {-0.9, -0.4, 0.3, 1.2});
  check_op_gradients([&](Tape& t) { return relu(t, xs); }, {&xs}, 1e-6);
}

TEST_CASE("softmax cross-entropy of an exact one-hot prediction is zero") {
  Tape tape;
  Tensor logits({1, 3}, {30.0, -30.0, -30.0});
  Tensor loss = softmax_cross_entropy(tape, logits, {0});
  CHECK(loss.item() == 0.0);
}

TEST_CASE("softmax cross-entropy gradients match finite differences") {
  std::mt19937_64 rng(16);
  Tensor logits({3, 5}, testutil::random_vector(rng, 15, -2, 2));
  std::vector<int> labels{1, 4, 0};
  Tape tape;
  Tensor loss = softmax_cross_entropy(tape, logits, labels);
  tape.backward(loss);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double saved = logits.values()[i];
    auto eval = [&](double v) {
      logits.values()[i] = v;
      Tape t;
      return softmax_cross_entropy(t, logits, labels).item();
    };
    const double fd = (eval(saved + 1e-4) - eval(saved - 1e-4)) / 2e-4;
    logits.values()[i] = saved;
    CHECK(testutil::rel_err(logits.grad()[i], fd) < 1e-4);
  }
}

TEST_CASE("gradients accumulate additively across fan-out") {
  std::mt19937_64 rng(17);
  Tensor x({4}, testutil::random_vector(rng, 4, 0.2, 1.0));
  Tape tape;
  Tensor y = add(tape, x, x);
  std::vector<double> seed{1.0, 2.0, 3.0, 4.0};
  tape.backward_seeded(y, seed);
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad()[i] == 2.0 * seed[i]);
}

TEST_CASE("reshape routes gradients through unchanged") {
  std::mt19937_64 rng(18);
  Tensor x({2, 6}, testutil::random_vector(rng, 12, -1, 1));
  check_op_gradients([&](Tape& t) { return reshape(t, x, {2, 2, 3}); }, {&x}, 1e-6);
}

TEST_CASE("sgd_step with zero learning rate leaves parameters bit-identical") {
  std::mt19937_64 rng(19);
  Tensor w({5}, testutil::random_vector(rng, 5, -1, 1));
  const std::vector<double> before = w.values();
  auto& g = w.grad();
  for (std::size_t i = 0; i < 5; ++i) g[i] = 0.3 * static_cast<double>(i + 1);
  std::vector<Tensor> params{w};
  std::vector<SgdSlot> slots;
  sgd_step(params, slots, 0.0, 0.9, 1e-4);
  CHECK(std::memcmp(before.data(), w.data(), 5 * sizeof(double)) == 0);
}

TEST_CASE("sgd_step applies momentum and weight decay") {
  Tensor w({1}, {1.0});
  w.grad()[0] = 0.5;
  std::vector<Tensor> params{w};
  std::vector<SgdSlot> slots;
  sgd_step(params, slots, 0.1, 0.9, 0.0);
  CHECK(w.values()[0] == doctest::Approx(1.0 - 0.1 * 0.5));
  // second step with zero grad still moves along the velocity
  sgd_step(params, slots, 0.1, 0.9, 0.0);
  CHECK(w.values()[0] == doctest::Approx(0.95 - 0.1 * 0.45));
}

TEST_CASE("identical forward passes are bit-identical") {
  std::mt19937_64 rng(20);
  const auto xs = testutil::random_vector(rng, 12, -1, 1);
  const auto ws = testutil::random_vector(rng, 8, -1, 1);
  auto run = [&]() {
    Tape t;
    Tensor x({3, 4}, xs);
    Tensor w({2, 4}, ws);
    Tensor y = linear(t, x, w);
    Tensor loss = softmax_cross_entropy(t, y, {0, 1, 0});
    return loss.item();
  };
  const double a = run();
  const double b = run();
  CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("shape errors name both operands") {
  Tape tape;
  Tensor a({2, 3});
  Tensor b({2, 2});
  try {
    matmul(tape, a, b);
    CHECK(false);
  } catch (const dimension_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }

  Tensor x({1, 3, 4, 4});
  Tensor w({2, 2, 3, 3});
  try {
    conv2d(tape, x, w, 1, 0);
    CHECK(false);
  } catch (const dimension_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[1x3x4x4]") != std::string::npos);
    CHECK(msg.find("[2x2x3x3]") != std::string::npos);
  }
}
