#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>
#include <set>

#include "ddq/errors.hpp"
#include "ddq/gates.hpp"
#include "support/testutil.hpp"

using namespace ddq;

namespace {

GateSet gates_from_binary(const std::vector<int>& g) {
  GateSet gs;
  for (int v : g) gs.g_hat.push_back(v ? 0.5 : -0.5);
  return gs;
}

// Oracle route for q_hat: materialize U and compute (1/z) U^T q.
std::vector<double> qhat_via_explicit_u(const std::vector<double>& q, const GateSet& gs) {
  const auto u = compose_u_explicit(gs.binary());
  const std::size_t n = q.size();
  const double inv_z = 1.0 / gs.normalizer();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += u[i * n + j] * q[i];
  for (double& v : out) v *= inv_z;
  return out;
}

}  // namespace

TEST_CASE("heaviside binarization and its straight-through window") {
  CHECK(heaviside(-0.3) == 0);
  CHECK(heaviside(1e-8) == 1);
  CHECK(heaviside(0.0) == 1);  // tie resolves to 1
  CHECK(heaviside_ste_window(1.5) == 0.0);
  CHECK(heaviside_ste_window(-1.0) == 1.0);
  CHECK(heaviside_ste_window(0.9) == 1.0);
}

TEST_CASE("gate set summary values") {
  GateSet gs = make_gate_set(4);
  CHECK(gs.bits() == 4);
  CHECK(gs.effective_bits() == 4);  // init 1e-8 leaves every gate on
  CHECK(gs.normalizer() == 1.0);

  gs.g_hat = {0.5, -0.5, 0.5, -0.5};
  CHECK(gs.effective_bits() == 2);
  CHECK(gs.normalizer() == 4.0);
  CHECK(gs.binary() == std::vector<int>{1, 0, 1, 0});

  const auto bs = block_structure(4, 2);
  CHECK(bs.block_size == 4);
  CHECK(bs.block_count == 4);
}

TEST_CASE("explicit composition reproduces the worked 3-bit patterns") {
  // one gate on: U = I (x) ones(2) (x) ones(2) = Diag(ones(4), ones(4))
  const auto u1 = compose_u_explicit({1, 0, 0});
  REQUIRE(u1.size() == 64);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(u1[i * 8 + j] == ((i / 4 == j / 4) ? 1.0 : 0.0));

  // sorting makes the composition order-free
  CHECK(compose_u_explicit({0, 0, 1}) == u1);
  CHECK(compose_u_explicit({0, 1, 0}) == u1);

  // two gates on: four 2x2 all-ones blocks on the diagonal
  const auto u2 = compose_u_explicit({1, 1, 0});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(u2[i * 8 + j] == ((i / 2 == j / 2) ? 1.0 : 0.0));

  // all gates on: identity
  const auto u3 = compose_u_explicit({1, 1, 1});
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(u3[i * 8 + j] == ((i == j) ? 1.0 : 0.0));

  CHECK_THROWS_AS(compose_u_explicit(std::vector<int>(7, 1)), composition_refused_error);
}

TEST_CASE("effective levels are block means") {
  const std::vector<double> q{0, 1, 2, 3, 4, 5, 6, 7};
  const auto qh = effective_levels(q, gates_from_binary({1, 1, 0}));
  CHECK(qh == std::vector<double>{0.5, 0.5, 2.5, 2.5, 4.5, 4.5, 6.5, 6.5});

  // all gates on: identity
  CHECK(effective_levels(q, gates_from_binary({1, 1, 1})) == q);

  // all gates off: the global mean everywhere
  const auto off = effective_levels(q, gates_from_binary({0, 0, 0}));
  for (double v : off) CHECK(v == 3.5);

  CHECK_THROWS_AS(effective_levels({0, 1, 2}, gates_from_binary({1, 1})), dimension_error);
}

TEST_CASE("block averaging equals the explicit Kronecker route for every pattern") {
  std::mt19937_64 rng(31);
  for (int b = 1; b <= 5; ++b) {
    const std::size_t n = std::size_t{1} << b;
    for (std::size_t pattern = 0; pattern < (std::size_t{1} << b); ++pattern) {
      std::vector<int> bits(b);
      for (int i = 0; i < b; ++i) bits[i] = (pattern >> i) & 1;
      auto q = testutil::random_vector(rng, n, -1.0, 1.0);
      std::sort(q.begin(), q.end());
      const GateSet gs = gates_from_binary(bits);
      const auto fast = effective_levels(q, gs);
      const auto oracle = qhat_via_explicit_u(q, gs);
      REQUIRE(fast.size() == oracle.size());
      for (std::size_t i = 0; i < n; ++i) CHECK(fast[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("effective levels have at most 2^s distinct values and depend only on s") {
  std::mt19937_64 rng(32);
  auto q = testutil::random_vector(rng, 8, -1.0, 1.0);
  std::sort(q.begin(), q.end());
  const auto a = effective_levels(q, gates_from_binary({1, 0, 0}));
  const auto b = effective_levels(q, gates_from_binary({0, 1, 0}));
  const auto c = effective_levels(q, gates_from_binary({0, 0, 1}));
  CHECK(a == b);
  CHECK(b == c);
  std::set<double> distinct(a.begin(), a.end());
  CHECK(distinct.size() <= 2);
}

TEST_CASE("gate gradients: window and zero-upstream behaviour") {
  std::mt19937_64 rng(33);
  auto q = testutil::random_vector(rng, 8, -1.0, 1.0);
  std::sort(q.begin(), q.end());
  GateSet gs;
  gs.g_hat = {0.5, 1.5, -0.5};  // middle gate outside the STE window

  const std::vector<double> zeros(8, 0.0);
  CHECK(gate_gradients(q, zeros, gs) == std::vector<double>{0.0, 0.0, 0.0});

  const auto up = testutil::random_vector(rng, 8, -1.0, 1.0);
  const auto grad = gate_gradients(q, up, gs);
  CHECK(grad[1] == 0.0);
  CHECK(grad[0] != 0.0);
  CHECK(grad[2] != 0.0);
}

TEST_CASE("gate gradients match finite differences of the relaxed composition") {
  std::mt19937_64 rng(34);
  for (int b = 2; b <= 4; ++b) {
    const std::size_t n = std::size_t{1} << b;
    for (int trial = 0; trial < 8; ++trial) {
      auto q = testutil::random_vector(rng, n, -1.0, 1.0);
      std::sort(q.begin(), q.end());
      const auto upstream = testutil::random_vector(rng, n, -1.0, 1.0);

      GateSet gs;
      std::uniform_real_distribution<double> mag(0.1, 0.9);
      std::bernoulli_distribution sign(0.5);
      for (int i = 0; i < b; ++i) gs.g_hat.push_back(sign(rng) ? mag(rng) : -mag(rng));

      const auto analytic = gate_gradients(q, upstream, gs);
      const auto positions = descending_positions(gs);
      std::vector<double> g_real;
      for (int v : gs.binary()) g_real.push_back(static_cast<double>(v));

      auto f = [&](const std::vector<double>& g) {
        const auto qh = relaxed_effective_levels(q, g, positions);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += upstream[i] * qh[i];
        return acc;
      };
      const double eps = 1e-5;
      for (int i = 0; i < b; ++i) {
        auto gp = g_real, gm = g_real;
        gp[static_cast<std::size_t>(i)] += eps;
        gm[static_cast<std::size_t>(i)] -= eps;
        const double fd = (f(gp) - f(gm)) / (2.0 * eps);
        CHECK(testutil::rel_err(analytic[static_cast<std::size_t>(i)], fd) < 1e-4);
      }
    }
  }
}
