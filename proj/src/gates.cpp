#include "ddq/gates.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ddq/errors.hpp"

namespace ddq {

namespace {

constexpr double kLn2 = 0.69314718055994530942;

void check_bits(int bits, const char* where) {
  if (bits < 1 || bits > 16)
    throw invalid_bitwidth_error(std::string(where) + ": bitwidth " + std::to_string(bits) +
                                 " outside [1, 16]");
}

}  // namespace

std::vector<int> GateSet::binary() const {
  std::vector<int> g(g_hat.size());
  for (std::size_t i = 0; i < g_hat.size(); ++i) g[i] = heaviside(g_hat[i]);
  return g;
}

int GateSet::effective_bits() const {
  int s = 0;
  for (double v : g_hat) s += heaviside(v);
  return s;
}

double GateSet::normalizer() const {
  return static_cast<double>(std::size_t{1} << (bits() - effective_bits()));
}

GateSet make_gate_set(int bits, double init) {
  check_bits(bits, "make_gate_set");
  GateSet g;
  g.g_hat.assign(static_cast<std::size_t>(bits), init);
  return g;
}

BlockStructure block_structure(int max_bits, int effective_bits) {
  check_bits(max_bits, "block_structure");
  if (effective_bits < 0 || effective_bits > max_bits)
    throw invalid_bitwidth_error("block_structure: effective bits " +
                                 std::to_string(effective_bits) + " outside [0, " +
                                 std::to_string(max_bits) + "]");
  BlockStructure b;
  b.max_bits = max_bits;
  b.effective_bits = effective_bits;
  b.block_size = std::size_t{1} << (max_bits - effective_bits);
  b.block_count = std::size_t{1} << effective_bits;
  return b;
}

int heaviside(double g_hat) { return g_hat >= 0.0 ? 1 : 0; }

double heaviside_ste_window(double g_hat) { return std::fabs(g_hat) <= 1.0 ? 1.0 : 0.0; }

std::vector<double> compose_u_explicit(const std::vector<int>& gates) {
  const int b = static_cast<int>(gates.size());
  check_bits(b, "compose_u_explicit");
  if (b > 6)
    throw composition_refused_error("compose_u_explicit: refusing b = " + std::to_string(b) +
                                    " (explicit U is a test oracle, limited to b <= 6)");
  std::vector<int> sorted = gates;
  std::sort(sorted.begin(), sorted.end(), std::greater<int>());

  // Start from the 1x1 identity and prepend one factor at a time, so
  // sorted[0] ends up in the most significant Kronecker slot.
  std::vector<double> u{1.0};
  std::size_t n = 1;
  for (int i = b - 1; i >= 0; --i) {
    const double g = static_cast<double>(sorted[i]);
    // factor = g*I + (1-g)*ones => diagonal 1, off-diagonal 1-g
    const double f[4] = {1.0, 1.0 - g, 1.0 - g, 1.0};
    std::vector<double> next(4 * n * n, 0.0);
    const std::size_t m = 2 * n;
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 2; ++c) {
        const double fv = f[r * 2 + c];
        if (fv == 0.0) continue;
        for (std::size_t i2 = 0; i2 < n; ++i2)
          for (std::size_t j2 = 0; j2 < n; ++j2)
            next[(r * n + i2) * m + (c * n + j2)] = fv * u[i2 * n + j2];
      }
    u = std::move(next);
    n = m;
  }
  return u;
}

std::vector<double> effective_levels(const std::vector<double>& q, const GateSet& gates) {
  const int b = gates.bits();
  check_bits(b, "effective_levels");
  const std::size_t n = std::size_t{1} << b;
  if (q.size() != n)
    throw dimension_error("effective_levels: got " + std::to_string(q.size()) +
                          " levels for " + std::to_string(b) + " gates (want " +
                          std::to_string(n) + ")");
  const auto blocks = block_structure(b, gates.effective_bits());
  std::vector<double> qhat(n);
  for (std::size_t blk = 0; blk < blocks.block_count; ++blk) {
    double sum = 0.0;
    for (std::size_t j = 0; j < blocks.block_size; ++j) sum += q[blk * blocks.block_size + j];
    const double mean = sum / static_cast<double>(blocks.block_size);
    for (std::size_t j = 0; j < blocks.block_size; ++j)
      qhat[blk * blocks.block_size + j] = mean;
  }
  return qhat;
}

std::vector<int> descending_positions(const GateSet& gates) {
  const auto g = gates.binary();
  std::vector<int> pos(g.size());
  int next = 0;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] == 1) pos[i] = next++;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g[i] == 0) pos[i] = next++;
  return pos;
}

std::vector<double> kron_apply(const std::vector<std::array<double, 4>>& factors,
                               const std::vector<double>& v) {
  const int b = static_cast<int>(factors.size());
  const std::size_t n = std::size_t{1} << b;
  if (v.size() != n) throw dimension_error("kron_apply: vector length does not match factors");
  std::vector<double> cur = v;
  std::vector<double> next(n);
  for (int p = 0; p < b; ++p) {
    const auto& f = factors[static_cast<std::size_t>(p)];
    const std::size_t bit = n >> (p + 1);  // factor p acts on this index bit
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i ^ bit;
      if (i & bit)
        next[i] = f[2] * cur[j] + f[3] * cur[i];
      else
        next[i] = f[0] * cur[i] + f[1] * cur[j];
    }
    cur.swap(next);
  }
  return cur;
}

std::vector<double> relaxed_effective_levels(const std::vector<double>& q,
                                             const std::vector<double>& g_real,
                                             const std::vector<int>& positions) {
  const int b = static_cast<int>(g_real.size());
  check_bits(b, "relaxed_effective_levels");
  if (positions.size() != g_real.size())
    throw dimension_error("relaxed_effective_levels: positions size mismatch");
  std::vector<std::array<double, 4>> factors(static_cast<std::size_t>(b));
  double s = 0.0;
  for (int i = 0; i < b; ++i) {
    const double g = g_real[static_cast<std::size_t>(i)];
    s += g;
    factors[static_cast<std::size_t>(positions[static_cast<std::size_t>(i)])] = {1.0, 1.0 - g,
                                                                                 1.0 - g, 1.0};
  }
  auto out = kron_apply(factors, q);
  const double inv_z = std::exp2(s - static_cast<double>(b));
  for (double& v : out) v *= inv_z;
  return out;
}

std::vector<double> gate_gradients(const std::vector<double>& q,
                                   const std::vector<double>& grad_qhat, const GateSet& gates) {
  const int b = gates.bits();
  check_bits(b, "gate_gradients");
  const std::size_t n = std::size_t{1} << b;
  if (q.size() != n || grad_qhat.size() != n)
    throw dimension_error("gate_gradients: level or upstream length does not match 2^b");

  const auto g = gates.binary();
  const auto pos = descending_positions(gates);
  const double inv_z = 1.0 / gates.normalizer();

  // Factor list of the current binary composition, by sorted position.
  std::vector<std::array<double, 4>> factors(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    const double gi = static_cast<double>(g[static_cast<std::size_t>(i)]);
    factors[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])] = {1.0, 1.0 - gi,
                                                                           1.0 - gi, 1.0};
  }
  const auto uq = kron_apply(factors, q);  // U^T q (factors are symmetric)

  std::vector<double> grad(static_cast<std::size_t>(b), 0.0);
  for (int i = 0; i < b; ++i) {
    const double window = heaviside_ste_window(gates.g_hat[static_cast<std::size_t>(i)]);
    if (window == 0.0) continue;
    // Replace gate i's factor with dM/dg = I - ones(2x2).
    auto dfactors = factors;
    dfactors[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])] = {0.0, -1.0, -1.0, 0.0};
    const auto duq = kron_apply(dfactors, q);
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      acc += grad_qhat[j] * (duq[j] * inv_z + kLn2 * uq[j] * inv_z);
    grad[static_cast<std::size_t>(i)] = acc * window;
  }
  return grad;
}

}  // namespace ddq
