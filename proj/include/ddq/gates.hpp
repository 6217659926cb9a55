#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace ddq {

/// Binary precision gates for one quantization site. Each gate is the
/// Heaviside of a real score g_hat; s = sum of gates is the effective
/// bitwidth and z_u = 2^{b-s} the block size of the averaging map.
struct GateSet {
  std::vector<double> g_hat;
  bool trainable = true;

  int bits() const { return static_cast<int>(g_hat.size()); }
  std::vector<int> binary() const;
  int effective_bits() const;
  double normalizer() const;  // z_u
};

GateSet make_gate_set(int bits, double init = 1e-8);

struct BlockStructure {
  int max_bits = 0;
  int effective_bits = 0;
  std::size_t block_size = 1;   // z_u
  std::size_t block_count = 1;  // 2^s
};

BlockStructure block_structure(int max_bits, int effective_bits);

/// Heaviside with the tie at zero resolved to 1.
int heaviside(double g_hat);
/// Straight-through window 1_{|g_hat| <= 1}.
double heaviside_ste_window(double g_hat);

/// Explicit U = U_1 (x) ... (x) U_b with U_i = g_i*I + (1-g_i)*ones(2x2),
/// gates sorted descending first. Row-major (2^b)^2 matrix. Refused for
/// b > 6; it exists as a test oracle, the production path never builds U.
std::vector<double> compose_u_explicit(const std::vector<int>& gates);

/// q_hat = (1/z_u) U^T q computed by block averaging. q must be canonical
/// (sorted ascending), which makes q_hat non-decreasing.
std::vector<double> effective_levels(const std::vector<double>& q, const GateSet& gates);

/// Stable position of each gate under descending binarized order (ones keep
/// their relative order, then zeros). position[i] is gate i's factor slot.
std::vector<int> descending_positions(const GateSet& gates);

/// Applies (F_1 (x) ... (x) F_b) to v, factor 1 acting on the most
/// significant index bit. O(b 2^b); all factors used here are symmetric so
/// this is also the transpose product.
std::vector<double> kron_apply(const std::vector<std::array<double, 4>>& factors,
                               const std::vector<double>& v);

/// Block-average map with real-valued gates held at fixed sorted positions:
/// q_hat(g) = (M_1 (x) ... (x) M_b)^T q / 2^{b - sum g}, with
/// M_p = g_i*I + (1-g_i)*ones for the gate i at position p. This is the
/// relaxation whose exact derivative backs gate_gradients; tests
/// finite-difference it directly.
std::vector<double> relaxed_effective_levels(const std::vector<double>& q,
                                             const std::vector<double>& g_real,
                                             const std::vector<int>& positions);

/// d<grad_qhat, q_hat(g)>/d g_hat_i at the current binary gates, including
/// the smooth normalizer term d(2^{sum g - b})/dg = ln2 * 2^{sum g - b},
/// multiplied by the straight-through window of each gate.
std::vector<double> gate_gradients(const std::vector<double>& q,
                                   const std::vector<double>& grad_qhat, const GateSet& gates);

}  // namespace ddq
