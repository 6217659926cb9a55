#pragma once

#include <cstdint>
#include <vector>

namespace ddq {

/// Trainable level state for one quantization site (or one output channel).
/// q_tilde lives in step units on [0, 2^b - 1]; the value-space levels are
/// q = R(q_tilde) * (x_max - x_min)/(2^b - 1) + x_min, where R clamps to the
/// step range and rounds onto the uniform grid of 2^storage_bits codes that
/// spans it. Levels therefore always serialize exactly as storage codes.
struct LevelSpec {
  std::vector<double> q_tilde;
  int max_bits = 4;      // b, level count is 2^b
  int storage_bits = 8;  // b_q
  double x_min = 0.0;
  double x_max = 1.0;

  std::size_t level_count() const { return q_tilde.size(); }
  /// (x_max - x_min) / (2^b - 1), the q_tilde -> value chain-rule factor.
  double step_scale() const;
};

/// Uniform init: q_tilde_k = k, i.e. levels evenly spaced across the range.
LevelSpec make_level_spec(int max_bits, int storage_bits, double x_min, double x_max);

/// Symmetric uniform levels [-1, ..., -1/(2^{b-1}-1), -0, +0, ..., 1] * clip + shift.
/// 2^b entries; zero appears twice so the count is a power of two.
std::vector<double> uniform_levels(int bits, double clip, double shift);

/// Powers-of-two levels [-2^-1, ..., -2^{-2^{b-1}+1}, -0, +0, ..., 2^-1] * clip + shift.
std::vector<double> pot_levels(int bits, double clip, double shift);

/// Decode of one storage code onto [x_min, x_max]. Every level construction
/// and the packed-model importer share this arithmetic so decoded values are
/// bit-identical everywhere.
double decode_level_code(std::uint32_t code, int storage_bits, double x_min, double x_max);
std::uint32_t encode_level_value(double v, int storage_bits, double x_min, double x_max);

/// Storage codes R(q_tilde) of each level.
std::vector<std::uint32_t> level_codes(const LevelSpec& spec);

/// Value-space levels q implied by the reparameterization above.
std::vector<double> reparam_levels(const LevelSpec& spec);

/// grad(q_k) = (1/z_u) * sum of upstream over elements assigned to index k.
/// Gradient mass is conserved: sum_k z_u * grad(q_k) == sum_i upstream_i.
std::vector<double> level_gradients(const std::vector<double>& upstream,
                                    const std::vector<std::int32_t>& assignment, double z_u,
                                    std::size_t level_count);

/// Sorts q_tilde ascending; the value-space levels follow because the
/// reparameterization is monotone.
void canonicalize(LevelSpec& spec);

/// Straight-through window of R: 1 inside the clamp window [0, 2^b - 1].
double reparam_ste_window(const LevelSpec& spec, std::size_t k);

}  // namespace ddq
