#include "ddq/levels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ddq/errors.hpp"

namespace ddq {

namespace {

void check_bits(int bits, int minimum, const char* where) {
  if (bits < minimum || bits > 16)
    throw invalid_bitwidth_error(std::string(where) + ": bitwidth " + std::to_string(bits) +
                                 " outside [" + std::to_string(minimum) + ", 16]");
}

void check_range(double x_min, double x_max, const char* where) {
  if (!(x_max > x_min))
    throw degenerate_range_error(std::string(where) + ": range [" + std::to_string(x_min) +
                                 ", " + std::to_string(x_max) + "] is degenerate");
}

}  // namespace

double LevelSpec::step_scale() const {
  return (x_max - x_min) / static_cast<double>((1u << max_bits) - 1);
}

LevelSpec make_level_spec(int max_bits, int storage_bits, double x_min, double x_max) {
  check_bits(max_bits, 1, "make_level_spec");
  check_bits(storage_bits, 1, "make_level_spec(storage)");
  check_range(x_min, x_max, "make_level_spec");
  LevelSpec spec;
  spec.max_bits = max_bits;
  spec.storage_bits = storage_bits;
  spec.x_min = x_min;
  spec.x_max = x_max;
  spec.q_tilde.resize(std::size_t{1} << max_bits);
  for (std::size_t k = 0; k < spec.q_tilde.size(); ++k)
    spec.q_tilde[k] = static_cast<double>(k);
  return spec;
}

std::vector<double> uniform_levels(int bits, double clip, double shift) {
  check_bits(bits, 1, "uniform_levels");
  const std::size_t n = std::size_t{1} << bits;
  const std::size_t half = n / 2 - 1;  // entries on each side of the double zero
  std::vector<double> q(n);
  const double denom = static_cast<double>(half);
  for (std::size_t j = 0; j < half; ++j) {
    const double mag = static_cast<double>(half - j) / denom;
    q[j] = -mag * clip + shift;
    q[n - 1 - j] = mag * clip + shift;
  }
  q[half] = shift;
  q[half + 1] = shift;
  return q;
}

std::vector<double> pot_levels(int bits, double clip, double shift) {
  check_bits(bits, 2, "pot_levels");
  const std::size_t n = std::size_t{1} << bits;
  const std::size_t half = n / 2 - 1;
  std::vector<double> q(n);
  for (std::size_t j = 0; j < half; ++j) {
    // ascending on the negative side: -2^-1, -2^-2, ..., -2^{-half}
    const double mag = std::ldexp(1.0, -static_cast<int>(j + 1));
    q[j] = -mag * clip + shift;
    q[n - 1 - j] = mag * clip + shift;
  }
  q[half] = shift;
  q[half + 1] = shift;
  return q;
}

double decode_level_code(std::uint32_t code, int storage_bits, double x_min, double x_max) {
  const double denom = static_cast<double>((1u << storage_bits) - 1);
  return x_min + (static_cast<double>(code) * (x_max - x_min)) / denom;
}

std::uint32_t encode_level_value(double v, int storage_bits, double x_min, double x_max) {
  const double denom = static_cast<double>((1u << storage_bits) - 1);
  long long c = std::llround((v - x_min) * denom / (x_max - x_min));
  if (c < 0) c = 0;
  const long long top = (1ll << storage_bits) - 1;
  if (c > top) c = top;
  return static_cast<std::uint32_t>(c);
}

std::vector<std::uint32_t> level_codes(const LevelSpec& spec) {
  check_bits(spec.max_bits, 1, "level_codes");
  check_bits(spec.storage_bits, 1, "level_codes(storage)");
  check_range(spec.x_min, spec.x_max, "level_codes");
  const double steps = static_cast<double>((1u << spec.max_bits) - 1);
  const double codes_per_step = static_cast<double>((1u << spec.storage_bits) - 1) / steps;
  std::vector<std::uint32_t> codes(spec.q_tilde.size());
  for (std::size_t k = 0; k < codes.size(); ++k) {
    double t = spec.q_tilde[k];
    if (t < 0.0) t = 0.0;
    if (t > steps) t = steps;
    codes[k] = static_cast<std::uint32_t>(std::llround(t * codes_per_step));
  }
  return codes;
}

std::vector<double> reparam_levels(const LevelSpec& spec) {
  const auto codes = level_codes(spec);
  std::vector<double> q(codes.size());
  for (std::size_t k = 0; k < codes.size(); ++k)
    q[k] = decode_level_code(codes[k], spec.storage_bits, spec.x_min, spec.x_max);
  return q;
}

std::vector<double> level_gradients(const std::vector<double>& upstream,
                                    const std::vector<std::int32_t>& assignment, double z_u,
                                    std::size_t level_count) {
  if (upstream.size() != assignment.size())
    throw dimension_error("level_gradients: upstream and assignment sizes disagree");
  std::vector<double> grad(level_count, 0.0);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const std::int32_t k = assignment[i];
    if (k < 0 || static_cast<std::size_t>(k) >= level_count)
      throw dimension_error("level_gradients: assignment index " + std::to_string(k) +
                            " out of range for " + std::to_string(level_count) + " levels");
    grad[static_cast<std::size_t>(k)] += upstream[i];
  }
  const double inv = 1.0 / z_u;
  for (double& g : grad) g *= inv;
  return grad;
}

void canonicalize(LevelSpec& spec) {
  std::sort(spec.q_tilde.begin(), spec.q_tilde.end());
}

double reparam_ste_window(const LevelSpec& spec, std::size_t k) {
  const double t = spec.q_tilde.at(k);
  const double top = static_cast<double>((1u << spec.max_bits) - 1);
  return (t >= 0.0 && t <= top) ? 1.0 : 0.0;
}

}  // namespace ddq
