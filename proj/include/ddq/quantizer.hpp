#pragma once

#include <cstdint>
#include <vector>

#include "ddq/gates.hpp"
#include "ddq/levels.hpp"
#include "ddq/tensor.hpp"

namespace ddq {

enum class Granularity { per_layer, per_channel };
enum class SiteKind { weight, activation };

/// Effective level table of one forward pass: canonical value-space levels,
/// block-averaged by the gate pattern, then snapped back onto the b_q
/// storage grid. The snap makes simulated training and the packed model
/// compute with identical doubles, at the price the storage format already
/// imposes on deployment.
struct LevelTable {
  std::vector<double> qhat;          // 2^b entries, non-decreasing
  std::vector<std::uint32_t> codes;  // storage code of each entry
  double x_min = 0.0;
  double x_max = 1.0;
  int storage_bits = 8;
  std::size_t block_size = 1;  // z_u

  double qhat_min() const { return qhat.front(); }
  double qhat_max() const { return qhat.back(); }
};

/// One quantization site: the trainable level/gate state, the straight-through
/// correction strength, and the caches of the last forward pass.
struct DdqQuantizer {
  std::vector<LevelSpec> specs;  // size 1, or one per output channel
  GateSet gates;
  double lambda = 0.1;
  Granularity granularity = Granularity::per_layer;
  SiteKind site_kind = SiteKind::weight;
  bool train_levels = true;
  bool apply_correction = true;

  // activation range tracking (exponential moving average of batch extremes)
  double ema_decay = 0.99;
  bool range_initialized = false;
  double ema_min = 0.0;
  double ema_max = 0.0;

  // caches of the latest forward
  std::vector<LevelTable> cached_tables;
  std::vector<LevelTable> cached_bias_tables;
  std::vector<std::int32_t> cached_assignment;

  // parameter gradient accumulators, applied by the optimizer
  std::vector<std::vector<double>> grad_q_tilde;
  std::vector<double> grad_g_hat;

  int max_bits() const { return specs.front().max_bits; }
  void zero_param_grads();
  void accumulate_level_grad(std::size_t channel, const std::vector<double>& g);
  void accumulate_gate_grad(const std::vector<double>& g);
};

DdqQuantizer make_weight_quantizer(int max_bits, int storage_bits, double lambda,
                                   Granularity granularity, std::size_t channels);
/// Fixed-bitwidth activation quantizer: gates all on and frozen, range by EMA.
DdqQuantizer make_activation_quantizer(int bits, int storage_bits);

/// Derives levels from a canonical spec (q_tilde sorted ascending),
/// block-averages, snaps to storage. Callers canonicalize first; an unsorted
/// spec yields an unsorted table that assign_index cannot search.
LevelTable build_table(const LevelSpec& spec, const GateSet& gates);

/// Index of the nearest level (value ties resolve to the smallest index).
std::int32_t assign_index(const LevelTable& table, double x);

/// Vectorized nearest-level pass; xq and idx must hold n elements.
void quantize_span(const LevelTable& table, const double* x, std::size_t n, double* xq,
                   std::int32_t* idx);

/// Recomputes ranges from the tensor (weight sites), canonicalizes every
/// spec and rebuilds the cached tables. Shared by training, evaluation and
/// export so all of them see identical tables.
const std::vector<LevelTable>& refresh_weight_tables(DdqQuantizer& q, const Tensor& w);

/// Bias tables: the layer's theta over the bias's own per-channel range.
/// Shared by the training forward and the exporter so both quantize the bias
/// with identical doubles.
struct BiasQuant {
  std::vector<LevelTable> tables;
  std::vector<LevelSpec> specs;
};
BiasQuant build_bias_tables(const DdqQuantizer& q, const Tensor& bias);

/// Upper bound of a widened constant span: lo + 1e-6 while that is
/// representable, growing relatively once 1e-6 would round away against
/// |lo|. Every range derivation (weights, bias, activations, export) uses
/// this one policy so constant spans stay fixed points of quantization.
double widened_span_upper(double lo);

struct QuantizeBackward {
  std::vector<double> grad_x;
  std::vector<double> grad_q_tilde;
  std::vector<double> grad_g_hat;
};

/// One-span backward: corrected = upstream + lambda*(x_q - x) feeds the level
/// and gate paths; grad_x is the uncorrected straight-through gradient, zero
/// outside [qhat_min, qhat_max].
QuantizeBackward quantize_backward(const std::vector<double>& upstream,
                                   const std::vector<double>& x, const std::vector<double>& xq,
                                   const std::vector<std::int32_t>& assignment,
                                   const LevelTable& table, const LevelSpec& spec,
                                   const GateSet& gates, double lambda, bool apply_correction);

/// Tape ops. quantize_weights refreshes ranges/tables from w; quantize_bias
/// shares the layer's theta (levels, gates) but spans the bias's own range,
/// since the dynamic range always follows the quantity being quantized.
Tensor quantize_weights(Tape& tape, const Tensor& w, DdqQuantizer& q);
Tensor quantize_bias(Tape& tape, const Tensor& bias, DdqQuantizer& q);
Tensor quantize_activation(Tape& tape, const Tensor& y, DdqQuantizer& q, bool training);

}  // namespace ddq
