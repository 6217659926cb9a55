#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ddq/ops.hpp"
#include "ddq/quantizer.hpp"
#include "ddq/tensor.hpp"

namespace ddq {

enum class LayerKind { conv, dense };

/// One quantized layer: float master weights plus the weight-site and
/// input-activation quantizers. The activation quantizer acts on the layer
/// input, so a stack of layers quantizes every inter-layer tensor once.
struct QuantLayer {
  LayerKind kind = LayerKind::conv;
  std::string name;
  Tensor w;     // conv [Cout x Cin/groups x K x K], dense [out x in]
  Tensor bias;  // [Cout]
  DdqQuantizer weight_quant;
  DdqQuantizer act_quant;
  bool quantize_input = false;
  bool relu = true;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  bool bypass = false;  // run in float, skip every quantizer

  // forward-pass scratch: ||W_q - W||^2 of the latest quantized forward
  double last_qerr = 0.0;

  std::size_t weight_param_count() const { return w.size(); }
  int effective_bits() const { return weight_quant.gates.effective_bits(); }
  int max_bits() const { return weight_quant.max_bits(); }
};

struct MemoryBudget {
  std::vector<int> target_bits;  // one per layer
  double alpha = -0.02;
};

/// Knobs shared by every layer when building a network.
struct NetOptions {
  int max_bits = 4;
  int storage_bits = 8;
  double lambda = 0.1;
  Granularity granularity = Granularity::per_layer;
  int act_bits = 0;  // 0 disables input-activation quantization
  bool bypass = false;
  int target_bits = 4;
  double alpha = -0.02;
};

struct QuantNetwork {
  std::vector<QuantLayer> layers;
  MemoryBudget budget;

  Tensor forward(Tape& tape, const Tensor& x, bool training);
  std::vector<int> bitwidths() const;
  std::vector<double> layer_qerrs() const;
  std::vector<Tensor> float_params();  // weights and biases, for the optimizer
};

QuantLayer make_conv_layer(std::string name, std::size_t in_ch, std::size_t out_ch,
                           std::size_t kernel, int stride, int padding, int groups, bool relu,
                           const NetOptions& opt, std::mt19937_64& rng);
QuantLayer make_dense_layer(std::string name, std::size_t in, std::size_t out, bool relu,
                            const NetOptions& opt, std::mt19937_64& rng);

/// The desk-scale reference net: three stride-2 3x3 convs (1->8->16->16 over
/// 28x28 input) and a 256->10 classifier head.
QuantNetwork make_desk_net(std::uint64_t seed, const NetOptions& opt);

/// Declarative architecture: a JSON list of layers, e.g.
///   [{"type":"conv","in":1,"out":8,"kernel":3,"stride":2,"padding":1},
///    {"type":"dense","in":256,"out":10,"relu":false}]
QuantNetwork network_from_config(const std::string& json_text, std::uint64_t seed,
                                 const NetOptions& opt);

/// One quantized layer: F(Q(W) * Q(y_in) + Q(m)), F = ReLU or identity.
Tensor layer_forward(Tape& tape, QuantLayer& layer, const Tensor& x, bool training);

/// Total bits to store the weights at the given per-layer bitwidths.
/// By default a parameter at s bits costs s bits; the exponential variant
/// (2^s per parameter) exists for reporting only. Bypassed layers are
/// outside the quantization budget and contribute nothing.
double memory_footprint(const std::vector<QuantLayer>& layers, const std::vector<int>& s,
                        bool exponential = false);

double zeta_target(const QuantNetwork& net);
double zeta_actual(const QuantNetwork& net);

/// (zeta_target/zeta_actual)^alpha with alpha forced to 0 (multiplier
/// exactly 1) while within budget.
double loss_multiplier(double target, double actual, double alpha);

/// Scales the task loss by the footprint multiplier on the tape. The
/// multiplier's own dependence on the gates is routed separately through
/// add_penalty_gate_gradients, because it reaches them via the bitwidth sum,
/// not via the tensor graph.
Tensor constrained_loss(Tape& tape, const Tensor& task_loss, QuantNetwork& net,
                        double* multiplier_out = nullptr);

/// d(loss*multiplier)/d g_hat from the footprint term: positive (pressure
/// toward fewer bits) on every in-window gate while over budget, zero within
/// budget, masked at the 2-bit floor.
void add_penalty_gate_gradients(QuantNetwork& net, double task_loss_value, double multiplier);

}  // namespace ddq
