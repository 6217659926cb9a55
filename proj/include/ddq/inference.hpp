#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddq/network.hpp"
#include "ddq/tensor.hpp"

namespace ddq {

/// One deployed layer: per-weight level indices of s bits, the 2^s distinct
/// effective levels as storage codes with their range, and the frozen
/// activation quantizer. The averaging structure of training is folded away;
/// only the distinct levels ship.
struct PackedLayer {
  LayerKind kind = LayerKind::conv;
  std::string name;
  bool relu = true;
  bool quantize_input = false;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  std::vector<std::size_t> w_shape;

  int s = 0;   // effective bitwidth, 2^s table entries per channel
  int bq = 8;  // storage code width of a table entry

  struct ChannelTable {
    double x_min = 0.0;
    double x_max = 1.0;
    std::vector<std::uint32_t> codes;  // 2^s entries
  };
  std::vector<ChannelTable> tables;  // 1 (per-layer) or Cout (per-channel)

  std::vector<std::uint32_t> indices;  // one per weight, < 2^s

  bool bias_present = false;
  std::vector<double> bias;  // already-quantized values

  bool act_present = false;
  int act_bits = 0;
  int act_bq = 8;
  double act_min = 0.0;
  double act_max = 1.0;
  std::vector<std::uint32_t> act_codes;  // 2^act_bits entries

  std::size_t weight_count() const;
  std::size_t rows() const;     // packing rows: output channels
  std::size_t row_len() const;  // weights per row
};

struct PackedModel {
  std::vector<PackedLayer> layers;
};

/// s-bit MSB-first packing, each row of row_len indices padded to a byte
/// boundary. count must be a multiple of row_len.
std::vector<std::uint8_t> pack_indices(const std::vector<std::uint32_t>& indices, int s,
                                       std::size_t row_len);
std::vector<std::uint32_t> unpack_indices(const std::vector<std::uint8_t>& bytes, int s,
                                          std::size_t row_len, std::size_t count);

/// DDQM little-endian container. export_model refreshes the weight tables
/// from the float weights, so it packs exactly what the training simulation
/// computes with. Bypassed layers and uninitialized activation ranges
/// cannot be packed -> export_error.
std::vector<std::uint8_t> export_model(QuantNetwork& net);
void export_model_file(QuantNetwork& net, const std::string& path);

PackedModel import_model(const std::vector<std::uint8_t>& bytes);
PackedModel load_model(const std::string& path);
std::vector<std::uint8_t> model_bytes(const PackedModel& model);

enum class AccumMode { float_decode, integer };

/// Pre-activation layer product from packed operands. float_decode decodes
/// each weight level from the table at multiply time, in the exact
/// accumulation order of the training ops, so it is bit-identical to the
/// simulated forward. integer accumulates activation codes times weight
/// codes in int64 and rescales once per output; it requires uniform level
/// spacing in code space and the activation table. Any index at or past the
/// table end -> corrupt_model_error.
Tensor lookup_forward(const PackedLayer& layer, const Tensor& x_q,
                      AccumMode mode = AccumMode::float_decode);

/// Quantizes each layer input with the packed activation table, then
/// lookup_forward + bias + ReLU through the whole model.
Tensor packed_forward(const PackedModel& model, const Tensor& x);

/// Header and per-layer summary as a JSON object.
std::string describe(const PackedModel& model);

/// Linear bit accounting of the packed model: sum over layers of
/// weight_count * s bits.
double packed_footprint_bits(const PackedModel& model);

}  // namespace ddq
