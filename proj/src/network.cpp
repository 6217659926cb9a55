#include "ddq/network.hpp"

#include <cmath>
#include <json.hpp>

#include "ddq/errors.hpp"

namespace ddq {

namespace {

DdqQuantizer layer_weight_quantizer(const NetOptions& opt, std::size_t out_channels) {
  return make_weight_quantizer(opt.max_bits, opt.storage_bits, opt.lambda, opt.granularity,
                               out_channels);
}

Tensor he_init(std::vector<std::size_t> shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

void attach_quantizers(QuantLayer& layer, std::size_t out_channels, const NetOptions& opt) {
  layer.weight_quant = layer_weight_quantizer(opt, out_channels);
  if (opt.act_bits > 0) {
    layer.act_quant = make_activation_quantizer(opt.act_bits, opt.storage_bits);
    layer.quantize_input = true;
  }
  layer.bypass = opt.bypass;
}

}  // namespace

QuantLayer make_conv_layer(std::string name, std::size_t in_ch, std::size_t out_ch,
                           std::size_t kernel, int stride, int padding, int groups, bool relu,
                           const NetOptions& opt, std::mt19937_64& rng) {
  if (groups <= 0 || in_ch % static_cast<std::size_t>(groups) != 0) {
    throw dimension_error("make_conv_layer: groups " + std::to_string(groups) +
                          " do not divide in channels " + std::to_string(in_ch));
  }
  QuantLayer layer;
  layer.kind = LayerKind::conv;
  layer.name = std::move(name);
  const std::size_t fan_in = (in_ch / static_cast<std::size_t>(groups)) * kernel * kernel;
  layer.w = he_init({out_ch, in_ch / static_cast<std::size_t>(groups), kernel, kernel}, fan_in, rng);
  layer.bias = Tensor({out_ch});
  layer.relu = relu;
  layer.stride = stride;
  layer.padding = padding;
  layer.groups = groups;
  attach_quantizers(layer, out_ch, opt);
  return layer;
}

QuantLayer make_dense_layer(std::string name, std::size_t in, std::size_t out, bool relu,
                            const NetOptions& opt, std::mt19937_64& rng) {
  QuantLayer layer;
  layer.kind = LayerKind::dense;
  layer.name = std::move(name);
  layer.w = he_init({out, in}, in, rng);
  layer.bias = Tensor({out});
  layer.relu = relu;
  attach_quantizers(layer, out, opt);
  return layer;
}

QuantNetwork make_desk_net(std::uint64_t seed, const NetOptions& opt) {
  std::mt19937_64 rng(seed);
  QuantNetwork net;
  net.layers.push_back(make_conv_layer("conv1", 1, 8, 3, 2, 1, 1, true, opt, rng));
  net.layers.push_back(make_conv_layer("conv2", 8, 16, 3, 2, 1, 1, true, opt, rng));
  net.layers.push_back(make_conv_layer("conv3", 16, 16, 3, 2, 1, 1, true, opt, rng));
  net.layers.push_back(make_dense_layer("fc", 256, 10, false, opt, rng));
  net.budget.target_bits.assign(net.layers.size(), opt.target_bits);
  net.budget.alpha = opt.alpha;
  return net;
}

QuantNetwork network_from_config(const std::string& json_text, std::uint64_t seed,
                                 const NetOptions& opt) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw input_error(std::string("network_from_config: bad json: ") + e.what());
  }
  if (!doc.is_array() || doc.empty()) {
    throw input_error("network_from_config: expected a non-empty layer array");
  }
  std::mt19937_64 rng(seed);
  QuantNetwork net;
  int index = 0;
  for (const auto& item : doc) {
    const std::string type = item.value("type", "");
    const std::string name = item.value("name", type + std::to_string(++index));
    const bool relu = item.value("relu", true);
    if (type == "conv") {
      net.layers.push_back(make_conv_layer(
          name, item.at("in").get<std::size_t>(), item.at("out").get<std::size_t>(),
          item.value("kernel", std::size_t{3}), item.value("stride", 1), item.value("padding", 0),
          item.value("groups", 1), relu, opt, rng));
    } else if (type == "dense") {
      net.layers.push_back(make_dense_layer(name, item.at("in").get<std::size_t>(),
                                            item.at("out").get<std::size_t>(), relu, opt, rng));
    } else {
      throw input_error("network_from_config: unknown layer type '" + type + "'");
    }
  }
  net.budget.target_bits.assign(net.layers.size(), opt.target_bits);
  net.budget.alpha = opt.alpha;
  return net;
}

Tensor layer_forward(Tape& tape, QuantLayer& layer, const Tensor& x, bool training) {
  Tensor input = x;
  if (layer.kind == LayerKind::dense && input.rank() == 4) {
    input = reshape(tape, input, {input.dim(0), input.size() / input.dim(0)});
  }
  Tensor w_used = layer.w;
  Tensor b_used = layer.bias;
  if (!layer.bypass) {
    if (layer.quantize_input) {
      input = quantize_activation(tape, input, layer.act_quant, training);
    }
    w_used = quantize_weights(tape, layer.w, layer.weight_quant);
    double qerr = 0.0;
    for (std::size_t i = 0; i < layer.w.size(); ++i) {
      const double d = w_used.values()[i] - layer.w.values()[i];
      qerr += d * d;
    }
    layer.last_qerr = qerr;
    b_used = quantize_bias(tape, layer.bias, layer.weight_quant);
  }
  Tensor y = layer.kind == LayerKind::conv
                 ? conv2d(tape, input, w_used, layer.stride, layer.padding, layer.groups)
                 : linear(tape, input, w_used);
  y = bias_add(tape, y, b_used);
  if (layer.relu) y = relu(tape, y);
  return y;
}

Tensor QuantNetwork::forward(Tape& tape, const Tensor& x, bool training) {
  Tensor y = x;
  for (auto& layer : layers) y = layer_forward(tape, layer, y, training);
  return y;
}

std::vector<int> QuantNetwork::bitwidths() const {
  std::vector<int> s;
  s.reserve(layers.size());
  for (const auto& layer : layers) s.push_back(layer.effective_bits());
  return s;
}

std::vector<double> QuantNetwork::layer_qerrs() const {
  std::vector<double> e;
  e.reserve(layers.size());
  for (const auto& layer : layers) e.push_back(layer.last_qerr);
  return e;
}

std::vector<Tensor> QuantNetwork::float_params() {
  std::vector<Tensor> params;
  params.reserve(2 * layers.size());
  for (auto& layer : layers) {
    params.push_back(layer.w);
    params.push_back(layer.bias);
  }
  return params;
}

double memory_footprint(const std::vector<QuantLayer>& layers, const std::vector<int>& s,
                        bool exponential) {
  if (s.size() != layers.size()) {
    throw dimension_error("memory_footprint: " + std::to_string(s.size()) + " bitwidths for " +
                          std::to_string(layers.size()) + " layers");
  }
  double bits = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].bypass) continue;
    if (s[l] < 0 || s[l] > layers[l].max_bits()) {
      throw invalid_bitwidth_error("memory_footprint: s = " + std::to_string(s[l]) +
                                   " outside [0, " + std::to_string(layers[l].max_bits()) + "]");
    }
    const double per_param =
        exponential ? std::exp2(static_cast<double>(s[l])) : static_cast<double>(s[l]);
    bits += static_cast<double>(layers[l].weight_param_count()) * per_param;
  }
  return bits;
}

double zeta_target(const QuantNetwork& net) {
  std::vector<int> t = net.budget.target_bits;
  // clamp targets into each layer's representable range so the comparison
  // footprint is achievable
  for (std::size_t l = 0; l < t.size(); ++l) t[l] = std::min(t[l], net.layers[l].max_bits());
  return memory_footprint(net.layers, t);
}

double zeta_actual(const QuantNetwork& net) {
  return memory_footprint(net.layers, net.bitwidths());
}

double loss_multiplier(double target, double actual, double alpha) {
  if (actual <= target) return 1.0;  // constraint satisfied: alpha treated as 0
  return std::pow(target / actual, alpha);
}

Tensor constrained_loss(Tape& tape, const Tensor& task_loss, QuantNetwork& net,
                        double* multiplier_out) {
  bool any_quantized = false;
  for (const auto& layer : net.layers) any_quantized = any_quantized || !layer.bypass;
  double m = 1.0;
  if (any_quantized) {
    const double actual = zeta_actual(net);
    if (actual == 0.0) {
      throw degenerate_footprint_error("constrained_loss: zero actual footprint");
    }
    m = loss_multiplier(zeta_target(net), actual, net.budget.alpha);
  }
  if (multiplier_out) *multiplier_out = m;
  if (m == 1.0) return task_loss;
  Tensor out = tape.track(Tensor::scalar(task_loss.item() * m));
  tape.record([src = task_loss, out, m]() mutable { src.grad()[0] += m * out.grad()[0]; });
  return out;
}

void add_penalty_gate_gradients(QuantNetwork& net, double task_loss_value, double multiplier) {
  if (multiplier == 1.0) return;  // within budget: alpha is 0, no pressure
  const double actual = zeta_actual(net);
  if (actual == 0.0) throw degenerate_footprint_error("add_penalty_gate_gradients: zero footprint");
  const double common = task_loss_value * -net.budget.alpha * multiplier / actual;
  for (auto& layer : net.layers) {
    if (layer.bypass || !layer.weight_quant.gates.trainable) continue;
    if (layer.effective_bits() <= 2) continue;  // bitwidth floor
    const double base = common * static_cast<double>(layer.weight_param_count());
    auto& gates = layer.weight_quant.gates;
    if (layer.weight_quant.grad_g_hat.size() != static_cast<std::size_t>(gates.bits())) {
      layer.weight_quant.grad_g_hat.assign(gates.bits(), 0.0);
    }
    for (int i = 0; i < gates.bits(); ++i) {
      layer.weight_quant.grad_g_hat[static_cast<std::size_t>(i)] +=
          base * heaviside_ste_window(gates.g_hat[static_cast<std::size_t>(i)]);
    }
  }
}

}  // namespace ddq
