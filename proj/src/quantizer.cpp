#include "ddq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "ddq/errors.hpp"

namespace ddq {

namespace {

void check_finite(const Tensor& t, const char* who) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw nonfinite_input_error(std::string(who) + ": non-finite input");
  }
}

// Weight ranges collapse only for pathological tensors and deserve a loud
// failure; activation batches go constant routinely (all-negative pre-ReLU),
// so their range is widened instead.
void require_spread(double lo, double hi, const char* who) {
  if (!(hi > lo)) {
    throw degenerate_range_error(std::string(who) + ": degenerate range [" + std::to_string(lo) +
                                 ", " + std::to_string(hi) + "]");
  }
}

std::pair<double, double> span_extremes(const double* x, std::size_t n) {
  double lo = x[0], hi = x[0];
  for (std::size_t i = 1; i < n; ++i) {
    lo = std::min(lo, x[i]);
    hi = std::max(hi, x[i]);
  }
  return {lo, hi};
}

}  // namespace

double widened_span_upper(double lo) {
  return lo + std::max(1e-6, std::abs(lo) * 1e-9);
}

void DdqQuantizer::zero_param_grads() {
  grad_q_tilde.assign(specs.size(), {});
  for (std::size_t c = 0; c < specs.size(); ++c) {
    grad_q_tilde[c].assign(specs[c].level_count(), 0.0);
  }
  grad_g_hat.assign(gates.bits(), 0.0);
}

void DdqQuantizer::accumulate_level_grad(std::size_t channel, const std::vector<double>& g) {
  if (grad_q_tilde.size() != specs.size()) zero_param_grads();
  auto& acc = grad_q_tilde[channel];
  for (std::size_t k = 0; k < g.size(); ++k) acc[k] += g[k];
}

void DdqQuantizer::accumulate_gate_grad(const std::vector<double>& g) {
  if (grad_g_hat.size() != static_cast<std::size_t>(gates.bits())) {
    grad_g_hat.assign(gates.bits(), 0.0);
  }
  for (std::size_t i = 0; i < g.size(); ++i) grad_g_hat[i] += g[i];
}

DdqQuantizer make_weight_quantizer(int max_bits, int storage_bits, double lambda,
                                   Granularity granularity, std::size_t channels) {
  if (granularity == Granularity::per_layer) channels = 1;
  if (channels == 0) throw dimension_error("make_weight_quantizer: zero channels");
  DdqQuantizer q;
  q.specs.reserve(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    q.specs.push_back(make_level_spec(max_bits, storage_bits, 0.0, 1.0));
  }
  q.gates = make_gate_set(max_bits);
  q.lambda = lambda;
  q.granularity = granularity;
  q.site_kind = SiteKind::weight;
  q.zero_param_grads();
  return q;
}

DdqQuantizer make_activation_quantizer(int bits, int storage_bits) {
  DdqQuantizer q;
  q.specs.push_back(make_level_spec(bits, storage_bits, 0.0, 1.0));
  q.gates = make_gate_set(bits, 1.0);
  q.gates.trainable = false;
  q.lambda = 0.0;
  q.site_kind = SiteKind::activation;
  q.apply_correction = false;
  q.zero_param_grads();
  return q;
}

LevelTable build_table(const LevelSpec& spec, const GateSet& gates) {
  if (static_cast<std::size_t>(gates.bits()) != static_cast<std::size_t>(spec.max_bits)) {
    throw dimension_error("build_table: gate count " + std::to_string(gates.bits()) +
                          " does not match max_bits " + std::to_string(spec.max_bits));
  }
  require_spread(spec.x_min, spec.x_max, "build_table");
  const std::vector<double> q = reparam_levels(spec);
  const std::vector<double> means = effective_levels(q, gates);
  LevelTable table;
  table.x_min = spec.x_min;
  table.x_max = spec.x_max;
  table.storage_bits = spec.storage_bits;
  table.block_size = std::size_t{1} << (spec.max_bits - gates.effective_bits());
  table.qhat.resize(means.size());
  table.codes.resize(means.size());
  for (std::size_t j = 0; j < means.size(); ++j) {
    table.codes[j] = encode_level_value(means[j], spec.storage_bits, spec.x_min, spec.x_max);
    table.qhat[j] = decode_level_code(table.codes[j], spec.storage_bits, spec.x_min, spec.x_max);
  }
  return table;
}

std::int32_t assign_index(const LevelTable& table, double x) {
  const auto& q = table.qhat;
  auto it = std::lower_bound(q.begin(), q.end(), x);
  std::size_t j;
  if (it == q.begin()) {
    j = 0;
  } else if (it == q.end()) {
    j = q.size() - 1;
  } else {
    const std::size_t hi = static_cast<std::size_t>(it - q.begin());
    // exact midpoints round down to the smaller level
    j = (x - q[hi - 1] <= q[hi] - x) ? hi - 1 : hi;
  }
  // duplicated values (averaged blocks) resolve to their first index
  return static_cast<std::int32_t>(std::lower_bound(q.begin(), q.end(), q[j]) - q.begin());
}

void quantize_span(const LevelTable& table, const double* x, std::size_t n, double* xq,
                   std::int32_t* idx) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t j = assign_index(table, x[i]);
    idx[i] = j;
    xq[i] = table.qhat[static_cast<std::size_t>(j)];
  }
}

const std::vector<LevelTable>& refresh_weight_tables(DdqQuantizer& q, const Tensor& w) {
  const auto& v = w.values();
  const std::size_t channels = q.specs.size();
  if (channels > 1 && (w.shape().empty() || w.shape()[0] != channels)) {
    throw dimension_error("refresh_weight_tables: tensor " + w.shape_str() + " does not split into " +
                          std::to_string(channels) + " channels");
  }
  if (v.size() % channels != 0 || v.empty()) {
    throw dimension_error("refresh_weight_tables: size " + std::to_string(v.size()) +
                          " not divisible into " + std::to_string(channels) + " channels");
  }
  const std::size_t chunk = v.size() / channels;
  q.cached_tables.clear();
  q.cached_tables.reserve(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    auto [lo, hi] = span_extremes(v.data() + c * chunk, chunk);
    // constant spans (single-element tensors, dead channels) widen instead of
    // failing; the lowest level sits exactly on lo, so such spans quantize to
    // themselves
    if (!(hi > lo)) hi = widened_span_upper(lo);
    q.specs[c].x_min = lo;
    q.specs[c].x_max = hi;
    canonicalize(q.specs[c]);
    q.cached_tables.push_back(build_table(q.specs[c], q.gates));
  }
  return q.cached_tables;
}

QuantizeBackward quantize_backward(const std::vector<double>& upstream,
                                   const std::vector<double>& x, const std::vector<double>& xq,
                                   const std::vector<std::int32_t>& assignment,
                                   const LevelTable& table, const LevelSpec& spec,
                                   const GateSet& gates, double lambda, bool apply_correction) {
  if (upstream.size() != x.size() || xq.size() != x.size() || assignment.size() != x.size()) {
    throw dimension_error("quantize_backward: mismatched span sizes");
  }
  const std::size_t n = x.size();
  const std::size_t levels = spec.level_count();
  QuantizeBackward out;
  out.grad_x.assign(n, 0.0);
  out.grad_q_tilde.assign(levels, 0.0);
  out.grad_g_hat.assign(gates.bits(), 0.0);

  std::vector<double> corrected(n);
  const double lo = table.qhat_min(), hi = table.qhat_max();
  for (std::size_t i = 0; i < n; ++i) {
    corrected[i] = upstream[i] + (apply_correction ? lambda * (xq[i] - x[i]) : 0.0);
    if (x[i] >= lo && x[i] <= hi) out.grad_x[i] = upstream[i];
  }

  // per-entry gradient of the averaged table, shared by levels and gates
  std::vector<double> g_qhat(levels, 0.0);
  for (std::size_t i = 0; i < n; ++i) g_qhat[static_cast<std::size_t>(assignment[i])] += corrected[i];

  const double z_u = static_cast<double>(table.block_size);
  const std::vector<double> per_entry = level_gradients(corrected, assignment, z_u, levels);
  // every level in an averaged block moves by the block's pooled gradient
  const double window_scale = spec.step_scale();
  const std::vector<double> q = reparam_levels(spec);
  for (std::size_t start = 0; start < levels; start += table.block_size) {
    double pooled = 0.0;
    for (std::size_t k = start; k < start + table.block_size; ++k) pooled += per_entry[k];
    for (std::size_t k = start; k < start + table.block_size; ++k) {
      out.grad_q_tilde[k] = pooled * window_scale * reparam_ste_window(spec, k);
    }
  }

  if (gates.trainable) out.grad_g_hat = gate_gradients(q, g_qhat, gates);
  return out;
}

namespace {

// Shared forward+closure body for weight-like sites (weights and biases).
// The tables and the specs they were built from are snapshotted into the
// backward closure, so later forwards through the same quantizer cannot
// disturb an in-flight backward. Per-channel tensors split along their
// leading dimension into equal contiguous chunks.
Tensor quantize_with_tables(Tape& tape, const Tensor& x, DdqQuantizer& q,
                            std::vector<LevelTable> tables, std::vector<LevelSpec> specs,
                            bool record_assignment) {
  const auto& v = x.values();
  Tensor y(x.shape());
  if (v.empty()) return tape.track(y);
  const std::size_t channels = tables.size();
  if (channels == 0 || v.size() % channels != 0) {
    throw dimension_error("quantize_with_tables: tensor " + x.shape_str() + " vs " +
                          std::to_string(channels) + " tables");
  }
  const std::size_t chunk = v.size() / channels;
  std::vector<std::int32_t> idx(v.size());
  for (std::size_t c = 0; c < channels; ++c) {
    quantize_span(tables[c], v.data() + c * chunk, chunk, y.values().data() + c * chunk,
                  idx.data() + c * chunk);
  }
  if (record_assignment) q.cached_assignment = idx;
  y = tape.track(y);
  tape.record([x = x, y, idx = std::move(idx), qz = &q, tables = std::move(tables),
               specs = std::move(specs), chunk, channels]() mutable {
    const auto& up = y.grad();
    for (std::size_t c = 0; c < channels; ++c) {
      std::vector<double> u(up.begin() + c * chunk, up.begin() + (c + 1) * chunk);
      std::vector<double> xs(x.values().begin() + c * chunk, x.values().begin() + (c + 1) * chunk);
      std::vector<double> xqs(y.values().begin() + c * chunk, y.values().begin() + (c + 1) * chunk);
      std::vector<std::int32_t> ids(idx.begin() + c * chunk, idx.begin() + (c + 1) * chunk);
      QuantizeBackward back = quantize_backward(u, xs, xqs, ids, tables[c], specs[c], qz->gates,
                                                qz->lambda, qz->apply_correction);
      auto& gx = x.grad();
      for (std::size_t i = 0; i < chunk; ++i) gx[c * chunk + i] += back.grad_x[i];
      if (qz->train_levels) qz->accumulate_level_grad(c, back.grad_q_tilde);
      if (qz->gates.trainable) qz->accumulate_gate_grad(back.grad_g_hat);
    }
  });
  return y;
}

}  // namespace

Tensor quantize_weights(Tape& tape, const Tensor& w, DdqQuantizer& q) {
  check_finite(w, "quantize_weights");
  if (w.values().empty()) return tape.track(Tensor(w.shape()));
  refresh_weight_tables(q, w);
  return quantize_with_tables(tape, w, q, q.cached_tables, q.specs, /*record_assignment=*/true);
}

BiasQuant build_bias_tables(const DdqQuantizer& q, const Tensor& bias) {
  // Shared theta (levels and gates), bias-derived dynamic range: the range
  // always follows the quantity being quantized, and weight spans rarely
  // cover biases.
  const std::size_t channels = q.specs.size();
  if (channels > 1 && bias.values().size() != channels) {
    throw dimension_error("build_bias_tables: bias " + bias.shape_str() + " vs " +
                          std::to_string(channels) + " channel tables");
  }
  if (bias.values().size() % channels != 0) {
    throw dimension_error("build_bias_tables: bias " + bias.shape_str() +
                          " not divisible into " + std::to_string(channels) + " channels");
  }
  const std::size_t chunk = bias.values().size() / channels;
  BiasQuant out;
  out.specs = q.specs;
  out.tables.reserve(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    auto [lo, hi] = span_extremes(bias.values().data() + c * chunk, chunk);
    if (!(hi > lo)) hi = widened_span_upper(lo);
    out.specs[c].x_min = lo;
    out.specs[c].x_max = hi;
    canonicalize(out.specs[c]);
    out.tables.push_back(build_table(out.specs[c], q.gates));
  }
  return out;
}

Tensor quantize_bias(Tape& tape, const Tensor& bias, DdqQuantizer& q) {
  check_finite(bias, "quantize_bias");
  if (bias.values().empty()) return tape.track(Tensor(bias.shape()));
  BiasQuant bq = build_bias_tables(q, bias);
  q.cached_bias_tables = bq.tables;
  return quantize_with_tables(tape, bias, q, std::move(bq.tables), std::move(bq.specs),
                              /*record_assignment=*/false);
}

Tensor quantize_activation(Tape& tape, const Tensor& y, DdqQuantizer& q, bool training) {
  check_finite(y, "quantize_activation");
  if (y.values().empty()) return tape.track(Tensor(y.shape()));
  const auto& v = y.values();
  auto [lo, hi] = span_extremes(v.data(), v.size());
  if (training) {
    if (!q.range_initialized) {
      q.ema_min = lo;
      q.ema_max = hi;
      q.range_initialized = true;
    } else {
      q.ema_min = q.ema_decay * q.ema_min + (1.0 - q.ema_decay) * lo;
      q.ema_max = q.ema_decay * q.ema_max + (1.0 - q.ema_decay) * hi;
    }
  }
  double x_min = q.range_initialized ? q.ema_min : lo;
  double x_max = q.range_initialized ? q.ema_max : hi;
  if (!(x_max > x_min)) x_max = widened_span_upper(x_min);  // constant batch, keep the grid usable
  auto& spec = q.specs.front();
  spec.x_min = x_min;
  spec.x_max = x_max;
  canonicalize(spec);
  q.cached_tables.assign(1, build_table(spec, q.gates));

  Tensor out(y.shape());
  std::vector<std::int32_t> idx(v.size());
  quantize_span(q.cached_tables[0], v.data(), v.size(), out.values().data(), idx.data());
  q.cached_assignment = idx;
  out = tape.track(out);
  tape.record([y = y, out, idx = std::move(idx), qz = &q]() mutable {
    QuantizeBackward back =
        quantize_backward(out.grad(), y.values(), out.values(), idx, qz->cached_tables[0],
                          qz->specs[0], qz->gates, qz->lambda, qz->apply_correction);
    auto& gy = y.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += back.grad_x[i];
    if (qz->train_levels) qz->accumulate_level_grad(0, back.grad_q_tilde);
  });
  return out;
}

}  // namespace ddq
