#include "ddq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "ddq/errors.hpp"

namespace ddq {

namespace {

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_i32(std::vector<std::uint8_t>& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

void put_f64_vec(std::vector<std::uint8_t>& out, const std::vector<double>& v) {
  put_u64(out, v.size());
  for (double x : v) put_f64(out, x);
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw corrupt_model_error("checkpoint: truncated at byte " + std::to_string(pos));
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                  bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
  std::vector<double> f64_vec() {
    const std::uint64_t n = u64();
    need(n * 8);
    std::vector<double> v(n);
    for (std::uint64_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
};

void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
  if (!t.defined()) {
    put_u32(out, 0xffffffffu);
    return;
  }
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) put_u64(out, t.dim(i));
  for (double v : t.values()) put_f64(out, v);
}

Tensor get_tensor(Reader& r) {
  const std::uint32_t rank = r.u32();
  if (rank == 0xffffffffu) return Tensor();
  if (rank > 8) throw corrupt_model_error("checkpoint: tensor rank " + std::to_string(rank));
  std::vector<std::size_t> shape(rank);
  std::size_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(r.u64());
    if (shape[i] == 0 || shape[i] > (1u << 28))
      throw corrupt_model_error("checkpoint: tensor dimension " + std::to_string(shape[i]));
    total *= shape[i];
    if (total > (1u << 28)) throw corrupt_model_error("checkpoint: tensor too large");
  }
  std::vector<double> values(total);
  for (std::size_t i = 0; i < total; ++i) values[i] = r.f64();
  return Tensor(shape, values);
}

void put_quantizer(std::vector<std::uint8_t>& out, const DdqQuantizer& q) {
  put_u8(out, q.granularity == Granularity::per_channel ? 1 : 0);
  put_u8(out, q.site_kind == SiteKind::activation ? 1 : 0);
  put_f64(out, q.lambda);
  put_u8(out, q.train_levels ? 1 : 0);
  put_u8(out, q.apply_correction ? 1 : 0);
  put_f64(out, q.ema_decay);
  put_u8(out, q.range_initialized ? 1 : 0);
  put_f64(out, q.ema_min);
  put_f64(out, q.ema_max);
  put_f64_vec(out, q.gates.g_hat);
  put_u8(out, q.gates.trainable ? 1 : 0);
  put_u32(out, static_cast<std::uint32_t>(q.specs.size()));
  for (const LevelSpec& s : q.specs) {
    put_i32(out, s.max_bits);
    put_i32(out, s.storage_bits);
    put_f64(out, s.x_min);
    put_f64(out, s.x_max);
    put_f64_vec(out, s.q_tilde);
  }
}

DdqQuantizer get_quantizer(Reader& r) {
  DdqQuantizer q;
  q.granularity = r.u8() ? Granularity::per_channel : Granularity::per_layer;
  q.site_kind = r.u8() ? SiteKind::activation : SiteKind::weight;
  q.lambda = r.f64();
  q.train_levels = r.u8() != 0;
  q.apply_correction = r.u8() != 0;
  q.ema_decay = r.f64();
  q.range_initialized = r.u8() != 0;
  q.ema_min = r.f64();
  q.ema_max = r.f64();
  q.gates.g_hat = r.f64_vec();
  q.gates.trainable = r.u8() != 0;
  const std::uint32_t n = r.u32();
  if (n > (1u << 20)) throw corrupt_model_error("checkpoint: spec count " + std::to_string(n));
  q.specs.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    LevelSpec& s = q.specs[i];
    s.max_bits = r.i32();
    s.storage_bits = r.i32();
    s.x_min = r.f64();
    s.x_max = r.f64();
    s.q_tilde = r.f64_vec();
    if (s.max_bits < 1 || s.max_bits > 16 || s.storage_bits < 1 || s.storage_bits > 16)
      throw corrupt_model_error("checkpoint: bit fields out of range");
  }
  return q;
}

constexpr char kMagic[4] = {'D', 'D', 'Q', '1'};
constexpr std::uint16_t kVersion = 1;

}  // namespace

std::vector<std::uint8_t> checkpoint_bytes(const QuantNetwork& net,
                                           const std::string& config_json) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kVersion);
  put_str(out, config_json);
  put_u16(out, static_cast<std::uint16_t>(net.layers.size()));
  for (const QuantLayer& l : net.layers) {
    put_u8(out, l.kind == LayerKind::dense ? 1 : 0);
    put_u8(out, l.relu ? 1 : 0);
    put_u8(out, l.quantize_input ? 1 : 0);
    put_u8(out, l.bypass ? 1 : 0);
    put_i32(out, l.stride);
    put_i32(out, l.padding);
    put_i32(out, l.groups);
    put_str(out, l.name);
    put_tensor(out, l.w);
    put_tensor(out, l.bias);
    put_quantizer(out, l.weight_quant);
    put_u8(out, l.quantize_input ? 1 : 0);
    if (l.quantize_input) put_quantizer(out, l.act_quant);
  }
  put_u32(out, static_cast<std::uint32_t>(net.budget.target_bits.size()));
  for (int t : net.budget.target_bits) put_i32(out, t);
  put_f64(out, net.budget.alpha);
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw corrupt_model_error("checkpoint: bad magic");
  r.pos = 4;
  const std::uint16_t version = r.u16();
  if (version != kVersion)
    throw corrupt_model_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ck;
  ck.config_json = r.str();
  const std::uint16_t layer_count = r.u16();
  ck.net.layers.resize(layer_count);
  for (std::uint16_t i = 0; i < layer_count; ++i) {
    QuantLayer& l = ck.net.layers[i];
    const std::uint8_t kind = r.u8();
    if (kind > 1) throw corrupt_model_error("checkpoint: unknown layer kind");
    l.kind = kind ? LayerKind::dense : LayerKind::conv;
    l.relu = r.u8() != 0;
    l.quantize_input = r.u8() != 0;
    l.bypass = r.u8() != 0;
    l.stride = r.i32();
    l.padding = r.i32();
    l.groups = r.i32();
    l.name = r.str();
    l.w = get_tensor(r);
    l.bias = get_tensor(r);
    l.weight_quant = get_quantizer(r);
    const bool act_present = r.u8() != 0;
    if (act_present != l.quantize_input)
      throw corrupt_model_error("checkpoint: activation flag mismatch");
    if (act_present) l.act_quant = get_quantizer(r);
  }
  const std::uint32_t budget_n = r.u32();
  if (budget_n != layer_count)
    throw corrupt_model_error("checkpoint: budget entry count mismatch");
  ck.net.budget.target_bits.resize(budget_n);
  for (std::uint32_t i = 0; i < budget_n; ++i) ck.net.budget.target_bits[i] = r.i32();
  ck.net.budget.alpha = r.f64();
  if (r.pos != bytes.size())
    throw corrupt_model_error("checkpoint: trailing data after budget");
  return ck;
}

void save_checkpoint(const QuantNetwork& net, const std::string& config_json,
                     const std::string& path) {
  const std::vector<std::uint8_t> bytes = checkpoint_bytes(net, config_json);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("save_checkpoint: cannot open " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw input_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw input_error("load_checkpoint: cannot open " + path);
  const std::streamsize n = in.tellg();
  in.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n));
  if (!in.read(reinterpret_cast<char*>(bytes.data()), n))
    throw input_error("load_checkpoint: read failed for " + path);
  return parse_checkpoint(bytes);
}

}  // namespace ddq
