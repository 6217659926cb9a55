#include "ddq/inference.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "ddq/errors.hpp"
#include "ddq/levels.hpp"
#include "ddq/quantizer.hpp"

namespace ddq {

std::size_t PackedLayer::weight_count() const {
  std::size_t n = 1;
  for (std::size_t d : w_shape) n *= d;
  return w_shape.empty() ? 0 : n;
}

std::size_t PackedLayer::rows() const { return w_shape.empty() ? 0 : w_shape[0]; }

std::size_t PackedLayer::row_len() const {
  const std::size_t r = rows();
  return r == 0 ? 0 : weight_count() / r;
}

std::vector<std::uint8_t> pack_indices(const std::vector<std::uint32_t>& indices, int s,
                                       std::size_t row_len) {
  if (s < 0 || s > 16) throw export_error("pack_indices: s out of range");
  if (row_len == 0 || indices.size() % row_len != 0)
    throw dimension_error("pack_indices: " + std::to_string(indices.size()) +
                          " indices not divisible into rows of " + std::to_string(row_len));
  std::vector<std::uint8_t> out;
  if (s == 0) return out;  // one level: nothing to store
  const std::uint32_t limit = 1u << s;
  const std::size_t rows = indices.size() / row_len;
  out.reserve(rows * ((row_len * s + 7) / 8));
  for (std::size_t r = 0; r < rows; ++r) {
    std::uint32_t bits = 0;
    int nbits = 0;
    for (std::size_t j = 0; j < row_len; ++j) {
      const std::uint32_t v = indices[r * row_len + j];
      if (v >= limit)
        throw export_error("pack_indices: index " + std::to_string(v) + " exceeds " +
                           std::to_string(s) + " bits");
      bits = (bits << s) | v;
      nbits += s;
      while (nbits >= 8) {
        out.push_back(static_cast<std::uint8_t>(bits >> (nbits - 8)));
        nbits -= 8;
        bits &= (1u << nbits) - 1u;
      }
    }
    if (nbits > 0) out.push_back(static_cast<std::uint8_t>(bits << (8 - nbits)));
  }
  return out;
}

std::vector<std::uint32_t> unpack_indices(const std::vector<std::uint8_t>& bytes, int s,
                                          std::size_t row_len, std::size_t count) {
  if (s < 0 || s > 16) throw corrupt_model_error("unpack_indices: s out of range");
  if (row_len == 0 || count % row_len != 0)
    throw corrupt_model_error("unpack_indices: count not divisible into rows");
  if (s == 0) return std::vector<std::uint32_t>(count, 0);
  const std::size_t rows = count / row_len;
  const std::size_t row_bytes = (row_len * static_cast<std::size_t>(s) + 7) / 8;
  if (bytes.size() != rows * row_bytes)
    throw corrupt_model_error("unpack_indices: expected " + std::to_string(rows * row_bytes) +
                              " bytes, got " + std::to_string(bytes.size()));
  std::vector<std::uint32_t> out(count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t bit = r * row_bytes * 8;
    for (std::size_t j = 0; j < row_len; ++j) {
      std::uint32_t v = 0;
      for (int b = 0; b < s; ++b, ++bit)
        v = (v << 1) | ((bytes[bit / 8] >> (7 - bit % 8)) & 1u);
      out[r * row_len + j] = v;
    }
  }
  return out;
}

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

void put_codes(std::vector<std::uint8_t>& out, const std::vector<std::uint32_t>& codes,
               int bq) {
  for (std::uint32_t c : codes) {
    if (bq <= 8)
      put_u8(out, static_cast<std::uint8_t>(c));
    else
      put_u16(out, static_cast<std::uint16_t>(c));
  }
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw corrupt_model_error("model: truncated at byte " + std::to_string(pos));
  }
  std::uint8_t u8() {
    need(1);
    return bytes[pos++];
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
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
  std::vector<std::uint32_t> codes(std::size_t n, int bq) {
    std::vector<std::uint32_t> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = bq <= 8 ? u32_from(u8()) : u32_from(u16());
    const std::uint32_t limit = (bq >= 32) ? 0xffffffffu : ((1u << bq) - 1u);
    for (std::uint32_t c : out)
      if (c > limit) throw corrupt_model_error("model: level code exceeds storage width");
    return out;
  }
  static std::uint32_t u32_from(std::uint32_t v) { return v; }
};

constexpr char kMagic[4] = {'D', 'D', 'Q', 'M'};
constexpr std::uint16_t kVersion = 1;

double decode_table_entry(const PackedLayer::ChannelTable& t, int bq, std::uint32_t code) {
  return decode_level_code(code, bq, t.x_min, t.x_max);
}

PackedLayer pack_layer(QuantLayer& l) {
  if (l.bypass)
    throw export_error("export_model: layer " + l.name + " is bypassed, nothing to pack");
  PackedLayer p;
  p.kind = l.kind;
  p.name = l.name;
  p.relu = l.relu;
  p.quantize_input = l.quantize_input;
  p.stride = l.stride;
  p.padding = l.padding;
  p.groups = l.groups;
  for (std::size_t i = 0; i < l.w.rank(); ++i) p.w_shape.push_back(l.w.dim(i));

  p.s = l.effective_bits();
  p.bq = l.weight_quant.specs.front().storage_bits;
  const std::vector<LevelTable>& tables = refresh_weight_tables(l.weight_quant, l.w);
  const std::size_t z = tables.front().block_size;
  const std::size_t distinct = tables.front().qhat.size() / z;
  for (const LevelTable& t : tables) {
    PackedLayer::ChannelTable ct;
    ct.x_min = t.x_min;
    ct.x_max = t.x_max;
    ct.codes.reserve(distinct);
    for (std::size_t d = 0; d < distinct; ++d) ct.codes.push_back(t.codes[d * z]);
    p.tables.push_back(std::move(ct));
  }

  const std::size_t chunk = l.w.size() / tables.size();
  p.indices.reserve(l.w.size());
  const double* pw = l.w.data();
  for (std::size_t i = 0; i < l.w.size(); ++i) {
    const std::size_t c = i / chunk;
    // Nearest qhat entry; qhat is block-constant, so first-of-value is a
    // block start and the distinct index is exact.
    const std::int32_t full = assign_index(tables[c], pw[i]);
    p.indices.push_back(static_cast<std::uint32_t>(full) / static_cast<std::uint32_t>(z));
  }

  if (l.bias.defined() && l.bias.size() > 0) {
    p.bias_present = true;
    const BiasQuant bq = build_bias_tables(l.weight_quant, l.bias);
    const std::size_t bchunk = l.bias.size() / bq.tables.size();
    const double* pb = l.bias.data();
    p.bias.reserve(l.bias.size());
    for (std::size_t i = 0; i < l.bias.size(); ++i) {
      const LevelTable& t = bq.tables[i / bchunk];
      p.bias.push_back(t.qhat[static_cast<std::size_t>(assign_index(t, pb[i]))]);
    }
  }

  if (l.quantize_input) {
    const DdqQuantizer& aq = l.act_quant;
    if (!aq.range_initialized)
      throw export_error("export_model: activation range of " + l.name +
                         " was never initialized; train before exporting");
    LevelSpec spec = aq.specs.front();
    spec.x_min = aq.ema_min;
    spec.x_max = aq.ema_max;
    if (!(spec.x_max > spec.x_min)) spec.x_max = widened_span_upper(spec.x_min);
    canonicalize(spec);
    const LevelTable t = build_table(spec, aq.gates);
    p.act_present = true;
    p.act_bits = spec.max_bits;
    p.act_bq = spec.storage_bits;
    p.act_min = t.x_min;
    p.act_max = t.x_max;
    p.act_codes = t.codes;
  }
  return p;
}

void serialize_layer(std::vector<std::uint8_t>& out, const PackedLayer& p) {
  put_u8(out, p.kind == LayerKind::dense ? 1 : 0);
  put_u8(out, p.relu ? 1 : 0);
  put_u8(out, p.quantize_input ? 1 : 0);
  put_i32(out, p.stride);
  put_i32(out, p.padding);
  put_i32(out, p.groups);
  put_str(out, p.name);
  put_u32(out, static_cast<std::uint32_t>(p.w_shape.size()));
  for (std::size_t d : p.w_shape) put_u64(out, d);
  put_u8(out, static_cast<std::uint8_t>(p.s));
  put_u8(out, static_cast<std::uint8_t>(p.bq));
  put_u32(out, static_cast<std::uint32_t>(p.tables.size()));
  for (const PackedLayer::ChannelTable& t : p.tables) {
    put_f64(out, t.x_min);
    put_f64(out, t.x_max);
    put_codes(out, t.codes, p.bq);
  }
  const std::vector<std::uint8_t> packed = pack_indices(p.indices, p.s, p.row_len());
  put_u64(out, packed.size());
  out.insert(out.end(), packed.begin(), packed.end());
  put_u8(out, p.bias_present ? 1 : 0);
  if (p.bias_present) {
    put_u32(out, static_cast<std::uint32_t>(p.bias.size()));
    for (double b : p.bias) put_f64(out, b);
  }
  put_u8(out, p.act_present ? 1 : 0);
  if (p.act_present) {
    put_u8(out, static_cast<std::uint8_t>(p.act_bits));
    put_u8(out, static_cast<std::uint8_t>(p.act_bq));
    put_f64(out, p.act_min);
    put_f64(out, p.act_max);
    put_codes(out, p.act_codes, p.act_bq);
  }
}

PackedLayer parse_layer(Reader& r) {
  PackedLayer p;
  const std::uint8_t kind = r.u8();
  if (kind > 1) throw corrupt_model_error("model: unknown layer kind");
  p.kind = kind ? LayerKind::dense : LayerKind::conv;
  p.relu = r.u8() != 0;
  p.quantize_input = r.u8() != 0;
  p.stride = r.i32();
  p.padding = r.i32();
  p.groups = r.i32();
  if (p.stride < 1 || p.padding < 0 || p.groups < 1)
    throw corrupt_model_error("model: bad geometry fields");
  p.name = r.str();
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw corrupt_model_error("model: weight rank " + std::to_string(rank));
  std::size_t total = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t d = r.u64();
    if (d == 0 || d > (1u << 28)) throw corrupt_model_error("model: weight dimension");
    p.w_shape.push_back(static_cast<std::size_t>(d));
    total *= p.w_shape.back();
    if (total > (1u << 28)) throw corrupt_model_error("model: weight tensor too large");
  }
  p.s = r.u8();
  p.bq = r.u8();
  if (p.s > 16 || p.bq < 1 || p.bq > 16) throw corrupt_model_error("model: bit fields");
  const std::uint32_t channels = r.u32();
  if (channels == 0 || total % channels != 0)
    throw corrupt_model_error("model: channel count " + std::to_string(channels));
  const std::size_t distinct = std::size_t{1} << p.s;
  for (std::uint32_t c = 0; c < channels; ++c) {
    PackedLayer::ChannelTable t;
    t.x_min = r.f64();
    t.x_max = r.f64();
    t.codes = r.codes(distinct, p.bq);
    p.tables.push_back(std::move(t));
  }
  const std::uint64_t nbytes = r.u64();
  const std::size_t row_bytes = p.s == 0 ? 0 : (p.row_len() * static_cast<std::size_t>(p.s) + 7) / 8;
  if (nbytes != p.rows() * row_bytes)
    throw corrupt_model_error("model: packed index size " + std::to_string(nbytes));
  r.need(nbytes);
  const std::vector<std::uint8_t> packed(
      r.bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
      r.bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + nbytes));
  r.pos += nbytes;
  p.indices = unpack_indices(packed, p.s, p.row_len(), total);
  p.bias_present = r.u8() != 0;
  if (p.bias_present) {
    const std::uint32_t n = r.u32();
    if (n != p.rows()) throw corrupt_model_error("model: bias count " + std::to_string(n));
    p.bias.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) p.bias[i] = r.f64();
  }
  p.act_present = r.u8() != 0;
  if (p.act_present) {
    p.act_bits = r.u8();
    p.act_bq = r.u8();
    if (p.act_bits < 1 || p.act_bits > 16 || p.act_bq < 1 || p.act_bq > 16)
      throw corrupt_model_error("model: activation bit fields");
    p.act_min = r.f64();
    p.act_max = r.f64();
    p.act_codes = r.codes(std::size_t{1} << p.act_bits, p.act_bq);
  }
  return p;
}

LevelTable act_table(const PackedLayer& p) {
  LevelTable t;
  t.x_min = p.act_min;
  t.x_max = p.act_max;
  t.storage_bits = p.act_bq;
  t.block_size = 1;
  t.codes = p.act_codes;
  t.qhat.reserve(p.act_codes.size());
  for (std::uint32_t c : p.act_codes)
    t.qhat.push_back(decode_level_code(c, p.act_bq, p.act_min, p.act_max));
  return t;
}

std::vector<std::vector<double>> decoded_tables(const PackedLayer& p) {
  std::vector<std::vector<double>> out(p.tables.size());
  for (std::size_t c = 0; c < p.tables.size(); ++c) {
    out[c].reserve(p.tables[c].codes.size());
    for (std::uint32_t code : p.tables[c].codes)
      out[c].push_back(decode_table_entry(p.tables[c], p.bq, code));
  }
  return out;
}

void check_uniform_codes(const std::vector<std::uint32_t>& codes, const std::string& what) {
  if (codes.size() < 3) return;
  const std::int64_t gap = static_cast<std::int64_t>(codes[1]) - codes[0];
  for (std::size_t i = 1; i + 1 < codes.size(); ++i) {
    const std::int64_t g = static_cast<std::int64_t>(codes[i + 1]) - codes[i];
    if (g != gap)
      throw input_error("lookup_forward: integer mode requires uniform " + what + " levels");
  }
}

}  // namespace

std::vector<std::uint8_t> export_model(QuantNetwork& net) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kVersion);
  put_u16(out, static_cast<std::uint16_t>(net.layers.size()));
  for (QuantLayer& l : net.layers) serialize_layer(out, pack_layer(l));
  return out;
}

void export_model_file(QuantNetwork& net, const std::string& path) {
  const std::vector<std::uint8_t> bytes = export_model(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("export_model_file: cannot open " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw input_error("export_model_file: write failed for " + path);
}

PackedModel import_model(const std::vector<std::uint8_t>& bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw corrupt_model_error("model: bad magic");
  r.pos = 4;
  const std::uint16_t version = r.u16();
  if (version != kVersion)
    throw corrupt_model_error("model: unsupported version " + std::to_string(version));
  const std::uint16_t count = r.u16();
  PackedModel model;
  model.layers.reserve(count);
  for (std::uint16_t i = 0; i < count; ++i) model.layers.push_back(parse_layer(r));
  if (r.pos != bytes.size()) throw corrupt_model_error("model: trailing data");
  return model;
}

PackedModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw input_error("load_model: cannot open " + path);
  const std::streamsize n = in.tellg();
  in.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n));
  if (!in.read(reinterpret_cast<char*>(bytes.data()), n))
    throw input_error("load_model: read failed for " + path);
  return import_model(bytes);
}

std::vector<std::uint8_t> model_bytes(const PackedModel& model) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u16(out, kVersion);
  put_u16(out, static_cast<std::uint16_t>(model.layers.size()));
  for (const PackedLayer& l : model.layers) serialize_layer(out, l);
  return out;
}

Tensor lookup_forward(const PackedLayer& layer, const Tensor& x_q, AccumMode mode) {
  const std::size_t total = layer.weight_count();
  if (layer.tables.empty() || total == 0 || total % layer.tables.size() != 0)
    throw corrupt_model_error("lookup_forward: malformed tables for " + layer.name);
  if (layer.indices.size() != total)
    throw corrupt_model_error("lookup_forward: index count mismatch for " + layer.name);
  const std::size_t chunk = total / layer.tables.size();
  const std::size_t distinct = std::size_t{1} << layer.s;
  for (std::uint32_t idx : layer.indices)
    if (idx >= distinct)
      throw corrupt_model_error("lookup_forward: index " + std::to_string(idx) +
                                " outside table of " + std::to_string(distinct));

  const std::vector<std::vector<double>> wtab = decoded_tables(layer);

  // Integer mode: code-space accumulation with one rescale per output.
  const bool integer = mode == AccumMode::integer;
  LevelTable atab;
  std::vector<std::uint32_t> acodes;
  std::vector<double> ka_kw;  // per-channel Kw; Ka shared
  double alo = 0.0, ka = 0.0;
  if (integer) {
    if (!layer.act_present)
      throw input_error("lookup_forward: integer mode needs the activation table");
    for (const PackedLayer::ChannelTable& t : layer.tables)
      check_uniform_codes(t.codes, "weight");
    check_uniform_codes(layer.act_codes, "activation");
    atab = act_table(layer);
    acodes.resize(x_q.size());
    const double* px = x_q.data();
    for (std::size_t i = 0; i < x_q.size(); ++i)
      acodes[i] = layer.act_codes[static_cast<std::size_t>(assign_index(atab, px[i]))];
    alo = layer.act_min;
    ka = (layer.act_max - layer.act_min) /
         static_cast<double>((std::uint32_t{1} << layer.act_bq) - 1u);
    ka_kw.reserve(layer.tables.size());
    for (const PackedLayer::ChannelTable& t : layer.tables)
      ka_kw.push_back((t.x_max - t.x_min) /
                      static_cast<double>((std::uint32_t{1} << layer.bq) - 1u));
  }

  if (layer.kind == LayerKind::dense) {
    if (x_q.rank() != 2 || layer.w_shape.size() != 2)
      throw dimension_error("lookup_forward: dense expects rank-2 operands");
    const std::size_t n = x_q.dim(0), in = x_q.dim(1), out = layer.w_shape[0];
    if (in != layer.w_shape[1])
      throw dimension_error("lookup_forward: input features disagree with weight");
    Tensor y({n, out});
    const double* px = x_q.data();
    double* py = y.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) {
        if (!integer) {
          const std::vector<double>& tab = wtab[(o * in) / chunk];
          double acc = 0.0;
          for (std::size_t t = 0; t < in; ++t)
            acc += px[i * in + t] * tab[layer.indices[o * in + t]];
          py[i * out + o] = acc;
        } else {
          const std::size_t c = (o * in) / chunk;
          const double wlo = layer.tables[c].x_min, kw = ka_kw[c];
          std::int64_t sa = 0, sw = 0, swa = 0;
          for (std::size_t t = 0; t < in; ++t) {
            const std::int64_t cw = layer.tables[c].codes[layer.indices[o * in + t]];
            const std::int64_t cx = acodes[i * in + t];
            sa += cx;
            sw += cw;
            swa += cw * cx;
          }
          const double count = static_cast<double>(in);
          py[i * out + o] = wlo * alo * count + wlo * ka * static_cast<double>(sa) +
                            alo * kw * static_cast<double>(sw) +
                            kw * ka * static_cast<double>(swa);
        }
      }
    return y;
  }

  // conv: mirror the training kernel's loop order exactly.
  if (x_q.rank() != 4 || layer.w_shape.size() != 4)
    throw dimension_error("lookup_forward: conv expects rank-4 operands");
  const std::size_t n = x_q.dim(0), cin = x_q.dim(1), h = x_q.dim(2), wd = x_q.dim(3);
  const std::size_t cout = layer.w_shape[0], cin_g = layer.w_shape[1], k = layer.w_shape[2];
  const int stride = layer.stride, padding = layer.padding, groups = layer.groups;
  if (layer.w_shape[2] != layer.w_shape[3])
    throw dimension_error("lookup_forward: kernel must be square");
  if (cin_g * static_cast<std::size_t>(groups) != cin || cout % groups != 0)
    throw dimension_error("lookup_forward: channel mismatch");
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (wd + 2 * padding - k) / stride + 1;
  const std::size_t cout_g = cout / groups;

  Tensor y({n, cout, oh, ow});
  const double* px = x_q.data();
  double* py = y.data();
  for (std::size_t img = 0; img < n; ++img)
    for (std::size_t co = 0; co < cout; ++co) {
      const std::size_t grp = co / cout_g;
      const std::size_t ch = (co * cin_g * k * k) / chunk;
      const std::vector<double>& tab = wtab[ch];
      const double wlo = layer.tables[ch].x_min;
      const double kw = integer ? ka_kw[ch] : 0.0;
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          double acc = 0.0;
          std::int64_t sa = 0, sw = 0, swa = 0, cnt = 0;
          for (std::size_t ci = 0; ci < cin_g; ++ci)
            for (std::size_t kr = 0; kr < k; ++kr) {
              const long ir = static_cast<long>(r * stride + kr) - padding;
              if (ir < 0 || ir >= static_cast<long>(h)) continue;
              for (std::size_t kc = 0; kc < k; ++kc) {
                const long ic = static_cast<long>(c * stride + kc) - padding;
                if (ic < 0 || ic >= static_cast<long>(wd)) continue;
                const std::size_t xi = ((img * cin + grp * cin_g + ci) * h + ir) * wd + ic;
                const std::size_t wi = ((co * cin_g + ci) * k + kr) * k + kc;
                if (!integer) {
                  acc += px[xi] * tab[layer.indices[wi]];
                } else {
                  const std::int64_t cw = layer.tables[ch].codes[layer.indices[wi]];
                  const std::int64_t cx = acodes[xi];
                  sa += cx;
                  sw += cw;
                  swa += cw * cx;
                  ++cnt;
                }
              }
            }
          if (integer)
            acc = wlo * alo * static_cast<double>(cnt) +
                  wlo * ka * static_cast<double>(sa) + alo * kw * static_cast<double>(sw) +
                  kw * ka * static_cast<double>(swa);
          py[((img * cout + co) * oh + r) * ow + c] = acc;
        }
    }
  return y;
}

Tensor packed_forward(const PackedModel& model, const Tensor& x) {
  Tensor cur = x.clone();
  for (const PackedLayer& layer : model.layers) {
    if (layer.kind == LayerKind::dense && cur.rank() == 4) {
      std::size_t rest = cur.size() / cur.dim(0);
      cur = Tensor({cur.dim(0), rest}, cur.values());
    }
    if (layer.quantize_input && layer.act_present) {
      const LevelTable t = act_table(layer);
      Tensor q(cur.shape());
      const double* src = cur.data();
      double* dst = q.data();
      for (std::size_t i = 0; i < cur.size(); ++i)
        dst[i] = t.qhat[static_cast<std::size_t>(assign_index(t, src[i]))];
      cur = q;
    }
    Tensor y = lookup_forward(layer, cur);
    if (layer.bias_present) {
      double* py = y.data();
      if (y.rank() == 4) {
        const std::size_t n = y.dim(0), ch = y.dim(1), plane = y.dim(2) * y.dim(3);
        for (std::size_t img = 0; img < n; ++img)
          for (std::size_t c = 0; c < ch; ++c)
            for (std::size_t p = 0; p < plane; ++p)
              py[(img * ch + c) * plane + p] += layer.bias[c];
      } else {
        const std::size_t n = y.dim(0), f = y.dim(1);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < f; ++j) py[i * f + j] += layer.bias[j];
      }
    }
    if (layer.relu) {
      double* py = y.data();
      for (std::size_t i = 0; i < y.size(); ++i) py[i] = py[i] > 0.0 ? py[i] : 0.0;
    }
    cur = y;
  }
  return cur;
}

std::string describe(const PackedModel& model) {
  nlohmann::ordered_json j;
  j["magic"] = "DDQM";
  j["version"] = kVersion;
  j["layer_count"] = model.layers.size();
  j["layers"] = nlohmann::ordered_json::array();
  for (const PackedLayer& l : model.layers) {
    nlohmann::ordered_json e;
    e["name"] = l.name;
    e["kind"] = l.kind == LayerKind::dense ? "dense" : "conv";
    e["shape"] = l.w_shape;
    e["s"] = l.s;
    e["bq"] = l.bq;
    e["channels"] = l.tables.size();
    e["weights"] = l.weight_count();
    e["index_bytes"] =
        l.s == 0 ? 0 : l.rows() * ((l.row_len() * static_cast<std::size_t>(l.s) + 7) / 8);
    e["bias"] = l.bias_present ? l.bias.size() : 0;
    e["act_bits"] = l.act_present ? l.act_bits : 0;
    j["layers"].push_back(std::move(e));
  }
  return j.dump(2);
}

double packed_footprint_bits(const PackedModel& model) {
  double total = 0.0;
  for (const PackedLayer& l : model.layers)
    total += static_cast<double>(l.weight_count()) * static_cast<double>(l.s);
  return total;
}

}  // namespace ddq
