#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddq/errors.hpp"
#include "ddq/inference.hpp"
#include "ddq/levels.hpp"
#include "ddq/quantizer.hpp"
#include "ddq/trainer.hpp"
#include "support/testutil.hpp"

using namespace ddq;
using testutil::random_vector;

namespace {

/// Desk-scale quantized state with initialized activation ranges.
TrainState trained_state(int steps = 2, std::uint64_t seed = 33) {
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 16;
  c.max_bits = 4;
  c.target_bits = 4;
  c.act_bits = 8;
  c.seed = seed;
  TrainState state = make_train_state(c);
  const Dataset data = make_synthetic(16, seed + 1);
  std::vector<std::size_t> idx(16);
  for (std::size_t i = 0; i < 16; ++i) idx[i] = i;
  for (int s = 0; s < steps; ++s)
    train_step(state, data.batch_images(idx), data.batch_labels(idx));
  return state;
}

PackedLayer engineered_dense_layer() {
  // Integer-exact grid: every decode lands on an integer.
  PackedLayer p;
  p.kind = LayerKind::dense;
  p.name = "d";
  p.relu = false;
  p.quantize_input = true;
  p.w_shape = {2, 8};
  p.s = 2;
  p.bq = 8;
  PackedLayer::ChannelTable t;
  t.x_min = 0.0;
  t.x_max = 255.0;
  t.codes = {0, 85, 170, 255};
  p.tables.push_back(t);
  p.indices = {0, 1, 2, 3, 3, 2, 1, 0, 2, 2, 0, 1, 3, 0, 1, 2};
  p.act_present = true;
  p.act_bits = 8;
  p.act_bq = 8;
  p.act_min = 0.0;
  p.act_max = 255.0;
  for (std::uint32_t c = 0; c < 256; ++c) p.act_codes.push_back(c);
  return p;
}

}  // namespace

TEST_CASE("index packing is s bits per weight with row padding only") {
  std::mt19937_64 rng(7);
  for (int s = 1; s <= 8; ++s) {
    for (std::size_t row_len : {1u, 3u, 7u, 8u, 13u}) {
      const std::size_t rows = 5;
      std::vector<std::uint32_t> idx(rows * row_len);
      for (auto& v : idx) v = static_cast<std::uint32_t>(rng() % (1u << s));
      const std::vector<std::uint8_t> bytes = pack_indices(idx, s, row_len);
      CHECK(bytes.size() == rows * ((row_len * static_cast<std::size_t>(s) + 7) / 8));
      const std::vector<std::uint32_t> back = unpack_indices(bytes, s, row_len, idx.size());
      REQUIRE(back == idx);
    }
  }
  // 7 weights at 2 bits: 14 bits round up to 2 bytes.
  const std::vector<std::uint32_t> seven{0, 1, 2, 3, 0, 1, 2};
  CHECK(pack_indices(seven, 2, 7).size() == 2);
  // one level (s = 0) stores nothing
  CHECK(pack_indices({0, 0, 0}, 0, 3).empty());
  CHECK(unpack_indices({}, 0, 3, 3) == std::vector<std::uint32_t>(3, 0));
  CHECK_THROWS_AS(pack_indices({4}, 2, 1), export_error);
}

TEST_CASE("export, import, export is byte-identical") {
  TrainState state = trained_state();
  const std::vector<std::uint8_t> bytes = export_model(state.net);
  const PackedModel model = import_model(bytes);
  const std::vector<std::uint8_t> again = model_bytes(model);
  REQUIRE(bytes.size() == again.size());
  CHECK(bytes == again);
  CHECK(model.layers.size() == 4);
  for (const PackedLayer& l : model.layers) CHECK(l.s == 4);
}

TEST_CASE("model file round-trips through disk") {
  TrainState state = trained_state(1, 57);
  const std::string path = "/tmp/ddq_inference_model.ddqm";
  export_model_file(state.net, path);
  const PackedModel model = load_model(path);
  const std::vector<std::uint8_t> direct = export_model(state.net);
  CHECK(model_bytes(model) == direct);
  std::remove(path.c_str());
}

TEST_CASE("importer rejects corruption") {
  TrainState state = trained_state(1, 41);
  std::vector<std::uint8_t> bytes = export_model(state.net);

  std::vector<std::uint8_t> bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(import_model(bad), corrupt_model_error);

  bad = bytes;
  bad[4] = 0x7f;  // version
  CHECK_THROWS_AS(import_model(bad), corrupt_model_error);

  bad = bytes;
  bad.resize(bad.size() - 17);
  CHECK_THROWS_AS(import_model(bad), corrupt_model_error);

  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(import_model(bad), corrupt_model_error);
}

TEST_CASE("single-weight layer multiplies by its table entry") {
  PackedLayer p;
  p.kind = LayerKind::dense;
  p.name = "one";
  p.relu = false;
  p.w_shape = {1, 1};
  p.s = 2;
  p.bq = 8;
  PackedLayer::ChannelTable t;
  t.x_min = 0.0;
  t.x_max = 1.0;
  t.codes = {0, 85, 170, 255};
  p.tables.push_back(t);
  p.indices = {2};
  Tensor x({std::size_t{1}, std::size_t{1}}, {5.0});
  const Tensor y = lookup_forward(p, x);
  const double level = decode_level_code(170, 8, 0.0, 1.0);
  CHECK(y.values()[0] == 5.0 * level);
}

TEST_CASE("index outside the table raises corrupt model") {
  PackedLayer p = engineered_dense_layer();
  p.indices[3] = 4;  // table holds 2^2 entries
  Tensor x({std::size_t{1}, std::size_t{8}}, std::vector<double>(8, 1.0));
  CHECK_THROWS_AS(lookup_forward(p, x), corrupt_model_error);
}

TEST_CASE("lookup conv matches the simulated layer forward bitwise") {
  std::mt19937_64 rng(91);
  NetOptions opt;
  opt.max_bits = 3;
  opt.act_bits = 0;
  opt.granularity = Granularity::per_channel;
  QuantLayer layer = make_conv_layer("c", 3, 6, 3, 2, 1, 1, /*relu=*/false, opt, rng);
  QuantNetwork net;
  net.layers.push_back(layer);
  net.budget.target_bits = {3};

  Tensor x({2, 3, 9, 9}, random_vector(rng, 2 * 3 * 9 * 9, -1.0, 1.0));
  Tape tape;
  Tensor want = layer_forward(tape, net.layers[0], x, false);

  const PackedModel model = import_model(export_model(net));
  const Tensor got = packed_forward(model, x);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got.values()[i] == want.values()[i]);
}

TEST_CASE("lookup dense matches the simulated layer forward bitwise") {
  std::mt19937_64 rng(92);
  NetOptions opt;
  opt.max_bits = 4;
  opt.act_bits = 0;
  opt.granularity = Granularity::per_layer;
  QuantLayer layer = make_dense_layer("d", 12, 5, /*relu=*/false, opt, rng);
  QuantNetwork net;
  net.layers.push_back(layer);
  net.budget.target_bits = {4};

  Tensor x({4, 12}, random_vector(rng, 48, -2.0, 2.0));
  Tape tape;
  Tensor want = layer_forward(tape, net.layers[0], x, false);

  const PackedModel model = import_model(export_model(net));
  const Tensor got = packed_forward(model, x);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got.values()[i] == want.values()[i]);
}

TEST_CASE("packed network reproduces the eval forward bitwise") {
  TrainState state = trained_state(3, 71);
  const PackedModel model = import_model(export_model(state.net));
  const Dataset data = make_synthetic(24, 99);
  std::vector<std::size_t> idx(24);
  for (std::size_t i = 0; i < 24; ++i) idx[i] = i;
  Tensor batch = data.batch_images(idx);

  Tape tape;
  Tensor want = state.net.forward(tape, batch, false);
  const Tensor got = packed_forward(model, batch);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) REQUIRE(got.values()[i] == want.values()[i]);
}

TEST_CASE("export requires trained activation ranges and quantized layers") {
  TrainConfig c;
  c.act_bits = 8;
  TrainState state = make_train_state(c);  // no training: EMA uninitialized
  CHECK_THROWS_AS(export_model(state.net), export_error);

  TrainConfig f;
  f.bypass = true;
  TrainState floated = make_train_state(f);
  CHECK_THROWS_AS(export_model(floated.net), export_error);
}

TEST_CASE("integer accumulation equals float decode on an integer grid") {
  const PackedLayer p = engineered_dense_layer();
  std::vector<double> xv = {3, 10, 255, 0, 17, 128, 64, 200, 1, 2, 3, 4, 5, 6, 7, 8};
  Tensor x({std::size_t{2}, std::size_t{8}}, xv);
  const Tensor a = lookup_forward(p, x, AccumMode::float_decode);
  const Tensor b = lookup_forward(p, x, AccumMode::integer);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a.values()[i] == b.values()[i]);
}

TEST_CASE("integer accumulation tracks float decode on general uniform grids") {
  PackedLayer p;
  p.kind = LayerKind::dense;
  p.name = "u";
  p.relu = false;
  p.quantize_input = true;
  p.w_shape = {4, 16};
  p.s = 3;
  p.bq = 8;
  PackedLayer::ChannelTable t;
  t.x_min = -0.7;
  t.x_max = 1.3;
  t.codes = {0, 36, 72, 108, 144, 180, 216, 252};
  p.tables.push_back(t);
  std::mt19937_64 rng(5);
  for (std::size_t i = 0; i < 64; ++i)
    p.indices.push_back(static_cast<std::uint32_t>(rng() % 8));
  p.act_present = true;
  p.act_bits = 4;
  p.act_bq = 8;
  p.act_min = -1.0;
  p.act_max = 2.0;
  for (std::uint32_t k = 0; k < 16; ++k) p.act_codes.push_back(k * 17);

  // inputs sit exactly on activation levels
  std::vector<double> xv;
  for (std::size_t i = 0; i < 32; ++i)
    xv.push_back(decode_level_code(p.act_codes[rng() % 16], 8, -1.0, 2.0));
  Tensor x({std::size_t{2}, std::size_t{16}}, xv);
  const Tensor a = lookup_forward(p, x, AccumMode::float_decode);
  const Tensor b = lookup_forward(p, x, AccumMode::integer);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(testutil::rel_err(b.values()[i], a.values()[i]) <= 1e-9);
}

TEST_CASE("integer accumulation refuses nonuniform levels or missing act table") {
  PackedLayer p = engineered_dense_layer();
  Tensor x({std::size_t{2}, std::size_t{8}}, std::vector<double>(16, 1.0));
  p.tables[0].codes = {0, 10, 100, 255};
  CHECK_THROWS_AS(lookup_forward(p, x, AccumMode::integer), input_error);
  PackedLayer q = engineered_dense_layer();
  q.act_present = false;
  CHECK_THROWS_AS(lookup_forward(q, x, AccumMode::integer), input_error);
}

TEST_CASE("describe emits a parseable schema-stable summary") {
  TrainState state = trained_state(1, 13);
  const PackedModel model = import_model(export_model(state.net));
  const std::string text = describe(model);
  const nlohmann::json j = nlohmann::json::parse(text);
  CHECK(j["magic"] == "DDQM");
  CHECK(j["layer_count"] == 4);
  REQUIRE(j["layers"].size() == 4);
  CHECK(j["layers"][0]["name"] == "conv1");
  CHECK(j["layers"][0]["s"] == 4);
  CHECK(j["layers"][3]["kind"] == "dense");
}

TEST_CASE("four-bit model file size stays within five percent of the linear footprint") {
  // Needs enough parameters that tables and headers amortize away.
  const std::string arch = R"([
    {"type":"conv","name":"c1","in":1,"out":8,"kernel":3,"stride":2,"padding":1},
    {"type":"conv","name":"c2","in":8,"out":32,"kernel":3,"stride":2,"padding":1},
    {"type":"conv","name":"c3","in":32,"out":128,"kernel":3,"stride":2,"padding":1},
    {"type":"dense","name":"fc","in":2048,"out":96,"relu":false}
  ])";
  NetOptions opt;
  opt.max_bits = 4;
  opt.act_bits = 0;
  opt.granularity = Granularity::per_layer;
  QuantNetwork net = network_from_config(arch, 3, opt);
  const std::vector<std::uint8_t> bytes = export_model(net);
  const PackedModel model = import_model(bytes);
  const double footprint_bytes = packed_footprint_bits(model) / 8.0;
  CHECK(packed_footprint_bits(model) == 4.0 * 235848.0);
  CHECK(static_cast<double>(bytes.size()) >= footprint_bytes);
  CHECK(static_cast<double>(bytes.size()) <= 1.05 * footprint_bytes);
}
