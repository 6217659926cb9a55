#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include "ddq/checkpoint.hpp"
#include "ddq/data.hpp"
#include "ddq/errors.hpp"
#include "ddq/inference.hpp"
#include "ddq/levels.hpp"
#include "ddq/trainer.hpp"

namespace {

using namespace ddq;
namespace fs = std::filesystem;

std::string fmt(double v) {
  std::array<char, 48> buf{};
  std::snprintf(buf.data(), buf.size(), "%.17g", v);
  return std::string(buf.data());
}

/// Flag values shared by train and ablate. epochs < 0 means "use the
/// preset's count" (smoke: 1, full: 3); every other default matches
/// TrainConfig.
struct Flags {
  std::string config_path;
  std::string preset = "smoke";
  std::string out_dir = ".";
  std::string granularity = "channel";
  std::string activations = "8";
  std::string level_init = "uniform";
  std::uint64_t seed = 1;
  int epochs = -1;
  int target_bits = 4;
  int max_bits = 4;
  int bq = 8;
  double lambda = 0.1;
  double alpha = -0.02;
  double lr = 0.05;
  double lr_levels = 1e-3;
  double lr_gates = 1e-8;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int fixed_precision = 0;
  bool freeze_levels = false;
  bool use_float = false;
};

void add_preset_flag(CLI::App* sub, Flags& f) {
  sub->add_option("--preset", f.preset, "run size: smoke (512/256, 1 epoch) or full (4000/1000, 3 epochs)")
      ->check(CLI::IsMember({"smoke", "full"}))
      ->capture_default_str();
}

void add_out_flag(CLI::App* sub, Flags& f) {
  sub->add_option("--out", f.out_dir, "directory for artifacts")->capture_default_str();
}

void add_train_flags(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config_path,
                  "key=value config file; command-line flags take precedence");
  sub->add_option("--seed", f.seed, "rng seed for init, shuffling, and synthetic data")
      ->capture_default_str();
  sub->add_option("--epochs", f.epochs, "training epochs (defaults to the preset's count)");
  sub->add_option("--target-bits", f.target_bits, "per-layer footprint budget in bits")
      ->capture_default_str();
  sub->add_option("--max-bits", f.max_bits, "maximum learnable bitwidth")->capture_default_str();
  sub->add_option("--bq", f.bq, "storage grid width in bits")->capture_default_str();
  sub->add_option("--lambda", f.lambda, "gradient-correction strength")->capture_default_str();
  sub->add_option("--alpha", f.alpha, "footprint penalty exponent")->capture_default_str();
  sub->add_option("--lr", f.lr, "weight learning rate")->capture_default_str();
  sub->add_option("--lr-levels", f.lr_levels, "level learning rate (value space)")
      ->capture_default_str();
  sub->add_option("--lr-gates", f.lr_gates, "gate learning rate")->capture_default_str();
  sub->add_option("--batch-size", f.batch_size, "SGD batch size")->capture_default_str();
  sub->add_option("--momentum", f.momentum, "SGD momentum")->capture_default_str();
  sub->add_option("--weight-decay", f.weight_decay, "L2 weight decay")->capture_default_str();
  sub->add_option("--fixed-precision", f.fixed_precision,
                  "freeze every layer's gates at this bitwidth (0 keeps them learnable)")
      ->capture_default_str();
  sub->add_option("--granularity", f.granularity, "level granularity")
      ->check(CLI::IsMember({"layer", "channel"}))
      ->capture_default_str();
  sub->add_option("--quantize-activations", f.activations, "input-activation bits")
      ->check(CLI::IsMember({"4", "8", "off"}))
      ->capture_default_str();
  sub->add_option("--level-init", f.level_init, "level initialization")
      ->check(CLI::IsMember({"uniform", "pot"}))
      ->capture_default_str();
  sub->add_flag("--freeze-levels", f.freeze_levels, "keep quantization levels at their init");
  sub->add_flag("--float", f.use_float, "float baseline: bypass every quantizer");
  add_preset_flag(sub, f);
  add_out_flag(sub, f);
}

std::string trim(const std::string& s) {
  const std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

long long config_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw input_error("config: key " + key + " needs an integer, got \"" + v + "\"");
  }
}

double config_num(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw input_error("config: key " + key + " needs a number, got \"" + v + "\"");
  }
}

bool config_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw input_error("config: key " + key + " needs true or false, got \"" + v + "\"");
}

std::string config_choice(const std::string& key, const std::string& v,
                          const std::vector<std::string>& allowed) {
  for (const std::string& a : allowed)
    if (v == a) return v;
  throw input_error("config: key " + key + " got \"" + v + "\"");
}

/// Key=value lines, # comments. Keys are the long flag names. A value from
/// the file applies only when the same flag was not given on the command
/// line, so flags always win.
void apply_config_file(const CLI::App* sub, Flags& f) {
  std::ifstream in(f.config_path);
  if (!in) throw input_error("config: cannot open " + f.config_path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw input_error("config: line " + std::to_string(lineno) + " is not key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (sub->count("--" + key) > 0) continue;
    if (key == "seed") f.seed = static_cast<std::uint64_t>(config_int(key, val));
    else if (key == "epochs") f.epochs = static_cast<int>(config_int(key, val));
    else if (key == "target-bits") f.target_bits = static_cast<int>(config_int(key, val));
    else if (key == "max-bits") f.max_bits = static_cast<int>(config_int(key, val));
    else if (key == "bq") f.bq = static_cast<int>(config_int(key, val));
    else if (key == "lambda") f.lambda = config_num(key, val);
    else if (key == "alpha") f.alpha = config_num(key, val);
    else if (key == "lr") f.lr = config_num(key, val);
    else if (key == "lr-levels") f.lr_levels = config_num(key, val);
    else if (key == "lr-gates") f.lr_gates = config_num(key, val);
    else if (key == "batch-size") f.batch_size = static_cast<std::size_t>(config_int(key, val));
    else if (key == "momentum") f.momentum = config_num(key, val);
    else if (key == "weight-decay") f.weight_decay = config_num(key, val);
    else if (key == "fixed-precision") f.fixed_precision = static_cast<int>(config_int(key, val));
    else if (key == "granularity") f.granularity = config_choice(key, val, {"layer", "channel"});
    else if (key == "quantize-activations")
      f.activations = config_choice(key, val, {"4", "8", "off"});
    else if (key == "level-init") f.level_init = config_choice(key, val, {"uniform", "pot"});
    else if (key == "freeze-levels") f.freeze_levels = config_bool(key, val);
    else if (key == "float") f.use_float = config_bool(key, val);
    else if (key == "preset") f.preset = config_choice(key, val, {"smoke", "full"});
    else if (key == "out") f.out_dir = val;
    else throw input_error("config: unknown key " + key);
  }
}

TrainConfig to_config(const Flags& f) {
  TrainConfig c;
  c.epochs = f.epochs >= 0 ? f.epochs : (f.preset == "full" ? 3 : 1);
  c.batch_size = f.batch_size;
  c.lr_weights = f.lr;
  c.lr_levels = f.lr_levels;
  c.lr_gates = f.lr_gates;
  c.momentum = f.momentum;
  c.weight_decay = f.weight_decay;
  c.lambda = f.lambda;
  c.alpha = f.alpha;
  c.max_bits = f.max_bits;
  c.target_bits = f.target_bits;
  c.storage_bits = f.bq;
  c.seed = f.seed;
  c.granularity = f.granularity == "layer" ? Granularity::per_layer : Granularity::per_channel;
  c.act_bits = f.activations == "off" ? 0 : std::stoi(f.activations);
  c.fixed_precision = f.fixed_precision;
  c.train_levels = !f.freeze_levels;
  c.level_init = f.level_init == "pot" ? LevelInit::pot : LevelInit::uniform;
  c.bypass = f.use_float;
  validate(c);
  return c;
}

std::size_t preset_train_count(const std::string& preset) { return preset == "full" ? 4000 : 512; }
std::size_t preset_test_count(const std::string& preset) { return preset == "full" ? 1000 : 256; }

/// Synthetic data by default; an IDX pair under DDQ_DATA_DIR when set.
/// The held-out split uses seed + 1000003 so train and test never overlap.
Dataset resolve_data(bool train_split, std::size_t synth_count, std::uint64_t synth_seed) {
  const char* env = std::getenv("DDQ_DATA_DIR");
  if (env != nullptr && *env != '\0') return load_mnist(env, train_split);
  return make_synthetic(synth_count, synth_seed);
}

std::uint64_t test_seed(std::uint64_t seed) { return seed + 1000003; }

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw input_error("write_file: cannot open " + path.string());
  out << text;
  if (!out) throw input_error("write_file: short write to " + path.string());
}

std::string config_echo(const TrainConfig& c, const std::string& preset) {
  nlohmann::ordered_json j;
  j["preset"] = preset;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr_weights;
  j["lr_levels"] = c.lr_levels;
  j["lr_gates"] = c.lr_gates;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["lambda"] = c.lambda;
  j["alpha"] = c.alpha;
  j["max_bits"] = c.max_bits;
  j["target_bits"] = c.target_bits;
  j["bq"] = c.storage_bits;
  j["seed"] = c.seed;
  j["granularity"] = c.granularity == Granularity::per_layer ? "layer" : "channel";
  j["quantize_activations"] = c.act_bits;
  j["fixed_precision"] = c.fixed_precision;
  j["train_levels"] = c.train_levels;
  j["level_init"] = c.level_init == LevelInit::pot ? "pot" : "uniform";
  j["float"] = c.bypass;
  return j.dump();
}

int cmd_train(const Flags& f) {
  const TrainConfig c = to_config(f);
  const Dataset train_data = resolve_data(true, preset_train_count(f.preset), c.seed);
  TrainState state = train(c, train_data);
  fs::create_directories(f.out_dir);
  const fs::path out(f.out_dir);
  write_file(out / "metrics.csv", metrics_csv(state.net, state.log));
  write_file(out / "bits.csv", bits_csv(state.net, state.log));
  save_checkpoint(state.net, config_echo(c, f.preset), (out / "checkpoint.ddq").string());
  if (!state.log.empty()) {
    const StepMetrics& last = state.log.back();
    std::cout << "steps " << state.log.size() << " final_loss " << fmt(last.loss)
              << " zeta_ratio " << fmt(last.zeta_ratio) << "\n";
  }
  std::cout << "wrote " << (out / "checkpoint.ddq").string() << "\n";
  std::cout << "wrote " << (out / "metrics.csv").string() << "\n";
  std::cout << "wrote " << (out / "bits.csv").string() << "\n";
  return 0;
}

std::string sniff_magic(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw input_error("eval: cannot open " + path);
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (in.gcount() != 4) throw corrupt_model_error("eval: " + path + " is too short");
  return std::string(magic.data(), 4);
}

double packed_top1(const PackedModel& model, const Dataset& data) {
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.count; start += 64) {
    const std::size_t stop = std::min(data.count, start + 64);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = packed_forward(model, data.batch_images(idx));
    const std::size_t classes = logits.dim(1);
    const double* p = logits.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < classes; ++k)
        if (p[i * classes + k] > p[i * classes + best]) best = k;
      if (static_cast<int>(best) == data.labels[idx[i]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.count);
}

/// Packed models carry no training budget, so their ratio is packed bits
/// over storage-width bits (how far below the storage grid the model sits).
double packed_zeta(const PackedModel& model) {
  double storage_bits = 0.0;
  for (const PackedLayer& l : model.layers)
    storage_bits += static_cast<double>(l.weight_count()) * static_cast<double>(l.bq);
  return storage_bits > 0.0 ? packed_footprint_bits(model) / storage_bits : 1.0;
}

int cmd_eval(const std::string& path, bool json_out, const Flags& f) {
  const std::string magic = sniff_magic(path);
  Dataset test = resolve_data(false, preset_test_count(f.preset), test_seed(f.seed));
  if (test.count == 0) throw input_error("eval: dataset is empty");

  nlohmann::ordered_json j;
  if (magic == "DDQ1") {
    Checkpoint ck = load_checkpoint(path);
    const EvalReport r = evaluate(ck.net, test);
    j["top1"] = r.top1;
    j["zeta_ratio"] = r.zeta_ratio;
    j["mean_qerr"] = r.mean_qerr;
    j["layers"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ck.net.layers.size(); ++i) {
      nlohmann::ordered_json l;
      l["name"] = ck.net.layers[i].name;
      l["bits"] = r.bits[i];
      l["qerr"] = r.qerr[i];
      j["layers"].push_back(l);
    }
  } else if (magic == "DDQM") {
    const PackedModel model = load_model(path);
    j["top1"] = packed_top1(model, test);
    j["zeta_ratio"] = packed_zeta(model);
    j["mean_qerr"] = nullptr;
    j["layers"] = nlohmann::ordered_json::array();
    for (const PackedLayer& l : model.layers) {
      nlohmann::ordered_json e;
      e["name"] = l.name;
      e["bits"] = l.s;
      j["layers"].push_back(e);
    }
  } else {
    throw corrupt_model_error("eval: " + path + " has unknown magic");
  }

  if (json_out) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "top1 " << fmt(j["top1"].get<double>()) << "\n";
    std::cout << "mean_qerr " << (j["mean_qerr"].is_null() ? "-" : fmt(j["mean_qerr"].get<double>()))
              << "\n";
    std::cout << "zeta_ratio " << fmt(j["zeta_ratio"].get<double>()) << "\n";
  }
  return 0;
}

int cmd_export(const std::string& path, const Flags& f) {
  Checkpoint ck = load_checkpoint(path);
  fs::create_directories(f.out_dir);
  const fs::path out = fs::path(f.out_dir) / "model.ddqm";
  export_model_file(ck.net, out.string());
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

int cmd_inspect(const std::string& path, const Flags& f) {
  Checkpoint ck = load_checkpoint(path);
  fs::create_directories(f.out_dir);

  std::string hist = "layer,bin,lo,hi,count\n";
  for (const QuantLayer& l : ck.net.layers) {
    const std::vector<double>& v = l.w.values();
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it;
    const double width = (*hi_it - lo) / 64.0;
    std::array<std::size_t, 64> counts{};
    for (double x : v) {
      std::size_t bin = width > 0.0 ? static_cast<std::size_t>((x - lo) / width) : 0;
      counts[std::min<std::size_t>(bin, 63)] += 1;
    }
    for (std::size_t b = 0; b < 64; ++b)
      hist += l.name + "," + std::to_string(b) + "," + fmt(lo + static_cast<double>(b) * width) +
              "," + fmt(lo + static_cast<double>(b + 1) * width) + "," +
              std::to_string(counts[b]) + "\n";
  }
  write_file(fs::path(f.out_dir) / "histograms.csv", hist);

  std::string levels = "layer,index,value\n";
  for (const QuantLayer& l : ck.net.layers) {
    const std::vector<LevelSpec>& specs = l.weight_quant.specs;
    std::vector<std::vector<double>> per_spec;
    for (const LevelSpec& s : specs) per_spec.push_back(reparam_levels(s));
    const std::size_t n = per_spec.front().size();
    for (std::size_t k = 0; k < n; ++k) {
      double sum = 0.0;
      for (const std::vector<double>& q : per_spec) sum += q[k];
      levels += l.name + "," + std::to_string(k) + "," +
                fmt(sum / static_cast<double>(per_spec.size())) + "\n";
    }
  }
  write_file(fs::path(f.out_dir) / "levels.csv", levels);

  for (const QuantLayer& l : ck.net.layers)
    std::cout << l.name << " params " << l.w.size() << " bits " << l.effective_bits() << "\n";
  std::cout << "wrote " << (fs::path(f.out_dir) / "histograms.csv").string() << "\n";
  std::cout << "wrote " << (fs::path(f.out_dir) / "levels.csv").string() << "\n";
  return 0;
}

int cmd_ablate(const std::string& suite, const Flags& f) {
  const TrainConfig base = to_config(f);
  const Dataset train_data = resolve_data(true, preset_train_count(f.preset), base.seed);
  const Dataset test_data = resolve_data(false, preset_test_count(f.preset), test_seed(base.seed));
  const std::vector<AblationCell> cells = run_ablation_suite(suite, base, train_data, test_data);
  const std::string csv = ablation_csv(suite, cells);
  fs::create_directories(f.out_dir);
  write_file(fs::path(f.out_dir) / "ablation.csv", csv);
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"differentiable dynamic quantization toolkit"};
  app.require_subcommand(1);

  Flags train_flags, eval_flags, export_flags, inspect_flags, ablate_flags;
  std::string eval_path, export_path, inspect_path, suite;
  bool json_out = false;

  CLI::App* t = app.add_subcommand("train", "train a quantized net; writes checkpoint.ddq, metrics.csv, bits.csv");
  add_train_flags(t, train_flags);

  CLI::App* e = app.add_subcommand("eval", "evaluate a checkpoint (.ddq) or packed model (.ddqm)");
  e->add_option("artifact", eval_path, "checkpoint or packed model file")->required();
  e->add_flag("--json", json_out, "emit a JSON report");
  e->add_option("--seed", eval_flags.seed, "seed for the synthetic held-out set")
      ->capture_default_str();
  add_preset_flag(e, eval_flags);

  CLI::App* x = app.add_subcommand("export", "pack a checkpoint into a model.ddqm");
  x->add_option("checkpoint", export_path, "checkpoint file")->required();
  add_out_flag(x, export_flags);

  CLI::App* i = app.add_subcommand("inspect", "dump weight histograms and learned levels as CSV");
  i->add_option("checkpoint", inspect_path, "checkpoint file")->required();
  add_out_flag(i, inspect_flags);

  CLI::App* a = app.add_subcommand("ablate",
                                   "run a paired suite: adaptive-resolution, grad-correction, or mixed-precision");
  a->add_option("suite", suite, "suite name")->required();
  add_train_flags(a, ablate_flags);

  int rc = 0;
  t->callback([&] {
    if (!train_flags.config_path.empty()) apply_config_file(t, train_flags);
    rc = cmd_train(train_flags);
  });
  e->callback([&] { rc = cmd_eval(eval_path, json_out, eval_flags); });
  x->callback([&] { rc = cmd_export(export_path, export_flags); });
  i->callback([&] { rc = cmd_inspect(inspect_path, inspect_flags); });
  a->callback([&] {
    if (!ablate_flags.config_path.empty()) apply_config_file(a, ablate_flags);
    rc = cmd_ablate(suite, ablate_flags);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  } catch (const training_diverged_error& err) {
    std::cerr << "error: training diverged: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return rc;
}
