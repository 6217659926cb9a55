#include "ddq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>

#include "ddq/checkpoint.hpp"
#include "ddq/errors.hpp"

namespace ddq {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double footprint_ratio(const QuantNetwork& net) {
  const double target = zeta_target(net);
  if (target <= 0.0) return 1.0;  // all layers bypassed: no budget in play
  return zeta_actual(net) / target;
}

void freeze_gates(DdqQuantizer& q, int bits) {
  for (int i = 0; i < q.gates.bits(); ++i) q.gates.g_hat[i] = i < bits ? 0.5 : -0.5;
  q.gates.trainable = false;
}

void apply_level_init(DdqQuantizer& q, LevelInit init) {
  if (init != LevelInit::pot) return;
  for (LevelSpec& spec : q.specs) {
    const std::vector<double> pot = pot_levels(spec.max_bits, 1.0, 0.5);
    const double top = static_cast<double>((1u << spec.max_bits) - 1u);
    for (std::size_t k = 0; k < spec.q_tilde.size(); ++k) spec.q_tilde[k] = pot[k] * top;
  }
}

/// Plain SGD on q_tilde with the grid-to-value chain factor divided out
/// twice, so a level's value moves by lr * (value-space gradient): the rate
/// a level needs to track its assigned weights regardless of resolution.
void update_levels(DdqQuantizer& q, double lr) {
  for (std::size_t c = 0; c < q.specs.size(); ++c) {
    LevelSpec& spec = q.specs[c];
    if (spec.x_max - spec.x_min <= 1e-5) continue;  // widened constant span
    if (q.grad_q_tilde.size() <= c) continue;
    const double step = spec.step_scale();
    const double scale = lr / (step * step);
    for (std::size_t k = 0; k < spec.q_tilde.size(); ++k)
      spec.q_tilde[k] -= scale * q.grad_q_tilde[c][k];
  }
}

void update_gates(DdqQuantizer& q, double lr) {
  if (!q.gates.trainable) return;
  if (q.grad_g_hat.size() != static_cast<std::size_t>(q.gates.bits())) return;
  const std::vector<double> saved = q.gates.g_hat;
  for (int i = 0; i < q.gates.bits(); ++i) q.gates.g_hat[i] -= lr * q.grad_g_hat[i];
  // Rate limit: a layer's allocation changes at most one bit per step. Gates
  // sit close to the flip boundary, so an unrestricted step can toggle
  // several at once and make the footprint jump erratically. Keep only the
  // hardest-pushed flip and hold the rest at their previous sign.
  std::vector<int> crossed;
  for (int i = 0; i < q.gates.bits(); ++i)
    if ((saved[i] > 0.0) != (q.gates.g_hat[i] > 0.0)) crossed.push_back(i);
  if (crossed.size() > 1) {
    int keep = crossed.front();
    for (int i : crossed)
      if (std::abs(q.gates.g_hat[i] - saved[i]) > std::abs(q.gates.g_hat[keep] - saved[keep]))
        keep = i;
    for (int i : crossed)
      if (i != keep) q.gates.g_hat[i] = saved[i];
  }
  // A layer with every gate off carries a single level and is degenerate;
  // keep at least one bit alive.
  if (q.gates.effective_bits() == 0) q.gates.g_hat[0] = 1e-8;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Fisher-Yates with explicit arithmetic: identical order on every platform.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace

void validate(const TrainConfig& c) {
  if (!(c.lr_gates > 0.0)) throw input_error("validate: lr-gates must be positive");
  if (c.max_bits < c.target_bits)
    throw input_error("validate: max_bits " + std::to_string(c.max_bits) +
                      " below target_bits " + std::to_string(c.target_bits));
  if (c.max_bits < 1 || c.max_bits > 8)
    throw input_error("validate: max_bits must be in [1, 8]");
  if (c.target_bits < 1) throw input_error("validate: target_bits must be positive");
  if (c.storage_bits < c.max_bits || c.storage_bits > 16)
    throw input_error("validate: storage_bits must be in [max_bits, 16]");
  if (c.act_bits < 0 || c.act_bits > 8)
    throw input_error("validate: act_bits must be in [0, 8]");
  if (c.fixed_precision < 0 || c.fixed_precision > c.max_bits)
    throw input_error("validate: fixed-precision must be in [0, max_bits]");
  if (c.epochs < 0) throw input_error("validate: epochs must be non-negative");
  if (c.batch_size == 0) throw input_error("validate: batch size must be positive");
  if (c.eval_every < 0) throw input_error("validate: eval cadence must be non-negative");
}

TrainState make_train_state(const TrainConfig& config) {
  validate(config);
  NetOptions opt;
  opt.max_bits = config.max_bits;
  opt.storage_bits = config.storage_bits;
  opt.lambda = config.lambda;
  opt.granularity = config.granularity;
  opt.act_bits = config.act_bits;
  opt.bypass = config.bypass;
  opt.target_bits = config.target_bits;
  opt.alpha = config.alpha;

  TrainState state;
  state.config = config;
  state.net = config.arch_json.empty() ? make_desk_net(config.seed, opt)
                                       : network_from_config(config.arch_json, config.seed, opt);
  for (QuantLayer& l : state.net.layers) {
    if (config.fixed_precision > 0) freeze_gates(l.weight_quant, config.fixed_precision);
    if (!config.train_levels) {
      l.weight_quant.train_levels = false;
      l.act_quant.train_levels = false;
    }
    apply_level_init(l.weight_quant, config.level_init);
  }
  if (!config.warm_start.empty()) {
    const Checkpoint ck = load_checkpoint(config.warm_start);
    copy_float_weights(state.net, ck.net);
  }
  state.params = state.net.float_params();
  state.slots.resize(state.params.size());
  return state;
}

StepMetrics train_step(TrainState& state, const Tensor& images,
                       const std::vector<int>& labels) {
  QuantNetwork& net = state.net;
  for (Tensor& p : state.params) p.zero_grad();
  for (QuantLayer& l : net.layers) {
    l.weight_quant.zero_param_grads();
    if (l.quantize_input) l.act_quant.zero_param_grads();
  }

  Tape tape;
  Tensor task;
  try {
    Tensor logits = net.forward(tape, images, true);
    task = softmax_cross_entropy(tape, logits, labels);
  } catch (const nonfinite_input_error& e) {
    // Exploding weights or activations hit the quantizers before the loss.
    throw training_diverged_error(
        std::string("train_step: ") + e.what() + " at step " + std::to_string(state.step),
        static_cast<std::int64_t>(state.step));
  }
  const double task_value = task.item();
  if (!std::isfinite(task_value))
    throw training_diverged_error(
        "train_step: non-finite loss at step " + std::to_string(state.step),
        static_cast<std::int64_t>(state.step));

  double multiplier = 1.0;
  Tensor total = constrained_loss(tape, task, net, &multiplier);
  tape.backward(total);
  add_penalty_gate_gradients(net, task_value, multiplier);

  StepMetrics m;
  m.step = state.step;
  m.loss = task_value;
  m.multiplier = multiplier;
  m.zeta_ratio = footprint_ratio(net);
  m.bits = net.bitwidths();
  m.qerr = net.layer_qerrs();

  sgd_step(state.params, state.slots, state.config.lr_weights, state.config.momentum,
           state.config.weight_decay);
  for (QuantLayer& l : net.layers) {
    if (l.bypass) continue;
    if (l.weight_quant.train_levels) update_levels(l.weight_quant, state.config.lr_levels);
    // Gates move only while the model is over budget: the bitwidth controller
    // exists to meet the memory constraint, and once it is satisfied the
    // allocation is final. A flip that lands further below the budget than
    // the model currently sits above it trades accuracy for nothing, so such
    // crossings are rejected; the footprint then settles just around 1.0.
    const double before = footprint_ratio(net);
    if (before > 1.0 && l.weight_quant.gates.trainable) {
      const std::vector<double> saved = l.weight_quant.gates.g_hat;
      update_gates(l.weight_quant, state.config.lr_gates);
      const double after = footprint_ratio(net);
      if (after < 1.0 && (1.0 - after) > 0.9 * (before - 1.0))
        l.weight_quant.gates.g_hat = saved;
    }
    if (l.quantize_input && l.act_quant.train_levels)
      update_levels(l.act_quant, state.config.lr_levels);
  }

  state.log.push_back(m);
  ++state.step;
  return m;
}

TrainState train(const TrainConfig& config, const Dataset& train_data,
                 const EpochCallback& callback) {
  if (train_data.count == 0) throw input_error("train: empty dataset");
  TrainState state = make_train_state(config);
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = shuffled_indices(train_data.count, shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(stop));
      train_step(state, train_data.batch_images(batch), train_data.batch_labels(batch));
    }
    if (callback) callback(state, epoch);
  }
  return state;
}

EvalReport evaluate(QuantNetwork& net, const Dataset& data, std::size_t batch_size) {
  if (data.count == 0) throw input_error("evaluate: empty dataset");
  if (batch_size == 0) throw input_error("evaluate: batch size must be positive");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.count; start += batch_size) {
    const std::size_t stop = std::min(data.count, start + batch_size);
    std::vector<std::size_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    Tape tape;
    Tensor logits = net.forward(tape, data.batch_images(idx), false);
    const std::size_t classes = logits.dim(1);
    const double* p = logits.data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (p[i * classes + c] > p[i * classes + best]) best = c;
      if (static_cast<int>(best) == data.labels[idx[i]]) ++correct;
    }
  }
  EvalReport report;
  report.top1 = static_cast<double>(correct) / static_cast<double>(data.count);
  report.zeta_ratio = footprint_ratio(net);
  report.bits = net.bitwidths();
  report.qerr = net.layer_qerrs();
  double sum = 0.0;
  std::size_t quantized = 0;
  for (const QuantLayer& l : net.layers)
    if (!l.bypass) {
      sum += l.last_qerr;
      ++quantized;
    }
  report.mean_qerr = quantized ? sum / static_cast<double>(quantized) : 0.0;
  return report;
}

void copy_float_weights(QuantNetwork& dst, const QuantNetwork& src) {
  if (dst.layers.size() != src.layers.size())
    throw input_error("copy_float_weights: layer count mismatch");
  for (std::size_t i = 0; i < dst.layers.size(); ++i) {
    QuantLayer& a = dst.layers[i];
    const QuantLayer& b = src.layers[i];
    if (a.w.size() != b.w.size() || a.bias.size() != b.bias.size())
      throw input_error("copy_float_weights: shape mismatch at layer " + a.name);
    std::copy_n(b.w.data(), b.w.size(), a.w.data());
    std::copy_n(b.bias.data(), b.bias.size(), a.bias.data());
  }
}

std::string metrics_csv(const QuantNetwork& net, const std::vector<StepMetrics>& log) {
  std::string out = "step,loss,multiplier,zeta_ratio";
  for (const QuantLayer& l : net.layers) out += "," + l.name + "_bits";
  for (const QuantLayer& l : net.layers) out += "," + l.name + "_qerr";
  out += "\n";
  for (const StepMetrics& m : log) {
    out += std::to_string(m.step);
    out += "," + fmt(m.loss) + "," + fmt(m.multiplier) + "," + fmt(m.zeta_ratio);
    for (int b : m.bits) out += "," + std::to_string(b);
    for (double q : m.qerr) out += "," + fmt(q);
    out += "\n";
  }
  return out;
}

std::string bits_csv(const QuantNetwork& net, const std::vector<StepMetrics>& log) {
  std::string out = "step";
  for (const QuantLayer& l : net.layers) out += "," + l.name;
  out += "\n";
  for (const StepMetrics& m : log) {
    out += std::to_string(m.step);
    for (int b : m.bits) out += "," + std::to_string(b);
    out += "\n";
  }
  return out;
}

std::vector<AblationCell> run_ablation_suite(const std::string& suite,
                                             const TrainConfig& base,
                                             const Dataset& train_data,
                                             const Dataset& test_data) {
  std::vector<std::pair<std::string, TrainConfig>> cells;
  if (suite == "adaptive-resolution") {
    TrainConfig uq = base;
    uq.fixed_precision = base.max_bits;
    uq.train_levels = false;
    uq.level_init = LevelInit::uniform;
    uq.lambda = 0.0;
    TrainConfig pot = uq;
    pot.level_init = LevelInit::pot;
    TrainConfig fixed = base;
    fixed.fixed_precision = base.max_bits;
    cells = {{"uq", uq}, {"pot", pot}, {"ddq-fixed", fixed}};
  } else if (suite == "grad-correction") {
    TrainConfig off = base;
    off.fixed_precision = base.max_bits;
    off.lambda = 0.0;
    TrainConfig on = base;
    on.fixed_precision = base.max_bits;
    cells = {{"lambda-0", off}, {"lambda-default", on}};
  } else if (suite == "mixed-precision") {
    TrainConfig fixed = base;
    fixed.max_bits = base.target_bits;
    fixed.fixed_precision = base.target_bits;
    TrainConfig mixed = base;
    cells = {{"ddq-fixed", fixed}, {"ddq-mixed", mixed}};
  } else {
    throw input_error("run_ablation_suite: unknown suite " + suite);
  }

  std::vector<AblationCell> out;
  for (auto& [name, config] : cells) {
    AblationCell cell;
    cell.cell = name;
    cell.seed = config.seed;
    try {
      TrainState state = train(config, train_data);
      const EvalReport report = evaluate(state.net, test_data);
      cell.top1 = report.top1;
      cell.mean_qerr = report.mean_qerr;
      cell.zeta_ratio = report.zeta_ratio;
    } catch (const training_diverged_error&) {
      cell.diverged = true;
    }
    out.push_back(std::move(cell));
  }
  return out;
}

std::string ablation_csv(const std::string& suite, const std::vector<AblationCell>& cells) {
  std::string out = "suite,cell,seed,top1,mean_qerr,zeta_ratio\n";
  for (const AblationCell& c : cells) {
    out += suite + "," + c.cell + "," + std::to_string(c.seed);
    if (c.diverged) {
      out += ",-,-,-\n";
    } else {
      out += "," + fmt(c.top1) + "," + fmt(c.mean_qerr) + "," + fmt(c.zeta_ratio) + "\n";
    }
  }
  return out;
}

}  // namespace ddq
