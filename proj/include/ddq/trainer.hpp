#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ddq/data.hpp"
#include "ddq/network.hpp"

namespace ddq {

enum class LevelInit { uniform, pot };

struct TrainConfig {
  int epochs = 3;
  std::size_t batch_size = 32;
  double lr_weights = 0.05;
  /// Value-space rate for level positions: a level value moves by
  /// lr_levels * (its pooled value-space gradient) per step, independent of
  /// the grid resolution. See update rule in train_step.
  double lr_levels = 1e-3;
  double lr_gates = 1e-8;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double lambda = 0.1;   // gradient-correction strength
  double alpha = -0.02;  // footprint penalty exponent
  int max_bits = 4;
  int target_bits = 4;
  int storage_bits = 8;
  std::uint64_t seed = 1;
  Granularity granularity = Granularity::per_channel;
  int act_bits = 8;         // 0 disables input-activation quantization
  int fixed_precision = 0;  // >0 freezes every gate set at that bitwidth
  bool train_levels = true;
  LevelInit level_init = LevelInit::uniform;
  bool bypass = false;  // float baseline: skip all quantizers
  int eval_every = 1;   // epochs between held-out evaluations (0 = never)
  std::string arch_json;   // declarative architecture; empty selects the desk net
  std::string warm_start;  // checkpoint whose float weights seed this run
};

/// Throws input_error on invalid settings (lr-gates must be positive,
/// max_bits >= target_bits, bit fields in range).
void validate(const TrainConfig& config);

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;        // task loss, before the footprint multiplier
  double multiplier = 1.0;  // footprint loss multiplier at this step
  double zeta_ratio = 1.0;  // actual/target footprint at this step
  std::vector<int> bits;    // per-layer effective bitwidth
  std::vector<double> qerr;  // per-layer ||W_q - W||^2
};

struct EvalReport {
  double top1 = 0.0;
  double mean_qerr = 0.0;
  double zeta_ratio = 1.0;
  std::vector<int> bits;
  std::vector<double> qerr;
};

struct TrainState {
  TrainConfig config;
  QuantNetwork net;
  std::vector<Tensor> params;  // float master weights and biases
  std::vector<SgdSlot> slots;
  std::size_t step = 0;
  std::vector<StepMetrics> log;
};

/// Builds the network described by the config (gate freezing, level init,
/// bypass) and fresh optimizer state.
TrainState make_train_state(const TrainConfig& config);

/// One optimization step: forward, task loss, footprint-scaled backward,
/// penalty gate gradients, then SGD on weights and plain SGD on levels and
/// gates. Metrics snapshot the pre-update state. Non-finite loss raises
/// training_diverged_error carrying the step index.
StepMetrics train_step(TrainState& state, const Tensor& images,
                       const std::vector<int>& labels);

using EpochCallback = std::function<void(TrainState&, int epoch)>;

/// Full loop: deterministic shuffling per epoch, callback after each epoch
/// (checkpointing hook). Returns the final state with its metric log.
TrainState train(const TrainConfig& config, const Dataset& train_data,
                 const EpochCallback& callback = {});

/// Top-1 accuracy plus quantization metrics on a held-out set. Never updates
/// activation ranges.
EvalReport evaluate(QuantNetwork& net, const Dataset& data, std::size_t batch_size = 64);

/// Copies float weights and biases from src into dst (shapes must match).
void copy_float_weights(QuantNetwork& dst, const QuantNetwork& src);

/// CSV with header step,loss,multiplier,zeta_ratio,<name>_bits...,<name>_qerr...
/// Doubles print with %.17g so equal logs are byte-equal files.
std::string metrics_csv(const QuantNetwork& net, const std::vector<StepMetrics>& log);

/// Bitwidth-evolution CSV: header step,<name>..., one row per step.
std::string bits_csv(const QuantNetwork& net, const std::vector<StepMetrics>& log);

/// One cell of an ablation table.
struct AblationCell {
  std::string cell;
  std::uint64_t seed = 0;
  bool diverged = false;
  double top1 = 0.0;
  double mean_qerr = 0.0;
  double zeta_ratio = 0.0;
};

/// Runs one paired suite: "adaptive-resolution" (uq / pot / ddq-fixed),
/// "grad-correction" (lambda-0 / lambda-default) or "mixed-precision"
/// (ddq-fixed / ddq-mixed). Diverged cells are recorded, not thrown.
/// Unknown suite -> input_error.
std::vector<AblationCell> run_ablation_suite(const std::string& suite,
                                             const TrainConfig& base,
                                             const Dataset& train_data,
                                             const Dataset& test_data);

/// CSV: suite,cell,seed,top1,mean_qerr,zeta_ratio with "-" in every value
/// column of a diverged cell.
std::string ablation_csv(const std::string& suite, const std::vector<AblationCell>& cells);

}  // namespace ddq
