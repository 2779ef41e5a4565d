#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "readpvla/backbone.hpp"
#include "readpvla/pot.hpp"

namespace readpvla {

enum class StrategyKind {
  kFull,
  kBias,
  kPartial,
  kProj,
  kLora,
  kPrompt,
  kAdapter,
  kRead,
};

const char* strategy_name(StrategyKind kind);
StrategyKind strategy_from_name(const std::string& name);
std::vector<StrategyKind> all_strategies();

struct FinetuneStrategy {
  StrategyKind kind = StrategyKind::kRead;
  std::size_t bottleneck = 4;   // adapter / read
  std::size_t rank = 4;         // lora
  std::size_t prompt_len = 8;   // prompt
  CellKind cell_kind = CellKind::kRnn;
};

enum class PvlaMode { kOff, kVla, kPvla };
const char* pvla_mode_name(PvlaMode mode);
PvlaMode pvla_mode_from_name(const std::string& name);

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 4;
  double learning_rate = 1e-2;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lambda_pvla = 1.0;
  PvlaMode pvla_mode = PvlaMode::kPvla;
  std::uint64_t seed = 0;
  SolverConfig solver;

  void validate() const;
};

// A backbone plus whatever strategy modules are attached to it.
struct FinetunedModel {
  Backbone backbone;
  FinetuneStrategy strategy;
  Attachments attachments;
};

// Inserts and initializes the modules the strategy needs (deterministic by
// seed); full/bias/partial/proj leave the attachments empty.
FinetunedModel attach_strategy(Backbone backbone, const FinetuneStrategy& strategy,
                               std::uint64_t seed);

// Names of the parameters the strategy trains, in visit order. Does not
// change any flags.
std::vector<std::string> trainable_names(FinetunedModel& model);

// Applies the mask: the named parameters become trainable, everything else
// is frozen for the run. Returns the mask names.
std::vector<std::string> select_trainable(FinetunedModel& model);

std::size_t total_param_count(FinetunedModel& model);

struct EpochMetrics {
  std::size_t epoch = 0;
  double task_loss = 0.0;
  double pvla_loss = 0.0;
  double total_loss = 0.0;
  double val_map = 0.0;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
};

std::string metrics_to_jsonl(const std::vector<EpochMetrics>& history);

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
};

// Joint objective: mean per-frame BCE plus lambda times the mean over blocks
// of the alignment loss between that block's video and language outputs.
TrainResult train_finetune(FinetunedModel& model, const Dataset& data,
                           const TrainConfig& cfg);

double evaluate_map(const FinetunedModel& model,
                    const std::vector<GroundingSample>& split);

struct ParamCountRow {
  StrategyKind kind;
  std::size_t trainable = 0;
  std::size_t total = 0;
  double fraction = 0.0;
};

// One row per strategy on a fresh backbone of this config, mirroring a
// trainable-parameter comparison table.
std::vector<ParamCountRow> param_count_table(const ModelConfig& cfg,
                                             const FinetuneStrategy& knobs);

// Full training loss at the current parameters with the transport plans held
// fixed; the gradient-check oracle differentiates exactly this quantity.
struct FrozenPlanLoss {
  std::vector<std::vector<TransportPlan>> plans;  // [sample][block]
  double value = 0.0;
};

FrozenPlanLoss capture_frozen_plan_loss(FinetunedModel& model,
                                        const std::vector<GroundingSample>& samples,
                                        const TrainConfig& cfg);
// Re-evaluates the same loss (same plans) after parameters changed.
double frozen_plan_loss_value(FinetunedModel& model,
                              const std::vector<GroundingSample>& samples,
                              const TrainConfig& cfg,
                              const FrozenPlanLoss& frozen);
// Backward pass of the loss at the capture point; leaf grads populated.
void frozen_plan_loss_backward(FinetunedModel& model,
                               const std::vector<GroundingSample>& samples,
                               const TrainConfig& cfg,
                               const FrozenPlanLoss& frozen);

}  // namespace readpvla
