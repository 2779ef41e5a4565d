#pragma once

#include <string>
#include <vector>

#include "readpvla/task_synth.hpp"
#include "readpvla/trainer.hpp"

namespace readpvla {

// Everything a run needs, resolved from defaults < preset < config file <
// flags (READ_PVLA_SEED fills the seed default).
struct RunConfig {
  DatasetSpec dataset;
  ModelConfig model;
  TrainConfig train;
  FinetuneStrategy strategy;
  std::string preset;

  std::string data_dir;
  std::string out_dir;
  std::string backbone_dir;
  std::string checkpoint_dir;
  std::string split = "val";

  std::size_t pretrain_epochs = 20;
  std::size_t pretrain_batch = 8;
  double pretrain_lr = 1e-3;

  std::string to_json() const;
};

// Named hyperparameter bundles; "desk" is the default small stand-in.
std::vector<std::string> preset_names();
void apply_preset(RunConfig& cfg, const std::string& name);

// Exit codes: 0 success, 1 validation/usage error, 2 numeric failure.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, const char* const* argv);

}  // namespace readpvla
