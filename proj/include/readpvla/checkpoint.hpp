#pragma once

#include <string>
#include <vector>

#include "readpvla/trainer.hpp"

namespace readpvla {

// Directory layout: manifest.json (strategy, hashes, model config, parameter
// names/shapes/offsets) plus params.bin of little-endian 64-bit reals.
// Adapter-like strategies serialize only their own parameters; `full`
// serializes the whole backbone.
void save_checkpoint(FinetunedModel& model, const std::string& dir);

// Restores named parameters bitwise after validating the whole manifest and
// blob against the model; on any mismatch the model is left untouched.
void load_checkpoint(FinetunedModel& model, const std::string& dir);

// Reads just the manifest: used to rebuild a compatible model before loading.
struct CheckpointHeader {
  ModelConfig model;
  FinetuneStrategy strategy;
  std::string backbone_hash;
};
CheckpointHeader read_checkpoint_header(const std::string& dir);

std::uintmax_t checkpoint_byte_size(const std::string& dir);

}  // namespace readpvla
