#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "readpvla/tensor.hpp"

namespace readpvla {

// One synthetic grounding instance: frame features, query token features,
// and a single contiguous highlight span marked per frame.
struct GroundingSample {
  Tensor video_feats;          // n_frames x video_width
  Tensor lang_feats;           // n_tokens x lang_width
  std::vector<double> labels;  // n_frames entries in {0,1}

  std::size_t frames() const { return video_feats.rows(); }
  std::size_t tokens() const { return lang_feats.rows(); }
};

struct DatasetSpec {
  std::uint64_t seed = 7;
  std::size_t n_train = 40;  // low-resource default
  std::size_t n_val = 200;
  std::size_t n_test = 200;
  std::size_t min_frames = 8;
  std::size_t max_frames = 12;
  std::size_t min_tokens = 4;
  std::size_t max_tokens = 6;
  std::size_t concept_dim = 16;
  std::size_t video_width = 768;
  std::size_t lang_width = 768;
  double noise_sigma = 0.3;
  std::size_t min_span = 2;
  std::size_t max_span = 5;

  void validate() const;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<GroundingSample> train;
  std::vector<GroundingSample> val;
  std::vector<GroundingSample> test;
};

// Deterministic generation: a concept vector is rendered into frame space
// and (through a correlated projection) into token space; in-span frames and
// query tokens carry the concept, the rest carry distractors.
Dataset generate_dataset(const DatasetSpec& spec);

// Frame-level average precision with descending-score ranking; ties broken
// by the lower index.
double average_precision(const std::vector<double>& scores,
                         const std::vector<double>& labels);

// Directory layout: header.json plus per-split little-endian float32 feature
// blobs and one byte per label.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace readpvla
