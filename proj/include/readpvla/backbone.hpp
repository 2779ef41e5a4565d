#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "readpvla/adapters.hpp"
#include "readpvla/task_synth.hpp"
#include "readpvla/tensor.hpp"

namespace readpvla {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t num_blocks = 4;
  std::size_t num_heads = 4;
  std::size_t d_in_video = 768;
  std::size_t d_in_lang = 768;
  std::size_t adapters_per_block = 1;
  std::size_t max_video_len = 32;
  std::size_t max_lang_len = 24;

  void validate() const;
};

// One cross-modal block: language queries attend over video keys/values,
// then Add & Norm, a single-linear GELU feedforward, and a second Add & Norm.
struct Block {
  Tensor w_q, b_q, w_k, b_k, w_v, b_v;
  Tensor ln1_gain, ln1_bias;
  Tensor ff_w, ff_b;
  Tensor ln2_gain, ln2_bias;

  static Block create(std::size_t d);
  void visit(const std::string& prefix, const ParamVisitor& f);
};

struct Backbone {
  ModelConfig cfg;
  Tensor w_embed_video, b_embed_video;
  Tensor w_embed_lang, b_embed_lang;
  Tensor pos_video, pos_lang;  // learned additive positional tables
  std::vector<Block> blocks;
  Tensor w_head;  // bilinear frame-vs-pooled-language scoring
  Tensor b_head;  // scalar
  bool frozen = false;

  static Backbone create(const ModelConfig& cfg, std::uint64_t seed);
  void visit(const ParamVisitor& f);
  std::size_t param_count();
  std::string param_hash();
  void set_trainable(bool flag);
  void freeze();
};

// Per-block strategy modules. Which of these exist is the trainer's call;
// the forward pass applies whatever is present.
struct BlockAttachments {
  std::vector<ReadAdapter> read;              // applied to the FF output
  std::optional<PlainAdapter> attn_adapter;   // applied to the attention output
  std::optional<PlainAdapter> ff_adapter;     // applied to the FF output
  std::optional<LoraPatch> lora_q;
  std::optional<LoraPatch> lora_v;
};

struct Attachments {
  std::vector<BlockAttachments> per_block;
  std::size_t prompt_len = 0;
  Tensor prompt_video;  // prompt_len x d
  Tensor prompt_lang;

  bool empty() const;
  void visit(const ParamVisitor& f);
};

// Linear projections plus the learned positional rows for each index.
std::pair<Tensor, Tensor> embed(const Backbone& model, const Tensor& video_feats,
                                const Tensor& lang_feats);

// Multi-head cross attention with per-head scaling, Add & Norm, feedforward,
// optional adapters, Add & Norm. The video stream passes through unchanged.
Tensor cross_attention_block(const Tensor& h_l, const Tensor& h_v,
                             const Block& block, std::size_t num_heads,
                             const BlockAttachments* attach);

struct ForwardTrace {
  Tensor logits;  // n_frames x 1, prompt rows excluded
  // (H_V, H_L) after each block with prompt rows stripped; PVLA consumes these.
  std::vector<std::pair<Tensor, Tensor>> block_reps;
};

ForwardTrace forward_saliency(const Backbone& model, const GroundingSample& sample,
                              const Attachments* attach);

double evaluate_split_map(const Backbone& model,
                          const std::vector<GroundingSample>& split,
                          const Attachments* attach);

struct PretrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.01;
};

struct PretrainReport {
  double map_before = 0.0;
  double map_after = 0.0;
  std::vector<double> epoch_losses;
};

// Stand-in for a pre-trained checkpoint: random init, full fine-tuning on the
// synthetic source split with the task loss only, then every parameter frozen.
Backbone build_pretrained_backbone(const ModelConfig& cfg, const Dataset& source,
                                   std::uint64_t seed,
                                   const PretrainOptions& opts = {},
                                   PretrainReport* report = nullptr);

}  // namespace readpvla
