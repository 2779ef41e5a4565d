#include "readpvla/backbone.hpp"

#include <cmath>
#include <numeric>

#include "readpvla/errors.hpp"
#include "readpvla/optimizer.hpp"
#include "readpvla/rng.hpp"

namespace readpvla {

void ModelConfig::validate() const {
  if (d == 0 || num_blocks == 0 || num_heads == 0 || d_in_video == 0 ||
      d_in_lang == 0 || max_video_len == 0 || max_lang_len == 0) {
    throw ConfigError("model: all extents must be positive");
  }
  if (d % num_heads != 0) {
    throw ConfigError("model: hidden width " + std::to_string(d) +
                      " is not divisible by " + std::to_string(num_heads) +
                      " heads");
  }
}

Block Block::create(std::size_t d) {
  Block b;
  b.w_q = Tensor::zeros({d, d});
  b.b_q = Tensor::zeros({d});
  b.w_k = Tensor::zeros({d, d});
  b.b_k = Tensor::zeros({d});
  b.w_v = Tensor::zeros({d, d});
  b.b_v = Tensor::zeros({d});
  b.ln1_gain = Tensor::full({d}, 1.0);
  b.ln1_bias = Tensor::zeros({d});
  b.ff_w = Tensor::zeros({d, d});
  b.ff_b = Tensor::zeros({d});
  b.ln2_gain = Tensor::full({d}, 1.0);
  b.ln2_bias = Tensor::zeros({d});
  return b;
}

void Block::visit(const std::string& prefix, const ParamVisitor& f) {
  f(prefix + ".q.w", w_q, false);
  f(prefix + ".q.b", b_q, true);
  f(prefix + ".k.w", w_k, false);
  f(prefix + ".k.b", b_k, true);
  f(prefix + ".v.w", w_v, false);
  f(prefix + ".v.b", b_v, true);
  f(prefix + ".ln1.gain", ln1_gain, false);
  f(prefix + ".ln1.bias", ln1_bias, true);
  f(prefix + ".ff.w", ff_w, false);
  f(prefix + ".ff.b", ff_b, true);
  f(prefix + ".ln2.gain", ln2_gain, false);
  f(prefix + ".ln2.bias", ln2_bias, true);
}

Backbone Backbone::create(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Backbone model;
  model.cfg = cfg;
  model.w_embed_video = Tensor::zeros({cfg.d_in_video, cfg.d});
  model.b_embed_video = Tensor::zeros({cfg.d});
  model.w_embed_lang = Tensor::zeros({cfg.d_in_lang, cfg.d});
  model.b_embed_lang = Tensor::zeros({cfg.d});
  model.pos_video = Tensor::zeros({cfg.max_video_len, cfg.d});
  model.pos_lang = Tensor::zeros({cfg.max_lang_len, cfg.d});
  for (std::size_t m = 0; m < cfg.num_blocks; ++m)
    model.blocks.push_back(Block::create(cfg.d));
  model.w_head = Tensor::zeros({cfg.d, cfg.d});
  model.b_head = Tensor::zeros({1});

  Rng rng(seed);
  model.visit([&](const std::string& name, Tensor& t, bool is_bias) {
    if (is_bias) return;  // biases start at zero
    if (name.find("ln") != std::string::npos) return;  // gains stay 1
    double stddev;
    if (name.rfind("pos.", 0) == 0) {
      stddev = 0.02;
    } else {
      stddev = 1.0 / std::sqrt(static_cast<double>(t.rows()));
    }
    for (double& v : t.mutable_data()) v = rng.normal(0.0, stddev);
  });
  return model;
}

void Backbone::visit(const ParamVisitor& f) {
  f("embed.video.w", w_embed_video, false);
  f("embed.video.b", b_embed_video, true);
  f("embed.lang.w", w_embed_lang, false);
  f("embed.lang.b", b_embed_lang, true);
  f("pos.video", pos_video, false);
  f("pos.lang", pos_lang, false);
  for (std::size_t m = 0; m < blocks.size(); ++m)
    blocks[m].visit("block" + std::to_string(m), f);
  f("head.w", w_head, false);
  f("head.b", b_head, true);
}

std::size_t Backbone::param_count() {
  std::size_t total = 0;
  visit([&](const std::string&, Tensor& t, bool) { total += t.numel(); });
  return total;
}

std::string Backbone::param_hash() {
  // FNV-1a over the raw parameter bytes in visit order.
  std::uint64_t h = 1469598103934665603ull;
  visit([&](const std::string&, Tensor& t, bool) {
    for (double v : t.data()) {
      std::uint64_t bits;
      static_assert(sizeof(bits) == sizeof(v));
      __builtin_memcpy(&bits, &v, sizeof(bits));
      for (int byte = 0; byte < 8; ++byte) {
        h ^= (bits >> (8 * byte)) & 0xff;
        h *= 1099511628211ull;
      }
    }
  });
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void Backbone::set_trainable(bool flag) {
  visit([flag](const std::string&, Tensor& t, bool) { t.set_requires_grad(flag); });
}

void Backbone::freeze() {
  set_trainable(false);
  frozen = true;
}

bool Attachments::empty() const {
  if (prompt_len > 0) return false;
  for (const BlockAttachments& b : per_block) {
    if (!b.read.empty() || b.attn_adapter || b.ff_adapter || b.lora_q || b.lora_v)
      return false;
  }
  return true;
}

void Attachments::visit(const ParamVisitor& f) {
  for (std::size_t m = 0; m < per_block.size(); ++m) {
    const std::string prefix = "block" + std::to_string(m);
    BlockAttachments& b = per_block[m];
    for (std::size_t a = 0; a < b.read.size(); ++a)
      b.read[a].visit("read." + prefix + ".a" + std::to_string(a), f);
    if (b.attn_adapter) b.attn_adapter->visit("adapter." + prefix + ".attn", f);
    if (b.ff_adapter) b.ff_adapter->visit("adapter." + prefix + ".ff", f);
    if (b.lora_q) b.lora_q->visit("lora." + prefix + ".q", f);
    if (b.lora_v) b.lora_v->visit("lora." + prefix + ".v", f);
  }
  if (prompt_len > 0) {
    f("prompt.video", prompt_video, false);
    f("prompt.lang", prompt_lang, false);
  }
}

std::pair<Tensor, Tensor> embed(const Backbone& model, const Tensor& video_feats,
                                const Tensor& lang_feats) {
  const ModelConfig& cfg = model.cfg;
  if (video_feats.rank() != 2 || video_feats.cols() != cfg.d_in_video) {
    throw DimensionError("embed: video features " + shape_str(video_feats.shape()) +
                         " do not match configured width " +
                         std::to_string(cfg.d_in_video));
  }
  if (lang_feats.rank() != 2 || lang_feats.cols() != cfg.d_in_lang) {
    throw DimensionError("embed: language features " + shape_str(lang_feats.shape()) +
                         " do not match configured width " +
                         std::to_string(cfg.d_in_lang));
  }
  const std::size_t n_v = video_feats.rows(), n_l = lang_feats.rows();
  if (n_v > cfg.max_video_len || n_l > cfg.max_lang_len) {
    throw DimensionError("embed: sequence longer than the positional table (" +
                         std::to_string(n_v) + " frames, " + std::to_string(n_l) +
                         " tokens)");
  }
  const Tensor h_v = add(add_row_bias(matmul(video_feats, model.w_embed_video),
                                      model.b_embed_video),
                         slice_rows(model.pos_video, 0, n_v));
  const Tensor h_l = add(add_row_bias(matmul(lang_feats, model.w_embed_lang),
                                      model.b_embed_lang),
                         slice_rows(model.pos_lang, 0, n_l));
  return {h_v, h_l};
}

Tensor cross_attention_block(const Tensor& h_l, const Tensor& h_v,
                             const Block& block, std::size_t num_heads,
                             const BlockAttachments* attach) {
  const std::size_t d = block.w_q.rows();
  if (h_l.cols() != d || h_v.cols() != d) {
    throw DimensionError("block: inputs " + shape_str(h_l.shape()) + ", " +
                         shape_str(h_v.shape()) + " do not match width " +
                         std::to_string(d));
  }
  const Tensor w_q = attach && attach->lora_q
                         ? lora_effective_weight(block.w_q, *attach->lora_q)
                         : block.w_q;
  const Tensor w_v = attach && attach->lora_v
                         ? lora_effective_weight(block.w_v, *attach->lora_v)
                         : block.w_v;
  const Tensor q = add_row_bias(matmul(h_l, w_q), block.b_q);
  const Tensor k = add_row_bias(matmul(h_v, block.w_k), block.b_k);
  const Tensor v = add_row_bias(matmul(h_v, w_v), block.b_v);

  const std::size_t dh = d / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    const Tensor kh = slice_cols(k, h * dh, dh);
    const Tensor vh = slice_cols(v, h * dh, dh);
    const Tensor weights =
        softmax_rows(affine(matmul(qh, transpose(kh)), scale, 0.0));
    heads.push_back(matmul(weights, vh));
  }
  Tensor x = num_heads == 1 ? heads.front() : concat_cols(heads);
  if (attach && attach->attn_adapter) {
    x = plain_adapter_forward(*attach->attn_adapter, x);
  }
  const Tensor p = layer_norm(add(x, h_l), block.ln1_gain, block.ln1_bias, 1e-5);
  Tensor o = activation(Activation::kGelu,
                        add_row_bias(matmul(p, block.ff_w), block.ff_b));
  if (attach && attach->ff_adapter) {
    o = plain_adapter_forward(*attach->ff_adapter, o);
  }
  if (attach) {
    for (const ReadAdapter& adapter : attach->read) o = read_forward(adapter, o);
  }
  return layer_norm(add(o, p), block.ln2_gain, block.ln2_bias, 1e-5);
}

ForwardTrace forward_saliency(const Backbone& model, const GroundingSample& sample,
                              const Attachments* attach) {
  if (attach && !attach->per_block.empty() &&
      attach->per_block.size() != model.blocks.size()) {
    throw DimensionError("forward: attachments cover " +
                         std::to_string(attach->per_block.size()) +
                         " blocks, model has " +
                         std::to_string(model.blocks.size()));
  }
  auto [h_v_real, h_l_real] = embed(model, sample.video_feats, sample.lang_feats);
  const std::size_t n_v = sample.frames();

  Tensor h_v = h_v_real;
  Tensor h_l = h_l_real;
  std::size_t prompt = 0;
  if (attach && attach->prompt_len > 0) {
    prompt = attach->prompt_len;
    h_v = concat_rows({attach->prompt_video, h_v});
    h_l = concat_rows({attach->prompt_lang, h_l});
  }

  ForwardTrace trace;
  for (std::size_t m = 0; m < model.blocks.size(); ++m) {
    const BlockAttachments* ba =
        attach && !attach->per_block.empty() ? &attach->per_block[m] : nullptr;
    h_l = cross_attention_block(h_l, h_v, model.blocks[m], model.cfg.num_heads, ba);
    const Tensor h_v_view = prompt > 0 ? slice_rows(h_v, prompt, n_v) : h_v;
    const Tensor h_l_view =
        prompt > 0 ? slice_rows(h_l, prompt, sample.tokens()) : h_l;
    trace.block_reps.emplace_back(h_v_view, h_l_view);
  }

  const Tensor h_l_final = trace.block_reps.back().second;
  const Tensor pooled = mean_rows(h_l_final);                    // 1 x d
  const Tensor scored = matmul(prompt > 0 ? slice_rows(h_v, prompt, n_v) : h_v,
                               model.w_head);                    // n_v x d
  trace.logits = add_row_bias(matmul(scored, transpose(pooled)), model.b_head);
  return trace;
}

double evaluate_split_map(const Backbone& model,
                          const std::vector<GroundingSample>& split,
                          const Attachments* attach) {
  if (split.empty()) throw DataError("evaluate: empty split");
  double acc = 0.0;
  for (const GroundingSample& sample : split) {
    const ForwardTrace trace = forward_saliency(model, sample, attach);
    acc += average_precision(trace.logits.data(), sample.labels);
  }
  return acc / static_cast<double>(split.size());
}

Backbone build_pretrained_backbone(const ModelConfig& cfg, const Dataset& source,
                                   std::uint64_t seed,
                                   const PretrainOptions& opts,
                                   PretrainReport* report) {
  if (source.train.empty() || source.val.empty()) {
    throw DataError("pretrain: source dataset has an empty split");
  }
  Backbone model = Backbone::create(cfg, seed);
  model.set_trainable(true);

  PretrainReport local;
  local.map_before = evaluate_split_map(model, source.val, nullptr);

  AdamWConfig ocfg;
  ocfg.lr = opts.lr;
  ocfg.weight_decay = opts.weight_decay;
  AdamW optimizer(ocfg);
  model.visit([&](const std::string& name, Tensor& t, bool) {
    optimizer.add_param(name, t);
  });

  Rng shuffle_rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(source.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      optimizer.zero_grad();
      std::vector<Tensor> losses;
      for (std::size_t idx = start; idx < end; ++idx) {
        const GroundingSample& sample = source.train[order[idx]];
        const ForwardTrace trace = forward_saliency(model, sample, nullptr);
        losses.push_back(bce_with_logits_mean(trace.logits, sample.labels));
      }
      Tensor batch_loss = losses.front();
      for (std::size_t i = 1; i < losses.size(); ++i)
        batch_loss = add(batch_loss, losses[i]);
      batch_loss = affine(batch_loss, 1.0 / static_cast<double>(losses.size()), 0.0);
      const double loss_value = batch_loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("pretrain: task loss diverged at epoch " +
                           std::to_string(epoch));
      }
      backward(batch_loss);
      optimizer.step();
      epoch_loss += loss_value;
      ++batches;
    }
    local.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
  }

  local.map_after = evaluate_split_map(model, source.val, nullptr);
  model.freeze();
  if (report) *report = local;
  return model;
}

}  // namespace readpvla
