#include "readpvla/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "readpvla/errors.hpp"
#include "readpvla/optimizer.hpp"
#include "readpvla/rng.hpp"

namespace readpvla {

using nlohmann::json;

const char* strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::kFull: return "full";
    case StrategyKind::kBias: return "bias";
    case StrategyKind::kPartial: return "partial";
    case StrategyKind::kProj: return "proj";
    case StrategyKind::kLora: return "lora";
    case StrategyKind::kPrompt: return "prompt";
    case StrategyKind::kAdapter: return "adapter";
    case StrategyKind::kRead: return "read";
  }
  return "read";
}

StrategyKind strategy_from_name(const std::string& name) {
  for (StrategyKind kind : all_strategies()) {
    if (name == strategy_name(kind)) return kind;
  }
  throw ConfigError("unknown strategy '" + name +
                    "' (full|bias|partial|proj|lora|prompt|adapter|read)");
}

std::vector<StrategyKind> all_strategies() {
  return {StrategyKind::kFull,   StrategyKind::kBias,  StrategyKind::kPartial,
          StrategyKind::kProj,   StrategyKind::kLora,  StrategyKind::kPrompt,
          StrategyKind::kAdapter, StrategyKind::kRead};
}

const char* pvla_mode_name(PvlaMode mode) {
  switch (mode) {
    case PvlaMode::kOff: return "off";
    case PvlaMode::kVla: return "vla";
    case PvlaMode::kPvla: return "pvla";
  }
  return "pvla";
}

PvlaMode pvla_mode_from_name(const std::string& name) {
  if (name == "off") return PvlaMode::kOff;
  if (name == "vla") return PvlaMode::kVla;
  if (name == "pvla") return PvlaMode::kPvla;
  throw ConfigError("unknown pvla mode '" + name + "' (off|vla|pvla)");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("train: batch size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (lambda_pvla < 0.0) throw ConfigError("train: lambda_pvla must be >= 0");
  solver.validate();
}

FinetunedModel attach_strategy(Backbone backbone, const FinetuneStrategy& strategy,
                               std::uint64_t seed) {
  FinetunedModel model;
  model.backbone = std::move(backbone);
  model.strategy = strategy;
  const ModelConfig& cfg = model.backbone.cfg;
  Rng seeder(seed);

  switch (strategy.kind) {
    case StrategyKind::kRead: {
      model.attachments.per_block.resize(cfg.num_blocks);
      for (std::size_t m = 0; m < cfg.num_blocks; ++m) {
        for (std::size_t a = 0; a < cfg.adapters_per_block; ++a) {
          ReadAdapter adapter =
              ReadAdapter::create(cfg.d, strategy.bottleneck, strategy.cell_kind);
          init_adapter_params(adapter, seeder.raw());
          model.attachments.per_block[m].read.push_back(std::move(adapter));
        }
      }
      break;
    }
    case StrategyKind::kAdapter: {
      model.attachments.per_block.resize(cfg.num_blocks);
      for (std::size_t m = 0; m < cfg.num_blocks; ++m) {
        PlainAdapter attn = PlainAdapter::create(cfg.d, strategy.bottleneck);
        init_adapter_params(attn, seeder.raw());
        PlainAdapter ff = PlainAdapter::create(cfg.d, strategy.bottleneck);
        init_adapter_params(ff, seeder.raw());
        model.attachments.per_block[m].attn_adapter = std::move(attn);
        model.attachments.per_block[m].ff_adapter = std::move(ff);
      }
      break;
    }
    case StrategyKind::kLora: {
      model.attachments.per_block.resize(cfg.num_blocks);
      for (std::size_t m = 0; m < cfg.num_blocks; ++m) {
        LoraPatch q = LoraPatch::create(cfg.d, strategy.rank);
        init_adapter_params(q, seeder.raw());
        LoraPatch v = LoraPatch::create(cfg.d, strategy.rank);
        init_adapter_params(v, seeder.raw());
        model.attachments.per_block[m].lora_q = std::move(q);
        model.attachments.per_block[m].lora_v = std::move(v);
      }
      break;
    }
    case StrategyKind::kPrompt: {
      if (strategy.prompt_len == 0) {
        throw ConfigError("prompt strategy: prompt length must be positive");
      }
      model.attachments.prompt_len = strategy.prompt_len;
      Rng rng(seeder.raw());
      auto init_prompt = [&](std::size_t n) {
        std::vector<double> data(n * cfg.d);
        for (double& v : data) v = rng.normal(0.0, 0.1);
        return Tensor::from_data({n, cfg.d}, std::move(data));
      };
      model.attachments.prompt_video = init_prompt(strategy.prompt_len);
      model.attachments.prompt_lang = init_prompt(strategy.prompt_len);
      break;
    }
    default:
      break;  // full/bias/partial/proj train backbone subsets directly
  }
  return model;
}

namespace {

const char* strategy_param_prefix(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::kRead: return "read.";
    case StrategyKind::kAdapter: return "adapter.";
    case StrategyKind::kLora: return "lora.";
    case StrategyKind::kPrompt: return "prompt.";
    default: return nullptr;
  }
}

void visit_all(FinetunedModel& model, const ParamVisitor& f) {
  model.backbone.visit(f);
  model.attachments.visit(f);
}

}  // namespace

std::vector<std::string> trainable_names(FinetunedModel& model) {
  std::vector<std::string> names;
  const StrategyKind kind = model.strategy.kind;
  const std::string last_block =
      "block" + std::to_string(model.backbone.cfg.num_blocks - 1) + ".";
  if (const char* prefix = strategy_param_prefix(kind)) {
    model.attachments.visit([&](const std::string& name, Tensor&, bool) {
      if (name.rfind(prefix, 0) == 0) names.push_back(name);
    });
    if (names.empty()) {
      throw ConfigError(std::string("strategy '") + strategy_name(kind) +
                        "' requires modules that are not attached");
    }
    return names;
  }
  model.backbone.visit([&](const std::string& name, Tensor&, bool is_bias) {
    switch (kind) {
      case StrategyKind::kFull:
        names.push_back(name);
        break;
      case StrategyKind::kBias:
        if (is_bias) names.push_back(name);
        break;
      case StrategyKind::kPartial:
        if (name.rfind(last_block, 0) == 0) names.push_back(name);
        break;
      case StrategyKind::kProj:
        if (name.rfind("head.", 0) == 0) names.push_back(name);
        break;
      default:
        break;
    }
  });
  return names;
}

std::vector<std::string> select_trainable(FinetunedModel& model) {
  const std::vector<std::string> names = trainable_names(model);
  visit_all(model, [](const std::string&, Tensor& t, bool) {
    t.set_requires_grad(false);
  });
  visit_all(model, [&](const std::string& name, Tensor& t, bool) {
    if (std::find(names.begin(), names.end(), name) != names.end()) {
      t.set_requires_grad(true);
    }
  });
  return names;
}

std::size_t total_param_count(FinetunedModel& model) {
  std::size_t total = 0;
  visit_all(model, [&](const std::string&, Tensor& t, bool) { total += t.numel(); });
  return total;
}

namespace {

struct LossParts {
  Tensor total;
  Tensor task;
  Tensor pvla;
  bool has_pvla = false;
};

SolverConfig solver_for(const TrainConfig& cfg) {
  SolverConfig solver = cfg.solver;
  solver.mode = cfg.pvla_mode == PvlaMode::kVla ? TransportMode::kFull
                                                : TransportMode::kPartial;
  return solver;
}

Tensor mean_of(std::vector<Tensor> terms) {
  Tensor acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return affine(acc, 1.0 / static_cast<double>(terms.size()), 0.0);
}

// Builds the joint batch loss. With `fixed_plans`, the transport plans are
// taken as given instead of re-solved; with `captured`, the solved plans are
// recorded per sample and block.
LossParts build_batch_loss(FinetunedModel& model,
                           const std::vector<const GroundingSample*>& batch,
                           const TrainConfig& cfg,
                           const std::vector<std::vector<TransportPlan>>* fixed_plans,
                           std::vector<std::vector<TransportPlan>>* captured) {
  const SolverConfig solver = solver_for(cfg);
  const bool with_pvla = cfg.pvla_mode != PvlaMode::kOff;
  std::vector<Tensor> task_terms;
  std::vector<Tensor> pvla_terms;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const GroundingSample& sample = *batch[s];
    const ForwardTrace trace =
        forward_saliency(model.backbone, sample, &model.attachments);
    task_terms.push_back(bce_with_logits_mean(trace.logits, sample.labels));
    if (!with_pvla) continue;
    std::vector<Tensor> block_terms;
    std::vector<TransportPlan> plans_row;
    for (std::size_t m = 0; m < trace.block_reps.size(); ++m) {
      const auto& [h_v, h_l] = trace.block_reps[m];
      if (fixed_plans) {
        const TransportPlan& plan = (*fixed_plans)[s][m];
        const Tensor cost = cosine_cost(h_v, h_l);
        const Tensor plan_const =
            Tensor::from_data({plan.n_rows, plan.n_cols}, plan.values);
        block_terms.push_back(sum_all(mul(cost, plan_const)));
      } else {
        PvlaResult res = pvla_loss(h_v, h_l, solver);
        block_terms.push_back(res.loss);
        if (captured) plans_row.push_back(std::move(res.plan));
      }
    }
    pvla_terms.push_back(mean_of(std::move(block_terms)));
    if (captured) captured->push_back(std::move(plans_row));
  }

  LossParts parts;
  parts.task = mean_of(std::move(task_terms));
  if (with_pvla) {
    parts.pvla = mean_of(std::move(pvla_terms));
    parts.total = add(parts.task, affine(parts.pvla, cfg.lambda_pvla, 0.0));
    parts.has_pvla = true;
  } else {
    parts.pvla = Tensor::scalar(0.0);
    parts.total = parts.task;
  }
  return parts;
}

void require_finite_loss(const LossParts& parts) {
  if (!std::isfinite(parts.task.item())) {
    throw NumericError("train: task loss is non-finite");
  }
  if (!std::isfinite(parts.pvla.item())) {
    throw NumericError("train: alignment loss is non-finite");
  }
}

}  // namespace

TrainResult train_finetune(FinetunedModel& model, const Dataset& data,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty() || data.val.empty()) {
    throw DataError("train: dataset has an empty split");
  }
  select_trainable(model);

  TrainResult result;
  result.total_params = total_param_count(model);
  AdamWConfig ocfg;
  ocfg.lr = cfg.learning_rate;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.beta1 = cfg.beta1;
  ocfg.beta2 = cfg.beta2;
  AdamW optimizer(ocfg);
  std::size_t trainable = 0;
  visit_all(model, [&](const std::string& name, Tensor& t, bool) {
    if (t.requires_grad()) {
      optimizer.add_param(name, t);
      trainable += t.numel();
    }
  });
  result.trainable_params = trainable;

  Rng order_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4full);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double task_sum = 0.0, pvla_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const GroundingSample*> batch;
      for (std::size_t i = start; i < end; ++i)
        batch.push_back(&data.train[order[i]]);
      optimizer.zero_grad();
      const LossParts parts = build_batch_loss(model, batch, cfg, nullptr, nullptr);
      require_finite_loss(parts);
      backward(parts.total);
      optimizer.step();
      task_sum += parts.task.item();
      pvla_sum += parts.pvla.item();
      ++batches;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.task_loss = task_sum / static_cast<double>(batches);
    m.pvla_loss = pvla_sum / static_cast<double>(batches);
    m.total_loss = m.task_loss + cfg.lambda_pvla * m.pvla_loss;
    m.val_map = evaluate_map(model, data.val);
    m.trainable_params = trainable;
    m.total_params = result.total_params;
    result.history.push_back(m);
  }
  return result;
}

double evaluate_map(const FinetunedModel& model,
                    const std::vector<GroundingSample>& split) {
  return evaluate_split_map(model.backbone, split, &model.attachments);
}

std::string metrics_to_jsonl(const std::vector<EpochMetrics>& history) {
  std::ostringstream out;
  for (const EpochMetrics& m : history) {
    json line;
    line["epoch"] = m.epoch;
    line["task_loss"] = m.task_loss;
    line["pvla_loss"] = m.pvla_loss;
    line["total_loss"] = m.total_loss;
    line["val_map"] = m.val_map;
    line["trainable_params"] = m.trainable_params;
    line["total_params"] = m.total_params;
    out << line.dump() << "\n";
  }
  return out.str();
}

std::vector<ParamCountRow> param_count_table(const ModelConfig& cfg,
                                             const FinetuneStrategy& knobs) {
  std::vector<ParamCountRow> rows;
  for (StrategyKind kind : all_strategies()) {
    FinetuneStrategy strategy = knobs;
    strategy.kind = kind;
    FinetunedModel model =
        attach_strategy(Backbone::create(cfg, 0), strategy, /*seed=*/1);
    ParamCountRow row;
    row.kind = kind;
    row.total = total_param_count(model);
    const std::vector<std::string> names = trainable_names(model);
    visit_all(model, [&](const std::string& n, Tensor& t, bool) {
      if (std::find(names.begin(), names.end(), n) != names.end()) {
        row.trainable += t.numel();
      }
    });
    row.fraction =
        static_cast<double>(row.trainable) / static_cast<double>(row.total);
    rows.push_back(row);
  }
  return rows;
}

FrozenPlanLoss capture_frozen_plan_loss(FinetunedModel& model,
                                        const std::vector<GroundingSample>& samples,
                                        const TrainConfig& cfg) {
  std::vector<const GroundingSample*> batch;
  for (const GroundingSample& s : samples) batch.push_back(&s);
  FrozenPlanLoss frozen;
  const LossParts parts =
      build_batch_loss(model, batch, cfg, nullptr, &frozen.plans);
  frozen.value = parts.total.item();
  return frozen;
}

double frozen_plan_loss_value(FinetunedModel& model,
                              const std::vector<GroundingSample>& samples,
                              const TrainConfig& cfg,
                              const FrozenPlanLoss& frozen) {
  std::vector<const GroundingSample*> batch;
  for (const GroundingSample& s : samples) batch.push_back(&s);
  const LossParts parts =
      build_batch_loss(model, batch, cfg, &frozen.plans, nullptr);
  return parts.total.item();
}

void frozen_plan_loss_backward(FinetunedModel& model,
                               const std::vector<GroundingSample>& samples,
                               const TrainConfig& cfg,
                               const FrozenPlanLoss& frozen) {
  std::vector<const GroundingSample*> batch;
  for (const GroundingSample& s : samples) batch.push_back(&s);
  const LossParts parts =
      build_batch_loss(model, batch, cfg, &frozen.plans, nullptr);
  backward(parts.total);
}

}  // namespace readpvla
