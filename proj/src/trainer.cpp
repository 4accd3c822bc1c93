#include "vqg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "vqg/errors.hpp"

namespace vqg {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ValidationError("batch_size must be positive");
  if (hidden == 0) throw ValidationError("hidden must be positive");
  if (!(learning_rate >= 0.0) || !(late_learning_rate >= 0.0)) {
    throw ValidationError("learning rates must be non-negative");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
      !(adam.epsilon > 0.0)) {
    throw ValidationError("adam: betas must lie in [0, 1) and epsilon must be positive");
  }
  loss.validate();
  wsqg.validate();
}

double TrainConfig::rate_for_epoch(std::size_t epoch) const {
  return epoch > lr_drop_epoch ? late_learning_rate : learning_rate;
}

nlohmann::json to_json(const EpochLog& log) {
  nlohmann::json j = {{"epoch", log.epoch},
                      {"learning_rate", log.learning_rate},
                      {"loss_qa", log.qa},
                      {"loss_total", log.total}};
  if (log.span) j["loss_span"] = *log.span;
  if (log.self) j["loss_self"] = *log.self;
  return j;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(const ModelParams& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& [name, v] : params.named()) {
    m_[name].assign(v.data().size(), 0.0);
    v_[name].assign(v.data().size(), 0.0);
  }
}

void Adam::step(ModelParams& params, double learning_rate, double grad_scale) {
  ++t_;
  const double t = static_cast<double>(t_);
  const double correction1 = 1.0 - std::pow(cfg_.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg_.beta2, t);
  for (auto& [name, param] : params.named()) {
    if (!param.has_grad()) continue;
    const Tensor grad = param.grad();
    Tensor& w = param.leaf_data();
    auto& m = m_.at(name);
    auto& v = v_.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grad_scale * grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      w[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Losses per instance

Value instance_loss(const Instance& inst, const ModelParams& params,
                    SupervisionSetting setting, const TrainConfig& cfg,
                    InstanceLoss* parts) {
  const SupervisionPattern active = pattern_of(setting);
  const double eps = cfg.loss.epsilon;
  const FeatureBundle bundle = encode(inst.features, params);
  const UpperOutput upper = upper_forward(bundle, params, cfg.model);
  const std::size_t gt = inst.qa.gt_index;

  Value qa = loss_qa(upper.answer_scores, gt, eps);
  Value span;
  Value self;
  if (active.span) {
    if (!inst.qa.gt_span) {
      throw ValidationError("instance '" + inst.id + "' has no gt_span");
    }
    const SpanDistributions dist = predict_span(select(upper.weighted, gt), params);
    span = loss_span(dist.p_st, dist.p_ed, *inst.qa.gt_span, eps);
  }
  if (active.self) {
    self = loss_self(fs_branch_forward(bundle, params, cfg.model), inst.proposal_masks, eps);
  }
  Value total = total_loss(qa, span, self, cfg.loss, setting);
  if (parts) {
    parts->qa = qa.item();
    parts->span = span.defined() ? std::optional(span.item()) : std::nullopt;
    parts->self = self.defined() ? std::optional(self.item()) : std::nullopt;
    parts->total = total.item();
  }
  return total;
}

ModelDims dims_for(const std::vector<Instance>& data, std::size_t hidden) {
  if (data.empty()) throw ValidationError("dataset is empty");
  return ModelDims{data.front().video.dim(2), data.front().hypotheses.dim(2), hidden};
}

void check_trainable(const std::vector<Instance>& data, SupervisionSetting setting) {
  if (data.empty()) throw ValidationError("dataset is empty");
  const ModelDims dims = dims_for(data, 1);
  for (const auto& inst : data) {
    if (inst.video.dim(2) != dims.raw_video || inst.hypotheses.dim(2) != dims.raw_text) {
      throw ValidationError("instance '" + inst.id + "' has feature widths that differ "
                            "from the rest of the dataset");
    }
    if (pattern_of(setting).span && !inst.qa.gt_span) {
      throw ValidationError("setting '" + to_string(setting) + "' needs gt_span but "
                            "instance '" + inst.id + "' has none");
    }
  }
}

namespace {

void check_dims(const ModelParams& params, const std::vector<Instance>& data) {
  const ModelDims want = dims_for(data, params.dims().hidden);
  if (!(want == params.dims())) {
    throw ValidationError(
        "model expects raw widths video=" + std::to_string(params.dims().raw_video) +
        " text=" + std::to_string(params.dims().raw_text) + " but data has video=" +
        std::to_string(want.raw_video) + " text=" + std::to_string(want.raw_text));
  }
}

}  // namespace

TrainResult train(const std::vector<Instance>& data, SupervisionSetting setting,
                  const TrainConfig& cfg, const TrainHooks& hooks) {
  check_trainable(data, setting);
  cfg.validate();
  return train_from(ModelParams::init(dims_for(data, cfg.hidden), cfg.seed), data,
                    setting, cfg, hooks);
}

TrainResult train_from(ModelParams init, const std::vector<Instance>& data,
                       SupervisionSetting setting, const TrainConfig& cfg,
                       const TrainHooks& hooks) {
  check_trainable(data, setting);
  cfg.validate();
  check_dims(init, data);

  TrainResult result;
  result.params = std::move(init);
  ModelParams& params = result.params;
  Adam adam(params, cfg.adam);
  const SupervisionPattern active = pattern_of(setting);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  std::size_t step_index = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.rate_for_epoch(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog log;
    log.epoch = epoch;
    log.learning_rate = lr;
    double sum_qa = 0.0, sum_span = 0.0, sum_self = 0.0, sum_total = 0.0;

    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      StepLog step;
      step.epoch = epoch;
      step.step = ++step_index;
      step.learning_rate = lr;
      params.zero_grad();
      for (std::size_t b = begin; b < end; ++b) {
        InstanceLoss parts;
        backward(instance_loss(data[order[b]], params, setting, cfg, &parts));
        sum_qa += parts.qa;
        sum_span += parts.span.value_or(0.0);
        sum_self += parts.self.value_or(0.0);
        sum_total += parts.total;
        step.total += parts.total;
        step.instances.push_back(parts);
      }
      const double batch = static_cast<double>(end - begin);
      step.total /= batch;
      adam.step(params, lr, 1.0 / batch);
      if (hooks.keep_step_logs) result.steps.push_back(std::move(step));
    }

    const double n = static_cast<double>(data.size());
    log.qa = sum_qa / n;
    if (active.span) log.span = sum_span / n;
    if (active.self) log.self = sum_self / n;
    log.total = sum_total / n;
    result.epochs.push_back(log);
    if (hooks.checkpoint) params.save(*hooks.checkpoint);
    if (hooks.on_epoch) hooks.on_epoch(log);
  }
  params.zero_grad();
  return result;
}

// ---------------------------------------------------------------------------
// Inference

std::vector<PredictionRecord> infer(const std::vector<Instance>& data,
                                    const ModelParams& params,
                                    SupervisionSetting setting,
                                    const TrainConfig& cfg) {
  std::vector<PredictionRecord> out;
  if (data.empty()) return out;
  check_dims(params, data);
  const bool span_heads = pattern_of(setting).span;
  for (const auto& inst : data) {
    const Prediction p = predict(inst.features, params, cfg.model);
    PredictionRecord r;
    r.id = inst.id;
    r.answer_scores = p.answer_scores;
    r.predicted_answer = p.predicted_answer;
    r.gt_answer = inst.qa.gt_index;
    r.p_st = p.p_st;
    r.p_ed = p.p_ed;
    r.scores = p.attention[p.predicted_answer];
    r.decoded_span = p.decoded_span;
    r.span = span_heads ? p.decoded_span : ground(r.scores, cfg.wsqg);
    r.gt_span = inst.qa.gt_span;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<EvalRecord> to_eval_records(const std::vector<PredictionRecord>& preds) {
  std::vector<EvalRecord> out;
  out.reserve(preds.size());
  for (const auto& p : preds) {
    if (!p.gt_span) {
      throw ValidationError("instance '" + p.id + "' has no gt_span to evaluate against");
    }
    out.push_back({p.id, p.predicted_answer, p.gt_answer, p.span, *p.gt_span});
  }
  return out;
}

}  // namespace vqg
