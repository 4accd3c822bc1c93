#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "vqg/data.hpp"
#include "vqg/losses.hpp"
#include "vqg/model.hpp"
#include "vqg/wsqg.hpp"

namespace vqg {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double late_learning_rate = 2e-4;
  std::size_t lr_drop_epoch = 10;  // epochs after this one use late_learning_rate
  std::size_t epochs = 15;
  std::uint64_t seed = 1;
  std::size_t hidden = 128;
  AdamConfig adam;
  LossWeights loss;
  WsqgConfig wsqg;
  ModelOptions model;

  void validate() const;
  /// Learning rate for a 1-based epoch.
  double rate_for_epoch(std::size_t epoch) const;
};

/// Every option reachable from a config file.
struct Config {
  SynthConfig synth;
  std::size_t val_instances = 50;
  DataOptions data;
  TrainConfig train;
};

/// Flat `key = value` text, '#' comments. Unknown keys, duplicate keys and
/// unparsable values are rejected with the line number.
Config parse_config(std::istream& in, const std::string& source);
Config load_config(const std::filesystem::path& path);
/// All accepted keys with their current values, one per line.
std::string describe_config(const Config& cfg);

/// Loss values of one instance in one step.
struct InstanceLoss {
  double qa = 0.0;
  std::optional<double> span;
  std::optional<double> self;
  double total = 0.0;
};

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double learning_rate = 0.0;
  std::vector<InstanceLoss> instances;
  double total = 0.0;  // mean of instance totals
};

struct EpochLog {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double qa = 0.0;
  std::optional<double> span;
  std::optional<double> self;
  double total = 0.0;
};

nlohmann::json to_json(const EpochLog& log);

struct TrainHooks {
  /// Written (overwritten) after every epoch when set.
  std::optional<std::filesystem::path> checkpoint;
  std::function<void(const EpochLog&)> on_epoch;
  bool keep_step_logs = true;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
};

/// Adam with bias correction on the mean batch loss. Instances are shuffled
/// per epoch with a seeded engine; gradients are accumulated in batch order.
class Adam {
 public:
  Adam(const ModelParams& params, AdamConfig cfg);
  /// Applies one update from the gradients currently held by `params`,
  /// multiplied by `grad_scale` (1 / batch size for a mean loss).
  void step(ModelParams& params, double learning_rate, double grad_scale = 1.0);
  std::size_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

/// Per-instance training loss under a setting. Returns the graph root and
/// fills `parts` with the component values.
Value instance_loss(const Instance& inst, const ModelParams& params,
                    SupervisionSetting setting, const TrainConfig& cfg,
                    InstanceLoss* parts = nullptr);

/// Throws ValidationError if the dataset cannot be used with the setting
/// (empty, missing gt_span for span supervision, mismatched feature widths).
void check_trainable(const std::vector<Instance>& data, SupervisionSetting setting);

ModelDims dims_for(const std::vector<Instance>& data, std::size_t hidden);

TrainResult train(const std::vector<Instance>& data, SupervisionSetting setting,
                  const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Same, continuing from existing parameters (used for zero-epoch and
/// single-step checks).
TrainResult train_from(ModelParams init, const std::vector<Instance>& data,
                       SupervisionSetting setting, const TrainConfig& cfg,
                       const TrainHooks& hooks = {});

/// Answer = argmax score. Span = WSQG over the predicted stream's attention
/// in the QA settings, span-head decoding in the Full settings.
std::vector<PredictionRecord> infer(const std::vector<Instance>& data,
                                    const ModelParams& params,
                                    SupervisionSetting setting,
                                    const TrainConfig& cfg);

/// Throws ValidationError if a record lacks a ground-truth span.
std::vector<EvalRecord> to_eval_records(const std::vector<PredictionRecord>& preds);

}  // namespace vqg
