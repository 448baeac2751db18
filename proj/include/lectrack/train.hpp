#pragma once

// Minibatch training of component models with per-epoch OOV injection,
// gradient clipping, ADAM and early stopping on held-out metrics.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lectrack/corpus.hpp"
#include "lectrack/eval.hpp"
#include "lectrack/model.hpp"
#include "lectrack/nncore.hpp"
#include "lectrack/preprocess.hpp"

namespace lectrack::train {

enum class EarlyStopMetric {
  kGroupAccuracy,  // each group selects on its own joint accuracy
  kMeanFeatured,   // every component selects on the mean of the group accuracies
};

struct TrainConfig {
  std::size_t minibatch_size = 10;
  double alpha_oov = 0.1;
  nn::AdamConfig adam;
  double clip_norm = 5.0;
  int patience = 5;
  int max_epochs = 50;
  std::uint64_t seed = 1;
  bool use_scores = true;
  bool use_transcriptions = true;
  bool use_abstraction = true;
  int abstraction_threshold = 40;
  int max_abstract_tokens = 8;
  EarlyStopMetric early_stop = EarlyStopMetric::kGroupAccuracy;
  std::size_t embedding = 170;
  std::size_t input_hidden = 300;
  std::size_t lstm = 100;

  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything fit() reads. Training examples are abstracted with labels
// rewritten; dev dialogs are abstracted from tokens only and encoded.
struct TrainingSet {
  const corpus::SlotSchema* schema = nullptr;
  const preprocess::Vocabulary* vocab = nullptr;
  int abstract_tokens = 0;
  std::vector<corpus::DialogExample> train;
  std::vector<model::EncodedDialog> dev;
  std::vector<preprocess::AbstractionAssignment> dev_assignments;
  std::vector<eval::DialogTruth> dev_truths;
};

// `dict` is required when config.use_abstraction is set and ignored otherwise.
TrainingSet make_training_set(const corpus::SlotSchema& schema, const preprocess::Vocabulary& vocab,
                              const preprocess::AbstractionDict* dict, const TrainConfig& config,
                              std::span<const corpus::DialogExample> train, std::span<const corpus::DialogExample> dev,
                              std::vector<eval::DialogTruth> dev_truths);

model::ModelDims model_dims(const TrainConfig& config, const preprocess::Vocabulary& vocab);

// Shuffled, OOV-injected and encoded training dialogs for one epoch.
std::vector<model::EncodedDialog> epoch_inputs(const TrainingSet& set, const TrainConfig& config, int epoch);

struct EpochStats {
  double loss_sum = 0.0;
  std::size_t labels = 0;
  std::size_t steps = 0;
  double mean_loss() const { return labels ? loss_sum / static_cast<double>(labels) : 0.0; }
};

// One pass over `dialogs` in minibatches. Each batch: summed dialog losses
// divided by the batch label count, backward, clip, ADAM.
EpochStats train_epoch(model::ComponentModel& model, std::size_t schema_index,
                       std::span<const model::EncodedDialog> dialogs, const TrainConfig& config);

// Tracks held-out dialogs with the given models (aligned with the schema,
// null = untracked) and scores the tracked groups.
eval::MetricsReport evaluate(std::span<const model::EncodedDialog> dialogs,
                             std::span<const preprocess::AbstractionAssignment> assignments,
                             std::span<const eval::DialogTruth> truths,
                             std::span<const model::ComponentModel* const> models, const corpus::SlotSchema& schema);

// Patience bookkeeping for one selection metric. Only strict improvements count.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}
  // Returns true if `metric` is a new best.
  bool update(int epoch, double metric);
  bool exhausted() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_metric() const { return best_; }

 private:
  int patience_;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_ = 0.0;
  bool seen_ = false;
};

struct EpochRecord {
  int epoch = 0;
  std::map<std::string, double> train_loss;  // per component, mean per label
  eval::MetricsReport dev;
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::string config_hash;
  std::string vocab_hash;
  std::vector<std::string> components;
  std::vector<EpochRecord> epochs;
  std::map<std::string, int> selected_epoch;
  int stopped_after = 0;
  std::string checkpoint = "best";

  // Wall times are left out so the report is reproducible byte for byte.
  nlohmann::json to_json() const;
  nlohmann::json timing_json() const;
};

struct FitResult {
  TrainReport report;
  std::vector<model::ComponentModel> best;  // aligned with `components`
  std::vector<model::ComponentModel> last;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains the listed schema components side by side, one independent model each.
FitResult fit(const TrainingSet& set, const TrainConfig& config, std::span<const std::size_t> components,
              const EpochCallback& on_epoch = {});

}  // namespace lectrack::train
