#include "lectrack/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <random>

#include "lectrack/util.hpp"

namespace lectrack::train {

using nlohmann::json;
using corpus::Group;

namespace {

const char* metric_name(EarlyStopMetric m) {
  return m == EarlyStopMetric::kGroupAccuracy ? "group_accuracy" : "mean_featured";
}

// Collects the first exception thrown inside an OpenMP loop body.
class ErrorSlot {
 public:
  template <class F>
  void run(F&& f) {
    try {
      f();
    } catch (...) {
#pragma omp critical(lectrack_error_slot)
      if (!error_) error_ = std::current_exception();
    }
  }
  void rethrow() const {
    if (error_) std::rethrow_exception(error_);
  }

 private:
  std::exception_ptr error_;
};

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (minibatch_size < 1) fail("minibatch_size must be >= 1");
  if (patience < 1) fail("patience must be >= 1");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (!(alpha_oov >= 0.0 && alpha_oov <= 1.0)) fail("alpha_oov must lie in [0, 1]");
  if (!(adam.learning_rate >= 0.0)) fail("learning_rate must be >= 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0))
    fail("ADAM betas must lie in [0, 1)");
  if (!(adam.epsilon > 0.0)) fail("epsilon must be > 0");
  if (embedding == 0 || input_hidden == 0 || lstm == 0) fail("layer sizes must be positive");
  if (abstraction_threshold < 0 || max_abstract_tokens < 0) fail("abstraction settings must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"minibatch_size", minibatch_size},
          {"alpha_oov", alpha_oov},
          {"learning_rate", adam.learning_rate},
          {"beta1", adam.beta1},
          {"beta2", adam.beta2},
          {"epsilon", adam.epsilon},
          {"clip_norm", clip_norm},
          {"patience", patience},
          {"max_epochs", max_epochs},
          {"seed", seed},
          {"use_scores", use_scores},
          {"use_transcriptions", use_transcriptions},
          {"use_abstraction", use_abstraction},
          {"abstraction_threshold", abstraction_threshold},
          {"max_abstract_tokens", max_abstract_tokens},
          {"early_stop", metric_name(early_stop)},
          {"embedding", embedding},
          {"input_hidden", input_hidden},
          {"lstm", lstm}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "minibatch_size") c.minibatch_size = v.get<std::size_t>();
      else if (key == "alpha_oov") c.alpha_oov = v.get<double>();
      else if (key == "learning_rate") c.adam.learning_rate = v.get<double>();
      else if (key == "beta1") c.adam.beta1 = v.get<double>();
      else if (key == "beta2") c.adam.beta2 = v.get<double>();
      else if (key == "epsilon") c.adam.epsilon = v.get<double>();
      else if (key == "clip_norm") c.clip_norm = v.get<double>();
      else if (key == "patience") c.patience = v.get<int>();
      else if (key == "max_epochs") c.max_epochs = v.get<int>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "use_scores") c.use_scores = v.get<bool>();
      else if (key == "use_transcriptions") c.use_transcriptions = v.get<bool>();
      else if (key == "use_abstraction") c.use_abstraction = v.get<bool>();
      else if (key == "abstraction_threshold") c.abstraction_threshold = v.get<int>();
      else if (key == "max_abstract_tokens") c.max_abstract_tokens = v.get<int>();
      else if (key == "embedding") c.embedding = v.get<std::size_t>();
      else if (key == "input_hidden") c.input_hidden = v.get<std::size_t>();
      else if (key == "lstm") c.lstm = v.get<std::size_t>();
      else if (key == "early_stop") {
        const auto s = v.get<std::string>();
        if (s == "group_accuracy") c.early_stop = EarlyStopMetric::kGroupAccuracy;
        else if (s == "mean_featured") c.early_stop = EarlyStopMetric::kMeanFeatured;
        else throw ConfigError("train config: unknown early_stop '" + s + "'");
      } else {
        throw ConfigError("train config: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError("train config: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

std::uint64_t TrainConfig::hash() const { return fnv1a64(to_json().dump()); }

// ---------------------------------------------------------------------------

model::ModelDims model_dims(const TrainConfig& config, const preprocess::Vocabulary& vocab) {
  model::ModelDims d;
  d.vocab = vocab.size();
  d.embedding = config.embedding;
  d.input_hidden = config.input_hidden;
  d.lstm = config.lstm;
  d.use_score = config.use_scores;
  return d;
}

TrainingSet make_training_set(const corpus::SlotSchema& schema, const preprocess::Vocabulary& vocab,
                              const preprocess::AbstractionDict* dict, const TrainConfig& config,
                              std::span<const corpus::DialogExample> train, std::span<const corpus::DialogExample> dev,
                              std::vector<eval::DialogTruth> dev_truths) {
  if (config.use_abstraction && !dict) throw ConfigError("abstraction enabled but no abstraction dictionary given");
  if (dev_truths.size() != dev.size()) throw std::invalid_argument("make_training_set: one truth per dev dialog expected");
  TrainingSet set;
  set.schema = &schema;
  set.vocab = &vocab;
  set.abstract_tokens = config.use_abstraction ? dict->max_tokens : 0;
  set.train.reserve(train.size());
  for (const auto& ex : train) {
    if (config.use_abstraction) {
      set.train.push_back(preprocess::abstract_example(ex, *dict, schema, preprocess::LabelMode::kRewrite).first);
    } else {
      set.train.push_back(ex);
    }
  }
  for (const auto& ex : dev) {
    if (config.use_abstraction) {
      auto [abstracted, assignment] = preprocess::abstract_example(ex, *dict, schema, preprocess::LabelMode::kIgnore);
      set.dev.push_back(model::encode(abstracted, vocab));
      set.dev_assignments.push_back(std::move(assignment));
    } else {
      set.dev.push_back(model::encode(ex, vocab));
      set.dev_assignments.push_back({std::vector<std::vector<std::string>>(schema.size())});
    }
  }
  set.dev_truths = std::move(dev_truths);
  return set;
}

std::vector<model::EncodedDialog> epoch_inputs(const TrainingSet& set, const TrainConfig& config, int epoch) {
  const auto e = static_cast<std::uint64_t>(epoch);
  std::vector<std::size_t> order(set.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(mix_seed(config.seed, 2, e));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const std::uint64_t oov_root = mix_seed(config.seed, 3, e);
  std::vector<model::EncodedDialog> out;
  out.reserve(order.size());
  for (std::size_t d : order) {
    std::mt19937_64 rng(mix_seed(oov_root, d));
    out.push_back(model::encode(preprocess::inject_oov(set.train[d], config.alpha_oov, rng), *set.vocab));
  }
  return out;
}

EpochStats train_epoch(model::ComponentModel& model, std::size_t schema_index,
                       std::span<const model::EncodedDialog> dialogs, const TrainConfig& config) {
  EpochStats stats;
  const std::size_t batch = std::max<std::size_t>(config.minibatch_size, 1);
  model.params.zero_grad();
  for (std::size_t begin = 0; begin < dialogs.size(); begin += batch) {
    const std::size_t end = std::min(dialogs.size(), begin + batch);
    std::size_t batch_labels = 0;
    for (std::size_t d = begin; d < end; ++d) {
      const auto& dialog = dialogs[d];
      const auto targets = model::label_targets(model, dialog, schema_index);
      for (std::size_t t : targets) batch_labels += t != model::kNoTarget;
      nn::Tape tape;
      const nn::Var loss = model::build_dialog_graph(tape, model, dialog, targets);
      const double value = tape.value(loss)[0];
      if (!std::isfinite(value))
        throw TrainingError(model.component + ": non-finite loss on dialog " + dialog.dialog_id + " (step " +
                            std::to_string(stats.steps + 1) + ")");
      stats.loss_sum += value;
      tape.backward(loss);
    }
    stats.labels += batch_labels;
    if (batch_labels > 0) nn::scale_grad(model.params, 1.0 / static_cast<double>(batch_labels));
    nn::clip_grad_norm(model.params, config.clip_norm);
    try {
      nn::adam_step(model.params, config.adam);
    } catch (const nn::NonFiniteGradient& e) {
      throw TrainingError(model.component + ": " + e.what() + " at step " + std::to_string(stats.steps + 1));
    }
    ++stats.steps;
  }
  return stats;
}

eval::MetricsReport evaluate(std::span<const model::EncodedDialog> dialogs,
                             std::span<const preprocess::AbstractionAssignment> assignments,
                             std::span<const eval::DialogTruth> truths,
                             std::span<const model::ComponentModel* const> models, const corpus::SlotSchema& schema) {
  if (assignments.size() != dialogs.size()) throw std::invalid_argument("evaluate: one assignment per dialog expected");
  std::vector<std::vector<eval::TurnPrediction>> per_dialog(dialogs.size());
  ErrorSlot errors;
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(dialogs.size()); ++i) {
    errors.run([&] {
      const auto k = static_cast<std::size_t>(i);
      const auto beliefs = model::track_dialog(dialogs[k], models, schema, assignments[k]);
      per_dialog[k] = eval::to_predictions(dialogs[k].dialog_id, beliefs, schema);
    });
  }
  errors.rethrow();
  std::vector<eval::TurnPrediction> preds;
  for (auto& p : per_dialog) preds.insert(preds.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  std::vector<bool> tracked(schema.size());
  for (std::size_t c = 0; c < schema.size(); ++c) tracked[c] = models[c] != nullptr;
  return eval::score(preds, truths, eval::tracked_view(schema, tracked), {.quiet_missing = true});
}

bool EarlyStopper::update(int epoch, double metric) {
  if (!seen_ || metric > best_) {
    seen_ = true;
    best_ = metric;
    best_epoch_ = epoch;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

json TrainReport::to_json() const {
  json epochs_j = json::array();
  for (const auto& e : epochs)
    epochs_j.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev", e.dev.to_json()}});
  return {{"config_hash", config_hash},   {"vocab_hash", vocab_hash},         {"components", components},
          {"epochs", std::move(epochs_j)}, {"selected_epoch", selected_epoch}, {"stopped_after", stopped_after},
          {"checkpoint", checkpoint}};
}

json TrainReport::timing_json() const {
  json epochs_j = json::array();
  double total = 0.0;
  for (const auto& e : epochs) {
    epochs_j.push_back({{"epoch", e.epoch}, {"wall_seconds", e.wall_seconds}});
    total += e.wall_seconds;
  }
  return {{"epochs", std::move(epochs_j)}, {"total_seconds", total}};
}

FitResult fit(const TrainingSet& set, const TrainConfig& config, std::span<const std::size_t> components,
              const EpochCallback& on_epoch) {
  config.validate();
  if (!set.schema || !set.vocab) throw std::invalid_argument("fit: training set without schema or vocabulary");
  const auto& schema = *set.schema;
  const auto dims = model_dims(config, *set.vocab);
  const std::uint64_t vocab_hash = set.vocab->hash();

  FitResult result;
  auto& report = result.report;
  report.config_hash = hex64(config.hash());
  report.vocab_hash = hex64(vocab_hash);

  std::vector<model::ComponentModel> current;
  for (std::size_t c : components) {
    if (c >= schema.size()) throw std::out_of_range("fit: component index out of range");
    current.push_back(model::make_model(schema.components[c], set.abstract_tokens, dims, vocab_hash));
    model::initialize(current.back(), mix_seed(config.seed, 1, c));
    report.components.push_back(schema.components[c].name);
  }
  result.best = current;

  // One stopper per selection metric: per group, or a single shared one.
  const bool shared = config.early_stop == EarlyStopMetric::kMeanFeatured;
  std::map<Group, EarlyStopper> stoppers;
  std::vector<Group> groups;
  for (std::size_t c : components) {
    const Group g = schema.components[c].group;
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  }
  if (shared) {
    stoppers.emplace(Group::kGoal, EarlyStopper(config.patience));
  } else {
    for (Group g : groups) stoppers.emplace(g, EarlyStopper(config.patience));
  }
  auto stopper_of = [&](Group g) -> EarlyStopper& { return stoppers.at(shared ? Group::kGoal : g); };

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const auto inputs = epoch_inputs(set, config, epoch);

    std::vector<EpochStats> stats(current.size());
    ErrorSlot errors;
#pragma omp parallel for schedule(dynamic)
    for (long k = 0; k < static_cast<long>(current.size()); ++k) {
      errors.run([&] {
        const auto i = static_cast<std::size_t>(k);
        stats[i] = train_epoch(current[i], components[i], inputs, config);
      });
    }
    try {
      errors.rethrow();
    } catch (const TrainingError& e) {
      throw TrainingError("epoch " + std::to_string(epoch) + ": " + e.what());
    }

    std::vector<const model::ComponentModel*> aligned(schema.size(), nullptr);
    for (std::size_t k = 0; k < current.size(); ++k) aligned[components[k]] = &current[k];
    EpochRecord record;
    record.epoch = epoch;
    for (std::size_t k = 0; k < current.size(); ++k) record.train_loss[current[k].component] = stats[k].mean_loss();
    record.dev = evaluate(set.dev, set.dev_assignments, set.dev_truths, aligned, schema);

    std::map<Group, bool> improved;
    if (shared) {
      double sum = 0.0;
      int n = 0;
      for (Group g : {Group::kGoal, Group::kMethod, Group::kRequested}) {
        if (const auto& m = record.dev.group(g)) {
          sum += m->accuracy;
          ++n;
        }
      }
      const bool up = stopper_of(Group::kGoal).update(epoch, n ? sum / n : 0.0);
      for (Group g : groups) improved[g] = up;
    } else {
      for (Group g : groups) {
        const auto& m = record.dev.group(g);
        improved[g] = stopper_of(g).update(epoch, m ? m->accuracy : 0.0);
      }
    }
    for (std::size_t k = 0; k < current.size(); ++k)
      if (improved[schema.components[components[k]].group]) result.best[k] = current[k];

    record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(record);
    if (on_epoch) on_epoch(record);

    bool all_exhausted = true;
    for (const auto& [g, s] : stoppers) all_exhausted &= s.exhausted();
    if (all_exhausted) break;
  }

  for (std::size_t k = 0; k < current.size(); ++k)
    report.selected_epoch[current[k].component] = stopper_of(schema.components[components[k]].group).best_epoch();
  report.stopped_after = static_cast<int>(report.epochs.size());
  result.last = std::move(current);
  return result;
}

}  // namespace lectrack::train
