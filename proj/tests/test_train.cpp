#include <gtest/gtest.h>
#include <omp.h>

#include <cmath>

#include "lectrack/train.hpp"
#include "lectrack/util.hpp"
#include "synthetic.hpp"

using namespace lectrack;
using namespace lectrack::train;
namespace lt = lectrack::testing;

namespace {

// A small synthetic corpus prepared the way the pipeline does it.
struct Corpus {
  corpus::SlotSchema schema;
  std::vector<corpus::DialogExample> train, dev;
  std::vector<eval::DialogTruth> truths;
  preprocess::Vocabulary vocab;
  preprocess::AbstractionDict dict;

  Corpus(std::size_t n_train, std::size_t n_dev, const TrainConfig& config, std::uint64_t seed = 1) {
    const auto ontology = lt::synthetic_ontology();
    schema = corpus::schema_from_ontology(ontology);
    for (const auto& raw : lt::make_raw_dialogs(n_train, seed))
      train.push_back(corpus::serialize_dialog(raw, corpus::UserSource::kAsr1Best, schema));
    for (const auto& raw : lt::make_raw_dialogs(n_dev, seed + 100)) {
      dev.push_back(corpus::serialize_dialog(raw, corpus::UserSource::kAsr1Best, schema));
      truths.push_back(eval::make_truth(raw, schema));
    }
    dict = preprocess::build_abstraction_dict(schema, preprocess::count_labels(train, schema),
                                              config.abstraction_threshold, config.max_abstract_tokens);
    vocab = preprocess::build_vocabulary(train, schema, config.max_abstract_tokens);
  }

  TrainingSet set(const TrainConfig& config) const {
    return make_training_set(schema, vocab, &dict, config, train, dev, truths);
  }
  std::size_t index(const char* name) const { return *schema.index_of(name); }
};

model::ComponentModel fresh_model(const Corpus& c, const TrainingSet& set, const TrainConfig& config,
                                  const char* component, std::uint64_t seed = 3) {
  auto m = model::make_model(c.schema.at(component), set.abstract_tokens, model_dims(config, c.vocab), c.vocab.hash());
  model::initialize(m, seed);
  return m;
}

}  // namespace

TEST(Loss, UniformPredictionsOverFourClasses) {
  corpus::Component comp{.name = "x", .slot = "x", .group = corpus::Group::kGoal, .values = {"none", "dontcare", "a", "b"}};
  model::ModelDims d;
  d.vocab = 3;
  d.embedding = 2;
  d.input_hidden = 2;
  d.lstm = 2;
  auto m = model::make_model(comp, 0, d, 5);  // all parameters zero
  model::EncodedDialog dialog{"u", {0, 1, 2, 1, 0, 2}, std::vector<double>(6, 1.0), {}, {1, 3, 5}, 5};
  for (std::size_t k = 0; k < 3; ++k) dialog.labels.push_back({2 * k + 1, static_cast<int>(k), {"a"}});
  const auto targets = model::label_targets(m, dialog, 0);
  EXPECT_NEAR(model::dialog_loss(m, dialog, targets), 3 * std::log(4.0), 1e-12);
  EXPECT_NEAR(model::dialog_loss(m, dialog, targets), 4.1589, 1e-4);

  m.params.at(model::kClassifierBias).value(2, 0) = 60.0;
  EXPECT_LT(model::dialog_loss(m, dialog, targets), 1e-20);
}

TEST(TrainEpoch, TwentyDialogsInBatchesOfTenTakeTwoSteps) {
  auto config = lt::toy_train_config();
  config.minibatch_size = 10;
  Corpus c(20, 2, config);
  const auto set = c.set(config);
  auto m = fresh_model(c, set, config, "food");
  const auto inputs = epoch_inputs(set, config, 1);
  ASSERT_EQ(inputs.size(), 20u);
  const auto stats = train_epoch(m, c.index("food"), inputs, config);
  EXPECT_EQ(stats.steps, 2u);
  EXPECT_EQ(m.params.adam_steps(), 2);
}

TEST(TrainEpoch, ZeroLearningRateLeavesParametersAndReportsEvaluationLoss) {
  auto config = lt::toy_train_config();
  config.adam.learning_rate = 0.0;
  Corpus c(12, 2, config);
  const auto set = c.set(config);
  auto m = fresh_model(c, set, config, "area");
  const auto before = m;
  const auto inputs = epoch_inputs(set, config, 1);
  const auto stats = train_epoch(m, c.index("area"), inputs, config);
  EXPECT_TRUE(m.params.same_values(before.params));

  double loss = 0.0;
  std::size_t labels = 0;
  for (const auto& d : inputs) {
    const auto targets = model::label_targets(m, d, c.index("area"));
    loss += model::dialog_loss(m, d, targets);
    labels += targets.size();
  }
  EXPECT_EQ(stats.labels, labels);
  EXPECT_NEAR(stats.mean_loss(), loss / labels, 1e-12);
}

TEST(TrainEpoch, LossDecreasesOverEpochs) {
  auto config = lt::toy_train_config();
  Corpus c(50, 2, config);
  const auto set = c.set(config);
  auto m = fresh_model(c, set, config, "food");
  double first = 0.0, last = 0.0;
  for (int epoch = 1; epoch <= 5; ++epoch) {
    const auto stats = train_epoch(m, c.index("food"), epoch_inputs(set, config, epoch), config);
    (epoch == 1 ? first : last) = stats.mean_loss();
  }
  EXPECT_LT(last, first);
}

TEST(TrainEpoch, NonFiniteLossIsReported) {
  auto config = lt::toy_train_config();
  Corpus c(4, 1, config);
  const auto set = c.set(config);
  auto m = fresh_model(c, set, config, "food");
  m.params.at(model::kClassifierBias).value(0, 0) = std::nan("");
  EXPECT_THROW(train_epoch(m, c.index("food"), epoch_inputs(set, config, 1), config), TrainingError);
}

TEST(EpochInputs, SeededShuffleAndUserOnlyOov) {
  auto config = lt::toy_train_config();
  config.alpha_oov = 1.0;
  Corpus c(15, 1, config);
  const auto set = c.set(config);
  const auto a = epoch_inputs(set, config, 1);
  const auto b = epoch_inputs(set, config, 1);
  const auto other = epoch_inputs(set, config, 2);
  std::vector<std::string> ids_a, ids_other;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].ids, b[i].ids);
    ids_a.push_back(a[i].dialog_id);
    ids_other.push_back(other[i].dialog_id);
  }
  EXPECT_NE(ids_a, ids_other);
  // alpha = 1: every user token is #OOV, system tokens keep their ids.
  for (const auto& d : a) {
    const auto it = std::find_if(set.train.begin(), set.train.end(),
                                 [&](const corpus::DialogExample& e) { return e.dialog_id == d.dialog_id; });
    ASSERT_NE(it, set.train.end());
    for (std::size_t t = 0; t < d.ids.size(); ++t) {
      if (corpus::is_user(it->events[t].source))
        EXPECT_EQ(d.ids[t], c.vocab.oov_id());
      else
        EXPECT_EQ(d.ids[t], c.vocab.encode(it->events[t].token));
    }
  }
}

TEST(EarlyStopperTest, PatienceOneWithDecreasingMetric) {
  EarlyStopper s(1);
  int stopped_after = 0;
  const double metric[] = {0.9, 0.8, 0.7, 0.6};
  for (int epoch = 1; epoch <= 4; ++epoch) {
    s.update(epoch, metric[epoch - 1]);
    stopped_after = epoch;
    if (s.exhausted()) break;
  }
  EXPECT_EQ(stopped_after, 2);
  EXPECT_EQ(s.best_epoch(), 1);
}

TEST(EarlyStopperTest, TiesDoNotCountAsImprovement) {
  EarlyStopper s(2);
  EXPECT_TRUE(s.update(1, 0.5));
  EXPECT_FALSE(s.update(2, 0.5));
  EXPECT_TRUE(s.update(3, 0.6));
  EXPECT_FALSE(s.exhausted());
  EXPECT_FALSE(s.update(4, 0.1));
  EXPECT_FALSE(s.update(5, 0.6));
  EXPECT_TRUE(s.exhausted());
  EXPECT_EQ(s.best_epoch(), 3);
}

TEST(Config, JsonRoundTripHashAndValidation) {
  TrainConfig a;
  const auto back = TrainConfig::from_json(a.to_json());
  EXPECT_EQ(back.to_json(), a.to_json());
  EXPECT_EQ(back.hash(), a.hash());

  TrainConfig b = a;
  b.use_abstraction = false;
  EXPECT_NE(a.hash(), b.hash());
  b = a;
  b.early_stop = EarlyStopMetric::kMeanFeatured;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(TrainConfig::from_json(b.to_json()).early_stop, EarlyStopMetric::kMeanFeatured);

  auto j = a.to_json();
  j["learning_rat"] = 0.1;
  EXPECT_THROW(TrainConfig::from_json(j), ConfigError);
  j = a.to_json();
  j["early_stop"] = "best_guess";
  EXPECT_THROW(TrainConfig::from_json(j), ConfigError);

  b = a;
  b.minibatch_size = 0;
  EXPECT_THROW(b.validate(), ConfigError);
  b = a;
  b.alpha_oov = 1.5;
  EXPECT_THROW(b.validate(), ConfigError);
  b = a;
  b.lstm = 0;
  EXPECT_THROW(b.validate(), ConfigError);
}

class FitTest : public ::testing::Test {
 protected:
  void SetUp() override {
    threads_ = omp_get_max_threads();
    omp_set_num_threads(4);
  }
  void TearDown() override { omp_set_num_threads(threads_); }
  int threads_ = 1;
};

TEST_F(FitTest, DeterministicForIdenticalSeeds) {
  auto config = lt::toy_train_config();
  config.max_epochs = 2;
  Corpus c(16, 4, config);
  const auto set = c.set(config);
  const std::vector<std::size_t> comps = {c.index("food"), c.index("method"), c.index("req.phone")};
  const auto a = fit(set, config, comps);
  const auto b = fit(set, config, comps);
  EXPECT_EQ(a.report.to_json(), b.report.to_json());
  for (std::size_t k = 0; k < comps.size(); ++k) {
    EXPECT_TRUE(a.best[k].params.same_values(b.best[k].params));
    EXPECT_TRUE(a.last[k].params.same_values(b.last[k].params));
  }
  auto other = config;
  other.seed = 2;
  EXPECT_FALSE(fit(set, other, comps).last[0].params.same_values(a.last[0].params));
}

TEST_F(FitTest, ReportsSelectionAndStopsWhenAllGroupsExhausted) {
  auto config = lt::toy_train_config();
  config.max_epochs = 6;
  config.patience = 1;
  Corpus c(16, 4, config);
  const auto set = c.set(config);
  const std::vector<std::size_t> comps = {c.index("area"), c.index("method")};
  int callbacks = 0;
  const auto r = fit(set, config, comps, [&](const EpochRecord& e) { EXPECT_EQ(e.epoch, ++callbacks); });
  EXPECT_EQ(r.report.stopped_after, callbacks);
  EXPECT_EQ(static_cast<int>(r.report.epochs.size()), callbacks);
  EXPECT_LE(r.report.stopped_after, 6);
  EXPECT_EQ(r.report.components, (std::vector<std::string>{"area", "method"}));
  for (const auto& name : r.report.components) {
    const int sel = r.report.selected_epoch.at(name);
    EXPECT_GE(sel, 1);
    EXPECT_LE(sel, r.report.stopped_after);
  }
  for (const auto& e : r.report.epochs) {
    EXPECT_TRUE(e.dev.goal.has_value());
    EXPECT_TRUE(e.dev.method.has_value());
    EXPECT_FALSE(e.dev.requested.has_value());
    EXPECT_EQ(e.train_loss.size(), 2u);
  }
  const auto j = r.report.to_json();
  EXPECT_FALSE(j.dump().find("wall") != std::string::npos);
  EXPECT_EQ(r.report.timing_json()["epochs"].size(), r.report.epochs.size());
  EXPECT_EQ(j["config_hash"], hex64(config.hash()));
}

TEST_F(FitTest, SharedStopperSelectsOneEpochForAll) {
  auto config = lt::toy_train_config();
  config.early_stop = EarlyStopMetric::kMeanFeatured;
  config.max_epochs = 3;
  Corpus c(12, 3, config);
  const auto set = c.set(config);
  const std::vector<std::size_t> comps = {c.index("food"), c.index("method"), c.index("req.addr")};
  const auto r = fit(set, config, comps);
  const int first = r.report.selected_epoch.at("food");
  for (const auto& [name, epoch] : r.report.selected_epoch) EXPECT_EQ(epoch, first) << name;
}

TEST_F(FitTest, WithoutAbstractionModelsHaveNoAbstractClasses) {
  auto config = lt::toy_train_config();
  config.use_abstraction = false;
  config.max_epochs = 1;
  Corpus c(8, 2, config);
  const auto set = make_training_set(c.schema, c.vocab, nullptr, config, c.train, c.dev, c.truths);
  EXPECT_EQ(set.abstract_tokens, 0);
  const std::vector<std::size_t> comps = {c.index("food")};
  const auto r = fit(set, config, comps);
  EXPECT_EQ(r.best[0].classes, c.schema.at("food").values);

  config.use_abstraction = true;
  EXPECT_THROW(make_training_set(c.schema, c.vocab, nullptr, config, c.train, c.dev, c.truths), ConfigError);
}
