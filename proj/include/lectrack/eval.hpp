#pragma once

// DSTC2 featured metrics (joint accuracy and L2 for the Goal, Method and
// Requested groups) under the mention schedule, for our own predictions and
// for tracker-output files in the official format.

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lectrack/corpus.hpp"
#include "lectrack/model.hpp"

namespace lectrack::eval {

using corpus::Group;

struct TurnTruth {
  std::map<std::string, std::string> goals;  // only non-"none" values
  std::string method = "none";
  std::set<std::string> requested;
  bool goal_scheduled = false;
  bool requested_scheduled = false;
  bool method_scheduled = true;
};

struct DialogTruth {
  std::string dialog_id;
  std::vector<TurnTruth> turns;
};

DialogTruth make_truth(const corpus::RawDialog& raw, const corpus::SlotSchema& schema);
nlohmann::json to_json(const DialogTruth& truth);
DialogTruth truth_from_json(const nlohmann::json& j);

// Which slots take part in each group's joint.
struct ScoringView {
  std::vector<std::string> goal_slots;
  bool method = false;
  std::vector<std::string> requestable_slots;
};

ScoringView full_view(const corpus::SlotSchema& schema);
// Restricted to tracked components; components past the end of `tracked` count as tracked.
ScoringView tracked_view(const corpus::SlotSchema& schema, const std::vector<bool>& tracked);

struct JointHypothesis {
  std::vector<std::string> values;  // one per slot of the joint
  double score = 0.0;
};

struct JointDistribution {
  std::vector<JointHypothesis> hypotheses;  // descending score
  double residual = 0.0;                    // mass not listed
  std::vector<std::string> top;             // per-slot argmax tuple
};

using Marginal = std::vector<std::pair<std::string, double>>;

inline constexpr double kPruneThreshold = 1e-6;

// Product of independent per-slot marginals. Partial products below the
// threshold are dropped together with all their extensions.
JointDistribution joint_goal(std::span<const Marginal> marginals, double prune = kPruneThreshold);

struct TurnPrediction {
  std::string dialog_id;
  int turn = 0;
  // slot -> value -> probability; mass not listed belongs to "none".
  std::map<std::string, std::map<std::string, double>> goal_labels;
  // Explicit joint hypotheses (slot -> value, "none" slots omitted).
  std::optional<std::vector<std::pair<std::map<std::string, std::string>, double>>> goal_joint;
  std::map<std::string, double> method_label;
  std::map<std::string, double> requested_slots;
};

std::vector<TurnPrediction> to_predictions(const std::string& dialog_id,
                                           std::span<const model::BeliefState> beliefs,
                                           const corpus::SlotSchema& schema);

struct GroupMetrics {
  double accuracy = 0.0;
  double l2 = 0.0;
  std::size_t scored = 0;
};

struct MetricsReport {
  std::optional<GroupMetrics> goal;
  std::optional<GroupMetrics> method;
  std::optional<GroupMetrics> requested;

  const std::optional<GroupMetrics>& group(Group g) const;
  nlohmann::json to_json() const;
  std::string table() const;
};

struct ScoreOptions {
  double prune = kPruneThreshold;
  bool quiet_missing = false;
};

MetricsReport score(std::span<const TurnPrediction> predictions, std::span<const DialogTruth> truths,
                    const ScoringView& view, const ScoreOptions& options = {});

double accuracy(std::span<const TurnPrediction> predictions, std::span<const DialogTruth> truths,
                const ScoringView& view, Group group);
double l2(std::span<const TurnPrediction> predictions, std::span<const DialogTruth> truths,
          const ScoringView& view, Group group);

// Official DSTC2 tracker-output JSON.
nlohmann::json write_tracker_output(std::span<const TurnPrediction> predictions, const std::string& dataset,
                                    const ScoringView& view, double prune = kPruneThreshold);
std::vector<TurnPrediction> read_tracker_output(const nlohmann::json& doc);

MetricsReport score_external(const std::filesystem::path& tracker_output, std::span<const DialogTruth> truths,
                             const ScoringView& view, const ScoreOptions& options = {});

}  // namespace lectrack::eval
