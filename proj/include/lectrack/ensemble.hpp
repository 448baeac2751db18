#pragma once

// Model averaging: N independently initialized models per component whose
// per-turn distributions are averaged before de-abstraction.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "lectrack/corpus.hpp"
#include "lectrack/eval.hpp"
#include "lectrack/model.hpp"
#include "lectrack/preprocess.hpp"

namespace lectrack::ensemble {

// Elementwise arithmetic mean. Throws std::invalid_argument on an empty list
// or a length mismatch.
std::vector<double> average_predictions(std::span<const std::vector<double>> distributions);

struct Ensemble {
  // Per schema component; an empty list means the component is untracked.
  std::vector<std::vector<model::ComponentModel>> members;

  std::size_t member_count() const;
  std::vector<bool> tracked() const;
  std::uint64_t vocab_hash() const;
  // Throws std::invalid_argument unless every tracked component has the same
  // number (>= 1) of dimension-identical members over one vocabulary.
  void validate() const;
};

// Adds member `models` (one per tracked component, any order) as a new member.
void add_member(Ensemble& ensemble, std::vector<model::ComponentModel> models, const corpus::SlotSchema& schema);

std::vector<model::BeliefState> track_ensemble(const model::EncodedDialog& dialog, const Ensemble& ensemble,
                                               const corpus::SlotSchema& schema,
                                               const preprocess::AbstractionAssignment& assignment);

std::vector<eval::TurnPrediction> predict(std::span<const model::EncodedDialog> dialogs,
                                          std::span<const preprocess::AbstractionAssignment> assignments,
                                          const Ensemble& ensemble, const corpus::SlotSchema& schema);

// Layout: <dir>/member-NN/<component>.{ckpt,json} and <dir>/ensemble.json.
void save_ensemble(const Ensemble& ensemble, const corpus::SlotSchema& schema, std::span<const std::uint64_t> seeds,
                   const std::filesystem::path& dir);
nlohmann::json ensemble_manifest(const Ensemble& ensemble, const corpus::SlotSchema& schema,
                                 std::span<const std::uint64_t> seeds);
Ensemble load_ensemble(const std::filesystem::path& dir, const corpus::SlotSchema& schema);

// A directory of single-model checkpoints as a one-member ensemble.
Ensemble load_model_dir(const std::filesystem::path& dir, const corpus::SlotSchema& schema);

}  // namespace lectrack::ensemble
