#pragma once

// The per-component tracker network: token embedding (+ ASR confidence),
// one ReLU input layer, an LSTM encoder and a softmax classifier.
//
// Two evaluation routes exist. The incremental route (embed_with_score,
// lstm_step, classify, track_token) works on plain vectors and never
// allocates a tape. The batched route (build_dialog_graph) unrolls a whole
// dialog on an nn::Tape and is what training differentiates.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lectrack/corpus.hpp"
#include "lectrack/nncore.hpp"
#include "lectrack/preprocess.hpp"

namespace lectrack::model {

struct ModelDims {
  std::size_t vocab = 0;
  std::size_t embedding = 170;
  std::size_t input_hidden = 300;
  std::size_t lstm = 100;
  std::size_t classes = 0;
  bool use_score = true;

  std::size_t input_width() const { return embedding + (use_score ? 1 : 0); }
  bool operator==(const ModelDims&) const = default;
};

// Parameter names. The LSTM weight is (4H) x (input_hidden + H) with gate
// blocks packed in the order i, f, o, g and columns [input | recurrent].
inline constexpr const char* kEmbedding = "embedding";
inline constexpr const char* kInputWeight = "input.weight";
inline constexpr const char* kInputBias = "input.bias";
inline constexpr const char* kLstmWeight = "lstm.weight";
inline constexpr const char* kLstmBias = "lstm.bias";
inline constexpr const char* kClassifierWeight = "classifier.weight";
inline constexpr const char* kClassifierBias = "classifier.bias";

struct ComponentModel {
  std::string component;
  std::vector<std::string> classes;
  int abstract_tokens = 0;
  ModelDims dims;
  std::uint64_t vocab_hash = 0;
  nn::ParamStore params;
};

// Allocates zero parameters of the right shapes.
ComponentModel make_model(const corpus::Component& component, int abstract_tokens, ModelDims dims,
                          std::uint64_t vocab_hash);
nn::InitSpec init_spec(const ModelDims& dims);
void initialize(ComponentModel& model, std::uint64_t seed);

struct TrackerState {
  std::vector<double> c;
  std::vector<double> h;
  std::size_t token_count = 0;

  static TrackerState initial(const ModelDims& dims);
  bool operator==(const TrackerState&) const = default;
};

struct EncodedToken {
  std::size_t id = 0;
  double score = 1.0;
  std::uint64_t vocab_hash = 0;
};

std::vector<double> embed_with_score(const ComponentModel& model, std::size_t token_id, double score);
TrackerState lstm_step(const ComponentModel& model, std::span<const double> u, const TrackerState& state);
std::vector<double> classify(const ComponentModel& model, const TrackerState& state);
std::pair<TrackerState, std::vector<double>> track_token(const ComponentModel& model, const TrackerState& state,
                                                         const EncodedToken& token);

struct EncodedDialog {
  std::string dialog_id;
  std::vector<std::size_t> ids;
  std::vector<double> scores;
  std::vector<corpus::LabeledTime> labels;
  std::vector<long> turn_end;
  std::uint64_t vocab_hash = 0;
};

EncodedDialog encode(const corpus::DialogExample& example, const preprocess::Vocabulary& vocab);

inline constexpr std::size_t kNoTarget = std::numeric_limits<std::size_t>::max();

// Class index of this component's label at every labeled time.
std::vector<std::size_t> label_targets(const ComponentModel& model, const EncodedDialog& dialog,
                                       std::size_t schema_index);

// Unrolls the dialog on the tape and returns the summed cross-entropy over
// labeled times (kNoTarget entries are skipped). If `step_probs` is given, a
// softmax node is recorded after every token.
nn::Var build_dialog_graph(nn::Tape& tape, ComponentModel& model, const EncodedDialog& dialog,
                           std::span<const std::size_t> targets, std::vector<nn::Var>* step_probs = nullptr);

// Sum over labeled times of -log p(label).
double dialog_loss(ComponentModel& model, const EncodedDialog& dialog, std::span<const std::size_t> targets);

// Batched route: class distributions after every token.
std::vector<std::vector<double>> batch_distributions(const ComponentModel& model, const EncodedDialog& dialog);

// Incremental route: class distribution at the end of every turn (the prior
// for turns with no emitted token yet).
std::vector<std::vector<double>> turn_distributions(const ComponentModel& model, const EncodedDialog& dialog);

// Per schema component: distribution over the component's concrete values,
// empty when the component is not tracked.
struct BeliefState {
  std::vector<std::vector<double>> components;
};

// Runs each component's model over the stream and returns one BeliefState
// per dialog turn, de-abstracted with `assignment`. `models` is aligned with
// the schema; null entries are untracked.
std::vector<BeliefState> track_dialog(const EncodedDialog& dialog, std::span<const ComponentModel* const> models,
                                      const corpus::SlotSchema& schema,
                                      const preprocess::AbstractionAssignment& assignment);

nlohmann::json manifest(const ComponentModel& model);
void save_model(const ComponentModel& model, const std::filesystem::path& dir);
ComponentModel load_model(const std::filesystem::path& dir, const std::string& component);

}  // namespace lectrack::model
