#pragma once

// Word-by-word tracking over a line protocol. Each input line is
//   <token> [score] [system|user] [eot]
// or RESET. Every consumed token produces one JSON trace line.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "lectrack/corpus.hpp"
#include "lectrack/ensemble.hpp"
#include "lectrack/model.hpp"
#include "lectrack/preprocess.hpp"

namespace lectrack::session {

struct TrackInput {
  std::string token;
  double score = 1.0;
  corpus::TokenSource source = corpus::TokenSource::kUserAsr;
  bool end_of_turn = false;
};

// nullopt for blank or malformed lines (and for RESET, which is not a token).
std::optional<TrackInput> parse_line(std::string_view line);
bool is_reset(std::string_view line);

// Formats an event back into the line protocol.
std::string format_line(const corpus::TokenEvent& event);

class TrackingSession {
 public:
  // `dict` may be null; it must be given when the models use abstract classes.
  TrackingSession(const ensemble::Ensemble& models, const corpus::SlotSchema& schema,
                  const preprocess::Vocabulary& vocab, const preprocess::AbstractionDict* dict,
                  std::size_t top_k = 3, std::string dialog_prefix = "stdin");

  nlohmann::json feed(const TrackInput& input);
  // Starts a new dialog and returns the trace line of the prior.
  nlohmann::json reset();
  // RESET, a token line, or nullopt (with a warning) for a malformed line.
  std::optional<nlohmann::json> process_line(std::string_view line);

  // Current de-abstracted distribution per schema component (empty if untracked).
  std::vector<std::vector<double>> distributions() const;
  const std::string& dialog_id() const { return dialog_id_; }

 private:
  void start_dialog();
  void consume(const corpus::TokenEvent& event);
  nlohmann::json trace(const nlohmann::json& token, double score, const std::vector<std::string>& emitted) const;

  const ensemble::Ensemble* models_;
  const corpus::SlotSchema* schema_;
  const preprocess::Vocabulary* vocab_;
  std::optional<preprocess::StreamAbstractor> abstractor_;
  std::size_t top_k_;
  std::string prefix_;
  std::size_t dialog_count_ = 0;
  std::string dialog_id_;
  std::size_t consumed_ = 0;
  int turn_ = 0;
  std::optional<corpus::TokenSource> last_source_;
  // [component][member]
  std::vector<std::vector<model::TrackerState>> states_;
  std::vector<std::vector<std::vector<double>>> probs_;
};

}  // namespace lectrack::session
