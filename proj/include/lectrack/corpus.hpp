#pragma once

// DSTC2 dialog logs and labels, the slot schema, and serialization of a
// dialog into one flat (token, confidence) stream with turn-final labels.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace lectrack::corpus {

struct SlotValue {
  std::string slot;
  std::string value;
  bool operator==(const SlotValue&) const = default;
};

struct DialogAct {
  std::string act;
  std::vector<SlotValue> slots;
  bool operator==(const DialogAct&) const = default;
};

struct AsrHypothesis {
  std::string text;
  double score = 0.0;
};

struct SluHypothesis {
  std::vector<DialogAct> acts;
  double score = 0.0;
};

struct TurnLabel {
  std::map<std::string, std::string> goals;  // informable slot -> value; absent means "none"
  std::string method = "none";
  std::vector<std::string> requested;
  std::string transcription;
};

struct RawTurn {
  std::vector<DialogAct> system_acts;
  std::string system_transcript;
  std::vector<AsrHypothesis> asr;  // sorted by descending score
  std::vector<SluHypothesis> slu;
  TurnLabel label;
};

struct RawDialog {
  std::string dialog_id;
  std::vector<RawTurn> turns;
};

enum class Group { kGoal, kMethod, kRequested };
std::string_view group_name(Group g);

struct Component {
  std::string name;  // "food", "method", "req.phone"
  std::string slot;  // underlying slot ("food", "method", "phone")
  Group group = Group::kGoal;
  std::vector<std::string> values;  // "none" first; informables also carry "dontcare"

  std::optional<std::size_t> value_index(std::string_view value) const;
};

inline constexpr std::string_view kNone = "none";
inline constexpr std::string_view kDontCare = "dontcare";
inline constexpr std::string_view kRequested = "requested";

struct SlotSchema {
  std::vector<Component> components;

  std::optional<std::size_t> index_of(std::string_view name) const;
  const Component& at(std::string_view name) const;
  std::vector<std::size_t> group_members(Group g) const;
  std::size_t size() const { return components.size(); }
};

// One component per informable slot, one Method component, one binary
// component per requestable slot.
SlotSchema schema_from_ontology(const nlohmann::json& ontology);
SlotSchema load_schema(const std::filesystem::path& ontology);

// Raw ontology value lists per informable slot (used by abstraction).
std::map<std::string, std::vector<std::string>> informable_values(const nlohmann::json& ontology);

struct Dataset {
  std::vector<RawDialog> dialogs;
  SlotSchema schema;
};

Dataset load_dataset(const std::filesystem::path& data_root, const std::filesystem::path& flist,
                     const std::filesystem::path& ontology);

// Parses one session from its DSTC2 log.json / label.json documents.
RawDialog parse_dialog(const nlohmann::json& log, const nlohmann::json& label, std::string_view name);

// Lowercase, strip punctuation, split on whitespace.
std::vector<std::string> tokenize(std::string_view text);

// act(slot=value, ...) -> [act, slot, value, ...]; an act without pairs -> [act].
std::vector<std::string> flatten_system_act(const DialogAct& act);
std::vector<std::string> flatten_system_acts(const std::vector<DialogAct>& acts);

enum class TokenSource { kSystem, kUserAsr, kUserTranscript };
std::string_view source_name(TokenSource s);
bool is_user(TokenSource s);

struct TokenEvent {
  std::string token;
  double score = 1.0;
  TokenSource source = TokenSource::kSystem;
  int turn_index = 0;
  bool turn_final = false;
  bool operator==(const TokenEvent&) const = default;
};

struct LabeledTime {
  std::size_t event_index = 0;
  int turn_index = 0;
  std::vector<std::string> values;  // one per schema component
  bool operator==(const LabeledTime&) const = default;
};

struct DialogExample {
  std::string dialog_id;
  std::vector<TokenEvent> events;
  std::vector<LabeledTime> labels;  // ascending event_index, unique
  // Per component: first turn at which it was mentioned; nullopt = never.
  std::vector<std::optional<int>> schedule;
  // Per turn: index of the last event emitted up to and including that turn, or -1.
  std::vector<long> turn_end;
  bool operator==(const DialogExample&) const = default;
};

enum class UserSource { kAsr1Best, kTranscript };

enum class AsrScoreMode {
  kClamp,  // clamp raw score into [0,1]
  kExp,    // raw score is a log-probability
};

struct SerializeOptions {
  AsrScoreMode score_mode = AsrScoreMode::kClamp;
};

// Per-component label values for one turn, aligned with schema.components.
std::vector<std::string> label_values(const TurnLabel& label, const SlotSchema& schema);

DialogExample serialize_dialog(const RawDialog& raw, UserSource user_source, const SlotSchema& schema,
                               const SerializeOptions& options = {});

std::vector<std::optional<int>> mention_schedule(const RawDialog& raw, const SlotSchema& schema);

nlohmann::json to_json(const DialogExample& example);
DialogExample example_from_json(const nlohmann::json& j);

}  // namespace lectrack::corpus
