#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lectrack/corpus.hpp"

namespace lectrack::preprocess {

using corpus::DialogExample;
using corpus::SlotSchema;
using corpus::TokenEvent;

inline constexpr std::string_view kOov = "#OOV";

// "#food3"
std::string abstract_token(std::string_view slot, int index);

class Vocabulary {
 public:
  Vocabulary() = default;
  // Tokens are sorted and deduplicated; kOov is always added.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::optional<std::size_t> find(std::string_view token) const;
  // Unknown tokens map to the #OOV id.
  std::size_t encode(std::string_view token) const;
  std::size_t oov_id() const { return oov_id_; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::uint64_t hash() const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
  std::size_t oov_id_ = 0;
};

// Every token of the examples plus #OOV plus #<slot>1..#<slot>N for every
// goal component.
Vocabulary build_vocabulary(std::span<const DialogExample> examples, const SlotSchema& schema,
                            int max_abstract_tokens);

struct AbstractionEntry {
  std::string value;
  std::vector<std::string> surface;  // tokenized value string
};

struct ComponentAbstraction {
  std::string component;
  std::string slot;
  std::vector<AbstractionEntry> entries;
};

struct AbstractionDict {
  int threshold = 40;
  int max_tokens = 8;
  std::vector<ComponentAbstraction> components;

  const ComponentAbstraction* find(std::string_view component) const;
  bool contains(std::string_view component, std::string_view value) const;
  // Manually extends the dictionary (e.g. with a value never seen in training).
  void add(const corpus::Component& component, const std::string& value);

  nlohmann::json to_json() const;
  static AbstractionDict from_json(const nlohmann::json& j);
};

// Per component: value -> number of labeled turns carrying it.
using LabelCounts = std::vector<std::map<std::string, std::size_t>>;
LabelCounts count_labels(std::span<const DialogExample> examples, const SlotSchema& schema);

// Goal-component values with count < threshold ("none"/"dontcare" excluded).
AbstractionDict build_abstraction_dict(const SlotSchema& schema, const LabelCounts& counts, int threshold = 40,
                                       int max_tokens = 8);

// Per component (aligned with the schema): abstract index j-1 -> concrete value.
struct AbstractionAssignment {
  std::vector<std::vector<std::string>> values;
  // Parallel to `values`: output event index at which each value was assigned.
  // Empty means every value is known from the start.
  std::vector<std::vector<long>> since;
  bool operator==(const AbstractionAssignment&) const = default;

  // Values of component c already assigned once event `event_index` has been read.
  std::vector<std::string> known_at(std::size_t c, long event_index) const;
};

// Left-to-right longest-match replacement of dictionary surface forms by
// abstract tokens. Matches never span a turn or speaker change. Tokens that
// could still grow into a longer match are held back until resolved; a
// turn-final token always resolves everything pending.
class StreamAbstractor {
 public:
  StreamAbstractor(const AbstractionDict& dict, const SlotSchema& schema);

  std::vector<TokenEvent> push(const TokenEvent& event);
  std::vector<TokenEvent> flush();
  // Assigns (or looks up) an abstract token for a concrete value; nullopt if
  // the value is not in the dictionary or the component is out of tokens.
  std::optional<std::string> note_value(std::size_t component, const std::string& value);

  const AbstractionAssignment& assignment() const { return assignment_; }
  std::size_t pending() const { return buffer_.size(); }
  void reset();

 private:
  struct Target {
    std::size_t component;
    std::string value;
  };
  void drain(std::vector<TokenEvent>& out, bool final);
  std::optional<int> assign(std::size_t component, const std::string& value);

  const SlotSchema* schema_;
  int max_tokens_;
  std::map<std::string, Target> forms_;
  std::set<std::string> proper_prefixes_;
  std::vector<TokenEvent> buffer_;
  AbstractionAssignment assignment_;
};

enum class LabelMode {
  kRewrite,  // training: labels count as appearances and are rewritten
  kIgnore,   // evaluation: assignment comes from tokens only
};

std::pair<DialogExample, AbstractionAssignment> abstract_example(const DialogExample& example,
                                                                 const AbstractionDict& dict,
                                                                 const SlotSchema& schema, LabelMode mode);

// Classifier classes of a component: its values, then #<slot>1..#<slot>N
// when abstraction is on for a goal component.
std::vector<std::string> class_names(const corpus::Component& component, int abstract_tokens);
int abstract_class_count(const corpus::Component& component, int abstract_tokens);

// Moves abstract-class mass onto assigned concrete values; unassigned
// abstract classes go to "none".
std::vector<double> deabstract_distribution(std::span<const double> p, const corpus::Component& component,
                                            std::span<const std::string> assigned, int abstract_tokens);

// Replaces each user token by #OOV with probability alpha.
DialogExample inject_oov(const DialogExample& example, double alpha, std::mt19937_64& rng);

std::vector<DialogExample> mix_transcriptions(std::vector<DialogExample> asr_examples,
                                              const std::vector<DialogExample>& transcript_examples);

}  // namespace lectrack::preprocess
