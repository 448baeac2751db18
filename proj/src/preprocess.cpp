#include "lectrack/preprocess.hpp"

#include <algorithm>
#include <stdexcept>

#include "lectrack/util.hpp"

namespace lectrack::preprocess {

using nlohmann::json;
using corpus::Group;

std::string abstract_token(std::string_view slot, int index) {
  return "#" + std::string(slot) + std::to_string(index);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  tokens_.emplace_back(kOov);
  std::sort(tokens_.begin(), tokens_.end());
  tokens_.erase(std::unique(tokens_.begin(), tokens_.end()), tokens_.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], i);
  oov_id_ = ids_.at(std::string(kOov));
}

std::optional<std::size_t> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocabulary::encode(std::string_view token) const { return find(token).value_or(oov_id_); }

std::uint64_t Vocabulary::hash() const {
  std::string joined;
  for (const auto& t : tokens_) {
    joined += t;
    joined.push_back('\n');
  }
  return fnv1a64(joined);
}

json Vocabulary::to_json() const { return {{"version", 1}, {"tokens", tokens_}}; }

Vocabulary Vocabulary::from_json(const json& j) {
  if (j.value("version", 0) != 1) throw DataError("vocabulary: unsupported version");
  return Vocabulary(j.at("tokens").get<std::vector<std::string>>());
}

Vocabulary build_vocabulary(std::span<const DialogExample> examples, const SlotSchema& schema,
                            int max_abstract_tokens) {
  std::set<std::string> seen;
  for (const auto& ex : examples)
    for (const auto& e : ex.events) seen.insert(e.token);
  for (const auto& c : schema.components) {
    if (c.group != Group::kGoal) continue;
    for (int j = 1; j <= max_abstract_tokens; ++j) seen.insert(abstract_token(c.slot, j));
  }
  return Vocabulary(std::vector<std::string>(seen.begin(), seen.end()));
}

// ---------------------------------------------------------------------------

const ComponentAbstraction* AbstractionDict::find(std::string_view component) const {
  for (const auto& c : components)
    if (c.component == component) return &c;
  return nullptr;
}

bool AbstractionDict::contains(std::string_view component, std::string_view value) const {
  const auto* c = find(component);
  if (!c) return false;
  return std::any_of(c->entries.begin(), c->entries.end(), [&](const AbstractionEntry& e) { return e.value == value; });
}

void AbstractionDict::add(const corpus::Component& component, const std::string& value) {
  if (value == corpus::kNone || value == corpus::kDontCare) return;
  if (contains(component.name, value)) return;
  auto surface = corpus::tokenize(value);
  if (surface.empty()) return;
  auto it = std::find_if(components.begin(), components.end(),
                         [&](const ComponentAbstraction& c) { return c.component == component.name; });
  if (it == components.end()) {
    components.push_back({component.name, component.slot, {}});
    it = components.end() - 1;
  }
  it->entries.push_back({value, std::move(surface)});
}

json AbstractionDict::to_json() const {
  json comps = json::array();
  for (const auto& c : components) {
    json entries = json::array();
    for (const auto& e : c.entries) entries.push_back({{"value", e.value}, {"surface", e.surface}});
    comps.push_back({{"component", c.component}, {"slot", c.slot}, {"entries", std::move(entries)}});
  }
  return {{"version", 1}, {"threshold", threshold}, {"max_tokens", max_tokens}, {"components", std::move(comps)}};
}

AbstractionDict AbstractionDict::from_json(const json& j) {
  if (j.value("version", 0) != 1) throw DataError("abstraction dictionary: unsupported version");
  AbstractionDict d;
  d.threshold = j.at("threshold").get<int>();
  d.max_tokens = j.at("max_tokens").get<int>();
  for (const auto& c : j.at("components")) {
    ComponentAbstraction ca{c.at("component").get<std::string>(), c.at("slot").get<std::string>(), {}};
    for (const auto& e : c.at("entries"))
      ca.entries.push_back({e.at("value").get<std::string>(), e.at("surface").get<std::vector<std::string>>()});
    d.components.push_back(std::move(ca));
  }
  return d;
}

LabelCounts count_labels(std::span<const DialogExample> examples, const SlotSchema& schema) {
  LabelCounts counts(schema.size());
  for (const auto& ex : examples)
    for (const auto& l : ex.labels)
      for (std::size_t c = 0; c < schema.size() && c < l.values.size(); ++c) ++counts[c][l.values[c]];
  return counts;
}

AbstractionDict build_abstraction_dict(const SlotSchema& schema, const LabelCounts& counts, int threshold,
                                       int max_tokens) {
  AbstractionDict dict;
  dict.threshold = threshold;
  dict.max_tokens = max_tokens;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    const auto& comp = schema.components[c];
    if (comp.group != Group::kGoal) continue;
    for (const auto& v : comp.values) {
      if (v == corpus::kNone || v == corpus::kDontCare) continue;
      std::size_t n = 0;
      if (c < counts.size()) {
        auto it = counts[c].find(v);
        if (it != counts[c].end()) n = it->second;
      }
      if (n < static_cast<std::size_t>(threshold)) dict.add(comp, v);
    }
  }
  return dict;
}

// ---------------------------------------------------------------------------

namespace {

std::string join(std::span<const TokenEvent> events) {
  std::string key;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i) key.push_back(' ');
    key += events[i].token;
  }
  return key;
}

bool same_segment(const TokenEvent& a, const TokenEvent& b) {
  return a.turn_index == b.turn_index && a.source == b.source;
}

}  // namespace

StreamAbstractor::StreamAbstractor(const AbstractionDict& dict, const SlotSchema& schema)
    : schema_(&schema), max_tokens_(dict.max_tokens) {
  assignment_.values.resize(schema.size());
  // Schema order decides between components sharing a surface form.
  for (std::size_t c = 0; c < schema.size(); ++c) {
    const auto* ca = dict.find(schema.components[c].name);
    if (!ca) continue;
    for (const auto& e : ca->entries) {
      if (e.surface.empty()) continue;
      std::string key;
      for (std::size_t i = 0; i < e.surface.size(); ++i) {
        if (i) {
          proper_prefixes_.insert(key);
          key.push_back(' ');
        }
        key += e.surface[i];
      }
      forms_.emplace(key, Target{c, e.value});
    }
  }
}

void StreamAbstractor::reset() {
  buffer_.clear();
  for (auto& v : assignment_.values) v.clear();
}

std::vector<std::string> AbstractionAssignment::known_at(std::size_t c, long event_index) const {
  if (c >= values.size()) return {};
  if (c >= since.size()) return values[c];
  std::vector<std::string> out;
  for (std::size_t j = 0; j < values[c].size() && since[c].at(j) <= event_index; ++j) out.push_back(values[c][j]);
  return out;
}

std::optional<int> StreamAbstractor::assign(std::size_t component, const std::string& value) {
  auto& list = assignment_.values[component];
  auto it = std::find(list.begin(), list.end(), value);
  if (it != list.end()) return static_cast<int>(it - list.begin()) + 1;
  if (static_cast<int>(list.size()) >= max_tokens_) return std::nullopt;
  list.push_back(value);
  return static_cast<int>(list.size());
}

std::optional<std::string> StreamAbstractor::note_value(std::size_t component, const std::string& value) {
  const auto& comp = schema_->components.at(component);
  bool known = false;
  for (const auto& [key, target] : forms_) {
    if (target.component == component && target.value == value) {
      known = true;
      break;
    }
  }
  if (!known) return std::nullopt;
  auto j = assign(component, value);
  if (!j) return std::nullopt;
  return abstract_token(comp.slot, *j);
}

void StreamAbstractor::drain(std::vector<TokenEvent>& out, bool final) {
  while (!buffer_.empty()) {
    if (!final && proper_prefixes_.count(join(buffer_))) return;
    std::size_t len = 0;
    const Target* target = nullptr;
    for (std::size_t l = buffer_.size(); l >= 1; --l) {
      auto it = forms_.find(join(std::span(buffer_).first(l)));
      if (it != forms_.end()) {
        len = l;
        target = &it->second;
        break;
      }
    }
    std::optional<int> j;
    if (target) j = assign(target->component, target->value);
    if (target && j) {
      TokenEvent e = buffer_[len - 1];
      e.token = abstract_token(schema_->components[target->component].slot, *j);
      for (std::size_t i = 0; i < len; ++i) e.score = std::min(e.score, buffer_[i].score);
      out.push_back(std::move(e));
    } else {
      if (len == 0) len = 1;
      out.insert(out.end(), buffer_.begin(), buffer_.begin() + static_cast<long>(len));
    }
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<long>(len));
  }
}

std::vector<TokenEvent> StreamAbstractor::push(const TokenEvent& event) {
  std::vector<TokenEvent> out;
  if (!buffer_.empty() && !same_segment(buffer_.front(), event)) drain(out, true);
  buffer_.push_back(event);
  drain(out, event.turn_final);
  return out;
}

std::vector<TokenEvent> StreamAbstractor::flush() {
  std::vector<TokenEvent> out;
  drain(out, true);
  return out;
}

std::pair<DialogExample, AbstractionAssignment> abstract_example(const DialogExample& example,
                                                                 const AbstractionDict& dict,
                                                                 const SlotSchema& schema, LabelMode mode) {
  StreamAbstractor abstractor(dict, schema);
  DialogExample out;
  out.dialog_id = example.dialog_id;
  out.schedule = example.schedule;

  std::vector<long> remap(example.events.size(), -1);
  std::vector<std::vector<long>> since(schema.size());
  // Values assigned since the last call are stamped with `at`.
  auto stamp = [&](long at) {
    const auto& values = abstractor.assignment().values;
    for (std::size_t c = 0; c < schema.size(); ++c)
      while (since[c].size() < values[c].size()) since[c].push_back(at);
  };
  std::size_t next_label = 0;
  for (std::size_t i = 0; i < example.events.size(); ++i) {
    auto resolved = abstractor.push(example.events[i]);
    out.events.insert(out.events.end(), std::make_move_iterator(resolved.begin()),
                      std::make_move_iterator(resolved.end()));
    if (abstractor.pending() == 0 && !out.events.empty()) remap[i] = static_cast<long>(out.events.size() - 1);
    stamp(static_cast<long>(out.events.size()) - 1);

    while (next_label < example.labels.size() && example.labels[next_label].event_index == i) {
      corpus::LabeledTime label = example.labels[next_label++];
      if (remap[i] < 0) throw std::logic_error("abstract_example: label on an unresolved token");
      label.event_index = static_cast<std::size_t>(remap[i]);
      if (mode == LabelMode::kRewrite) {
        for (std::size_t c = 0; c < schema.size(); ++c) {
          if (schema.components[c].group != Group::kGoal) continue;
          if (auto tok = abstractor.note_value(c, label.values[c])) label.values[c] = *tok;
        }
      }
      stamp(label.event_index);
      out.labels.push_back(std::move(label));
    }
  }
  auto rest = abstractor.flush();
  out.events.insert(out.events.end(), std::make_move_iterator(rest.begin()), std::make_move_iterator(rest.end()));
  stamp(static_cast<long>(out.events.size()) - 1);

  for (long idx : example.turn_end) out.turn_end.push_back(idx < 0 ? -1 : remap[static_cast<std::size_t>(idx)]);
  AbstractionAssignment assignment = abstractor.assignment();
  assignment.since = std::move(since);
  return {std::move(out), std::move(assignment)};
}

// ---------------------------------------------------------------------------

int abstract_class_count(const corpus::Component& component, int abstract_tokens) {
  return component.group == Group::kGoal ? std::max(abstract_tokens, 0) : 0;
}

std::vector<std::string> class_names(const corpus::Component& component, int abstract_tokens) {
  std::vector<std::string> out = component.values;
  for (int j = 1; j <= abstract_class_count(component, abstract_tokens); ++j)
    out.push_back(abstract_token(component.slot, j));
  return out;
}

std::vector<double> deabstract_distribution(std::span<const double> p, const corpus::Component& component,
                                            std::span<const std::string> assigned, int abstract_tokens) {
  const std::size_t n = component.values.size();
  const int k = abstract_class_count(component, abstract_tokens);
  if (p.size() != n + static_cast<std::size_t>(k))
    throw std::invalid_argument("deabstract_distribution: distribution has " + std::to_string(p.size()) +
                                " classes, expected " + std::to_string(n + k));
  std::vector<double> out(p.begin(), p.begin() + static_cast<long>(n));
  const std::size_t none = component.value_index(corpus::kNone).value_or(0);
  for (int j = 0; j < k; ++j) {
    const double mass = p[n + static_cast<std::size_t>(j)];
    std::size_t target = none;
    if (static_cast<std::size_t>(j) < assigned.size()) {
      if (auto idx = component.value_index(assigned[static_cast<std::size_t>(j)])) target = *idx;
    }
    out[target] += mass;
  }
  return out;
}

DialogExample inject_oov(const DialogExample& example, double alpha, std::mt19937_64& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("inject_oov: alpha must lie in [0,1]");
  DialogExample out = example;
  if (alpha == 0.0) return out;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& e : out.events) {
    if (!corpus::is_user(e.source)) continue;
    if (alpha >= 1.0 || u(rng) < alpha) e.token = kOov;
  }
  return out;
}

std::vector<DialogExample> mix_transcriptions(std::vector<DialogExample> asr_examples,
                                              const std::vector<DialogExample>& transcript_examples) {
  asr_examples.insert(asr_examples.end(), transcript_examples.begin(), transcript_examples.end());
  return asr_examples;
}

}  // namespace lectrack::preprocess
