#include "lectrack/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

#include "lectrack/util.hpp"

namespace lectrack::corpus {

using nlohmann::json;

std::string_view group_name(Group g) {
  switch (g) {
    case Group::kGoal: return "goal";
    case Group::kMethod: return "method";
    case Group::kRequested: return "requested";
  }
  return "?";
}

std::optional<std::size_t> Component::value_index(std::string_view value) const {
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i] == value) return i;
  return std::nullopt;
}

std::optional<std::size_t> SlotSchema::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < components.size(); ++i)
    if (components[i].name == name) return i;
  return std::nullopt;
}

const Component& SlotSchema::at(std::string_view name) const {
  auto i = index_of(name);
  if (!i) throw ConfigError("unknown component " + std::string(name));
  return components[*i];
}

std::vector<std::size_t> SlotSchema::group_members(Group g) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < components.size(); ++i)
    if (components[i].group == g) out.push_back(i);
  return out;
}

namespace {

std::string as_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_null()) return "";
  return v.dump();
}

void push_unique(std::vector<std::string>& values, std::string v) {
  if (std::find(values.begin(), values.end(), v) == values.end()) values.push_back(std::move(v));
}

json parse_json_file(const std::filesystem::path& path, std::string_view what) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError&) {
    throw DataError(std::string(what) + ": missing " + path.string());
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string(what) + ": cannot parse " + path.string() + ": " + e.what());
  }
}

std::vector<DialogAct> parse_acts(const json& acts) {
  std::vector<DialogAct> out;
  if (!acts.is_array()) return out;
  for (const auto& a : acts) {
    DialogAct act{.act = as_string(a.value("act", json()))};
    if (a.contains("slots")) {
      for (const auto& pair : a["slots"]) {
        if (!pair.is_array() || pair.empty()) continue;
        act.slots.push_back({as_string(pair[0]), pair.size() > 1 ? as_string(pair[1]) : ""});
      }
    }
    out.push_back(std::move(act));
  }
  return out;
}

}  // namespace

SlotSchema schema_from_ontology(const json& ontology) {
  if (!ontology.contains("informable") || !ontology["informable"].is_object())
    throw DataError("ontology: missing object 'informable'");
  SlotSchema schema;
  for (const auto& [slot, values] : ontology["informable"].items()) {
    Component c{.name = slot, .slot = slot, .group = Group::kGoal};
    c.values = {std::string(kNone), std::string(kDontCare)};
    for (const auto& v : values) push_unique(c.values, as_string(v));
    schema.components.push_back(std::move(c));
  }
  Component method{.name = "method", .slot = "method", .group = Group::kMethod};
  method.values = {std::string(kNone)};
  if (ontology.contains("method")) {
    for (const auto& v : ontology["method"]) push_unique(method.values, as_string(v));
  } else {
    for (const char* v : {"byconstraints", "byname", "finished", "byalternatives"}) push_unique(method.values, v);
  }
  schema.components.push_back(std::move(method));
  if (ontology.contains("requestable")) {
    for (const auto& r : ontology["requestable"]) {
      const std::string slot = as_string(r);
      schema.components.push_back({.name = "req." + slot,
                                   .slot = slot,
                                   .group = Group::kRequested,
                                   .values = {std::string(kNone), std::string(kRequested)}});
    }
  }
  return schema;
}

std::map<std::string, std::vector<std::string>> informable_values(const json& ontology) {
  std::map<std::string, std::vector<std::string>> out;
  if (!ontology.contains("informable")) return out;
  for (const auto& [slot, values] : ontology["informable"].items()) {
    auto& list = out[slot];
    for (const auto& v : values) push_unique(list, as_string(v));
  }
  return out;
}

SlotSchema load_schema(const std::filesystem::path& ontology) {
  return schema_from_ontology(parse_json_file(ontology, "ontology"));
}

RawDialog parse_dialog(const json& log, const json& label, std::string_view name) {
  const std::string where = "dialog " + std::string(name);
  if (!log.contains("turns") || !label.contains("turns"))
    throw DataError(where + ": missing 'turns'");
  const auto& log_turns = log["turns"];
  const auto& label_turns = label["turns"];
  if (log_turns.size() != label_turns.size())
    throw DataError(where + ": log has " + std::to_string(log_turns.size()) + " turns, labels have " +
                    std::to_string(label_turns.size()));
  if (log_turns.empty()) throw DataError(where + ": no turns");

  RawDialog raw;
  raw.dialog_id = log.contains("session-id") ? as_string(log["session-id"]) : std::string(name);
  try {
    for (std::size_t t = 0; t < log_turns.size(); ++t) {
      const auto& lt = log_turns[t];
      const auto& bt = label_turns[t];
      RawTurn turn;
      if (lt.contains("output")) {
        turn.system_acts = parse_acts(lt["output"].value("dialog-acts", json::array()));
        turn.system_transcript = as_string(lt["output"].value("transcript", json()));
      }
      if (lt.contains("input") && lt["input"].contains("live")) {
        const auto& live = lt["input"]["live"];
        for (const auto& h : live.value("asr-hyps", json::array()))
          turn.asr.push_back({as_string(h.value("asr-hyp", json())), h.value("score", 0.0)});
        for (const auto& h : live.value("slu-hyps", json::array()))
          turn.slu.push_back({parse_acts(h.value("slu-hyp", json::array())), h.value("score", 0.0)});
      }
      std::stable_sort(turn.asr.begin(), turn.asr.end(),
                       [](const AsrHypothesis& a, const AsrHypothesis& b) { return a.score > b.score; });
      const json goals = bt.value("goal-labels", json::object());
      for (const auto& [slot, value] : goals.items())
        turn.label.goals[slot] = as_string(value);
      turn.label.method = as_string(bt.value("method-label", json("none")));
      if (turn.label.method.empty()) turn.label.method = kNone;
      for (const auto& r : bt.value("requested-slots", json::array())) turn.label.requested.push_back(as_string(r));
      turn.label.transcription = as_string(bt.value("transcription", json()));
      raw.turns.push_back(std::move(turn));
    }
  } catch (const json::exception& e) {
    throw DataError(where + ": " + e.what());
  }
  return raw;
}

Dataset load_dataset(const std::filesystem::path& data_root, const std::filesystem::path& flist,
                     const std::filesystem::path& ontology) {
  Dataset ds;
  ds.schema = load_schema(ontology);
  std::ifstream in(flist);
  if (!in) throw DataError("cannot open flist " + flist.string());
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    std::size_t start = 0;
    while (start < line.size() && std::isspace(static_cast<unsigned char>(line[start]))) ++start;
    line.erase(0, start);
    if (line.empty()) continue;
    const auto dir = data_root / line;
    const json log = parse_json_file(dir / "log.json", "dialog " + line);
    const json label = parse_json_file(dir / "label.json", "dialog " + line);
    ds.dialogs.push_back(parse_dialog(log, label, line));
  }
  return ds;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (!std::ispunct(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> flatten_system_act(const DialogAct& act) {
  if (act.slots.empty()) return {act.act};
  std::vector<std::string> out;
  out.reserve(act.slots.size() * 3);
  for (const auto& sv : act.slots) {
    out.push_back(act.act);
    out.push_back(sv.slot);
    out.push_back(sv.value);
  }
  return out;
}

std::vector<std::string> flatten_system_acts(const std::vector<DialogAct>& acts) {
  std::vector<std::string> out;
  for (const auto& a : acts) {
    auto part = flatten_system_act(a);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::string_view source_name(TokenSource s) {
  switch (s) {
    case TokenSource::kSystem: return "system";
    case TokenSource::kUserAsr: return "user_asr";
    case TokenSource::kUserTranscript: return "user_transcript";
  }
  return "?";
}

bool is_user(TokenSource s) { return s != TokenSource::kSystem; }

std::vector<std::string> label_values(const TurnLabel& label, const SlotSchema& schema) {
  std::vector<std::string> out;
  out.reserve(schema.size());
  for (const auto& c : schema.components) {
    switch (c.group) {
      case Group::kGoal: {
        auto it = label.goals.find(c.slot);
        out.push_back(it == label.goals.end() ? std::string(kNone) : it->second);
        break;
      }
      case Group::kMethod:
        out.push_back(label.method.empty() ? std::string(kNone) : label.method);
        break;
      case Group::kRequested: {
        const bool req = std::find(label.requested.begin(), label.requested.end(), c.slot) != label.requested.end();
        out.push_back(std::string(req ? kRequested : kNone));
        break;
      }
    }
  }
  return out;
}

namespace {

double user_score(double raw, AsrScoreMode mode) {
  const double s = mode == AsrScoreMode::kExp ? std::exp(raw) : raw;
  if (!std::isfinite(s)) return 0.0;
  return std::clamp(s, 0.0, 1.0);
}

}  // namespace

DialogExample serialize_dialog(const RawDialog& raw, UserSource user_source, const SlotSchema& schema,
                               const SerializeOptions& options) {
  DialogExample ex;
  ex.dialog_id = raw.dialog_id;
  ex.schedule = mention_schedule(raw, schema);
  const auto user_kind = user_source == UserSource::kAsr1Best ? TokenSource::kUserAsr : TokenSource::kUserTranscript;

  for (std::size_t t = 0; t < raw.turns.size(); ++t) {
    const RawTurn& turn = raw.turns[t];
    const int ti = static_cast<int>(t);
    const std::size_t before = ex.events.size();

    for (const auto& piece : flatten_system_acts(turn.system_acts))
      for (auto& tok : tokenize(piece)) ex.events.push_back({std::move(tok), 1.0, TokenSource::kSystem, ti, false});

    if (user_source == UserSource::kAsr1Best) {
      if (!turn.asr.empty()) {
        const double s = user_score(turn.asr.front().score, options.score_mode);
        for (auto& tok : tokenize(turn.asr.front().text)) ex.events.push_back({std::move(tok), s, user_kind, ti, false});
      }
    } else {
      for (auto& tok : tokenize(turn.label.transcription)) ex.events.push_back({std::move(tok), 1.0, user_kind, ti, false});
    }

    auto values = label_values(turn.label, schema);
    for (std::size_t c = 0; c < schema.size(); ++c) {
      if (!schema.components[c].value_index(values[c]))
        throw DataError("dialog " + raw.dialog_id + " turn " + std::to_string(t) + ": label '" + values[c] +
                        "' not a value of component " + schema.components[c].name);
    }

    if (ex.events.size() > before) {
      ex.events.back().turn_final = true;
      ex.labels.push_back({ex.events.size() - 1, ti, std::move(values)});
      ex.turn_end.push_back(static_cast<long>(ex.events.size() - 1));
    } else if (!ex.events.empty()) {
      warn("dialog " + raw.dialog_id + " turn " + std::to_string(t) +
           " emitted no tokens; label attached to the previous turn-final token");
      ex.labels.back() = {ex.events.size() - 1, ti, std::move(values)};
      ex.turn_end.push_back(static_cast<long>(ex.events.size() - 1));
    } else {
      warn("dialog " + raw.dialog_id + " turn " + std::to_string(t) + " emitted no tokens and has no predecessor");
      ex.turn_end.push_back(-1);
    }
  }
  return ex;
}

namespace {

void collect_mentions(const std::vector<DialogAct>& acts, std::set<std::string>& out) {
  for (const auto& a : acts) {
    for (const auto& sv : a.slots) {
      if (sv.slot == "slot") {
        out.insert(sv.value);
      } else if (sv.slot != "this") {
        out.insert(sv.slot);
      }
    }
  }
}

}  // namespace

std::vector<std::optional<int>> mention_schedule(const RawDialog& raw, const SlotSchema& schema) {
  std::vector<std::optional<int>> first(schema.size());
  for (std::size_t c = 0; c < schema.size(); ++c)
    if (schema.components[c].group == Group::kMethod) first[c] = 0;

  for (std::size_t t = 0; t < raw.turns.size(); ++t) {
    std::set<std::string> mentioned;
    collect_mentions(raw.turns[t].system_acts, mentioned);
    for (const auto& h : raw.turns[t].slu) collect_mentions(h.acts, mentioned);
    for (std::size_t c = 0; c < schema.size(); ++c) {
      if (!first[c] && mentioned.count(schema.components[c].slot)) first[c] = static_cast<int>(t);
    }
  }
  return first;
}

json to_json(const DialogExample& ex) {
  json events = json::array();
  for (const auto& e : ex.events)
    events.push_back({e.token, e.score, static_cast<int>(e.source), e.turn_index, e.turn_final});
  json labels = json::array();
  for (const auto& l : ex.labels) labels.push_back({{"t", l.event_index}, {"turn", l.turn_index}, {"values", l.values}});
  json schedule = json::array();
  for (const auto& s : ex.schedule) schedule.push_back(s ? json(*s) : json());
  return {{"dialog_id", ex.dialog_id},
          {"events", std::move(events)},
          {"labels", std::move(labels)},
          {"schedule", std::move(schedule)},
          {"turn_end", ex.turn_end}};
}

DialogExample example_from_json(const json& j) {
  DialogExample ex;
  try {
    ex.dialog_id = j.at("dialog_id").get<std::string>();
    for (const auto& e : j.at("events"))
      ex.events.push_back({e.at(0).get<std::string>(), e.at(1).get<double>(),
                           static_cast<TokenSource>(e.at(2).get<int>()), e.at(3).get<int>(), e.at(4).get<bool>()});
    for (const auto& l : j.at("labels"))
      ex.labels.push_back({l.at("t").get<std::size_t>(), l.at("turn").get<int>(),
                           l.at("values").get<std::vector<std::string>>()});
    for (const auto& s : j.at("schedule")) ex.schedule.push_back(s.is_null() ? std::nullopt : std::optional<int>(s.get<int>()));
    ex.turn_end = j.at("turn_end").get<std::vector<long>>();
  } catch (const json::exception& e) {
    throw DataError("malformed serialized dialog: " + std::string(e.what()));
  }
  return ex;
}

}  // namespace lectrack::corpus
