#include "lectrack/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "lectrack/util.hpp"

namespace lectrack::eval {

using nlohmann::json;

DialogTruth make_truth(const corpus::RawDialog& raw, const corpus::SlotSchema& schema) {
  const auto first = corpus::mention_schedule(raw, schema);
  DialogTruth truth{raw.dialog_id, {}};
  for (std::size_t t = 0; t < raw.turns.size(); ++t) {
    const auto& label = raw.turns[t].label;
    TurnTruth tt;
    for (const auto& [slot, value] : label.goals)
      if (value != corpus::kNone) tt.goals[slot] = value;
    tt.method = label.method.empty() ? std::string(corpus::kNone) : label.method;
    tt.requested.insert(label.requested.begin(), label.requested.end());
    for (std::size_t c = 0; c < schema.size(); ++c) {
      const bool mentioned = first[c] && *first[c] <= static_cast<int>(t);
      if (!mentioned) continue;
      if (schema.components[c].group == Group::kGoal) tt.goal_scheduled = true;
      if (schema.components[c].group == Group::kRequested) tt.requested_scheduled = true;
    }
    truth.turns.push_back(std::move(tt));
  }
  return truth;
}

json to_json(const DialogTruth& truth) {
  json turns = json::array();
  for (const auto& t : truth.turns)
    turns.push_back({{"goals", t.goals},
                     {"method", t.method},
                     {"requested", t.requested},
                     {"goal_scheduled", t.goal_scheduled},
                     {"requested_scheduled", t.requested_scheduled},
                     {"method_scheduled", t.method_scheduled}});
  return {{"dialog_id", truth.dialog_id}, {"turns", std::move(turns)}};
}

DialogTruth truth_from_json(const json& j) {
  DialogTruth truth;
  try {
    truth.dialog_id = j.at("dialog_id").get<std::string>();
    for (const auto& t : j.at("turns")) {
      TurnTruth tt;
      tt.goals = t.at("goals").get<std::map<std::string, std::string>>();
      tt.method = t.at("method").get<std::string>();
      tt.requested = t.at("requested").get<std::set<std::string>>();
      tt.goal_scheduled = t.at("goal_scheduled").get<bool>();
      tt.requested_scheduled = t.at("requested_scheduled").get<bool>();
      tt.method_scheduled = t.at("method_scheduled").get<bool>();
      truth.turns.push_back(std::move(tt));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed dialog truth: " + std::string(e.what()));
  }
  return truth;
}

ScoringView full_view(const corpus::SlotSchema& schema) {
  return tracked_view(schema, {});
}

ScoringView tracked_view(const corpus::SlotSchema& schema, const std::vector<bool>& tracked) {
  ScoringView view;
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (c < tracked.size() && !tracked[c]) continue;
    const auto& comp = schema.components[c];
    switch (comp.group) {
      case Group::kGoal: view.goal_slots.push_back(comp.slot); break;
      case Group::kMethod: view.method = true; break;
      case Group::kRequested: view.requestable_slots.push_back(comp.slot); break;
    }
  }
  return view;
}

// ---------------------------------------------------------------------------

JointDistribution joint_goal(std::span<const Marginal> marginals, double prune) {
  JointDistribution out;
  for (const auto& m : marginals) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m.size(); ++i)
      if (m[i].second > m[best].second) best = i;
    out.top.push_back(m.empty() ? std::string(corpus::kNone) : m[best].first);
  }

  std::vector<std::string> partial;
  auto dfs = [&](auto&& self, std::size_t depth, double mass) -> void {
    if (depth == marginals.size()) {
      out.hypotheses.push_back({partial, mass});
      return;
    }
    for (const auto& [value, p] : marginals[depth]) {
      const double next = mass * p;
      if (next < prune) continue;
      partial.push_back(value);
      self(self, depth + 1, next);
      partial.pop_back();
    }
  };
  dfs(dfs, 0, 1.0);
  std::stable_sort(out.hypotheses.begin(), out.hypotheses.end(),
                   [](const JointHypothesis& a, const JointHypothesis& b) { return a.score > b.score; });
  double kept = 0.0;
  for (const auto& h : out.hypotheses) kept += h.score;
  out.residual = std::max(0.0, 1.0 - kept);
  return out;
}

std::vector<TurnPrediction> to_predictions(const std::string& dialog_id, std::span<const model::BeliefState> beliefs,
                                           const corpus::SlotSchema& schema) {
  std::vector<TurnPrediction> out;
  out.reserve(beliefs.size());
  for (std::size_t t = 0; t < beliefs.size(); ++t) {
    TurnPrediction p{.dialog_id = dialog_id, .turn = static_cast<int>(t)};
    for (std::size_t c = 0; c < schema.size(); ++c) {
      const auto& dist = beliefs[t].components[c];
      if (dist.empty()) continue;
      const auto& comp = schema.components[c];
      switch (comp.group) {
        case Group::kGoal: {
          auto& m = p.goal_labels[comp.slot];
          for (std::size_t v = 0; v < comp.values.size(); ++v) m[comp.values[v]] = dist[v];
          break;
        }
        case Group::kMethod:
          for (std::size_t v = 0; v < comp.values.size(); ++v) p.method_label[comp.values[v]] = dist[v];
          break;
        case Group::kRequested:
          p.requested_slots[comp.slot] = dist[comp.value_index(corpus::kRequested).value()];
          break;
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string none() { return std::string(corpus::kNone); }

// Marginal with unlisted mass moved onto "none".
Marginal goal_marginal(const TurnPrediction& p, const std::string& slot) {
  Marginal m;
  double total = 0.0;
  double none_mass = 0.0;
  auto it = p.goal_labels.find(slot);
  if (it != p.goal_labels.end()) {
    for (const auto& [value, prob] : it->second) {
      total += prob;
      if (value == corpus::kNone) {
        none_mass += prob;
      } else {
        m.emplace_back(value, prob);
      }
    }
  }
  none_mass += std::max(0.0, 1.0 - total);
  m.emplace(m.begin(), none(), none_mass);
  return m;
}

JointDistribution goal_joint_of(const TurnPrediction& p, const ScoringView& view, double prune) {
  if (p.goal_joint) {
    JointDistribution out;
    for (const auto& [slots, score] : *p.goal_joint) {
      JointHypothesis h{.score = score};
      for (const auto& s : view.goal_slots) {
        auto it = slots.find(s);
        h.values.push_back(it == slots.end() ? none() : it->second);
      }
      out.hypotheses.push_back(std::move(h));
    }
    std::stable_sort(out.hypotheses.begin(), out.hypotheses.end(),
                     [](const JointHypothesis& a, const JointHypothesis& b) { return a.score > b.score; });
    double kept = 0.0;
    for (const auto& h : out.hypotheses) kept += h.score;
    out.residual = std::max(0.0, 1.0 - kept);
    out.top = out.hypotheses.empty() ? std::vector<std::string>(view.goal_slots.size(), none())
                                     : out.hypotheses.front().values;
    return out;
  }
  std::vector<Marginal> marginals;
  for (const auto& s : view.goal_slots) marginals.push_back(goal_marginal(p, s));
  return joint_goal(marginals, prune);
}

JointDistribution requested_joint_of(const TurnPrediction& p, const ScoringView& view, double prune) {
  std::vector<Marginal> marginals;
  std::vector<std::string> top;
  for (const auto& s : view.requestable_slots) {
    auto it = p.requested_slots.find(s);
    const double pr = it == p.requested_slots.end() ? 0.0 : std::clamp(it->second, 0.0, 1.0);
    marginals.push_back({{std::string(corpus::kRequested), pr}, {none(), 1.0 - pr}});
    top.push_back(pr > 0.5 ? std::string(corpus::kRequested) : none());
  }
  JointDistribution out = joint_goal(marginals, prune);
  out.top = std::move(top);
  return out;
}

JointDistribution method_dist_of(const TurnPrediction& p) {
  JointDistribution out;
  double total = 0.0;
  bool has_none = false;
  for (const auto& [value, prob] : p.method_label) {
    total += prob;
    has_none |= value == corpus::kNone;
    out.hypotheses.push_back({{value}, prob});
  }
  const double missing = std::max(0.0, 1.0 - total);
  if (has_none) {
    for (auto& h : out.hypotheses)
      if (h.values[0] == corpus::kNone) h.score += missing;
  } else {
    out.hypotheses.push_back({{none()}, missing});
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < out.hypotheses.size(); ++i)
    if (out.hypotheses[i].score > out.hypotheses[best].score) best = i;
  out.top = out.hypotheses[best].values;
  return out;
}

struct Accumulator {
  std::size_t scored = 0;
  std::size_t correct = 0;
  double l2_sum = 0.0;

  void add(const JointDistribution& d, const std::vector<std::string>& label) {
    ++scored;
    if (d.top == label) ++correct;
    double sq = d.residual * d.residual;
    bool found = false;
    for (const auto& h : d.hypotheses) {
      const bool hit = h.values == label;
      found |= hit;
      const double diff = h.score - (hit ? 1.0 : 0.0);
      sq += diff * diff;
    }
    if (!found) sq += 1.0;
    l2_sum += std::sqrt(sq);
  }
  void add_missing() {
    ++scored;
    l2_sum += std::sqrt(2.0);
  }
  GroupMetrics metrics() const {
    if (scored == 0) return {};
    return {static_cast<double>(correct) / static_cast<double>(scored), l2_sum / static_cast<double>(scored), scored};
  }
};

}  // namespace

const std::optional<GroupMetrics>& MetricsReport::group(Group g) const {
  switch (g) {
    case Group::kGoal: return goal;
    case Group::kMethod: return method;
    case Group::kRequested: return requested;
  }
  return goal;
}

json MetricsReport::to_json() const {
  json j = json::object();
  for (Group g : {Group::kGoal, Group::kMethod, Group::kRequested}) {
    const auto& m = group(g);
    if (!m) continue;
    j[std::string(corpus::group_name(g))] = {{"accuracy", m->accuracy}, {"l2", m->l2}, {"scored", m->scored}};
  }
  return j;
}

std::string MetricsReport::table() const {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-10s %9s %9s %8s\n", "group", "accuracy", "l2", "turns");
  out << line;
  for (Group g : {Group::kGoal, Group::kMethod, Group::kRequested}) {
    const auto& m = group(g);
    const std::string name(corpus::group_name(g));
    if (m) {
      std::snprintf(line, sizeof line, "%-10s %9.4f %9.4f %8zu\n", name.c_str(), m->accuracy, m->l2, m->scored);
    } else {
      std::snprintf(line, sizeof line, "%-10s %9s %9s %8s\n", name.c_str(), "-", "-", "-");
    }
    out << line;
  }
  return out.str();
}

MetricsReport score(std::span<const TurnPrediction> predictions, std::span<const DialogTruth> truths,
                    const ScoringView& view, const ScoreOptions& options) {
  std::map<std::pair<std::string, int>, const TurnPrediction*> index;
  for (const auto& p : predictions) index[{p.dialog_id, p.turn}] = &p;

  Accumulator goal, method, requested;
  std::size_t missing = 0;
  for (const auto& truth : truths) {
    for (std::size_t t = 0; t < truth.turns.size(); ++t) {
      const TurnTruth& tt = truth.turns[t];
      const bool want_goal = !view.goal_slots.empty() && tt.goal_scheduled;
      const bool want_method = view.method && tt.method_scheduled;
      const bool want_req = !view.requestable_slots.empty() && tt.requested_scheduled;
      if (!want_goal && !want_method && !want_req) continue;

      auto it = index.find({truth.dialog_id, static_cast<int>(t)});
      if (it == index.end()) {
        ++missing;
        if (want_goal) goal.add_missing();
        if (want_method) method.add_missing();
        if (want_req) requested.add_missing();
        continue;
      }
      const TurnPrediction& p = *it->second;
      if (want_goal) {
        std::vector<std::string> label;
        for (const auto& s : view.goal_slots) {
          auto g = tt.goals.find(s);
          label.push_back(g == tt.goals.end() ? none() : g->second);
        }
        goal.add(goal_joint_of(p, view, options.prune), label);
      }
      if (want_method) method.add(method_dist_of(p), {tt.method});
      if (want_req) {
        std::vector<std::string> label;
        for (const auto& s : view.requestable_slots)
          label.push_back(tt.requested.count(s) ? std::string(corpus::kRequested) : none());
        requested.add(requested_joint_of(p, view, options.prune), label);
      }
    }
  }
  if (missing && !options.quiet_missing)
    warn(std::to_string(missing) + " scheduled turns have no prediction; scored as incorrect");

  MetricsReport report;
  if (!view.goal_slots.empty()) report.goal = goal.metrics();
  if (view.method) report.method = method.metrics();
  if (!view.requestable_slots.empty()) report.requested = requested.metrics();
  return report;
}

double accuracy(std::span<const TurnPrediction> predictions, std::span<const DialogTruth> truths,
                const ScoringView& view, Group group) {
  const auto r = score(predictions, truths, view);
  const auto& m = r.group(group);
  return m ? m->accuracy : 0.0;
}

double l2(std::span<const TurnPrediction> predictions, std::span<const DialogTruth> truths, const ScoringView& view,
          Group group) {
  const auto r = score(predictions, truths, view);
  const auto& m = r.group(group);
  return m ? m->l2 : 0.0;
}

// ---------------------------------------------------------------------------

json write_tracker_output(std::span<const TurnPrediction> predictions, const std::string& dataset,
                          const ScoringView& view, double prune) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const TurnPrediction*>> sessions;
  for (const auto& p : predictions) {
    auto& turns = sessions[p.dialog_id];
    if (turns.empty()) order.push_back(p.dialog_id);
    if (p.turn < 0) throw std::invalid_argument("write_tracker_output: negative turn index");
    if (turns.size() <= static_cast<std::size_t>(p.turn)) turns.resize(static_cast<std::size_t>(p.turn) + 1, nullptr);
    turns[static_cast<std::size_t>(p.turn)] = &p;
  }

  json out_sessions = json::array();
  for (const auto& id : order) {
    json turns = json::array();
    for (const TurnPrediction* p : sessions[id]) {
      json turn = json::object();
      if (!p) {
        turns.push_back(std::move(turn));
        continue;
      }
      json goal_labels = json::object();
      for (const auto& slot : view.goal_slots) {
        auto it = p->goal_labels.find(slot);
        if (it == p->goal_labels.end()) continue;
        json values = json::object();
        for (const auto& [value, prob] : it->second)
          if (value != corpus::kNone && prob > 0.0) values[value] = prob;
        goal_labels[slot] = std::move(values);
      }
      json joint = json::array();
      for (const auto& h : goal_joint_of(*p, view, prune).hypotheses) {
        json slots = json::object();
        for (std::size_t s = 0; s < view.goal_slots.size(); ++s)
          if (h.values[s] != corpus::kNone) slots[view.goal_slots[s]] = h.values[s];
        joint.push_back({{"slots", std::move(slots)}, {"score", h.score}});
      }
      turn["goal-labels"] = std::move(goal_labels);
      turn["goal-labels-joint"] = std::move(joint);
      turn["method-label"] = p->method_label;
      json req = json::object();
      for (const auto& slot : view.requestable_slots) {
        auto it = p->requested_slots.find(slot);
        if (it != p->requested_slots.end()) req[slot] = it->second;
      }
      turn["requested-slots"] = std::move(req);
      turns.push_back(std::move(turn));
    }
    out_sessions.push_back({{"session-id", id}, {"turns", std::move(turns)}});
  }
  return {{"dataset", dataset}, {"wall-time", 0.0}, {"sessions", std::move(out_sessions)}};
}

std::vector<TurnPrediction> read_tracker_output(const json& doc) {
  if (!doc.is_object() || !doc.contains("sessions") || !doc["sessions"].is_array())
    throw DataError("tracker output: missing 'sessions' array");
  std::vector<TurnPrediction> out;
  const auto& sessions = doc["sessions"];
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    const auto& session = sessions[s];
    std::string where = "tracker output: session " + std::to_string(s);
    try {
      const std::string id = session.at("session-id").get<std::string>();
      where += " (" + id + ")";
      const auto& turns = session.at("turns");
      for (std::size_t t = 0; t < turns.size(); ++t) {
        const std::string at = where + " turn " + std::to_string(t);
        const auto& turn = turns[t];
        if (!turn.is_object()) throw DataError(at + ": turn is not an object");
        TurnPrediction p{.dialog_id = id, .turn = static_cast<int>(t)};
        try {
          if (turn.contains("goal-labels"))
            for (const auto& [slot, values] : turn["goal-labels"].items())
              for (const auto& [value, prob] : values.items()) p.goal_labels[slot][value] = prob.get<double>();
          if (turn.contains("goal-labels-joint")) {
            p.goal_joint.emplace();
            for (const auto& h : turn["goal-labels-joint"]) {
              std::map<std::string, std::string> slots;
              for (const auto& [slot, value] : h.at("slots").items()) slots[slot] = value.get<std::string>();
              p.goal_joint->emplace_back(std::move(slots), h.at("score").get<double>());
            }
          }
          if (turn.contains("method-label"))
            for (const auto& [value, prob] : turn["method-label"].items()) p.method_label[value] = prob.get<double>();
          if (turn.contains("requested-slots"))
            for (const auto& [slot, prob] : turn["requested-slots"].items()) p.requested_slots[slot] = prob.get<double>();
        } catch (const json::exception& e) {
          throw DataError(at + ": " + e.what());
        }
        out.push_back(std::move(p));
      }
    } catch (const json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

MetricsReport score_external(const std::filesystem::path& tracker_output, std::span<const DialogTruth> truths,
                             const ScoringView& view, const ScoreOptions& options) {
  json doc;
  try {
    doc = json::parse(read_file(tracker_output));
  } catch (const json::exception& e) {
    throw DataError("tracker output " + tracker_output.string() + ": " + e.what());
  }
  const auto preds = read_tracker_output(doc);
  return score(preds, truths, view, options);
}

}  // namespace lectrack::eval
