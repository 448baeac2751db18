#include "lectrack/session.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lectrack/util.hpp"

namespace lectrack::session {

using corpus::TokenSource;
using nlohmann::json;

namespace {

std::vector<std::string_view> fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::optional<double> parse_number(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

bool is_reset(std::string_view line) {
  const auto f = fields(line);
  return f.size() == 1 && f[0] == "RESET";
}

std::optional<TrackInput> parse_line(std::string_view line) {
  const auto f = fields(line);
  if (f.empty() || is_reset(line)) return std::nullopt;
  const auto tokens = corpus::tokenize(f[0]);
  if (tokens.size() != 1) return std::nullopt;
  TrackInput in;
  in.token = tokens[0];
  bool have_score = false, have_source = false, have_eot = false;
  for (std::size_t i = 1; i < f.size(); ++i) {
    if (f[i] == "system" || f[i] == "user") {
      if (have_source) return std::nullopt;
      have_source = true;
      in.source = f[i] == "system" ? TokenSource::kSystem : TokenSource::kUserAsr;
    } else if (f[i] == "eot") {
      if (have_eot) return std::nullopt;
      have_eot = true;
      in.end_of_turn = true;
    } else if (auto v = parse_number(f[i])) {
      if (have_score || have_source || have_eot) return std::nullopt;
      have_score = true;
      in.score = *v;
    } else {
      return std::nullopt;
    }
  }
  return in;
}

std::string format_line(const corpus::TokenEvent& event) {
  std::ostringstream out;
  out.precision(17);
  out << event.token << ' ' << event.score << ' ' << (corpus::is_user(event.source) ? "user" : "system");
  if (event.turn_final) out << " eot";
  return out.str();
}

TrackingSession::TrackingSession(const ensemble::Ensemble& models, const corpus::SlotSchema& schema,
                                 const preprocess::Vocabulary& vocab, const preprocess::AbstractionDict* dict,
                                 std::size_t top_k, std::string dialog_prefix)
    : models_(&models), schema_(&schema), vocab_(&vocab), top_k_(top_k), prefix_(std::move(dialog_prefix)) {
  models.validate();
  if (models.members.size() != schema.size()) throw std::invalid_argument("TrackingSession: schema mismatch");
  if (models.vocab_hash() != vocab.hash())
    throw DataError("models were trained with vocabulary " + hex64(models.vocab_hash()) + ", not " +
                    hex64(vocab.hash()));
  bool abstract = false;
  for (const auto& list : models.members)
    if (!list.empty() && list.front().abstract_tokens > 0) abstract = true;
  if (abstract) {
    if (!dict) throw std::invalid_argument("TrackingSession: models use abstraction but no dictionary was given");
    abstractor_.emplace(*dict, schema);
  }
  start_dialog();
}

void TrackingSession::start_dialog() {
  dialog_id_ = prefix_ + "-" + std::to_string(dialog_count_++);
  consumed_ = 0;
  turn_ = 0;
  last_source_.reset();
  if (abstractor_) abstractor_->reset();
  states_.assign(schema_->size(), {});
  probs_.assign(schema_->size(), {});
  for (std::size_t c = 0; c < schema_->size(); ++c) {
    for (const auto& m : models_->members[c]) {
      states_[c].push_back(model::TrackerState::initial(m.dims));
      probs_[c].push_back(model::classify(m, states_[c].back()));
    }
  }
}

void TrackingSession::consume(const corpus::TokenEvent& event) {
  const std::size_t id = vocab_->encode(event.token);
  for (std::size_t c = 0; c < schema_->size(); ++c) {
    const auto& list = models_->members[c];
    for (std::size_t k = 0; k < list.size(); ++k) {
      auto [next, p] = model::track_token(list[k], states_[c][k], {id, event.score, vocab_->hash()});
      states_[c][k] = std::move(next);
      probs_[c][k] = std::move(p);
    }
  }
}

std::vector<std::vector<double>> TrackingSession::distributions() const {
  std::vector<std::vector<double>> out(schema_->size());
  const std::vector<std::string> none;
  for (std::size_t c = 0; c < schema_->size(); ++c) {
    const auto& list = models_->members[c];
    if (list.empty()) continue;
    const auto& assigned = abstractor_ ? abstractor_->assignment().values[c] : none;
    out[c] = preprocess::deabstract_distribution(ensemble::average_predictions(probs_[c]), schema_->components[c],
                                                 assigned, list.front().abstract_tokens);
  }
  return out;
}

json TrackingSession::trace(const json& token, double score, const std::vector<std::string>& emitted) const {
  const auto dists = distributions();
  json comps = json::object();
  for (std::size_t c = 0; c < schema_->size(); ++c) {
    if (dists[c].empty()) continue;
    const auto& values = schema_->components[c].values;
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dists[c][a] > dists[c][b]; });
    json top = json::array();
    for (std::size_t i = 0; i < std::min(top_k_, order.size()); ++i)
      top.push_back({{"value", values[order[i]]}, {"p", dists[c][order[i]]}});
    comps[schema_->components[c].name] = std::move(top);
  }
  return {{"dialog_id", dialog_id_},
          {"t", consumed_},
          {"turn", turn_},
          {"token", token},
          {"score", score},
          {"emitted", emitted},
          {"pending", abstractor_ ? abstractor_->pending() : 0},
          {"components", std::move(comps)}};
}

json TrackingSession::feed(const TrackInput& input) {
  if (last_source_ && corpus::is_user(*last_source_) && !corpus::is_user(input.source)) ++turn_;
  corpus::TokenEvent event{input.token, input.score, input.source, turn_, input.end_of_turn};
  std::vector<corpus::TokenEvent> released;
  if (abstractor_) {
    released = abstractor_->push(event);
  } else {
    released.push_back(event);
  }
  std::vector<std::string> emitted;
  for (const auto& e : released) {
    consume(e);
    emitted.push_back(e.token);
  }
  ++consumed_;
  json line = trace(input.token, input.score, emitted);
  // After eot the next token starts a new turn regardless of speaker.
  if (input.end_of_turn) {
    ++turn_;
    last_source_.reset();
  } else {
    last_source_ = input.source;
  }
  return line;
}

json TrackingSession::reset() {
  start_dialog();
  json line = trace(nullptr, 1.0, {});
  line["reset"] = true;
  return line;
}

std::optional<json> TrackingSession::process_line(std::string_view line) {
  if (is_reset(line)) return reset();
  auto in = parse_line(line);
  if (!in) {
    if (!fields(line).empty()) warn("skipping malformed input line: " + std::string(line));
    return std::nullopt;
  }
  return feed(*in);
}

}  // namespace lectrack::session
