#include "lectrack/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "lectrack/kernels.hpp"
#include "lectrack/util.hpp"

namespace lectrack::model {

using nlohmann::json;

ComponentModel make_model(const corpus::Component& component, int abstract_tokens, ModelDims dims,
                          std::uint64_t vocab_hash) {
  ComponentModel m;
  m.component = component.name;
  m.classes = preprocess::class_names(component, abstract_tokens);
  m.abstract_tokens = preprocess::abstract_class_count(component, abstract_tokens);
  dims.classes = m.classes.size();
  if (dims.vocab == 0 || dims.embedding == 0 || dims.input_hidden == 0 || dims.lstm == 0)
    throw std::invalid_argument("make_model: zero dimension");
  m.dims = dims;
  m.vocab_hash = vocab_hash;
  const std::size_t H = dims.lstm;
  m.params.add(kEmbedding, dims.vocab, dims.embedding);
  m.params.add(kInputWeight, dims.input_hidden, dims.input_width());
  m.params.add(kInputBias, dims.input_hidden, 1);
  m.params.add(kLstmWeight, 4 * H, dims.input_hidden + H);
  m.params.add(kLstmBias, 4 * H, 1);
  m.params.add(kClassifierWeight, dims.classes, H);
  m.params.add(kClassifierBias, dims.classes, 1);
  return m;
}

nn::InitSpec init_spec(const ModelDims& dims) {
  using Kind = nn::TensorInit::Kind;
  const std::size_t H = dims.lstm;
  nn::InitSpec spec;
  // An embedding lookup is an affine map of a one-hot |V| vector.
  spec.tensors = {
      {kEmbedding, dims.vocab, Kind::kGaussian},
      {kInputWeight, dims.input_width(), Kind::kGaussian},
      {kInputBias, 1, Kind::kZero},
      {kLstmWeight, dims.input_hidden + H, Kind::kGaussian},
      {kLstmBias, 1, Kind::kZero},
      {kClassifierWeight, H, Kind::kGaussian},
      {kClassifierBias, 1, Kind::kZero},
  };
  spec.overrides = {{kLstmBias, H, 2 * H, 1.0}};
  return spec;
}

void initialize(ComponentModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  nn::init_params(model.params, init_spec(model.dims), rng);
}

TrackerState TrackerState::initial(const ModelDims& dims) {
  return {std::vector<double>(dims.lstm, 0.0), std::vector<double>(dims.lstm, 0.0), 0};
}

// ---------------------------------------------------------------------------
// Incremental route

std::vector<double> embed_with_score(const ComponentModel& model, std::size_t token_id, double score) {
  const auto& d = model.dims;
  if (token_id >= d.vocab)
    throw std::out_of_range("embed_with_score: token id " + std::to_string(token_id) + " outside vocabulary");
  const auto& e = model.params.at(kEmbedding).value;
  std::vector<double> x(e.row(token_id).begin(), e.row(token_id).end());
  if (d.use_score) x.push_back(score);

  const auto& w = model.params.at(kInputWeight).value;
  const auto b = model.params.at(kInputBias).value.data();
  std::vector<double> u(d.input_hidden);
  kernels::gemv(w.data(), w.rows(), w.cols(), x, u);
  for (std::size_t k = 0; k < u.size(); ++k) {
    u[k] += b[k];
    u[k] = u[k] > 0.0 ? u[k] : 0.0;
  }
  return u;
}

TrackerState lstm_step(const ComponentModel& model, std::span<const double> u, const TrackerState& state) {
  const std::size_t H = model.dims.lstm;
  if (u.size() != model.dims.input_hidden || state.h.size() != H || state.c.size() != H)
    throw std::invalid_argument("lstm_step: dimension mismatch");
  std::vector<double> x(u.begin(), u.end());
  x.insert(x.end(), state.h.begin(), state.h.end());

  const auto& w = model.params.at(kLstmWeight).value;
  const auto b = model.params.at(kLstmBias).value.data();
  std::vector<double> z(4 * H);
  kernels::gemv(w.data(), w.rows(), w.cols(), x, z);
  for (std::size_t k = 0; k < z.size(); ++k) z[k] += b[k];

  TrackerState next{std::vector<double>(H), std::vector<double>(H), state.token_count + 1};
  for (std::size_t k = 0; k < H; ++k) {
    const double i = std::tanh(z[k]);  // tanh input gate
    const double f = nn::sigmoid(z[H + k]);
    const double o = nn::sigmoid(z[2 * H + k]);
    const double g = std::tanh(z[3 * H + k]);
    next.c[k] = f * state.c[k] + i * g;
    next.h[k] = o * std::tanh(next.c[k]);
  }
  return next;
}

std::vector<double> classify(const ComponentModel& model, const TrackerState& state) {
  const auto& w = model.params.at(kClassifierWeight).value;
  const auto b = model.params.at(kClassifierBias).value.data();
  std::vector<double> logits(w.rows());
  kernels::gemv(w.data(), w.rows(), w.cols(), state.h, logits);
  for (std::size_t k = 0; k < logits.size(); ++k) logits[k] += b[k];
  return nn::softmax(logits);
}

std::pair<TrackerState, std::vector<double>> track_token(const ComponentModel& model, const TrackerState& state,
                                                         const EncodedToken& token) {
  if (token.vocab_hash != model.vocab_hash)
    throw std::invalid_argument("track_token: token encoded against a different vocabulary");
  auto u = embed_with_score(model, token.id, token.score);
  auto next = lstm_step(model, u, state);
  auto p = classify(model, next);
  return {std::move(next), std::move(p)};
}

EncodedDialog encode(const corpus::DialogExample& example, const preprocess::Vocabulary& vocab) {
  EncodedDialog d;
  d.dialog_id = example.dialog_id;
  d.ids.reserve(example.events.size());
  d.scores.reserve(example.events.size());
  for (const auto& e : example.events) {
    d.ids.push_back(vocab.encode(e.token));
    d.scores.push_back(e.score);
  }
  d.labels = example.labels;
  d.turn_end = example.turn_end;
  d.vocab_hash = vocab.hash();
  return d;
}

std::vector<std::size_t> label_targets(const ComponentModel& model, const EncodedDialog& dialog,
                                       std::size_t schema_index) {
  std::vector<std::size_t> targets;
  targets.reserve(dialog.labels.size());
  for (const auto& l : dialog.labels) {
    const std::string& v = l.values.at(schema_index);
    auto it = std::find(model.classes.begin(), model.classes.end(), v);
    if (it == model.classes.end())
      throw DataError("dialog " + dialog.dialog_id + " turn " + std::to_string(l.turn_index) + ": label '" + v +
                      "' is not a class of " + model.component);
    targets.push_back(static_cast<std::size_t>(it - model.classes.begin()));
  }
  return targets;
}

// ---------------------------------------------------------------------------
// Batched route

nn::Var build_dialog_graph(nn::Tape& tape, ComponentModel& model, const EncodedDialog& dialog,
                           std::span<const std::size_t> targets, std::vector<nn::Var>* step_probs) {
  if (dialog.vocab_hash != model.vocab_hash)
    throw std::invalid_argument("dialog " + dialog.dialog_id + " encoded against a different vocabulary");
  if (targets.size() != dialog.labels.size()) throw std::invalid_argument("build_dialog_graph: target count mismatch");
  const std::size_t H = model.dims.lstm;
  auto& emb = model.params.at(kEmbedding);
  auto& win = model.params.at(kInputWeight);
  auto& bin = model.params.at(kInputBias);
  auto& wl = model.params.at(kLstmWeight);
  auto& bl = model.params.at(kLstmBias);
  auto& wc = model.params.at(kClassifierWeight);
  auto& bc = model.params.at(kClassifierBias);

  const std::vector<double> zeros(H, 0.0);
  nn::Var c = tape.input(zeros);
  nn::Var h = tape.input(zeros);
  std::vector<nn::Var> losses;
  std::size_t next_label = 0;

  for (std::size_t t = 0; t < dialog.ids.size(); ++t) {
    nn::Var x = tape.lookup(emb, dialog.ids[t]);
    if (model.dims.use_score) {
      const double s = dialog.scores[t];
      x = tape.concat(x, tape.input(std::span(&s, 1)));
    }
    nn::Var u = tape.relu(tape.affine(win, x, &bin));
    nn::Var z = tape.affine(wl, tape.concat(u, h), &bl);
    nn::Var i = tape.tanh(tape.slice(z, 0, H));
    nn::Var f = tape.sigmoid(tape.slice(z, H, H));
    nn::Var o = tape.sigmoid(tape.slice(z, 2 * H, H));
    nn::Var g = tape.tanh(tape.slice(z, 3 * H, H));
    c = tape.add(tape.mul(f, c), tape.mul(i, g));
    h = tape.mul(o, tape.tanh(c));

    const bool labeled = next_label < dialog.labels.size() && dialog.labels[next_label].event_index == t;
    if (labeled || step_probs) {
      nn::Var logits = tape.affine(wc, h, &bc);
      if (step_probs) step_probs->push_back(tape.softmax(logits));
      while (next_label < dialog.labels.size() && dialog.labels[next_label].event_index == t) {
        if (targets[next_label] != kNoTarget) losses.push_back(tape.softmax_cross_entropy(logits, targets[next_label]));
        ++next_label;
      }
    }
  }
  if (losses.empty()) {
    const double zero = 0.0;
    return tape.input(std::span(&zero, 1));
  }
  return tape.sum(losses);
}

double dialog_loss(ComponentModel& model, const EncodedDialog& dialog, std::span<const std::size_t> targets) {
  nn::Tape tape;
  return tape.value(build_dialog_graph(tape, model, dialog, targets))[0];
}

std::vector<std::vector<double>> batch_distributions(const ComponentModel& model, const EncodedDialog& dialog) {
  // Forward only: the tape never runs backward, so gradients are untouched.
  auto& mutable_model = const_cast<ComponentModel&>(model);
  nn::Tape tape;
  std::vector<nn::Var> probs;
  const std::vector<std::size_t> none(dialog.labels.size(), kNoTarget);
  build_dialog_graph(tape, mutable_model, dialog, none, &probs);
  std::vector<std::vector<double>> out;
  out.reserve(probs.size());
  for (nn::Var p : probs) out.emplace_back(tape.value(p).begin(), tape.value(p).end());
  return out;
}

std::vector<std::vector<double>> turn_distributions(const ComponentModel& model, const EncodedDialog& dialog) {
  if (dialog.vocab_hash != model.vocab_hash)
    throw std::invalid_argument("dialog " + dialog.dialog_id + " encoded against a different vocabulary");
  TrackerState state = TrackerState::initial(model.dims);
  const std::vector<double> prior = classify(model, state);
  std::vector<std::vector<double>> at_step(dialog.ids.size());
  // Only distributions at turn ends are needed.
  std::vector<bool> wanted(dialog.ids.size(), false);
  for (long e : dialog.turn_end)
    if (e >= 0) wanted[static_cast<std::size_t>(e)] = true;
  for (std::size_t t = 0; t < dialog.ids.size(); ++t) {
    auto u = embed_with_score(model, dialog.ids[t], dialog.scores[t]);
    state = lstm_step(model, u, state);
    if (wanted[t]) at_step[t] = classify(model, state);
  }
  std::vector<std::vector<double>> out;
  out.reserve(dialog.turn_end.size());
  for (long e : dialog.turn_end) out.push_back(e < 0 ? prior : at_step[static_cast<std::size_t>(e)]);
  return out;
}

std::vector<BeliefState> track_dialog(const EncodedDialog& dialog, std::span<const ComponentModel* const> models,
                                      const corpus::SlotSchema& schema,
                                      const preprocess::AbstractionAssignment& assignment) {
  if (models.size() != schema.size()) throw std::invalid_argument("track_dialog: one model slot per component expected");
  std::vector<BeliefState> out(dialog.turn_end.size());
  for (auto& b : out) b.components.resize(schema.size());
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (!models[c]) continue;
    const auto per_turn = turn_distributions(*models[c], dialog);
    for (std::size_t t = 0; t < per_turn.size(); ++t)
      out[t].components[c] = preprocess::deabstract_distribution(
          per_turn[t], schema.components[c], assignment.known_at(c, dialog.turn_end[t]), models[c]->abstract_tokens);
  }
  return out;
}

// ---------------------------------------------------------------------------

json manifest(const ComponentModel& model) {
  const auto& d = model.dims;
  return {{"version", 1},
          {"component", model.component},
          {"classes", model.classes},
          {"abstract_tokens", model.abstract_tokens},
          {"dims",
           {{"vocab", d.vocab},
            {"embedding", d.embedding},
            {"input_hidden", d.input_hidden},
            {"lstm", d.lstm},
            {"classes", d.classes},
            {"use_score", d.use_score}}},
          {"vocab_hash", hex64(model.vocab_hash)},
          {"params_hash", hex64(nn::params_hash(model.params))}};
}

void save_model(const ComponentModel& model, const std::filesystem::path& dir) {
  nn::save_params(model.params, dir / (model.component + ".ckpt"));
  write_file(dir / (model.component + ".json"), manifest(model).dump(2) + "\n");
}

ComponentModel load_model(const std::filesystem::path& dir, const std::string& component) {
  const auto mpath = dir / (component + ".json");
  json m;
  try {
    m = json::parse(read_file(mpath));
  } catch (const json::exception& e) {
    throw DataError("cannot parse " + mpath.string() + ": " + e.what());
  }
  if (m.value("version", 0) != 1) throw DataError("unsupported model manifest " + mpath.string());
  ComponentModel model;
  model.component = m.at("component").get<std::string>();
  model.classes = m.at("classes").get<std::vector<std::string>>();
  model.abstract_tokens = m.at("abstract_tokens").get<int>();
  const auto& d = m.at("dims");
  model.dims = {d.at("vocab").get<std::size_t>(),        d.at("embedding").get<std::size_t>(),
                d.at("input_hidden").get<std::size_t>(), d.at("lstm").get<std::size_t>(),
                d.at("classes").get<std::size_t>(),      d.at("use_score").get<bool>()};
  model.vocab_hash = std::stoull(m.at("vocab_hash").get<std::string>(), nullptr, 16);
  model.params = nn::load_params(dir / (component + ".ckpt"));
  if (hex64(nn::params_hash(model.params)) != m.at("params_hash").get<std::string>())
    throw DataError("checkpoint hash mismatch for " + component);
  const std::size_t H = model.dims.lstm;
  const auto& lw = model.params.at(kLstmWeight).value;
  if (lw.rows() != 4 * H || model.params.at(kEmbedding).value.rows() != model.dims.vocab ||
      model.params.at(kClassifierWeight).value.rows() != model.classes.size())
    throw DataError("checkpoint shapes disagree with manifest for " + component);
  return model;
}

}  // namespace lectrack::model
