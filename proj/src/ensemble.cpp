#include "lectrack/ensemble.hpp"

#include <cstdio>
#include <exception>
#include <stdexcept>

#include "lectrack/util.hpp"

namespace lectrack::ensemble {

using nlohmann::json;

std::vector<double> average_predictions(std::span<const std::vector<double>> distributions) {
  if (distributions.empty()) throw std::invalid_argument("average_predictions: no distributions");
  const std::size_t n = distributions.front().size();
  std::vector<double> mean(n, 0.0);
  for (const auto& d : distributions) {
    if (d.size() != n) throw std::invalid_argument("average_predictions: length mismatch");
    for (std::size_t i = 0; i < n; ++i) mean[i] += d[i];
  }
  const double scale = static_cast<double>(distributions.size());
  for (double& v : mean) v /= scale;
  return mean;
}

std::size_t Ensemble::member_count() const {
  for (const auto& m : members)
    if (!m.empty()) return m.size();
  return 0;
}

std::vector<bool> Ensemble::tracked() const {
  std::vector<bool> out(members.size());
  for (std::size_t c = 0; c < members.size(); ++c) out[c] = !members[c].empty();
  return out;
}

std::uint64_t Ensemble::vocab_hash() const {
  for (const auto& m : members)
    if (!m.empty()) return m.front().vocab_hash;
  return 0;
}

void Ensemble::validate() const {
  const std::size_t n = member_count();
  if (n == 0) throw std::invalid_argument("ensemble has no members");
  const std::uint64_t vh = vocab_hash();
  for (const auto& list : members) {
    if (list.empty()) continue;
    if (list.size() != n) throw std::invalid_argument("ensemble: components have different member counts");
    for (const auto& m : list) {
      if (m.dims != list.front().dims || m.classes != list.front().classes)
        throw std::invalid_argument("ensemble: members of " + m.component + " differ in shape");
      if (m.vocab_hash != vh) throw std::invalid_argument("ensemble: members use different vocabularies");
    }
  }
}

void add_member(Ensemble& ensemble, std::vector<model::ComponentModel> models, const corpus::SlotSchema& schema) {
  ensemble.members.resize(schema.size());
  for (auto& m : models) {
    const auto c = schema.index_of(m.component);
    if (!c) throw std::invalid_argument("add_member: unknown component " + m.component);
    ensemble.members[*c].push_back(std::move(m));
  }
}

std::vector<model::BeliefState> track_ensemble(const model::EncodedDialog& dialog, const Ensemble& ensemble,
                                               const corpus::SlotSchema& schema,
                                               const preprocess::AbstractionAssignment& assignment) {
  if (ensemble.members.size() != schema.size()) throw std::invalid_argument("track_ensemble: schema mismatch");
  std::vector<model::BeliefState> out(dialog.turn_end.size());
  for (auto& b : out) b.components.resize(schema.size());
  for (std::size_t c = 0; c < schema.size(); ++c) {
    const auto& list = ensemble.members[c];
    if (list.empty()) continue;
    std::vector<std::vector<std::vector<double>>> per_member;
    per_member.reserve(list.size());
    for (const auto& m : list) per_member.push_back(model::turn_distributions(m, dialog));
    std::vector<std::vector<double>> at_turn(list.size());
    for (std::size_t t = 0; t < out.size(); ++t) {
      for (std::size_t k = 0; k < list.size(); ++k) at_turn[k] = per_member[k][t];
      out[t].components[c] = preprocess::deabstract_distribution(average_predictions(at_turn), schema.components[c],
                                                                 assignment.known_at(c, dialog.turn_end[t]),
                                                                 list.front().abstract_tokens);
    }
  }
  return out;
}

std::vector<eval::TurnPrediction> predict(std::span<const model::EncodedDialog> dialogs,
                                          std::span<const preprocess::AbstractionAssignment> assignments,
                                          const Ensemble& ensemble, const corpus::SlotSchema& schema) {
  if (assignments.size() != dialogs.size()) throw std::invalid_argument("predict: one assignment per dialog expected");
  const std::uint64_t vh = ensemble.vocab_hash();
  for (const auto& d : dialogs)
    if (d.vocab_hash != vh)
      throw DataError("dialog " + d.dialog_id + " was encoded with vocabulary " + hex64(d.vocab_hash) +
                      " but the models expect " + hex64(vh));
  std::vector<std::vector<eval::TurnPrediction>> per_dialog(dialogs.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < static_cast<long>(dialogs.size()); ++i) {
    try {
      const auto k = static_cast<std::size_t>(i);
      const auto beliefs = track_ensemble(dialogs[k], ensemble, schema, assignments[k]);
      per_dialog[k] = eval::to_predictions(dialogs[k].dialog_id, beliefs, schema);
    } catch (...) {
#pragma omp critical(lectrack_predict_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  std::vector<eval::TurnPrediction> out;
  for (auto& p : per_dialog) out.insert(out.end(), std::make_move_iterator(p.begin()), std::make_move_iterator(p.end()));
  return out;
}

namespace {

std::string member_dir(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "member-%02zu", k);
  return buf;
}

}  // namespace

json ensemble_manifest(const Ensemble& ensemble, const corpus::SlotSchema& schema, std::span<const std::uint64_t> seeds) {
  json members = json::array();
  for (std::size_t k = 0; k < ensemble.member_count(); ++k) {
    json comps = json::object();
    for (std::size_t c = 0; c < schema.size(); ++c) {
      if (ensemble.members[c].empty()) continue;
      const auto& m = ensemble.members[c][k];
      comps[m.component] = {{"checkpoint", member_dir(k) + "/" + m.component + ".ckpt"},
                            {"params_hash", hex64(nn::params_hash(m.params))}};
    }
    json entry = {{"index", k}, {"path", member_dir(k)}, {"components", std::move(comps)}};
    if (k < seeds.size()) entry["seed"] = seeds[k];
    members.push_back(std::move(entry));
  }
  return {{"version", 1},
          {"size", ensemble.member_count()},
          {"vocab_hash", hex64(ensemble.vocab_hash())},
          {"members", std::move(members)}};
}

void save_ensemble(const Ensemble& ensemble, const corpus::SlotSchema& schema, std::span<const std::uint64_t> seeds,
                   const std::filesystem::path& dir) {
  ensemble.validate();
  for (std::size_t k = 0; k < ensemble.member_count(); ++k)
    for (const auto& list : ensemble.members)
      if (!list.empty()) model::save_model(list[k], dir / member_dir(k));
  write_file(dir / "ensemble.json", ensemble_manifest(ensemble, schema, seeds).dump(2) + "\n");
}

Ensemble load_ensemble(const std::filesystem::path& dir, const corpus::SlotSchema& schema) {
  json m;
  try {
    m = json::parse(read_file(dir / "ensemble.json"));
  } catch (const json::exception& e) {
    throw DataError("cannot parse " + (dir / "ensemble.json").string() + ": " + e.what());
  }
  Ensemble ensemble;
  ensemble.members.resize(schema.size());
  try {
    for (const auto& member : m.at("members")) {
      const std::filesystem::path mdir = dir / member.at("path").get<std::string>();
      std::vector<model::ComponentModel> models;
      for (const auto& [name, info] : member.at("components").items()) {
        models.push_back(model::load_model(mdir, name));
        if (hex64(nn::params_hash(models.back().params)) != info.at("params_hash").get<std::string>())
          throw DataError("ensemble member " + mdir.string() + ": hash mismatch for " + name);
      }
      add_member(ensemble, std::move(models), schema);
    }
  } catch (const json::exception& e) {
    throw DataError("malformed " + (dir / "ensemble.json").string() + ": " + e.what());
  }
  try {
    ensemble.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(dir.string() + ": " + e.what());
  }
  return ensemble;
}

Ensemble load_model_dir(const std::filesystem::path& dir, const corpus::SlotSchema& schema) {
  std::vector<model::ComponentModel> models;
  for (const auto& comp : schema.components)
    if (std::filesystem::exists(dir / (comp.name + ".json"))) models.push_back(model::load_model(dir, comp.name));
  if (models.empty()) throw DataError("no model checkpoints in " + dir.string());
  Ensemble ensemble;
  add_member(ensemble, std::move(models), schema);
  return ensemble;
}

}  // namespace lectrack::ensemble
