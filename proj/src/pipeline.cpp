#include "lectrack/pipeline.hpp"

#include <istream>
#include <ostream>

#include "lectrack/session.hpp"
#include "lectrack/util.hpp"

namespace lectrack::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* score_mode_name(corpus::AsrScoreMode m) { return m == corpus::AsrScoreMode::kClamp ? "clamp" : "exp"; }

json parse_json_file(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DataError("cannot parse " + path.string() + ": " + e.what());
  }
}

train::TrainConfig effective_train_config(const RunConfig& config) {
  train::TrainConfig t = config.train;
  t.seed = config.seed;
  return t;
}

json examples_document(const std::vector<corpus::DialogExample>& examples, const std::vector<eval::DialogTruth>* truths) {
  json dialogs = json::array();
  for (const auto& ex : examples) dialogs.push_back(corpus::to_json(ex));
  json doc = {{"version", 1}, {"dialogs", std::move(dialogs)}};
  if (truths) {
    json t = json::array();
    for (const auto& tr : *truths) t.push_back(eval::to_json(tr));
    doc["truths"] = std::move(t);
  }
  return doc;
}

void read_examples_document(const json& doc, std::vector<corpus::DialogExample>& examples,
                            std::vector<eval::DialogTruth>* truths) {
  for (const auto& d : doc.at("dialogs")) examples.push_back(corpus::example_from_json(d));
  if (truths)
    for (const auto& t : doc.at("truths")) truths->push_back(eval::truth_from_json(t));
}

std::string file_fingerprint(const fs::path& path) {
  return path.empty() ? std::string() : hex64(fnv1a64(read_file(path)));
}

bool uses_abstraction(const ensemble::Ensemble& models) {
  for (const auto& list : models.members)
    if (!list.empty() && list.front().abstract_tokens > 0) return true;
  return false;
}

void check_vocabulary(const ensemble::Ensemble& models, const Prepared& p) {
  if (models.vocab_hash() != p.vocab.hash())
    throw DataError("refusing to run: models were trained with vocabulary " + hex64(models.vocab_hash()) +
                    " but the prepared data uses " + hex64(p.vocab.hash()));
}

eval::MetricsReport score_models(const ensemble::Ensemble& models, const Prepared& p,
                                 const std::vector<corpus::DialogExample>& examples,
                                 const std::vector<eval::DialogTruth>& truths) {
  const auto split = encode_split(p, examples, uses_abstraction(models));
  const auto preds = ensemble::predict(split.dialogs, split.assignments, models, p.schema);
  return eval::score(preds, truths, eval::tracked_view(p.schema, models.tracked()), {.quiet_missing = true});
}

void log_epoch(std::ostream& log, const std::string& tag, const train::EpochRecord& r) {
  log << tag << "epoch " << r.epoch;
  for (const auto& [name, loss] : r.train_loss) log << " " << name << "=" << loss;
  for (corpus::Group g : {corpus::Group::kGoal, corpus::Group::kMethod, corpus::Group::kRequested})
    if (const auto& m = r.dev.group(g)) log << " dev." << corpus::group_name(g) << "=" << m->accuracy;
  log << " (" << r.wall_seconds << "s)\n";
  log.flush();
}

std::vector<model::ComponentModel> copy_models(const std::vector<model::ComponentModel>& models) { return models; }

}  // namespace

json RunConfig::to_json() const {
  return {{"data_root", data_root.string()},
          {"train_flist", train_flist.string()},
          {"dev_flist", dev_flist.string()},
          {"test_flist", test_flist.string()},
          {"ontology", ontology.string()},
          {"out_dir", out_dir.string()},
          {"components", components},
          {"ensemble_size", ensemble_size},
          {"seed", seed},
          {"score_mode", score_mode_name(score_mode)},
          {"train", train.to_json()}};
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  auto path = [&](const json& v) {
    fs::path p = v.get<std::string>();
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
  };
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "data_root") c.data_root = path(v);
      else if (key == "train_flist") c.train_flist = path(v);
      else if (key == "dev_flist") c.dev_flist = path(v);
      else if (key == "test_flist") c.test_flist = path(v);
      else if (key == "ontology") c.ontology = path(v);
      else if (key == "out_dir") c.out_dir = path(v);
      else if (key == "components") c.components = v.get<std::vector<std::string>>();
      else if (key == "ensemble_size") c.ensemble_size = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "score_mode") {
        const auto s = v.get<std::string>();
        if (s == "clamp") c.score_mode = corpus::AsrScoreMode::kClamp;
        else if (s == "exp") c.score_mode = corpus::AsrScoreMode::kExp;
        else throw ConfigError("unknown score_mode '" + s + "'");
      } else if (key == "train") c.train = train::TrainConfig::from_json(v);
      else throw ConfigError("unknown run config key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError("run config: " + std::string(e.what()));
  }
  for (const auto* req : {&c.data_root, &c.train_flist, &c.dev_flist, &c.ontology})
    if (req->empty()) throw ConfigError("run config needs data_root, train_flist, dev_flist and ontology");
  if (c.ensemble_size < 1) throw ConfigError("ensemble_size must be >= 1");
  c.train.seed = c.seed;
  return c;
}

std::uint64_t RunConfig::hash() const {
  json j = to_json();
  j.erase("out_dir");
  return fnv1a64(j.dump());
}

void RunConfig::check_inputs() const {
  auto need = [](const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw ConfigError(std::string(what) + " not found: " + p.string());
  };
  need(ontology, "ontology");
  need(data_root, "data root");
  need(train_flist, "train flist");
  need(dev_flist, "dev flist");
  if (!test_flist.empty()) need(test_flist, "test flist");
}

RunConfig load_run_config(const fs::path& file) {
  json j;
  try {
    j = json::parse(read_file(file));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse config " + file.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return RunConfig::from_json(j, file.parent_path());
}

fs::path prepared_dir(const RunConfig& config) { return config.out_dir / "prepared"; }

std::vector<std::size_t> select_components(const corpus::SlotSchema& schema, const std::vector<std::string>& names) {
  std::vector<std::size_t> out;
  const bool all = names.empty() || (names.size() == 1 && names[0] == "all");
  for (std::size_t c = 0; c < schema.size(); ++c) {
    if (all || std::find(names.begin(), names.end(), schema.components[c].name) != names.end()) out.push_back(c);
  }
  if (!all)
    for (const auto& n : names)
      if (!schema.index_of(n)) throw ConfigError("unknown component '" + n + "'");
  return out;
}

// ---------------------------------------------------------------------------

json cmd_prepare(const RunConfig& config) {
  config.check_inputs();
  const auto tc = effective_train_config(config);
  const corpus::SerializeOptions so{config.score_mode};
  const auto train_raw = corpus::load_dataset(config.data_root, config.train_flist, config.ontology);
  const auto dev_raw = corpus::load_dataset(config.data_root, config.dev_flist, config.ontology);
  corpus::Dataset test_raw;
  if (!config.test_flist.empty()) test_raw = corpus::load_dataset(config.data_root, config.test_flist, config.ontology);
  const auto& schema = train_raw.schema;

  std::vector<corpus::DialogExample> train_asr, train_tr, dev, test;
  std::vector<eval::DialogTruth> dev_truths, test_truths;
  for (const auto& d : train_raw.dialogs) {
    train_asr.push_back(corpus::serialize_dialog(d, corpus::UserSource::kAsr1Best, schema, so));
    train_tr.push_back(corpus::serialize_dialog(d, corpus::UserSource::kTranscript, schema, so));
  }
  for (const auto& d : dev_raw.dialogs) {
    dev.push_back(corpus::serialize_dialog(d, corpus::UserSource::kAsr1Best, schema, so));
    dev_truths.push_back(eval::make_truth(d, schema));
  }
  for (const auto& d : test_raw.dialogs) {
    test.push_back(corpus::serialize_dialog(d, corpus::UserSource::kAsr1Best, schema, so));
    test_truths.push_back(eval::make_truth(d, schema));
  }

  const auto counts = preprocess::count_labels(train_asr, schema);
  const auto dict =
      preprocess::build_abstraction_dict(schema, counts, tc.abstraction_threshold, tc.max_abstract_tokens);
  const auto vocab_source = tc.use_transcriptions ? preprocess::mix_transcriptions(train_asr, train_tr) : train_asr;
  const auto vocab = preprocess::build_vocabulary(vocab_source, schema, tc.max_abstract_tokens);

  const fs::path dir = prepared_dir(config);
  std::map<std::string, std::string> files = {
      {"ontology.json", parse_json_file(config.ontology).dump(1) + "\n"},
      {"vocabulary.json", vocab.to_json().dump() + "\n"},
      {"abstraction.json", dict.to_json().dump(1) + "\n"},
      {"train_asr.json", examples_document(train_asr, nullptr).dump() + "\n"},
      {"train_transcript.json", examples_document(train_tr, nullptr).dump() + "\n"},
      {"dev.json", examples_document(dev, &dev_truths).dump() + "\n"},
      {"test.json", examples_document(test, &test_truths).dump() + "\n"},
  };
  json hashes = json::object();
  for (const auto& [name, contents] : files) {
    write_file(dir / name, contents);
    hashes[name] = hex64(fnv1a64(contents));
  }
  json manifest = {{"version", 1},
                   {"config_hash", hex64(config.hash())},
                   {"seed", config.seed},
                   {"vocab_hash", hex64(vocab.hash())},
                   {"vocab_size", vocab.size()},
                   {"dialogs",
                    {{"train", train_asr.size()},
                     {"train_prepared", tc.use_transcriptions ? 2 * train_asr.size() : train_asr.size()},
                     {"dev", dev.size()},
                     {"test", test.size()}}},
                   {"files", std::move(hashes)},
                   {"data_fingerprint",
                    {{"train_flist", file_fingerprint(config.train_flist)},
                     {"dev_flist", file_fingerprint(config.dev_flist)},
                     {"test_flist", file_fingerprint(config.test_flist)},
                     {"ontology", file_fingerprint(config.ontology)}}}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return manifest;
}

Prepared load_prepared(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json"))
    throw DataError("no prepared data in " + dir.string() + " (run `lectrack prepare` first)");
  Prepared p;
  p.manifest = parse_json_file(dir / "manifest.json");
  std::map<std::string, json> docs;
  for (const auto& [name, hash] : p.manifest.at("files").items()) {
    const std::string contents = read_file(dir / name);
    if (hex64(fnv1a64(contents)) != hash.get<std::string>())
      throw DataError("prepared artifact " + (dir / name).string() + " does not match its manifest hash");
    try {
      docs[name] = json::parse(contents);
    } catch (const json::exception& e) {
      throw DataError("cannot parse " + (dir / name).string() + ": " + e.what());
    }
  }
  try {
    p.schema = corpus::schema_from_ontology(docs.at("ontology.json"));
    p.vocab = preprocess::Vocabulary::from_json(docs.at("vocabulary.json"));
    p.dict = preprocess::AbstractionDict::from_json(docs.at("abstraction.json"));
    read_examples_document(docs.at("train_asr.json"), p.train_asr, nullptr);
    read_examples_document(docs.at("train_transcript.json"), p.train_transcript, nullptr);
    read_examples_document(docs.at("dev.json"), p.dev, &p.dev_truths);
    read_examples_document(docs.at("test.json"), p.test, &p.test_truths);
  } catch (const std::out_of_range& e) {
    throw DataError("incomplete prepared data in " + dir.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw DataError("malformed prepared data in " + dir.string() + ": " + e.what());
  }
  if (p.manifest.at("vocab_hash").get<std::string>() != hex64(p.vocab.hash()))
    throw DataError("vocabulary hash does not match the prepared manifest");
  return p;
}

EncodedSplit encode_split(const Prepared& prepared, const std::vector<corpus::DialogExample>& examples,
                          bool abstraction) {
  EncodedSplit out;
  for (const auto& ex : examples) {
    if (abstraction) {
      auto [abstracted, assignment] =
          preprocess::abstract_example(ex, prepared.dict, prepared.schema, preprocess::LabelMode::kIgnore);
      out.dialogs.push_back(model::encode(abstracted, prepared.vocab));
      out.assignments.push_back(std::move(assignment));
    } else {
      out.dialogs.push_back(model::encode(ex, prepared.vocab));
      out.assignments.push_back({std::vector<std::vector<std::string>>(prepared.schema.size())});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct FitOutput {
  train::FitResult result;
  eval::MetricsReport dev;
  eval::MetricsReport test;
};

FitOutput run_fit(const Prepared& p, const train::TrainConfig& tc, const std::vector<std::size_t>& comps,
                  std::ostream& log, const std::string& tag) {
  const auto train_examples =
      tc.use_transcriptions ? preprocess::mix_transcriptions(p.train_asr, p.train_transcript) : p.train_asr;
  const auto set = train::make_training_set(p.schema, p.vocab, &p.dict, tc, train_examples, p.dev, p.dev_truths);
  FitOutput out;
  out.result = train::fit(set, tc, comps, [&](const train::EpochRecord& r) { log_epoch(log, tag, r); });
  ensemble::Ensemble single;
  ensemble::add_member(single, copy_models(out.result.best), p.schema);
  out.dev = score_models(single, p, p.dev, p.dev_truths);
  out.test = score_models(single, p, p.test, p.test_truths);
  return out;
}

}  // namespace

train::TrainReport cmd_train(const RunConfig& config, std::ostream& log) {
  const auto p = load_prepared(prepared_dir(config));
  const auto tc = effective_train_config(config);
  const auto comps = select_components(p.schema, config.components);
  auto out = run_fit(p, tc, comps, log, "");

  const fs::path dir = config.out_dir / "train";
  for (const auto& m : out.result.best) model::save_model(m, dir / "best");
  for (const auto& m : out.result.last) model::save_model(m, dir / "last");
  json report = out.result.report.to_json();
  report["dev_metrics"] = out.dev.to_json();
  report["test_metrics"] = out.test.to_json();
  write_file(dir / "report.json", report.dump(2) + "\n");
  write_file(dir / "timing.json", out.result.report.timing_json().dump(2) + "\n");
  write_file(dir / "manifest.json", json{{"config", tc.to_json()},
                                         {"config_hash", hex64(tc.hash())},
                                         {"vocab_hash", hex64(p.vocab.hash())},
                                         {"seed", tc.seed},
                                         {"data_fingerprint", p.manifest.at("data_fingerprint")}}
                                            .dump(2) + "\n");
  log << "dev\n" << out.dev.table() << "test\n" << out.test.table();
  return out.result.report;
}

json cmd_ensemble(const RunConfig& config, std::ostream& log) {
  const auto p = load_prepared(prepared_dir(config));
  const auto comps = select_components(p.schema, config.components);
  ensemble::Ensemble ens;
  std::vector<std::uint64_t> seeds;
  json members = json::array();
  for (std::size_t k = 0; k < config.ensemble_size; ++k) {
    auto tc = effective_train_config(config);
    tc.seed = config.seed + k;
    seeds.push_back(tc.seed);
    auto out = run_fit(p, tc, comps, log, "member " + std::to_string(k) + " ");
    members.push_back({{"index", k},
                       {"seed", tc.seed},
                       {"report", out.result.report.to_json()},
                       {"dev_metrics", out.dev.to_json()},
                       {"test_metrics", out.test.to_json()}});
    ensemble::add_member(ens, std::move(out.result.best), p.schema);
  }
  const fs::path dir = config.out_dir / "ensemble";
  ensemble::save_ensemble(ens, p.schema, seeds, dir);
  const auto dev = score_models(ens, p, p.dev, p.dev_truths);
  const auto test = score_models(ens, p, p.test, p.test_truths);
  json report = {{"size", config.ensemble_size},
                 {"members", std::move(members)},
                 {"dev_metrics", dev.to_json()},
                 {"test_metrics", test.to_json()}};
  write_file(dir / "report.json", report.dump(2) + "\n");
  log << "ensemble dev\n" << dev.table() << "ensemble test\n" << test.table();
  return report;
}

fs::path default_model_dir(const RunConfig& config) {
  const fs::path ens = config.out_dir / "ensemble";
  if (fs::exists(ens / "ensemble.json")) return ens;
  return config.out_dir / "train" / "best";
}

ensemble::Ensemble load_models(const fs::path& dir, const corpus::SlotSchema& schema) {
  if (fs::exists(dir / "ensemble.json")) return ensemble::load_ensemble(dir, schema);
  return ensemble::load_model_dir(dir, schema);
}

eval::MetricsReport cmd_eval(const RunConfig& config, const EvalRequest& request) {
  if (request.split != "dev" && request.split != "test") throw ConfigError("split must be 'dev' or 'test'");
  const auto p = load_prepared(prepared_dir(config));
  const auto& examples = request.split == "dev" ? p.dev : p.test;
  const auto& truths = request.split == "dev" ? p.dev_truths : p.test_truths;

  if (request.external) {
    std::vector<bool> tracked(p.schema.size(), false);
    for (std::size_t c : select_components(p.schema, config.components)) tracked[c] = true;
    return eval::score_external(*request.external, truths, eval::tracked_view(p.schema, tracked));
  }

  const auto models = load_models(request.model_dir.value_or(default_model_dir(config)), p.schema);
  check_vocabulary(models, p);
  const auto split = encode_split(p, examples, uses_abstraction(models));
  const auto preds = ensemble::predict(split.dialogs, split.assignments, models, p.schema);
  const auto view = eval::tracked_view(p.schema, models.tracked());
  if (request.export_path) {
    const auto doc = eval::write_tracker_output(preds, "dstc2_" + request.split, view);
    write_file(*request.export_path, doc.dump(1) + "\n");
  }
  return eval::score(preds, truths, view);
}

void cmd_track(const RunConfig& config, const TrackRequest& request, std::istream& in, std::ostream& out) {
  const auto p = load_prepared(prepared_dir(config));
  const auto models = load_models(request.model_dir.value_or(default_model_dir(config)), p.schema);
  check_vocabulary(models, p);
  session::TrackingSession session(models, p.schema, p.vocab, &p.dict, request.top_k);
  std::string line;
  while (std::getline(in, line)) {
    if (auto trace = session.process_line(line)) {
      out << trace->dump() << '\n';
      out.flush();
    }
  }
}

}  // namespace lectrack::pipeline
