#pragma once

// The command implementations behind the `lectrack` executable.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lectrack/corpus.hpp"
#include "lectrack/ensemble.hpp"
#include "lectrack/eval.hpp"
#include "lectrack/preprocess.hpp"
#include "lectrack/train.hpp"

namespace lectrack::pipeline {

struct RunConfig {
  std::filesystem::path data_root;
  std::filesystem::path train_flist;
  std::filesystem::path dev_flist;
  std::filesystem::path test_flist;  // optional
  std::filesystem::path ontology;
  std::filesystem::path out_dir = "run";
  std::vector<std::string> components;  // empty = all
  std::size_t ensemble_size = 10;
  std::uint64_t seed = 1;  // root seed; overrides train.seed
  corpus::AsrScoreMode score_mode = corpus::AsrScoreMode::kClamp;
  train::TrainConfig train;

  nlohmann::json to_json() const;
  // Relative paths are resolved against `base`.
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
  std::uint64_t hash() const;
  // Throws ConfigError naming the first missing input.
  void check_inputs() const;
};

RunConfig load_run_config(const std::filesystem::path& file);

struct Prepared {
  corpus::SlotSchema schema;
  preprocess::Vocabulary vocab;
  preprocess::AbstractionDict dict;
  std::vector<corpus::DialogExample> train_asr;
  std::vector<corpus::DialogExample> train_transcript;
  std::vector<corpus::DialogExample> dev;
  std::vector<corpus::DialogExample> test;
  std::vector<eval::DialogTruth> dev_truths;
  std::vector<eval::DialogTruth> test_truths;
  nlohmann::json manifest;
};

std::filesystem::path prepared_dir(const RunConfig& config);

// Writes <out_dir>/prepared and returns its manifest.
nlohmann::json cmd_prepare(const RunConfig& config);
Prepared load_prepared(const std::filesystem::path& dir);

// Schema indices of the selected components ("all" or empty = every one).
std::vector<std::size_t> select_components(const corpus::SlotSchema& schema, const std::vector<std::string>& names);

train::TrainReport cmd_train(const RunConfig& config, std::ostream& log);
nlohmann::json cmd_ensemble(const RunConfig& config, std::ostream& log);

struct EvalRequest {
  std::string split = "test";
  std::optional<std::filesystem::path> external;
  std::optional<std::filesystem::path> model_dir;
  std::optional<std::filesystem::path> export_path;
};

eval::MetricsReport cmd_eval(const RunConfig& config, const EvalRequest& request);

struct TrackRequest {
  std::optional<std::filesystem::path> model_dir;
  std::size_t top_k = 3;
};

void cmd_track(const RunConfig& config, const TrackRequest& request, std::istream& in, std::ostream& out);

// Default model location: the ensemble if one was built, else the best single models.
std::filesystem::path default_model_dir(const RunConfig& config);
ensemble::Ensemble load_models(const std::filesystem::path& dir, const corpus::SlotSchema& schema);

// Abstracts (when the models use abstraction) and encodes one split.
struct EncodedSplit {
  std::vector<model::EncodedDialog> dialogs;
  std::vector<preprocess::AbstractionAssignment> assignments;
};
EncodedSplit encode_split(const Prepared& prepared, const std::vector<corpus::DialogExample>& examples,
                          bool abstraction);

}  // namespace lectrack::pipeline
