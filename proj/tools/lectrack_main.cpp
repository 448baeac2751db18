// lectrack: prepare / train / ensemble / eval / track

#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "lectrack/nncore.hpp"
#include "lectrack/pipeline.hpp"
#include "lectrack/util.hpp"

namespace {

using namespace lectrack;

std::vector<std::string> split_names(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  for (const auto& r : raw) {
    std::stringstream ss(r);
    std::string part;
    while (std::getline(ss, part, ','))
      if (!part.empty()) out.push_back(part);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LSTM dialog state tracker for DSTC2"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> components;
  std::size_t ensemble_size = 0;
  std::uint64_t seed = 0;
  std::string out_dir;
  bool seed_set = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration (JSON)")->required();
    sub->add_option("--component", components, "component name(s) or 'all'");
    sub->add_option("--ensemble-size", ensemble_size, "number of ensemble members")->check(CLI::PositiveNumber);
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { seed = s; seed_set = true; },
                                           "root seed");
    sub->add_option("--out-dir", out_dir, "output directory");
  };

  auto* prepare = app.add_subcommand("prepare", "serialize the corpus, build vocabulary and abstraction dictionary");
  auto* train = app.add_subcommand("train", "train one model per component with early stopping");
  auto* ensemble = app.add_subcommand("ensemble", "train and average several independently seeded models");
  auto* evalc = app.add_subcommand("eval", "score models or an external tracker output");
  auto* track = app.add_subcommand("track", "track a token stream from stdin, one JSON line per token");
  for (auto* s : {prepare, train, ensemble, evalc, track}) add_common(s);

  pipeline::EvalRequest eval_req;
  std::string external, model_dir, export_path;
  bool as_json = false;
  evalc->add_option("--external", external, "tracker output file in the DSTC2 format");
  evalc->add_option("--split", eval_req.split, "dev or test")->check(CLI::IsMember({"dev", "test"}));
  evalc->add_option("--model-dir", model_dir, "model or ensemble directory");
  evalc->add_option("--export", export_path, "write predictions as a DSTC2 tracker output file");
  evalc->add_flag("--json", as_json, "print the report as JSON");

  pipeline::TrackRequest track_req;
  std::string track_model_dir;
  track->add_option("--model-dir", track_model_dir, "model or ensemble directory");
  track->add_option("--top-k", track_req.top_k, "values per component in each trace line")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    auto config = pipeline::load_run_config(config_path);
    if (!components.empty()) config.components = split_names(components);
    if (ensemble_size) config.ensemble_size = ensemble_size;
    if (seed_set) config.seed = config.train.seed = seed;
    if (!out_dir.empty()) config.out_dir = out_dir;

    if (prepare->parsed()) {
      const auto manifest = pipeline::cmd_prepare(config);
      std::cout << "prepared " << manifest["dialogs"].dump() << " vocab " << manifest["vocab_size"] << " hash "
                << manifest["vocab_hash"].get<std::string>() << "\n";
    } else if (train->parsed()) {
      pipeline::cmd_train(config, std::cerr);
    } else if (ensemble->parsed()) {
      pipeline::cmd_ensemble(config, std::cerr);
    } else if (evalc->parsed()) {
      if (!external.empty()) eval_req.external = external;
      if (!model_dir.empty()) eval_req.model_dir = model_dir;
      if (!export_path.empty()) eval_req.export_path = export_path;
      const auto report = pipeline::cmd_eval(config, eval_req);
      if (as_json) {
        std::cout << report.to_json().dump(2) << "\n";
      } else {
        std::cout << report.table();
      }
    } else if (track->parsed()) {
      if (!track_model_dir.empty()) track_req.model_dir = track_model_dir;
      pipeline::cmd_track(config, track_req, std::cin, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "lectrack: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "lectrack: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
