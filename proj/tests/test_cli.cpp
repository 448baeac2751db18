#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "lectrack/util.hpp"
#include "synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lectrack;
namespace lt = lectrack::testing;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(const std::string& args, const fs::path& work, const std::string& input = "") {
  const fs::path in = work / "stdin.txt", err = work / "stderr.txt";
  write_file(in, input);
  const std::string cmd = std::string(LECTRACK_BIN) + " " + args + " < '" + in.string() + "' 2> '" + err.string() + "'";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = read_file(err);
  return r;
}

json load(const fs::path& p) { return json::parse(read_file(p)); }

std::vector<json> json_lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

// One trained run shared by the tests that only read from it.
struct TrainedRun {
  fs::path dir;
  lt::SynthRun run;
  std::string config;
  bool ok = false;

  TrainedRun() {
    dir = lt::temp_dir("cli-trained-" + std::to_string(::getpid()));
    run = lt::write_run(dir, 24, 8, 8, 5);
    config = "--config '" + run.config.string() + "'";
    ok = run_ok("prepare " + config) && run_ok("train " + config + " --component food,method,req.phone");
  }

  bool run_ok(const std::string& args) {
    const auto r = ::run(args, dir);
    if (r.code != 0) ADD_FAILURE() << args << " failed:\n" << r.err;
    return r.code == 0;
  }
};

TrainedRun& trained() {
  static TrainedRun t;
  return t;
}

}  // namespace

TEST(Cli, UsageErrorsExitWithTwo) {
  const auto dir = lt::temp_dir("cli-usage");
  EXPECT_EQ(run("", dir).code, 2);
  EXPECT_EQ(run("prepare", dir).code, 2);
  EXPECT_EQ(run("frobnicate --config x.json", dir).code, 2);
  const auto r = run("prepare --config '" + (dir / "absent.json").string() + "'", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("absent.json"), std::string::npos);
}

TEST(Cli, MissingOntologyExitsWithTwo) {
  const auto dir = lt::temp_dir("cli-ontology");
  const auto run_files = lt::write_run(dir, 4, 2, 0, 1);
  fs::remove(dir / "data" / "ontology.json");
  const auto r = run("prepare --config '" + run_files.config.string() + "'", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("ontology"), std::string::npos) << r.err;
}

TEST(Cli, PrepareIsReproducible) {
  const auto dir = lt::temp_dir("cli-prepare");
  const auto run_files = lt::write_run(dir, 10, 4, 4, 2);
  const std::string args = "prepare --config '" + run_files.config.string() + "'";
  ASSERT_EQ(run(args, dir).code, 0);
  const auto first = read_file(run_files.out_dir / "prepared" / "manifest.json");
  const auto second_run = run(args, dir);
  ASSERT_EQ(second_run.code, 0);
  EXPECT_NE(second_run.out.find("prepared"), std::string::npos);
  EXPECT_EQ(read_file(run_files.out_dir / "prepared" / "manifest.json"), first);

  const auto manifest = json::parse(first);
  EXPECT_EQ(manifest["dialogs"]["train"], 10);
  EXPECT_EQ(manifest["dialogs"]["train_prepared"], 20);
  EXPECT_EQ(manifest["files"].size(), 7u);
}

TEST(Cli, TrainWritesReportsAndCheckpoints) {
  auto& t = trained();
  ASSERT_TRUE(t.ok);
  const auto out = t.run.out_dir / "train";
  for (const char* f : {"report.json", "timing.json", "manifest.json", "best/food.ckpt", "last/method.ckpt"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  EXPECT_FALSE(fs::exists(out / "best" / "area.ckpt"));
  const auto report = load(out / "report.json");
  EXPECT_TRUE(report.contains("dev_metrics"));
  EXPECT_EQ(report.dump().find("seconds"), std::string::npos);
}

TEST(Cli, EvalExportAndExternalAgree) {
  auto& t = trained();
  ASSERT_TRUE(t.ok);
  const auto exported = t.dir / "dev-output.json";
  const auto a = run("eval " + t.config + " --split dev --json --export '" + exported.string() + "'", t.dir);
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_TRUE(fs::exists(exported));
  const auto b = run("eval " + t.config + " --split dev --json --component food,method,req.phone --external '" +
                         exported.string() + "'",
                     t.dir);
  ASSERT_EQ(b.code, 0) << b.err;
  const auto ja = json::parse(a.out), jb = json::parse(b.out);
  for (const char* g : {"goal", "method", "requested"}) {
    ASSERT_TRUE(ja.contains(g)) << a.out;
    EXPECT_EQ(ja[g]["accuracy"], jb[g]["accuracy"]) << g;
    EXPECT_NEAR(ja[g]["l2"].get<double>(), jb[g]["l2"].get<double>(), 1e-9) << g;
  }
  const auto table = run("eval " + t.config + " --split test", t.dir);
  EXPECT_EQ(table.code, 0);
  EXPECT_NE(table.out.find("goal"), std::string::npos) << table.out;
}

TEST(Cli, TrackEmitsOneLinePerToken) {
  auto& t = trained();
  ASSERT_TRUE(t.ok);
  const auto r = run("track " + t.config + " --top-k 2", t.dir, "looking\nfor\nchinese\nfood\n\nbad 1 2\nRESET\n");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = json_lines(r.out);
  ASSERT_EQ(lines.size(), 5u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(lines[i]["t"], i + 1);
    EXPECT_EQ(lines[i]["components"]["food"].size(), 2u);
    EXPECT_TRUE(lines[i]["components"].contains("method"));
  }
  EXPECT_TRUE(lines[4]["reset"].get<bool>());
  EXPECT_NE(r.err.find("malformed"), std::string::npos);
}

TEST(Cli, EnsembleOfOneMatchesTrain) {
  auto& t = trained();
  ASSERT_TRUE(t.ok);
  ASSERT_TRUE(t.run_ok("ensemble " + t.config + " --component food,method,req.phone --ensemble-size 1"));
  const auto single = load(t.run.out_dir / "train" / "report.json");
  const auto ens = load(t.run.out_dir / "ensemble" / "report.json");
  EXPECT_EQ(ens["dev_metrics"], single["dev_metrics"]);
  EXPECT_EQ(ens["test_metrics"], single["test_metrics"]);
  fs::remove_all(t.run.out_dir / "ensemble");
}

TEST(Cli, RefusesModelsFromAnotherVocabulary) {
  auto& t = trained();
  ASSERT_TRUE(t.ok);
  const auto dir = lt::temp_dir("cli-vocab");
  const auto other = lt::write_run(dir, 6, 4, 4, 99);
  const std::string config = "--config '" + other.config.string() + "'";
  ASSERT_EQ(run("prepare " + config, dir).code, 0);
  const auto models = t.run.out_dir / "train" / "best";
  const auto r = run("eval " + config + " --split dev --model-dir '" + models.string() + "'", dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("vocabulary"), std::string::npos) << r.err;
  EXPECT_EQ(run("track " + config + " --model-dir '" + models.string() + "'", dir, "food\n").code, 1);
}

TEST(Cli, TrackedFoodFollowsTheUtterance) {
  const auto dir = lt::temp_dir("cli-chinese-" + std::to_string(::getpid()));
  auto tc = lt::toy_train_config();
  tc.max_epochs = 10;
  tc.patience = 3;
  tc.embedding = 10;
  tc.input_hidden = 16;
  tc.lstm = 10;
  const auto r = lt::write_run(dir, 120, 20, 0, 11, tc);
  const std::string config = "--config '" + r.config.string() + "' --component food";
  ASSERT_EQ(run("prepare " + config, dir).code, 0);
  ASSERT_EQ(run("train " + config, dir).code, 0);
  const auto out = run("track " + config + " --top-k 1", dir, "looking\nfor\nchinese\nfood\n");
  ASSERT_EQ(out.code, 0) << out.err;
  const auto lines = json_lines(out.out);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[3]["components"]["food"][0]["value"], "chinese") << lines[3].dump();
}
