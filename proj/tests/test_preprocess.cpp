#include <gtest/gtest.h>

#include <numeric>

#include "lectrack/preprocess.hpp"
#include "synthetic.hpp"

using namespace lectrack;
using namespace lectrack::preprocess;
using corpus::TokenEvent;
using corpus::TokenSource;
namespace lt = lectrack::testing;

namespace {

const corpus::SlotSchema& schema() {
  static const auto s = corpus::schema_from_ontology(
      {{"informable", {{"food", {"chinese", "jamaican", "basque", "modern european"}}, {"area", {"north", "south"}}}},
       {"requestable", {"phone"}}});
  return s;
}

std::size_t food() { return *schema().index_of("food"); }

AbstractionDict rare_foods(int max_tokens = 8) {
  AbstractionDict d;
  d.threshold = 40;
  d.max_tokens = max_tokens;
  for (const char* v : {"jamaican", "basque", "modern european"}) d.add(schema().at("food"), v);
  return d;
}

TokenEvent user(std::string tok, double score = 1.0, int turn = 0, bool final = false) {
  return {std::move(tok), score, TokenSource::kUserAsr, turn, final};
}
TokenEvent sys(std::string tok, int turn = 0) { return {std::move(tok), 1.0, TokenSource::kSystem, turn, false}; }

// Builds an example from events; labels go on turn-final events with the given food values.
DialogExample make_example(std::vector<TokenEvent> events, std::vector<std::string> foods) {
  DialogExample ex;
  ex.dialog_id = "x";
  ex.events = std::move(events);
  std::size_t k = 0;
  for (std::size_t i = 0; i < ex.events.size(); ++i) {
    if (!ex.events[i].turn_final) continue;
    std::vector<std::string> values(schema().size(), "none");
    values[food()] = foods.at(k++);
    ex.labels.push_back({i, ex.events[i].turn_index, values});
    ex.turn_end.push_back(static_cast<long>(i));
  }
  ex.schedule.assign(schema().size(), 0);
  return ex;
}

std::vector<std::string> tokens(const DialogExample& ex) {
  std::vector<std::string> out;
  for (const auto& e : ex.events) out.push_back(e.token);
  return out;
}

}  // namespace

TEST(AbstractToken, Format) { EXPECT_EQ(abstract_token("food", 3), "#food3"); }

TEST(Vocabulary, SortedWithOovAndUnknownFallback) {
  Vocabulary v({"zeta", "alpha", "alpha", "mid"});
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"#OOV", "alpha", "mid", "zeta"}));
  EXPECT_EQ(v.encode("mid"), 2u);
  EXPECT_EQ(v.encode("never-seen"), v.oov_id());
  EXPECT_EQ(v.token(v.oov_id()), kOov);
  const auto back = Vocabulary::from_json(v.to_json());
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.hash(), v.hash());
  EXPECT_NE(Vocabulary({"alpha"}).hash(), v.hash());
}

TEST(Vocabulary, EmptyCorpusGivesSpecialsOnly) {
  const auto v = build_vocabulary({}, schema(), 2);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"#OOV", "#area1", "#area2", "#food1", "#food2"}));
}

TEST(Vocabulary, DuplicateDialogsAddNothing) {
  const auto ex = make_example({sys("hello"), user("thai", 1.0, 0, true)}, {"none"});
  const std::vector<DialogExample> one = {ex}, two = {ex, ex};
  EXPECT_EQ(build_vocabulary(one, schema(), 1).tokens(), build_vocabulary(two, schema(), 1).tokens());
  EXPECT_TRUE(build_vocabulary(one, schema(), 1).find("hello"));
}

TEST(AbstractionDictTest, StrictThresholdAndUnseenValues) {
  std::vector<DialogExample> examples;
  std::vector<TokenEvent> events;
  std::vector<std::string> foods;
  for (int i = 0; i < 40; ++i) {
    events.push_back(user("x", 1.0, i, true));
    foods.push_back(i < 39 ? "chinese" : "jamaican");
  }
  examples.push_back(make_example(events, foods));
  examples.push_back(make_example({user("y", 1.0, 0, true)}, {"chinese"}));  // chinese: 40
  const auto counts = count_labels(examples, schema());
  EXPECT_EQ(counts[food()].at("chinese"), 40u);

  const auto dict = build_abstraction_dict(schema(), counts, 40, 8);
  EXPECT_FALSE(dict.contains("food", "chinese"));
  EXPECT_TRUE(dict.contains("food", "jamaican"));
  EXPECT_TRUE(dict.contains("food", "basque"));  // never seen
  EXPECT_FALSE(dict.contains("food", "none"));
  EXPECT_FALSE(dict.contains("food", "dontcare"));
  EXPECT_TRUE(dict.contains("area", "north"));
  EXPECT_EQ(dict.find("req.phone"), nullptr);
  EXPECT_EQ(dict.find("method"), nullptr);

  const auto back = AbstractionDict::from_json(dict.to_json());
  EXPECT_EQ(back.to_json(), dict.to_json());
}

TEST(Abstraction, RareValueInTokensAndLabel) {
  const auto ex = make_example({user("looking"), user("for"), user("jamaican", 0.6), user("food", 0.6, 0, true)},
                               {"jamaican"});
  const auto [out, assignment] = abstract_example(ex, rare_foods(), schema(), LabelMode::kRewrite);
  EXPECT_EQ(tokens(out), (std::vector<std::string>{"looking", "for", "#food1", "food"}));
  EXPECT_EQ(out.labels[0].values[food()], "#food1");
  EXPECT_EQ(assignment.values[food()], std::vector<std::string>{"jamaican"});
}

TEST(Abstraction, IdentityWithoutDictValues) {
  const auto ex = make_example({sys("hello"), user("chinese", 0.9, 0, true)}, {"chinese"});
  const auto [out, assignment] = abstract_example(ex, rare_foods(), schema(), LabelMode::kRewrite);
  EXPECT_EQ(out, ex);
  for (const auto& a : assignment.values) EXPECT_TRUE(a.empty());
}

TEST(Abstraction, TwoRareValuesNumberedByFirstAppearance) {
  const auto ex = make_example({user("jamaican"), user("or"), user("basque", 1.0, 0, true), sys("basque", 1),
                                user("jamaican", 1.0, 1, true)},
                               {"jamaican", "basque"});
  const auto [out, assignment] = abstract_example(ex, rare_foods(), schema(), LabelMode::kRewrite);
  EXPECT_EQ(tokens(out), (std::vector<std::string>{"#food1", "or", "#food2", "#food2", "#food1"}));
  EXPECT_EQ(out.labels[0].values[food()], "#food1");
  EXPECT_EQ(out.labels[1].values[food()], "#food2");
  EXPECT_EQ(assignment.values[food()], (std::vector<std::string>{"jamaican", "basque"}));
}

TEST(Abstraction, MultiWordValueTakesMinimumScore) {
  const auto ex = make_example({user("modern", 0.7), user("european", 0.4), user("please", 0.4, 0, true)}, {"none"});
  const auto [out, assignment] = abstract_example(ex, rare_foods(), schema(), LabelMode::kRewrite);
  ASSERT_EQ(out.events.size(), 2u);
  EXPECT_EQ(out.events[0].token, "#food1");
  EXPECT_EQ(out.events[0].score, 0.4);
  EXPECT_EQ(assignment.values[food()], std::vector<std::string>{"modern european"});
}

TEST(Abstraction, MatchesDoNotSpanTurns) {
  const auto ex = make_example({user("modern", 1.0, 0, true), user("european", 1.0, 1, true)}, {"none", "none"});
  const auto [out, assignment] = abstract_example(ex, rare_foods(), schema(), LabelMode::kRewrite);
  EXPECT_EQ(tokens(out), (std::vector<std::string>{"modern", "european"}));
}

TEST(Abstraction, CapLeavesLaterValuesConcrete) {
  const auto ex = make_example({user("jamaican"), user("basque", 1.0, 0, true)}, {"basque"});
  const auto [out, assignment] = abstract_example(ex, rare_foods(1), schema(), LabelMode::kRewrite);
  EXPECT_EQ(tokens(out), (std::vector<std::string>{"#food1", "basque"}));
  EXPECT_EQ(out.labels[0].values[food()], "basque");
}

TEST(Abstraction, LabelModes) {
  // The value only appears in the label.
  const auto ex = make_example({user("hello", 1.0, 0, true), user("jamaican", 1.0, 1, true)}, {"basque", "jamaican"});
  const auto [rw, rw_assign] = abstract_example(ex, rare_foods(), schema(), LabelMode::kRewrite);
  EXPECT_EQ(rw.labels[0].values[food()], "#food1");
  EXPECT_EQ(tokens(rw)[1], "#food2");
  EXPECT_EQ(rw_assign.values[food()], (std::vector<std::string>{"basque", "jamaican"}));

  const auto [ig, ig_assign] = abstract_example(ex, rare_foods(), schema(), LabelMode::kIgnore);
  EXPECT_EQ(ig.labels[0].values[food()], "basque");
  EXPECT_EQ(ig.labels[1].values[food()], "jamaican");
  EXPECT_EQ(tokens(ig)[1], "#food1");
  EXPECT_EQ(ig_assign.values[food()], std::vector<std::string>{"jamaican"});
}

TEST(StreamAbstractorTest, HoldsPrefixesUntilResolved) {
  StreamAbstractor a(rare_foods(), schema());
  EXPECT_TRUE(a.push(user("modern")).empty());
  EXPECT_EQ(a.pending(), 1u);
  auto out = a.push(user("food"));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].token, "modern");
  EXPECT_EQ(out[1].token, "food");
  EXPECT_TRUE(a.push(user("modern")).empty());
  out = a.push(user("european"));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].token, "#food1");
  EXPECT_TRUE(a.push(user("modern")).empty());
  out = a.flush();
  ASSERT_EQ(out.size(), 1u);
  a.reset();
  EXPECT_EQ(a.pending(), 0u);
  EXPECT_TRUE(a.assignment().values[food()].empty());
}

TEST(Abstraction, PreservesTurnStructureOnSyntheticCorpus) {
  const auto ont = lt::synthetic_ontology();
  const auto s = corpus::schema_from_ontology(ont);
  const auto raws = lt::make_raw_dialogs(30, 8);
  std::vector<DialogExample> examples;
  for (const auto& r : raws) examples.push_back(corpus::serialize_dialog(r, corpus::UserSource::kAsr1Best, s));
  const auto dict = build_abstraction_dict(s, count_labels(examples, s), 5, 3);
  for (const auto& ex : examples) {
    for (auto mode : {LabelMode::kRewrite, LabelMode::kIgnore}) {
      const auto [out, assignment] = abstract_example(ex, dict, s, mode);
      ASSERT_EQ(out.labels.size(), ex.labels.size());
      ASSERT_EQ(out.turn_end.size(), ex.turn_end.size());
      int finals_in = 0, finals_out = 0;
      for (const auto& e : ex.events) finals_in += e.turn_final;
      for (const auto& e : out.events) finals_out += e.turn_final;
      EXPECT_EQ(finals_in, finals_out);
      for (std::size_t i = 0; i < out.labels.size(); ++i) {
        const auto& e = out.events[out.labels[i].event_index];
        EXPECT_TRUE(e.turn_final);
        EXPECT_EQ(e.turn_index, ex.labels[i].turn_index);
      }
      for (const auto& vals : assignment.values) {
        std::set<std::string> unique(vals.begin(), vals.end());
        EXPECT_EQ(unique.size(), vals.size());
      }
    }
  }
}

TEST(Deabstract, AssignedAndUnassignedClasses) {
  const auto& c = schema().at("food");  // none, dontcare, chinese, jamaican, basque, modern european
  std::vector<double> p(c.values.size() + 2, 0.0);
  p[c.values.size()] = 0.7;      // #food1
  p[c.values.size() + 1] = 0.1;  // #food2, unassigned
  p[2] = 0.2;
  const std::vector<std::string> assigned = {"jamaican"};
  const auto out = deabstract_distribution(p, c, assigned, 2);
  ASSERT_EQ(out.size(), c.values.size());
  EXPECT_DOUBLE_EQ(out[*c.value_index("jamaican")], 0.7);
  EXPECT_DOUBLE_EQ(out[0], 0.1);
  EXPECT_DOUBLE_EQ(out[2], 0.2);
  EXPECT_THROW(deabstract_distribution(std::vector<double>(3, 0.3), c, assigned, 2), std::invalid_argument);
}

TEST(Deabstract, OneHotOfAssignedClassRecoversValue) {
  const auto& c = schema().at("food");
  const std::vector<std::string> assigned = {"basque", "modern european"};
  for (std::size_t j = 0; j < assigned.size(); ++j) {
    std::vector<double> p(c.values.size() + 3, 0.0);
    p[c.values.size() + j] = 1.0;
    const auto out = deabstract_distribution(p, c, assigned, 3);
    for (std::size_t v = 0; v < out.size(); ++v) EXPECT_EQ(out[v], c.values[v] == assigned[j] ? 1.0 : 0.0);
  }
}

TEST(Deabstract, ConservesMassOnRandomDistributions) {
  std::mt19937_64 rng(3);
  std::gamma_distribution<double> g(1.0, 1.0);
  const auto& c = schema().at("food");
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(c.values.size() + 4);
    for (double& v : p) v = g(rng);
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& v : p) v /= total;
    const std::vector<std::string> assigned = {"jamaican"};
    const auto out = deabstract_distribution(p, c, assigned, 4);
    EXPECT_NEAR(std::accumulate(out.begin(), out.end(), 0.0), 1.0, 1e-9);
  }
}

TEST(Oov, ExtremesAndRate) {
  std::vector<TokenEvent> events;
  for (int i = 0; i < 10000; ++i) events.push_back(i % 3 == 0 ? sys("s") : user("u"));
  events.back().turn_final = true;
  const auto ex = make_example(events, {"none"});

  std::mt19937_64 rng(9);
  EXPECT_EQ(inject_oov(ex, 0.0, rng), ex);
  const auto all = inject_oov(ex, 1.0, rng);
  for (const auto& e : all.events) EXPECT_EQ(e.token, corpus::is_user(e.source) ? std::string(kOov) : "s");

  std::size_t users = 0, replaced = 0;
  const auto some = inject_oov(ex, 0.1, rng);
  for (std::size_t i = 0; i < some.events.size(); ++i) {
    EXPECT_EQ(some.events[i].score, ex.events[i].score);
    if (!corpus::is_user(some.events[i].source)) {
      EXPECT_EQ(some.events[i].token, "s");
      continue;
    }
    ++users;
    replaced += some.events[i].token == kOov;
  }
  EXPECT_NEAR(static_cast<double>(replaced) / users, 0.1, 0.01);

  EXPECT_THROW(inject_oov(ex, 1.5, rng), std::invalid_argument);
  EXPECT_THROW(inject_oov(ex, -0.1, rng), std::invalid_argument);
}

TEST(Oov, SameSeedIsReproducible) {
  const auto raws = lt::make_raw_dialogs(1, 4);
  const auto ex = corpus::serialize_dialog(raws[0], corpus::UserSource::kAsr1Best,
                                           corpus::schema_from_ontology(lt::synthetic_ontology()));
  std::mt19937_64 a(5), b(5);
  EXPECT_EQ(inject_oov(ex, 0.3, a), inject_oov(ex, 0.3, b));
}

TEST(Mix, ConcatenatesBothSources) {
  const auto s = corpus::schema_from_ontology(lt::synthetic_ontology());
  const auto raws = lt::make_raw_dialogs(5, 6);
  std::vector<DialogExample> asr, tr;
  for (const auto& r : raws) {
    asr.push_back(corpus::serialize_dialog(r, corpus::UserSource::kAsr1Best, s));
    tr.push_back(corpus::serialize_dialog(r, corpus::UserSource::kTranscript, s));
  }
  const auto mixed = mix_transcriptions(asr, tr);
  ASSERT_EQ(mixed.size(), 10u);
  for (std::size_t i = 5; i < 10; ++i)
    for (const auto& e : mixed[i].events) EXPECT_EQ(e.score, 1.0);
  EXPECT_EQ(mix_transcriptions(asr, {}).size(), 5u);
}
