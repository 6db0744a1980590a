#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "support.hpp"
#include "wpclip/errors.hpp"
#include "wpclip/judge.hpp"

using namespace wpclip;
using namespace wpclip::judge;
using std::chrono::milliseconds;
namespace fs = std::filesystem;

namespace {

// Virtual time: sleeping advances the clock, nothing actually waits.
struct FakeTime {
  std::shared_ptr<std::int64_t> now = std::make_shared<std::int64_t>(0);
  std::shared_ptr<std::vector<milliseconds>> sleeps = std::make_shared<std::vector<milliseconds>>();
  Clock clock() const {
    return [n = now] { return milliseconds(*n); };
  }
  Sleeper sleeper() const {
    return [n = now, s = sleeps](milliseconds d) {
      s->push_back(d);
      *n += d.count();
    };
  }
};

// Scripted transport: pops one response per call; entries starting with "!"
// throw a retryable TransportError, "!!" a permanent one.
class ScriptedTransport : public Transport {
 public:
  explicit ScriptedTransport(std::vector<std::string> script) : script_(std::move(script)) {}
  std::string send(const JudgeRequest& request, milliseconds) override {
    requests.push_back(request);
    const std::string r = calls_ < script_.size() ? script_[calls_] : script_.back();
    ++calls_;
    if (r.rfind("!!", 0) == 0) throw TransportError(r, false);
    if (r.rfind("!", 0) == 0) throw TransportError(r, true);
    return r;
  }
  std::vector<JudgeRequest> requests;

 private:
  std::vector<std::string> script_;
  std::size_t calls_ = 0;
};

// Answers from ground truth carried in the pair id: "<L|R>-n" names the side
// with more of the low pole in the original ordering.
class FunctionTransport : public Transport {
 public:
  explicit FunctionTransport(std::function<bool(const JudgeRequest&)> f) : f_(std::move(f)) {}
  std::string send(const JudgeRequest& r, milliseconds) override {
    const auto key = build_prompt(r.principle).schema_key;
    std::lock_guard lock(mu_);
    ++calls;
    return "```json\n" + nlohmann::json{{key, f_(r)}, {"reasoning", "mock"}}.dump() + "\n```";
  }
  int calls = 0;

 private:
  std::mutex mu_;
  std::function<bool(const JudgeRequest&)> f_;
};

JudgeClientConfig fast_config() {
  JudgeClientConfig c;
  c.requests_per_minute = 6000;  // 10 ms spacing
  c.backoff_initial_ms = 1000;
  c.backoff_max_ms = 60000;
  c.max_retries = 3;
  return c;
}

eval::PairComparison pair_with(const std::string& id, Principle p, eval::Side winner) {
  eval::PairComparison c;
  c.pair_id = id;
  c.principle = p;
  c.left_id = id + ".l";
  c.right_id = id + ".r";
  c.gt_left = winner == eval::Side::Left ? 1.5 : 4.0;
  c.gt_right = winner == eval::Side::Left ? 4.0 : 1.5;
  c.winner_gt = winner;
  return c;
}

Image loader_image(const std::string& id) {
  return test::procedural_image(24 + int(id.size()), 20, std::hash<std::string>{}(id) % 1000);
}

std::string verdict_json(Principle p, bool left) {
  return nlohmann::json{{build_prompt(p).schema_key, left}, {"reasoning", "r"}}.dump();
}

}  // namespace

TEST(Compose, LayoutAndMirror) {
  const Image a = Image::filled(40, 20, {255, 0, 0}), b = Image::filled(30, 30, {0, 0, 255});
  const Image c = compose_pair_image(a, b);
  // Common height 20; b resized to 20x20; 16px white gutter.
  EXPECT_EQ(c.height, 20);
  EXPECT_EQ(c.width, 40 + 16 + 20);
  EXPECT_EQ(c.pixel(0, 0)[0], 255);
  EXPECT_EQ(c.pixel(45, 10)[1], 255);  // gutter is white
  EXPECT_EQ(c.pixel(c.width - 1, 5)[2], 255);
  const Image m = compose_pair_image(b, a);
  EXPECT_EQ(m.width, c.width);
  EXPECT_EQ(m.pixel(0, 0)[2], 255);
  EXPECT_EQ(compose_pair_image(a, b), c);
  ComposeOptions opt;
  opt.gutter = 0;
  opt.height = 10;
  const Image s = compose_pair_image(a, b, opt);
  EXPECT_EQ(s.height, 10);
  EXPECT_EQ(s.width, 20 + 10);
}

TEST(Prompt, ContainsPolesAndSchema) {
  const auto p = build_prompt(Principle::LinearPainterly);
  EXPECT_NE(p.text.find("Linear style vs Painterly style"), std::string::npos);
  EXPECT_NE(p.text.find("Respond only with a valid JSON"), std::string::npos);
  EXPECT_NE(p.text.find("\"Left painting has more Linear style\": true|false"), std::string::npos);
  EXPECT_EQ(build_prompt(Principle::ClosedOpen).schema_key, "Left painting has more Closed style");
  EXPECT_EQ(build_prompt(Principle::MultiplicityUnity).schema_key,
            "Left painting has more Multiplicity style");
}

TEST(ParseVerdict, SimpleCases) {
  const std::string key = "Left painting has more Linear style";
  EXPECT_TRUE(parse_verdict("{\"" + key + "\": true}", key).left_wins_low_pole);
  EXPECT_FALSE(parse_verdict("{\"" + key + "\": false, \"reasoning\": \"x\"}", key).left_wins_low_pole);
  EXPECT_EQ(parse_verdict("{\"" + key + "\": false, \"reasoning\": \"x\"}", key).reasoning, "x");
  EXPECT_THROW(parse_verdict("no json here", key), ParseError);
  EXPECT_THROW(parse_verdict("{\"" + key + "\": 1}", key), ParseError);
  try {
    parse_verdict("{\"other\": true}", key);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("no JSON object with key"), std::string::npos);
    EXPECT_EQ(e.raw(), "{\"other\": true}");
  }
}

TEST(ParseVerdict, GoldenTranscripts) {
  const fs::path dir = fs::path(WPCLIP_TEST_DATA_DIR) / "golden" / "judge";
  const auto cases = nlohmann::json::parse(test::read_file(dir / "expected.json"));
  ASSERT_GE(cases.size(), 7u);
  for (const auto& c : cases) {
    const auto p = *principle_from_key(c.at("principle").get<std::string>());
    const std::string raw = test::read_file(dir / c.at("file").get<std::string>());
    const auto key = build_prompt(p).schema_key;
    if (c.value("error", false)) {
      EXPECT_THROW(parse_verdict(raw, key), ParseError) << c.at("file");
    } else {
      const auto v = parse_verdict(raw, key);
      EXPECT_EQ(v.left_wins_low_pole, c.at("left_wins").get<bool>()) << c.at("file");
      EXPECT_FALSE(v.reasoning.empty());
    }
  }
}

TEST(ParseVerdict, SerializeRoundTrip) {
  JudgeVerdict v;
  v.left_wins_low_pole = true;
  v.reasoning = "quote \" and {brace}";
  const std::string key = build_prompt(Principle::AbsoluteRelative).schema_key;
  const auto back = parse_verdict(serialize_verdict(v, key), key);
  EXPECT_EQ(back.left_wins_low_pole, true);
  EXPECT_EQ(back.reasoning, v.reasoning);
}

TEST(JudgeClient, RetriesThenSucceedsWithBackoff) {
  FakeTime t;
  ScriptedTransport transport({"!timeout", "not json at all", verdict_json(Principle::LinearPainterly, true)});
  JudgeClient client(fast_config(), transport, t.clock(), t.sleeper());
  const auto pair = pair_with("p", Principle::LinearPainterly, eval::Side::Left);
  const auto o = client.judge(pair, loader_image("a"), loader_image("b"));
  ASSERT_TRUE(o.verdict);
  EXPECT_EQ(o.attempts, 3);
  EXPECT_EQ(transport.requests.size(), 3u);
  ASSERT_EQ(o.backoffs.size(), 2u);
  EXPECT_GE(o.backoffs[0].count(), 1000);
  EXPECT_LT(o.backoffs[0].count(), 1250);
  EXPECT_GE(o.backoffs[1].count(), 2000);
  EXPECT_LT(o.backoffs[1].count(), 2500);
  EXPECT_EQ(o.original_frame_verdict(), eval::Verdict::Left);
  EXPECT_FALSE(transport.requests[0].png.empty());
  EXPECT_EQ(transport.requests[0].prompt, build_prompt(Principle::LinearPainterly).text);
}

TEST(JudgeClient, BackoffIsCappedAndExhaustionAbstains) {
  FakeTime t;
  ScriptedTransport transport({"!503"});
  auto cfg = fast_config();
  cfg.max_retries = 6;
  cfg.backoff_max_ms = 5000;
  JudgeClient client(cfg, transport, t.clock(), t.sleeper());
  const auto o = client.judge(pair_with("p", Principle::ClosedOpen, eval::Side::Left),
                              loader_image("a"), loader_image("b"));
  EXPECT_FALSE(o.verdict);
  EXPECT_EQ(o.attempts, 7);
  EXPECT_EQ(o.original_frame_verdict(), eval::Verdict::Abstain);
  EXPECT_NE(o.error.find("503"), std::string::npos);
  ASSERT_EQ(o.backoffs.size(), 6u);
  for (auto b : o.backoffs) EXPECT_LE(b.count(), 5000 * 1.25);
  EXPECT_GE(o.backoffs.back().count(), 5000);
}

TEST(JudgeClient, PermanentFailureStopsImmediately) {
  FakeTime t;
  ScriptedTransport transport({"!!401 unauthorized"});
  JudgeClient client(fast_config(), transport, t.clock(), t.sleeper());
  const auto o = client.judge(pair_with("p", Principle::ClosedOpen, eval::Side::Left),
                              loader_image("a"), loader_image("b"));
  EXPECT_FALSE(o.verdict);
  EXPECT_EQ(o.attempts, 1);
  EXPECT_TRUE(o.backoffs.empty());
}

TEST(JudgeClient, JitterIsDeterministicPerSeed) {
  auto run = [](std::uint64_t seed) {
    FakeTime t;
    ScriptedTransport transport({"!x"});
    auto cfg = fast_config();
    cfg.seed = seed;
    JudgeClient client(cfg, transport, t.clock(), t.sleeper());
    return client.judge(pair_with("p", Principle::ClosedOpen, eval::Side::Left), loader_image("a"),
                        loader_image("b")).backoffs;
  };
  EXPECT_EQ(run(1), run(1));
  EXPECT_NE(run(1), run(2));
}

TEST(RateLimiter, SpacesRequests) {
  FakeTime t;
  RateLimiter limiter(60.0, t.clock(), t.sleeper());
  for (int i = 0; i < 4; ++i) limiter.acquire();
  EXPECT_EQ(*t.sleeps, (std::vector<milliseconds>{milliseconds(1000), milliseconds(1000), milliseconds(1000)}));
  EXPECT_EQ(*t.now, 3000);
  *t.now += 5000;  // idle long enough: no wait
  limiter.acquire();
  EXPECT_EQ(t.sleeps->size(), 3u);
  EXPECT_THROW(RateLimiter(0.0, t.clock(), t.sleeper()), ConfigError);
}

TEST(EvaluateJudge, OracleMockScoresPerfectlyInBothOrderings) {
  std::vector<eval::PairComparison> pairs;
  for (int i = 0; i < 10; ++i) {
    pairs.push_back(pair_with("p" + std::to_string(i), kAllPrinciples[i % 5],
                              i % 3 ? eval::Side::Left : eval::Side::Right));
  }
  std::map<std::string, eval::Side> truth;
  for (const auto& p : pairs) truth[p.pair_id] = p.winner_gt;
  FunctionTransport transport([&](const JudgeRequest& r) {
    const bool original_left = truth.at(r.pair_id) == eval::Side::Left;
    return r.swapped ? !original_left : original_left;
  });
  auto cfg = fast_config();
  cfg.both_orderings = true;
  FakeTime t;
  JudgeClient client(cfg, transport, t.clock(), t.sleeper());
  for (std::size_t jobs : {1u, 3u}) {
    const auto run = evaluate_judge(client, pairs, loader_image, jobs);
    EXPECT_DOUBLE_EQ(run.table.overall.percent(), 100.0);
    ASSERT_TRUE(run.swapped_table);
    EXPECT_DOUBLE_EQ(run.swapped_table->overall.percent(), 100.0);
    EXPECT_EQ(run.consistent, 10u);
    ASSERT_EQ(run.outcomes.size(), 20u);
    EXPECT_FALSE(run.outcomes[0].swapped);
    EXPECT_TRUE(run.outcomes[1].swapped);
  }
}

TEST(EvaluateJudge, PositionalBiasGivesComplementaryOrderings) {
  std::vector<eval::PairComparison> pairs;
  for (int i = 0; i < 8; ++i) {
    pairs.push_back(pair_with("p" + std::to_string(i), Principle::PlanarRecessional,
                              i < 5 ? eval::Side::Left : eval::Side::Right));
  }
  FunctionTransport always_left([](const JudgeRequest&) { return true; });
  auto cfg = fast_config();
  cfg.both_orderings = true;
  FakeTime t;
  JudgeClient client(cfg, always_left, t.clock(), t.sleeper());
  const auto run = evaluate_judge(client, pairs, loader_image);
  EXPECT_EQ(run.table.overall.correct, 5u);
  EXPECT_EQ(run.swapped_table->overall.correct, 3u);
  EXPECT_EQ(run.table.overall.correct + run.swapped_table->overall.correct, 8u);
  EXPECT_EQ(run.consistent, 0u);
}

TEST(EvaluateJudge, HandCountedTenPairMock) {
  // Five principles x two pairs; scripted answers checked against a tally by hand.
  std::vector<eval::PairComparison> pairs;
  const eval::Side winners[10] = {eval::Side::Left, eval::Side::Right, eval::Side::Left, eval::Side::Left,
                                  eval::Side::Right, eval::Side::Right, eval::Side::Left, eval::Side::Right,
                                  eval::Side::Left, eval::Side::Left};
  for (int i = 0; i < 10; ++i) {
    pairs.push_back(pair_with("q" + std::to_string(i), kAllPrinciples[i / 2], winners[i]));
  }
  // Judge says "left" for: q0 (ok) q1 (wrong) q2 (ok) q6 (ok) q7 (wrong) q9 (ok).
  // Judge says "right" for: q3 (wrong) q4 (ok) q5 (ok). q8 returns garbage -> abstain.
  std::map<std::pair<std::string, bool>, std::string> replay;
  const bool says_left[10] = {true, true, true, false, false, false, true, true, false, true};
  for (int i = 0; i < 10; ++i) {
    const std::string id = "q" + std::to_string(i);
    replay[{id, false}] = i == 8 ? "I cannot decide." : verdict_json(kAllPrinciples[i / 2], says_left[i]);
  }
  ReplayTransport transport(replay);
  auto cfg = fast_config();
  cfg.max_retries = 1;
  FakeTime t;
  JudgeClient client(cfg, transport, t.clock(), t.sleeper());
  const auto run = evaluate_judge(client, pairs, loader_image, 2);
  const std::size_t expected_correct[5] = {1, 1, 2, 1, 1};
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(run.table.per_principle[k].correct, expected_correct[k]) << k;
    EXPECT_EQ(run.table.per_principle[k].total, 2u);
  }
  EXPECT_EQ(run.table.per_principle[4].abstained, 1u);
  EXPECT_EQ(run.table.overall.correct, 6u);
  EXPECT_DOUBLE_EQ(run.table.overall.percent(), 60.0);
  EXPECT_EQ(run.outcomes[8].attempts, 2);
  EXPECT_FALSE(run.swapped_table);
  EXPECT_EQ(run.to_json().at("requests_abstained"), 1);
}

TEST(EvaluateJudge, ImageLoadFailureAbstains) {
  const std::vector<eval::PairComparison> pairs = {pair_with("z", Principle::ClosedOpen, eval::Side::Left)};
  FunctionTransport transport([](const JudgeRequest&) { return true; });
  FakeTime t;
  JudgeClient client(fast_config(), transport, t.clock(), t.sleeper());
  const auto run = evaluate_judge(client, pairs, [](const std::string& id) -> Image {
    throw InputError("cannot read " + id);
  });
  EXPECT_EQ(run.table.overall.abstained, 1u);
  EXPECT_EQ(transport.calls, 0);
  EXPECT_NE(run.outcomes[0].error.find("cannot read"), std::string::npos);
}

TEST(Secrets, ApiKeyFromEnvironmentOnlyAndRedacted) {
  auto cfg = fast_config();
  cfg.api_key_env = "WPCLIP_TEST_JUDGE_KEY";
  ::unsetenv("WPCLIP_TEST_JUDGE_KEY");
  try {
    HttpTransport missing(cfg);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("WPCLIP_TEST_JUDGE_KEY"), std::string::npos);
  }
  const std::string secret = "sk-test-9f8e7d6c5b4a";
  ::setenv("WPCLIP_TEST_JUDGE_KEY", secret.c_str(), 1);
  HttpTransport transport(cfg);  // constructing performs no I/O
  EXPECT_EQ(transport.api_key(), secret);
  EXPECT_EQ(cfg.to_json().dump().find(secret), std::string::npos);
  EXPECT_NE(cfg.to_json().dump().find("WPCLIP_TEST_JUDGE_KEY"), std::string::npos);

  // A model that echoes the key back must not leak it into results.
  JudgeOutcome o;
  o.pair_id = "p";
  o.verdict = JudgeVerdict{true, "my key is " + secret, "raw " + secret, 1.0};
  JudgeOutcome failed;
  failed.pair_id = "q";
  failed.error = "HTTP 401 for Bearer " + secret;
  const std::vector<JudgeOutcome> outcomes = {o, failed};
  std::ostringstream out;
  const std::vector<std::string> secrets = {secret};
  write_outcomes_jsonl(out, outcomes, secrets);
  EXPECT_EQ(out.str().find(secret), std::string::npos);
  EXPECT_NE(out.str().find("[REDACTED]"), std::string::npos);
  EXPECT_EQ(redact("a" + secret + "b" + secret, secrets), "a[REDACTED]b[REDACTED]");
  EXPECT_EQ(redact("abc", std::vector<std::string>{""}), "abc");
  ::unsetenv("WPCLIP_TEST_JUDGE_KEY");
}

TEST(Secrets, HttpsWithoutTlsOrBadUrlIsConfigError) {
  auto cfg = fast_config();
  cfg.api_key_env = "WPCLIP_TEST_JUDGE_KEY2";
  ::setenv("WPCLIP_TEST_JUDGE_KEY2", "k", 1);
  cfg.endpoint = "ftp://example";
  EXPECT_THROW(HttpTransport{cfg}, ConfigError);
  ::unsetenv("WPCLIP_TEST_JUDGE_KEY2");
}

TEST(Outcomes, JsonlFields) {
  JudgeOutcome o;
  o.pair_id = "p1";
  o.principle = Principle::ClosedOpen;
  o.swapped = true;
  o.attempts = 2;
  o.verdict = JudgeVerdict{true, "why", "raw", 12.0};
  std::ostringstream out;
  write_outcomes_jsonl(out, std::vector<JudgeOutcome>{o});
  const auto j = nlohmann::json::parse(out.str());
  EXPECT_EQ(j.at("pair_id"), "p1");
  EXPECT_EQ(j.at("principle"), "closed_open");
  EXPECT_EQ(j.at("verdict"), "right");  // left in the swapped frame is right originally
  EXPECT_EQ(j.at("attempts"), 2);
  EXPECT_EQ(j.at("reasoning"), "why");
  EXPECT_TRUE(j.contains("latency_ms"));
}
