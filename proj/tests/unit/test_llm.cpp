#include "doctest.h"

#include <httplib.h>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdlib>
#include <latch>
#include <numeric>
#include <thread>

#include "fixtures.hpp"
#include "xdrec/errors.hpp"
#include "xdrec/llm.hpp"
#include "xdrec/parse.hpp"

using namespace xdrec;
using nlohmann::json;

namespace {

std::shared_ptr<AnswerKeyRegistry> registry_with(const std::string& id, std::size_t m,
                                                 std::vector<int> gt) {
  auto reg = std::make_shared<AnswerKeyRegistry>();
  AnswerKey key;
  for (std::size_t i = 0; i < m; ++i) key.titles.push_back(fmt::format("Candidate Title {}", i));
  key.ground_truth = std::move(gt);
  reg->put(id, key);
  return reg;
}

std::vector<std::string> nonblank_lines(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& l : normalize_output(text)) out.push_back(l.text);
  return out;
}

// Scripted provider: replays a queue of outcomes, counting calls.
class ScriptedProvider final : public Provider {
 public:
  enum class Step { ok, transient, fatal };
  explicit ScriptedProvider(std::vector<Step> steps, bool remote = true)
      : steps_(std::move(steps)), remote_(remote) {}
  std::string complete(const CompletionRequest& request) override {
    auto i = calls++;
    auto step = i < steps_.size() ? steps_[i] : Step::ok;
    if (step == Step::transient) throw TransientProviderError("try again");
    if (step == Step::fatal) throw ProviderError("bad request");
    return "reply to " + request.prompt;
  }
  [[nodiscard]] bool remote() const override { return remote_; }
  std::atomic<std::size_t> calls{0};

 private:
  std::vector<Step> steps_;
  bool remote_;
};

class SlowProvider final : public Provider {
 public:
  std::string complete(const CompletionRequest& request) override {
    ++calls;
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    return request.prompt;
  }
  std::atomic<int> calls{0};
};

}  // namespace

TEST_SUITE("llm") {

TEST_CASE("provider config validation") {
  ProviderConfig c;
  CHECK_NOTHROW(validate(c));
  c.kind = ProviderKind::http;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c.endpoint = "http://localhost:1";
  c.model = "m";
  CHECK_NOTHROW(validate(c));
  c.temperature = -0.1;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.noise.drop = 1.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.kind = ProviderKind::replay;
  CHECK_THROWS_AS(validate(c), ConfigError);
  CHECK(provider_kind_from_string("adversarial") == ProviderKind::adversarial);
  CHECK_THROWS_AS(provider_kind_from_string("gpt"), ConfigError);
  CHECK(ProviderConfig{}.model_label() == "oracle");
}

TEST_CASE("oracle lists ground truth first, then the rest in presented order") {
  auto reg = registry_with("k", 6, {4, 1, 5});
  OracleProvider p(reg);
  auto lines = nonblank_lines(p.complete({"prompt", "k"}));
  CHECK(lines == std::vector<std::string>{"Candidate Title 1", "Candidate Title 4",
                                          "Candidate Title 5", "Candidate Title 0",
                                          "Candidate Title 2", "Candidate Title 3"});
  CHECK(p.complete({"meta", ""}) == kMockFeatureReply);
  CHECK_THROWS_AS(p.complete({"prompt", "missing"}), ProviderError);
}

TEST_CASE("random provider is a seeded permutation") {
  auto reg = registry_with("k", 20, {0, 1, 2});
  RandomProvider a(reg, 5), b(reg, 5), c(reg, 6);
  auto x = a.complete({"prompt", "k"});
  CHECK(x == b.complete({"prompt", "k"}));
  CHECK(x != c.complete({"prompt", "k"}));
  CHECK(x != a.complete({"other prompt", "k"}));
  auto lines = nonblank_lines(x);
  std::sort(lines.begin(), lines.end());
  auto titles = reg->get("k")->titles;
  std::sort(titles.begin(), titles.end());
  CHECK(lines == titles);
}

TEST_CASE("adversarial with zero noise is the identity") {
  auto reg = registry_with("k", 20, {0, 1, 2});
  AdversarialProvider adv(std::make_unique<RandomProvider>(reg, 3), NoiseConfig{}, 11);
  RandomProvider plain(reg, 3);
  for (int i = 0; i < 20; ++i) {
    auto prompt = fmt::format("prompt {}", i);
    CHECK(adv.complete({prompt, "k"}) == plain.complete({prompt, "k"}));
  }
}

TEST_CASE("adversarial refusal probability 1") {
  auto reg = registry_with("k", 20, {0, 1, 2});
  NoiseConfig noise;
  noise.refusal = 1.0;
  AdversarialProvider adv(std::make_unique<OracleProvider>(reg), noise, 1);
  for (int i = 0; i < 50; ++i) {
    auto text = adv.complete({fmt::format("p{}", i), "k"});
    CHECK(text == kRefusalText);
    CHECK(detect_refusal(text, default_parse_rules()));
  }
}

TEST_CASE("adversarial drop 0.15 on m=20 leaves 17 +- 0.5 titles on average") {
  auto reg = registry_with("k", 20, {0, 1, 2});
  NoiseConfig noise;
  noise.drop = 0.15;
  AdversarialProvider adv(std::make_unique<OracleProvider>(reg), noise, 2024);
  double total = 0;
  for (int i = 0; i < 1000; ++i) {
    total += static_cast<double>(nonblank_lines(adv.complete({fmt::format("p{}", i), "k"})).size());
  }
  CHECK(std::abs(total / 1000.0 - 17.0) <= 0.5);
}

TEST_CASE("adversarial format noise is parseable back to the wrapped ranking") {
  auto reg = registry_with("k", 20, {0, 1, 2});
  NoiseConfig noise;
  noise.numbering = 0.7;
  noise.indent = 0.5;
  noise.quotes = 0.4;
  noise.blank_lines = 0.3;
  AdversarialProvider adv(std::make_unique<RandomProvider>(reg, 1), noise, 5);
  RandomProvider plain(reg, 1);
  const auto titles = reg->get("k")->titles;
  bool saw_numbering = false;
  for (int i = 0; i < 200; ++i) {
    auto prompt = fmt::format("p{}", i);
    auto noisy = adv.complete({prompt, "k"});
    saw_numbering |= noisy.find("1.") != std::string::npos || noisy.find("1)") != std::string::npos;
    auto clean = plain.complete({prompt, "k"});
    auto a = parse_completion(noisy, titles, default_parse_rules());
    auto b = parse_completion(clean, titles, default_parse_rules());
    REQUIRE(a.ranked == b.ranked);
    CHECK(a.n_format_fixes > 0);
  }
  CHECK(saw_numbering);
}

TEST_CASE("adversarial passes key-less requests through") {
  auto reg = registry_with("k", 5, {0, 1, 2});
  NoiseConfig noise;
  noise.refusal = 1.0;
  AdversarialProvider adv(std::make_unique<OracleProvider>(reg), noise, 1);
  CHECK(adv.complete({"meta", ""}) == kMockFeatureReply);
}

TEST_CASE("completion key depends on model, temperature and prompt") {
  auto k = completion_key("m", 0.0, "p");
  CHECK(k.size() == 64);
  CHECK(k == completion_key("m", 0.0, "p"));
  CHECK(k != completion_key("m2", 0.0, "p"));
  CHECK(k != completion_key("m", 0.5, "p"));
  CHECK(k != completion_key("m", 0.0, "p "));
}

TEST_CASE("cache round trip and corruption") {
  testing::TempDir dir("cache");
  CompletionCache cache(dir.path() / "c");
  const std::string text = "1. Saw II\n  \"Hostel\"\n\n\tüñíçødé ✓\r\n";
  auto key = completion_key("m", 0, "prompt");
  CHECK_FALSE(cache.get(key));
  cache.put(key, "m", text);
  CHECK(cache.get(key) == text);
  auto entry = json::parse(testing::read_file(cache.path_for(key)));
  CHECK(entry["prompt_hash"] == key);
  CHECK(entry["model"] == "m");
  CHECK(entry.contains("timestamp"));

  testing::write_file(cache.path_for(key), "{ not json");
  CHECK_FALSE(cache.get(key));
  testing::write_file(cache.path_for(key), R"({"prompt_hash":"other","raw_text":"x"})");
  CHECK_FALSE(cache.get(key));
}

TEST_CASE("gateway serves the second identical call from cache") {
  testing::TempDir dir("gateway");
  auto provider = std::make_unique<ScriptedProvider>(std::vector<ScriptedProvider::Step>{});
  auto* raw = provider.get();
  ProviderConfig cfg;
  cfg.cache_dir = dir.path();
  Gateway gw(cfg, std::move(provider), std::make_shared<VirtualClock>());
  auto a = gw.complete({"hello", ""});
  auto b = gw.complete({"hello", ""});
  CHECK(a.raw_text == b.raw_text);
  CHECK_FALSE(a.cached);
  CHECK(b.cached);
  CHECK(raw->calls == 1);
  CHECK(gw.stats().cache_hits == 1);
  CHECK(a.prompt_hash == completion_key("oracle", 0.0, "hello"));

  // A fresh gateway over the same directory needs no provider at all.
  auto again = std::make_unique<ScriptedProvider>(
      std::vector<ScriptedProvider::Step>{ScriptedProvider::Step::fatal});
  Gateway gw2(cfg, std::move(again), std::make_shared<VirtualClock>());
  CHECK(gw2.complete({"hello", ""}).raw_text == a.raw_text);
}

TEST_CASE("gateway retries transient errors with exponential backoff") {
  using S = ScriptedProvider::Step;
  auto clock = std::make_shared<VirtualClock>();
  ProviderConfig cfg;
  cfg.max_retries = 3;
  cfg.backoff_initial_seconds = 1.0;
  cfg.requests_per_minute = 0;

  SUBCASE("recovers") {
    auto p = std::make_unique<ScriptedProvider>(std::vector<S>{S::transient, S::transient, S::ok});
    Gateway gw(cfg, std::move(p), clock);
    auto c = gw.complete({"x", ""});
    CHECK(c.attempts == 3);
    CHECK(clock->now_seconds() == doctest::Approx(3.0));  // 1 + 2
    CHECK(gw.stats().retries == 2);
  }
  SUBCASE("gives up after max retries") {
    auto p = std::make_unique<ScriptedProvider>(std::vector<S>(10, S::transient));
    auto* raw = p.get();
    Gateway gw(cfg, std::move(p), clock);
    CHECK_THROWS_AS(gw.complete({"x", ""}), ProviderError);
    CHECK(raw->calls == 4);
    CHECK(clock->now_seconds() == doctest::Approx(7.0));  // 1 + 2 + 4
  }
  SUBCASE("permanent errors are not retried") {
    auto p = std::make_unique<ScriptedProvider>(std::vector<S>{S::fatal});
    auto* raw = p.get();
    Gateway gw(cfg, std::move(p), clock);
    CHECK_THROWS_AS(gw.complete({"x", ""}), ProviderError);
    CHECK(raw->calls == 1);
  }
}

TEST_CASE("rate limiter: never more than the cap in any 60 s window") {
  auto clock = std::make_shared<VirtualClock>();
  RateLimiter limiter(10, clock);
  for (int i = 0; i < 95; ++i) {
    limiter.acquire();
    clock->advance(0.7);
  }
  const auto& h = limiter.history();
  REQUIRE(h.size() == 95);
  for (std::size_t i = 0; i < h.size(); ++i) {
    std::size_t in_window = 0;
    for (std::size_t j = i; j < h.size() && h[j] < h[i] + 60.0; ++j) ++in_window;
    CHECK(in_window <= 10);
  }
  CHECK(h.back() > 8 * 60.0);
}

TEST_CASE("gateway applies the limiter to remote providers only") {
  auto clock = std::make_shared<VirtualClock>();
  ProviderConfig cfg;
  cfg.requests_per_minute = 2;
  {
    Gateway gw(cfg, std::make_unique<ScriptedProvider>(std::vector<ScriptedProvider::Step>{}, true),
               clock);
    for (int i = 0; i < 5; ++i) gw.complete({fmt::format("p{}", i), ""});
    CHECK(clock->now_seconds() >= 120.0);
  }
  auto local_clock = std::make_shared<VirtualClock>();
  Gateway gw(cfg, std::make_unique<ScriptedProvider>(std::vector<ScriptedProvider::Step>{}, false),
             local_clock);
  for (int i = 0; i < 5; ++i) gw.complete({fmt::format("p{}", i), ""});
  CHECK(local_clock->now_seconds() == 0.0);
}

TEST_CASE("concurrent identical prompts trigger one provider call") {
  auto provider = std::make_unique<SlowProvider>();
  auto* raw = provider.get();
  Gateway gw(ProviderConfig{}, std::move(provider));
  std::vector<std::string> results(8);
  {
    std::latch start(static_cast<std::ptrdiff_t>(results.size()));
    std::vector<std::jthread> threads;
    for (std::size_t i = 0; i < results.size(); ++i) {
      threads.emplace_back([&, i] {
        start.arrive_and_wait();
        results[i] = gw.complete({"same", ""}).raw_text;
      });
    }
  }
  CHECK(raw->calls == 1);
  for (const auto& r : results) CHECK(r == "same");
}

TEST_CASE("replay provider serves recorded completions and names misses") {
  testing::TempDir dir("replay");
  CompletionCache cache(dir.path());
  cache.put(completion_key("gpt-x", 0.0, "known"), "gpt-x", "recorded");
  ReplayProvider replay(dir.path(), "gpt-x", 0.0);
  CHECK(replay.complete({"known", ""}) == "recorded");
  try {
    (void)replay.complete({"unknown", ""});
    FAIL("expected a replay miss");
  } catch (const ReplayMissError& e) {
    CHECK(e.prompt_hash() == completion_key("gpt-x", 0.0, "unknown"));
    CHECK(std::string(e.what()).find(e.prompt_hash()) != std::string::npos);
  }
}

TEST_CASE("http wire format") {
  auto body = json::parse(HttpProvider::request_body("gpt-4", 0.0, "Rank these"));
  CHECK(body["model"] == "gpt-4");
  CHECK(body["temperature"] == 0.0);
  CHECK(body["messages"].size() == 1);
  CHECK(body["messages"][0]["role"] == "user");
  CHECK(body["messages"][0]["content"] == "Rank these");
  CHECK(HttpProvider::parse_response(R"({"choices":[{"message":{"role":"assistant","content":"A\nB"}}]})") ==
        "A\nB");
  CHECK_THROWS_AS(HttpProvider::parse_response("<html>"), ProviderError);
  CHECK_THROWS_AS(HttpProvider::parse_response(R"({"error":{"message":"x"}})"), ProviderError);
}

TEST_CASE("http provider against a local server") {
  httplib::Server server;
  std::atomic<int> hits{0};
  std::string last_auth;
  std::string last_body;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    int n = ++hits;
    last_auth = req.get_header_value("Authorization");
    last_body = req.body;
    if (n == 1) {
      res.status = 503;
      return;
    }
    auto j = json::parse(req.body);
    json reply = {{"choices", json::array({{{"message",
                                             {{"role", "assistant"},
                                              {"content", "echo: " + j["messages"][0]["content"].get<std::string>()}}}}})}};
    res.set_content(reply.dump(), "application/json");
  });
  server.Post("/bad", [](const httplib::Request&, httplib::Response& res) { res.status = 400; });
  int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("XDREC_TEST_API_KEY", "sk-test", 1);
  ProviderConfig cfg;
  cfg.kind = ProviderKind::http;
  cfg.endpoint = fmt::format("http://127.0.0.1:{}/v1/chat/completions", port);
  cfg.model = "local-model";
  cfg.api_key_env = "XDREC_TEST_API_KEY";
  cfg.timeout_seconds = 5;
  cfg.backoff_initial_seconds = 0.5;

  auto clock = std::make_shared<VirtualClock>();
  Gateway gw(cfg, make_provider(cfg, nullptr), clock);
  auto c = gw.complete({"hi there", ""});
  CHECK(c.raw_text == "echo: hi there");
  CHECK(c.attempts == 2);
  CHECK(hits == 2);
  CHECK(last_auth == "Bearer sk-test");
  CHECK(json::parse(last_body)["model"] == "local-model");

  ProviderConfig bad = cfg;
  bad.endpoint = fmt::format("http://127.0.0.1:{}/bad", port);
  Gateway gw_bad(bad, make_provider(bad, nullptr), clock);
  CHECK_THROWS_AS(gw_bad.complete({"x", ""}), ProviderError);

  server.stop();
  t.join();
}

}
