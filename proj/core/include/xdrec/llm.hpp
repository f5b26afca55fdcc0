#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace xdrec {

enum class ProviderKind { http, oracle, random, replay, adversarial };

std::string_view to_string(ProviderKind kind);
ProviderKind provider_kind_from_string(std::string_view name);

// Injection probabilities for the adversarial wrapper. Format noise only
// changes presentation; content noise changes which titles appear.
struct NoiseConfig {
  double numbering = 0.0;    // per line: prefix "1." / "1)" / "-"
  double indent = 0.0;       // per line: leading whitespace
  double quotes = 0.0;       // per line: wrap in quotes
  double blank_lines = 0.0;  // per line: follow with a blank line
  double paraphrase = 0.0;   // per item: alter the title
  double drop = 0.0;         // per item: omit the title
  double hallucinate = 0.0;  // per item: add an invented title after it
  double refusal = 0.0;      // per completion: replace everything with a refusal

  [[nodiscard]] bool has_content_noise() const {
    return paraphrase > 0 || drop > 0 || hallucinate > 0 || refusal > 0;
  }
};

struct ProviderConfig {
  ProviderKind kind = ProviderKind::oracle;
  std::string endpoint;
  std::string model;
  double temperature = 0.0;
  int max_retries = 3;
  int requests_per_minute = 60;
  std::filesystem::path cache_dir;  // empty disables the on-disk cache
  std::string api_key_env = "OPENAI_API_KEY";
  std::uint64_t seed = 0;
  std::filesystem::path replay_dir;  // defaults to cache_dir
  ProviderKind inner_kind = ProviderKind::oracle;  // wrapped by adversarial
  NoiseConfig noise;
  double timeout_seconds = 120.0;
  double backoff_initial_seconds = 1.0;

  // Model label recorded in cache entries and reports.
  [[nodiscard]] std::string model_label() const;
};

void validate(const ProviderConfig& config);

// Presented candidate titles and ground-truth positions for one prompt.
// Mocks read this out of band instead of parsing the prompt.
struct AnswerKey {
  std::vector<std::string> titles;
  std::vector<int> ground_truth;
};

class AnswerKeyRegistry {
 public:
  void put(const std::string& id, AnswerKey key);
  [[nodiscard]] std::optional<AnswerKey> get(const std::string& id) const;

 private:
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, AnswerKey> keys_;
};

struct CompletionRequest {
  std::string prompt;
  std::string answer_key_id;  // empty for requests without candidates
};

struct Completion {
  std::string raw_text;
  std::string model;
  double latency_ms = 0.0;
  bool cached = false;
  int attempts = 0;
  std::string prompt_hash;
};

// Mock reply to requests that carry no answer key (guidance generation).
inline constexpr std::string_view kMockFeatureReply = "genre, themes, popular franchises";
inline constexpr std::string_view kRefusalText =
    "Sorry, but I cannot fulfill this request as it goes against OpenAI's use case policy.";

class Provider {
 public:
  virtual ~Provider() = default;
  // Returns raw completion text. Throws TransientProviderError for
  // retryable failures and ProviderError otherwise.
  virtual std::string complete(const CompletionRequest& request) = 0;
  [[nodiscard]] virtual bool remote() const { return false; }
};

// Ground truth first, then the other candidates in presented order.
class OracleProvider final : public Provider {
 public:
  explicit OracleProvider(std::shared_ptr<const AnswerKeyRegistry> keys) : keys_(std::move(keys)) {}
  std::string complete(const CompletionRequest& request) override;

 private:
  std::shared_ptr<const AnswerKeyRegistry> keys_;
};

// Uniform permutation of the presented titles, seeded per prompt.
class RandomProvider final : public Provider {
 public:
  RandomProvider(std::shared_ptr<const AnswerKeyRegistry> keys, std::uint64_t seed)
      : keys_(std::move(keys)), seed_(seed) {}
  std::string complete(const CompletionRequest& request) override;

 private:
  std::shared_ptr<const AnswerKeyRegistry> keys_;
  std::uint64_t seed_;
};

class CompletionCache;

// Serves stored completions only; a miss names the prompt hash.
class ReplayProvider final : public Provider {
 public:
  ReplayProvider(std::filesystem::path dir, std::string model, double temperature);
  ~ReplayProvider() override;
  std::string complete(const CompletionRequest& request) override;

 private:
  std::unique_ptr<CompletionCache> cache_;
  std::string model_;
  double temperature_;
};

// Wraps another provider and injects format/content noise.
class AdversarialProvider final : public Provider {
 public:
  AdversarialProvider(std::unique_ptr<Provider> inner, NoiseConfig noise, std::uint64_t seed)
      : inner_(std::move(inner)), noise_(noise), seed_(seed) {}
  std::string complete(const CompletionRequest& request) override;
  [[nodiscard]] bool remote() const override { return inner_->remote(); }

 private:
  std::unique_ptr<Provider> inner_;
  NoiseConfig noise_;
  std::uint64_t seed_;
};

// OpenAI-compatible chat-completions client.
class HttpProvider final : public Provider {
 public:
  explicit HttpProvider(ProviderConfig config);
  std::string complete(const CompletionRequest& request) override;
  [[nodiscard]] bool remote() const override { return true; }

  // Request body for a prompt; exposed for wire-format tests.
  static std::string request_body(const std::string& model, double temperature,
                                  const std::string& prompt);
  // Extracts choices[0].message.content; throws ProviderError otherwise.
  static std::string parse_response(const std::string& body);

 private:
  ProviderConfig config_;
  std::string scheme_host_port_;
  std::string path_;
};

std::unique_ptr<Provider> make_provider(const ProviderConfig& config,
                                        std::shared_ptr<const AnswerKeyRegistry> keys);

// Hash identifying a completion: SHA-256 over model, temperature and prompt.
std::string completion_key(std::string_view model, double temperature, std::string_view prompt);

// One JSON file per completion, named <key>.json, holding
// {prompt_hash, model, raw_text, timestamp}.
class CompletionCache {
 public:
  explicit CompletionCache(std::filesystem::path dir);
  // nullopt on a miss; unreadable or corrupt entries warn and miss.
  [[nodiscard]] std::optional<std::string> get(const std::string& key) const;
  void put(const std::string& key, const std::string& model, const std::string& raw_text);
  [[nodiscard]] std::filesystem::path path_for(const std::string& key) const;
  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

class Clock {
 public:
  virtual ~Clock() = default;
  virtual double now_seconds() = 0;
  virtual void sleep_for(double seconds) = 0;
};

class SystemClock final : public Clock {
 public:
  double now_seconds() override;
  void sleep_for(double seconds) override;

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Time moves only when someone sleeps.
class VirtualClock final : public Clock {
 public:
  double now_seconds() override;
  void sleep_for(double seconds) override;
  void advance(double seconds) { sleep_for(seconds); }

 private:
  std::mutex mutex_;
  double now_ = 0.0;
};

// Sliding 60-second window: at most `per_minute` acquisitions in any window.
class RateLimiter {
 public:
  RateLimiter(int per_minute, std::shared_ptr<Clock> clock);
  void acquire();
  [[nodiscard]] const std::vector<double>& history() const { return history_; }

 private:
  int per_minute_;
  std::shared_ptr<Clock> clock_;
  std::mutex mutex_;
  std::deque<double> window_;
  std::vector<double> history_;
};

struct GatewayStats {
  std::size_t requests = 0;
  std::size_t provider_calls = 0;  // attempts that reached the provider
  std::size_t cache_hits = 0;
  std::size_t retries = 0;
};

// Cache, retry with exponential backoff, rate limiting and in-flight
// de-duplication in front of a provider. Safe for concurrent callers.
class Gateway {
 public:
  Gateway(ProviderConfig config, std::unique_ptr<Provider> provider,
          std::shared_ptr<Clock> clock = std::make_shared<SystemClock>());

  Completion complete(const CompletionRequest& request);

  [[nodiscard]] GatewayStats stats() const;
  [[nodiscard]] const ProviderConfig& config() const { return config_; }

 private:
  std::string call_with_retry(const CompletionRequest& request, int& attempts);

  ProviderConfig config_;
  std::unique_ptr<Provider> provider_;
  std::shared_ptr<Clock> clock_;
  std::optional<CompletionCache> cache_;
  std::optional<RateLimiter> limiter_;

  mutable std::mutex mutex_;
  GatewayStats stats_;
  std::map<std::string, std::shared_future<std::string>> in_flight_;
};

}  // namespace xdrec
