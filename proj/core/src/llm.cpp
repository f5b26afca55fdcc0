#include "xdrec/llm.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <ctime>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "xdrec/digest.hpp"
#include "xdrec/errors.hpp"
#include "xdrec/rng.hpp"

namespace xdrec {

using nlohmann::json;

std::string_view to_string(ProviderKind kind) {
  switch (kind) {
    case ProviderKind::http:
      return "http";
    case ProviderKind::oracle:
      return "oracle";
    case ProviderKind::random:
      return "random";
    case ProviderKind::replay:
      return "replay";
    case ProviderKind::adversarial:
      return "adversarial";
  }
  return "unknown";
}

ProviderKind provider_kind_from_string(std::string_view name) {
  for (auto kind : {ProviderKind::http, ProviderKind::oracle, ProviderKind::random,
                    ProviderKind::replay, ProviderKind::adversarial}) {
    if (to_string(kind) == name) return kind;
  }
  throw ConfigError("unknown provider kind '" + std::string(name) + "'");
}

std::string ProviderConfig::model_label() const {
  if (!model.empty()) return model;
  if (kind == ProviderKind::adversarial) {
    return fmt::format("adversarial-{}", to_string(inner_kind));
  }
  return std::string(to_string(kind));
}

void validate(const ProviderConfig& config) {
  if (config.kind == ProviderKind::http && (config.endpoint.empty() || config.model.empty())) {
    throw ConfigError("provider: http kind requires endpoint and model");
  }
  if (!(config.temperature >= 0.0)) throw ConfigError("provider: temperature must be >= 0");
  if (config.max_retries < 0) throw ConfigError("provider: max_retries must be >= 0");
  if (config.requests_per_minute < 0) {
    throw ConfigError("provider: requests_per_minute must be >= 0");
  }
  if (config.kind == ProviderKind::replay && config.replay_dir.empty() &&
      config.cache_dir.empty()) {
    throw ConfigError("provider: replay kind requires replay_dir or cache_dir");
  }
  if (config.kind == ProviderKind::adversarial &&
      (config.inner_kind == ProviderKind::adversarial)) {
    throw ConfigError("provider: adversarial cannot wrap itself");
  }
  const auto& n = config.noise;
  for (double p : {n.numbering, n.indent, n.quotes, n.blank_lines, n.paraphrase, n.drop,
                   n.hallucinate, n.refusal}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("provider: noise probabilities must lie in [0, 1]");
  }
}

void AnswerKeyRegistry::put(const std::string& id, AnswerKey key) {
  std::unique_lock lock(mutex_);
  keys_[id] = std::move(key);
}

std::optional<AnswerKey> AnswerKeyRegistry::get(const std::string& id) const {
  std::shared_lock lock(mutex_);
  auto it = keys_.find(id);
  if (it == keys_.end()) return std::nullopt;
  return it->second;
}

namespace {

std::optional<AnswerKey> lookup(const std::shared_ptr<const AnswerKeyRegistry>& keys,
                                const CompletionRequest& request) {
  if (request.answer_key_id.empty()) return std::nullopt;
  auto key = keys ? keys->get(request.answer_key_id) : std::nullopt;
  if (!key) throw ProviderError("no answer key registered for '" + request.answer_key_id + "'");
  return key;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

}  // namespace

std::string OracleProvider::complete(const CompletionRequest& request) {
  auto key = lookup(keys_, request);
  if (!key) return std::string(kMockFeatureReply);
  std::vector<std::string> lines;
  std::vector<char> is_gt(key->titles.size(), 0);
  for (int p : key->ground_truth) is_gt.at(static_cast<std::size_t>(p)) = 1;
  for (std::size_t i = 0; i < key->titles.size(); ++i) {
    if (is_gt[i]) lines.push_back(key->titles[i]);
  }
  for (std::size_t i = 0; i < key->titles.size(); ++i) {
    if (!is_gt[i]) lines.push_back(key->titles[i]);
  }
  return join_lines(lines);
}

std::string RandomProvider::complete(const CompletionRequest& request) {
  auto key = lookup(keys_, request);
  if (!key) return std::string(kMockFeatureReply);
  Rng rng = Rng(seed_).split(request.prompt);
  auto titles = key->titles;
  rng.shuffle(std::span(titles));
  return join_lines(titles);
}

ReplayProvider::ReplayProvider(std::filesystem::path dir, std::string model, double temperature)
    : cache_(std::make_unique<CompletionCache>(std::move(dir))),
      model_(std::move(model)),
      temperature_(temperature) {}

ReplayProvider::~ReplayProvider() = default;

std::string ReplayProvider::complete(const CompletionRequest& request) {
  auto key = completion_key(model_, temperature_, request.prompt);
  auto hit = cache_->get(key);
  if (!hit) throw ReplayMissError(key);
  return *hit;
}

std::string AdversarialProvider::complete(const CompletionRequest& request) {
  std::string inner = inner_->complete(request);
  if (request.answer_key_id.empty()) return inner;

  Rng rng = Rng(seed_).split("adversarial").split(request.prompt);
  if (rng.bernoulli(noise_.refusal)) return std::string(kRefusalText);

  std::vector<std::string> items;
  {
    std::istringstream is(inner);
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) items.push_back(line);
    }
  }

  std::vector<std::string> content;
  std::size_t invented = 0;
  for (const auto& item : items) {
    if (rng.bernoulli(noise_.drop)) continue;
    if (rng.bernoulli(noise_.paraphrase)) {
      content.push_back(item + " (Collector's Remastered Edition)");
    } else {
      content.push_back(item);
    }
    if (rng.bernoulli(noise_.hallucinate)) {
      content.push_back(fmt::format("Phantom Release No. {}-{}", ++invented, rng.uniform(100000)));
    }
  }

  static constexpr std::array<std::string_view, 3> kStyles = {"{}.", "{})", "-"};
  const auto style = kStyles[static_cast<std::size_t>(rng.uniform(kStyles.size()))];
  std::string out;
  for (std::size_t i = 0; i < content.size(); ++i) {
    std::string line = content[i];
    if (rng.bernoulli(noise_.quotes)) {
      const std::string quote = rng.bernoulli(0.5) ? "'" : "\"";
      line = quote + line + quote;
    }
    if (rng.bernoulli(noise_.numbering)) {
      line = fmt::format(fmt::runtime(style), i + 1) + " " + line;
    }
    if (rng.bernoulli(noise_.indent)) line = (rng.bernoulli(0.5) ? "    " : "\t") + line;
    out += line;
    out += '\n';
    if (rng.bernoulli(noise_.blank_lines)) out += rng.bernoulli(0.5) ? "\n" : "   \n";
  }
  return out;
}

std::unique_ptr<Provider> make_provider(const ProviderConfig& config,
                                        std::shared_ptr<const AnswerKeyRegistry> keys) {
  validate(config);
  switch (config.kind) {
    case ProviderKind::http:
      return std::make_unique<HttpProvider>(config);
    case ProviderKind::oracle:
      return std::make_unique<OracleProvider>(std::move(keys));
    case ProviderKind::random:
      return std::make_unique<RandomProvider>(std::move(keys), config.seed);
    case ProviderKind::replay:
      return std::make_unique<ReplayProvider>(
          config.replay_dir.empty() ? config.cache_dir : config.replay_dir, config.model_label(),
          config.temperature);
    case ProviderKind::adversarial: {
      ProviderConfig inner = config;
      inner.kind = config.inner_kind;
      return std::make_unique<AdversarialProvider>(make_provider(inner, std::move(keys)),
                                                   config.noise, config.seed);
    }
  }
  throw ConfigError("unhandled provider kind");
}

std::string completion_key(std::string_view model, double temperature, std::string_view prompt) {
  std::string buf = fmt::format("{}\n{:.6f}\n", model, temperature);
  buf.append(prompt);
  return sha256_hex(buf);
}

CompletionCache::CompletionCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

std::filesystem::path CompletionCache::path_for(const std::string& key) const {
  return dir_ / (key + ".json");
}

std::optional<std::string> CompletionCache::get(const std::string& key) const {
  const auto path = path_for(key);
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return std::nullopt;
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  json j = json::parse(ss.str(), nullptr, false);
  if (!j.is_object() || !j.contains("raw_text") || !j["raw_text"].is_string() ||
      j.value("prompt_hash", std::string()) != key) {
    spdlog::warn("ignoring corrupt cache entry {}", path.string());
    return std::nullopt;
  }
  return j["raw_text"].get<std::string>();
}

void CompletionCache::put(const std::string& key, const std::string& model,
                          const std::string& raw_text) {
  std::filesystem::create_directories(dir_);
  json j = {{"prompt_hash", key},
            {"model", model},
            {"raw_text", raw_text},
            {"timestamp", static_cast<std::int64_t>(std::time(nullptr))}};
  // Write-then-rename so an interrupted run never leaves a torn entry.
  const auto path = path_for(key);
  auto tmp = path;
  tmp += fmt::format(".tmp{}", std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << j.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

double SystemClock::now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
}

void SystemClock::sleep_for(double seconds) {
  if (seconds > 0) std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

double VirtualClock::now_seconds() {
  std::lock_guard lock(mutex_);
  return now_;
}

void VirtualClock::sleep_for(double seconds) {
  std::lock_guard lock(mutex_);
  if (seconds > 0) now_ += seconds;
}

RateLimiter::RateLimiter(int per_minute, std::shared_ptr<Clock> clock)
    : per_minute_(per_minute), clock_(std::move(clock)) {}

void RateLimiter::acquire() {
  std::lock_guard lock(mutex_);
  if (per_minute_ <= 0) return;
  double now = clock_->now_seconds();
  while (!window_.empty() && window_.front() <= now - 60.0) window_.pop_front();
  if (window_.size() >= static_cast<std::size_t>(per_minute_)) {
    clock_->sleep_for(window_.front() + 60.0 - now);
    now = clock_->now_seconds();
    while (!window_.empty() && window_.front() <= now - 60.0) window_.pop_front();
  }
  window_.push_back(now);
  history_.push_back(now);
}

Gateway::Gateway(ProviderConfig config, std::unique_ptr<Provider> provider,
                 std::shared_ptr<Clock> clock)
    : config_(std::move(config)), provider_(std::move(provider)), clock_(std::move(clock)) {
  if (!config_.cache_dir.empty()) cache_.emplace(config_.cache_dir);
  if (provider_->remote() && config_.requests_per_minute > 0) {
    limiter_.emplace(config_.requests_per_minute, clock_);
  }
}

GatewayStats Gateway::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

std::string Gateway::call_with_retry(const CompletionRequest& request, int& attempts) {
  double backoff = config_.backoff_initial_seconds;
  for (attempts = 1;; ++attempts) {
    if (limiter_) limiter_->acquire();
    {
      std::lock_guard lock(mutex_);
      ++stats_.provider_calls;
    }
    try {
      return provider_->complete(request);
    } catch (const TransientProviderError& e) {
      if (attempts > config_.max_retries) {
        throw ProviderError(fmt::format("giving up after {} attempts: {}", attempts, e.what()));
      }
      spdlog::warn("transient provider error (attempt {}): {}", attempts, e.what());
      {
        std::lock_guard lock(mutex_);
        ++stats_.retries;
      }
      clock_->sleep_for(backoff);
      backoff *= 2.0;
    }
  }
}

Completion Gateway::complete(const CompletionRequest& request) {
  Completion out;
  out.model = config_.model_label();
  out.prompt_hash = completion_key(out.model, config_.temperature, request.prompt);
  const double start = clock_->now_seconds();
  {
    std::lock_guard lock(mutex_);
    ++stats_.requests;
  }

  if (cache_) {
    if (auto hit = cache_->get(out.prompt_hash)) {
      std::lock_guard lock(mutex_);
      ++stats_.cache_hits;
      out.raw_text = std::move(*hit);
      out.cached = true;
      return out;
    }
  }

  std::promise<std::string> promise;
  std::shared_future<std::string> shared;
  bool owner = false;
  {
    std::lock_guard lock(mutex_);
    auto it = in_flight_.find(out.prompt_hash);
    if (it == in_flight_.end()) {
      shared = promise.get_future().share();
      in_flight_.emplace(out.prompt_hash, shared);
      owner = true;
    } else {
      shared = it->second;
    }
  }

  if (owner) {
    try {
      int attempts = 0;
      std::string text = call_with_retry(request, attempts);
      out.attempts = attempts;
      if (cache_) cache_->put(out.prompt_hash, out.model, text);
      promise.set_value(text);
    } catch (...) {
      promise.set_exception(std::current_exception());
    }
    std::lock_guard lock(mutex_);
    in_flight_.erase(out.prompt_hash);
  }
  out.raw_text = shared.get();
  out.latency_ms = (clock_->now_seconds() - start) * 1000.0;
  return out;
}

}  // namespace xdrec
