#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace xdrec {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TaskGenError : public Error {
 public:
  using Error::Error;
};

class PromptBudgetError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

// Provider failed permanently (or retries were exhausted).
class ProviderError : public Error {
 public:
  using Error::Error;
};

// Worth retrying: timeouts, HTTP 429 and 5xx.
class TransientProviderError : public ProviderError {
 public:
  using ProviderError::ProviderError;
};

class ReplayMissError : public ProviderError {
 public:
  explicit ReplayMissError(std::string prompt_hash)
      : ProviderError("replay cache has no completion for prompt hash " + prompt_hash),
        prompt_hash_(std::move(prompt_hash)) {}

  [[nodiscard]] const std::string& prompt_hash() const { return prompt_hash_; }

 private:
  std::string prompt_hash_;
};

// A replay run that could not serve every prompt; lists all missing hashes.
class MissingCompletionsError : public ProviderError {
 public:
  explicit MissingCompletionsError(std::vector<std::string> hashes);

  [[nodiscard]] const std::vector<std::string>& hashes() const { return hashes_; }

 private:
  std::vector<std::string> hashes_;
};

}  // namespace xdrec
