#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <fmt/format.h>

#include <cstdlib>
#include <nlohmann/json.hpp>

#include "xdrec/errors.hpp"
#include "xdrec/llm.hpp"

namespace xdrec {

using nlohmann::json;

HttpProvider::HttpProvider(ProviderConfig config) : config_(std::move(config)) {
  const auto& url = config_.endpoint;
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("provider endpoint must include a scheme: " + url);
  }
  auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/v1/chat/completions" : url.substr(path_start);
}

std::string HttpProvider::request_body(const std::string& model, double temperature,
                                       const std::string& prompt) {
  json body = {{"model", model},
               {"messages", json::array({{{"role", "user"}, {"content", prompt}}})},
               {"temperature", temperature}};
  return body.dump();
}

std::string HttpProvider::parse_response(const std::string& body) {
  json j = json::parse(body, nullptr, false);
  if (j.is_discarded()) throw ProviderError("provider returned invalid JSON");
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_null()) return {};
    return content.get<std::string>();
  } catch (const json::exception& e) {
    throw ProviderError(std::string("unexpected chat-completions response: ") + e.what());
  }
}

std::string HttpProvider::complete(const CompletionRequest& request) {
  httplib::Client client(scheme_host_port_);
  const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));

  httplib::Headers headers;
  if (const char* key = std::getenv(config_.api_key_env.c_str()); key != nullptr && *key != 0) {
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  auto result = client.Post(path_, headers,
                            request_body(config_.model, config_.temperature, request.prompt),
                            "application/json");
  if (!result) {
    throw TransientProviderError(
        fmt::format("request to {} failed: {}", scheme_host_port_, httplib::to_string(result.error())));
  }
  const int status = result->status;
  if (status == 429 || status >= 500) {
    throw TransientProviderError(fmt::format("provider returned HTTP {}", status));
  }
  if (status != 200) {
    throw ProviderError(fmt::format("provider returned HTTP {}: {}", status,
                                    result->body.substr(0, 200)));
  }
  return parse_response(result->body);
}

}  // namespace xdrec
