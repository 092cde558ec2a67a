#pragma once

// Live HTTP adapters. Kept separate from providers.hpp so tests that only
// need mocks do not pull in the HTTP client.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <json.hpp>

#include "upstreamqa/providers.hpp"

namespace upstreamqa {

namespace detail {

inline std::string base64_encode(const std::vector<unsigned char>& bytes) {
  static const char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 3 <= bytes.size()) {
    uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out.push_back(table[(v >> 6) & 63]);
    out.push_back(table[v & 63]);
    i += 3;
  }
  if (i + 1 == bytes.size()) {
    uint32_t v = bytes[i] << 16;
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out += "==";
  } else if (i + 2 == bytes.size()) {
    uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out.push_back(table[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

// Maps an HTTP status to the terminal/retryable split. Body text is included
// in the message (truncated) but the API key never is.
[[noreturn]] inline void throw_http_error(int status, const std::string& body,
                                          const std::string& retry_after_header,
                                          const std::string& endpoint) {
  std::string detail = body.substr(0, 300);
  std::optional<int64_t> retry_after_ms;
  if (!retry_after_header.empty()) {
    try {
      retry_after_ms = static_cast<int64_t>(std::stoll(trim(retry_after_header))) * 1000;
    } catch (...) {
    }
  }
  if (status == 401 || status == 403)
    throw ProviderError(ProviderErrorKind::auth,
                        endpoint + " returned " + std::to_string(status) +
                            " (check the API key environment variable): " + detail,
                        /*retryable=*/false);
  if (status == 408)
    throw ProviderError(ProviderErrorKind::timeout, endpoint + " returned 408: " + detail,
                        /*retryable=*/true, retry_after_ms);
  if (status == 429)
    throw ProviderError(ProviderErrorKind::rate_limit, endpoint + " returned 429: " + detail,
                        /*retryable=*/true, retry_after_ms);
  if (status >= 500)
    throw ProviderError(ProviderErrorKind::http,
                        endpoint + " returned " + std::to_string(status) + ": " + detail,
                        /*retryable=*/true, retry_after_ms);
  throw ProviderError(ProviderErrorKind::http,
                      endpoint + " returned " + std::to_string(status) + ": " + detail,
                      /*retryable=*/false);
}

}  // namespace detail

struct HttpProviderConfig {
  std::string base_url;      // scheme://host[:port]
  std::string api_key_env;   // name of the env var holding the key
  int timeout_seconds = 120;

  std::string api_key(bool required) const {
    auto v = env_var(api_key_env);
    if (!v && required)
      throw Error(ErrorKind::validation,
                  "environment variable " + api_key_env + " is not set (required for this provider)");
    return v.value_or("");
  }
};

// Chat-completions wire format: POST /v1/chat/completions with bearer auth.
class OpenAiChatProvider : public Provider {
 public:
  explicit OpenAiChatProvider(HttpProviderConfig config) : config_(std::move(config)) {}

  ModelResponse invoke(const ModelRequest& request) override {
    nlohmann::json body;
    body["model"] = request.model.model_name;
    body["temperature"] = request.model.decoding.temperature;
    body["max_tokens"] = request.model.decoding.max_output_tokens;
    nlohmann::json messages = nlohmann::json::array();
    if (request.system_text)
      messages.push_back({{"role", "system"}, {"content", *request.system_text}});
    nlohmann::json content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", request.user_text}});
    for (const auto& a : request.attachments) {
      std::string url = "data:" + a.media_type + ";base64," + detail::base64_encode(a.bytes);
      content.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
    }
    messages.push_back({{"role", "user"}, {"content", content}});
    body["messages"] = messages;

    httplib::Client cli(config_.base_url);
    cli.set_connection_timeout(config_.timeout_seconds);
    cli.set_read_timeout(config_.timeout_seconds);
    httplib::Headers headers{{"Authorization", "Bearer " + config_.api_key(/*required=*/true)}};
    auto res = cli.Post("/v1/chat/completions", headers, body.dump(), "application/json");
    if (!res)
      throw ProviderError(ProviderErrorKind::timeout,
                          "request to " + config_.base_url + " failed: " + httplib::to_string(res.error()),
                          /*retryable=*/true);
    if (res->status != 200)
      detail::throw_http_error(res->status, res->body, res->get_header_value("Retry-After"),
                               config_.base_url + "/v1/chat/completions");
    return parse_response(res->body);
  }

  std::string name() const override { return "openai_chat:" + config_.base_url; }

 private:
  ModelResponse parse_response(const std::string& body) const {
    nlohmann::json j = nlohmann::json::parse(body, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.contains("choices") || !j["choices"].is_array() ||
        j["choices"].empty() || !j["choices"][0].contains("message"))
      throw ProviderError(ProviderErrorKind::malformed,
                          "unexpected chat-completions response shape: " + body.substr(0, 300),
                          /*retryable=*/false);
    ModelResponse resp;
    const auto& message = j["choices"][0]["message"];
    resp.text = message.value("content", std::string());
    if (j.contains("usage")) {
      resp.usage.input_tokens = j["usage"].value("prompt_tokens", int64_t{0});
      resp.usage.output_tokens = j["usage"].value("completion_tokens", int64_t{0});
    }
    return resp;
  }

  HttpProviderConfig config_;
};

// generateContent wire format: POST /v1beta/models/{model}:generateContent,
// key passed as a query parameter.
class GeminiProvider : public Provider {
 public:
  explicit GeminiProvider(HttpProviderConfig config) : config_(std::move(config)) {}

  ModelResponse invoke(const ModelRequest& request) override {
    nlohmann::json body;
    if (request.system_text)
      body["systemInstruction"] = {{"parts", {{{"text", *request.system_text}}}}};
    nlohmann::json parts = nlohmann::json::array();
    parts.push_back({{"text", request.user_text}});
    for (const auto& a : request.attachments)
      parts.push_back({{"inline_data",
                        {{"mime_type", a.media_type}, {"data", detail::base64_encode(a.bytes)}}}});
    body["contents"] = {{{"role", "user"}, {"parts", parts}}};
    body["generationConfig"] = {{"temperature", request.model.decoding.temperature},
                                {"maxOutputTokens", request.model.decoding.max_output_tokens}};

    std::string path = "/v1beta/models/" + request.model.model_name +
                       ":generateContent?key=" + config_.api_key(/*required=*/true);
    httplib::Client cli(config_.base_url);
    cli.set_connection_timeout(config_.timeout_seconds);
    cli.set_read_timeout(config_.timeout_seconds);
    auto res = cli.Post(path, body.dump(), "application/json");
    if (!res)
      throw ProviderError(ProviderErrorKind::timeout,
                          "request to " + config_.base_url + " failed: " + httplib::to_string(res.error()),
                          /*retryable=*/true);
    if (res->status != 200)
      detail::throw_http_error(res->status, res->body, res->get_header_value("Retry-After"),
                               config_.base_url + "/v1beta/models/" + request.model.model_name +
                                   ":generateContent");
    return parse_response(res->body);
  }

  std::string name() const override { return "gemini:" + config_.base_url; }

 private:
  ModelResponse parse_response(const std::string& body) const {
    nlohmann::json j = nlohmann::json::parse(body, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.contains("candidates") || !j["candidates"].is_array() ||
        j["candidates"].empty())
      throw ProviderError(ProviderErrorKind::malformed,
                          "unexpected generateContent response shape: " + body.substr(0, 300),
                          /*retryable=*/false);
    ModelResponse resp;
    const auto& candidate = j["candidates"][0];
    if (candidate.contains("content") && candidate["content"].contains("parts"))
      for (const auto& part : candidate["content"]["parts"])
        if (part.contains("text")) resp.text += part["text"].get<std::string>();
    if (j.contains("usageMetadata")) {
      resp.usage.input_tokens = j["usageMetadata"].value("promptTokenCount", int64_t{0});
      resp.usage.output_tokens = j["usageMetadata"].value("candidatesTokenCount", int64_t{0});
    }
    return resp;
  }

  HttpProviderConfig config_;
};

// ---------------------------------------------------------------------------
// Provider construction from the config file's "providers" section.
//
//   "providers": {
//     "openai":   { "type": "openai_chat", "base_url": "...", "api_key_env": "OPENAI_API_KEY" },
//     "gemini":   { "type": "gemini", ... },
//     "mock":     { "type": "mock", "script": "path/to/script.json" }
//   }
//
// Unlisted ids fall back to built-in defaults for "openai", "gemini", "mock".

inline std::shared_ptr<Provider> build_provider(const std::string& provider_id,
                                                const nlohmann::json& providers_config) {
  nlohmann::json entry;
  if (providers_config.contains(provider_id)) {
    entry = providers_config.at(provider_id);
  } else if (provider_id == "openai") {
    entry = {{"type", "openai_chat"}};
  } else if (provider_id == "gemini") {
    entry = {{"type", "gemini"}};
  } else if (provider_id == "mock") {
    entry = {{"type", "mock"}};
  } else {
    throw Error(ErrorKind::validation,
                "provider id \"" + provider_id + "\" is not configured and has no default");
  }

  std::string type = entry.value("type", std::string());
  if (type == "mock") {
    if (entry.contains("script"))
      return MockProvider::from_script_file(entry["script"].get<std::string>());
    return std::make_shared<MockProvider>();
  }
  HttpProviderConfig config;
  config.timeout_seconds = entry.value("timeout_seconds", 120);
  if (type == "openai_chat") {
    config.base_url = entry.value("base_url", std::string("https://api.openai.com"));
    config.api_key_env = entry.value("api_key_env", std::string("OPENAI_API_KEY"));
    return std::make_shared<OpenAiChatProvider>(std::move(config));
  }
  if (type == "gemini") {
    config.base_url = entry.value("base_url", std::string("https://generativelanguage.googleapis.com"));
    config.api_key_env = entry.value("api_key_env", std::string("GEMINI_API_KEY"));
    return std::make_shared<GeminiProvider>(std::move(config));
  }
  throw Error(ErrorKind::validation,
              "provider \"" + provider_id + "\" has unknown type \"" + type + "\"");
}

}  // namespace upstreamqa
