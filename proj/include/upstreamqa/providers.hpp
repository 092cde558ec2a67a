#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "upstreamqa/hash.hpp"
#include "upstreamqa/media.hpp"
#include "upstreamqa/util.hpp"

namespace upstreamqa {

enum class ModelRole { lmm, lrm, judge };

inline std::string to_string(ModelRole r) {
  switch (r) {
    case ModelRole::lmm: return "lmm";
    case ModelRole::lrm: return "lrm";
    case ModelRole::judge: return "judge";
  }
  return "?";
}

inline ModelRole model_role_from_string(const std::string& s) {
  std::string v = to_lower(trim(s));
  if (v == "lmm") return ModelRole::lmm;
  if (v == "lrm") return ModelRole::lrm;
  if (v == "judge") return ModelRole::judge;
  throw Error(ErrorKind::validation, "unknown model role: " + s);
}

struct Decoding {
  double temperature = 0.0;
  int64_t max_output_tokens = 1024;
};

struct ModelSpec {
  std::string provider_id;
  std::string model_name;
  ModelRole role = ModelRole::lmm;
  Decoding decoding;

  void check() const {
    if (decoding.temperature < 0)
      throw Error(ErrorKind::validation, "temperature must be >= 0 for model " + model_name);
    if (decoding.max_output_tokens < 1)
      throw Error(ErrorKind::validation, "max_output_tokens must be >= 1 for model " + model_name);
  }
};

struct ModelRequest {
  ModelSpec model;
  std::optional<std::string> system_text;
  std::string user_text;
  std::vector<MediaPayload> attachments;
  std::string request_hash;
};

struct Usage {
  int64_t input_tokens = 0;
  int64_t output_tokens = 0;
};

struct ModelResponse {
  std::string text;
  Usage usage;
  int64_t latency_ms = 0;
  bool from_cache = false;
  int attempts = 1;
};

// Pure function of (model_name, decoding, texts, attachment bytes in order):
// the cache / cassette key.
inline std::string canonical_request_hash(const ModelSpec& model,
                                          const std::optional<std::string>& system_text,
                                          const std::string& user_text,
                                          const std::vector<MediaPayload>& attachments) {
  CanonicalHasher h("uqa.request.v1");
  h.field(model.model_name);
  h.field_double(model.decoding.temperature);
  h.field_i64(model.decoding.max_output_tokens);
  h.field(system_text ? "1" : "0");
  if (system_text) h.field(*system_text);
  h.field(user_text);
  h.field_u64(attachments.size());
  for (const auto& a : attachments) {
    h.field(a.media_type);
    h.field(a.bytes.data(), a.bytes.size());
  }
  return h.hex();
}

inline ModelRequest make_request(ModelSpec model, std::optional<std::string> system_text,
                                 std::string user_text, std::vector<MediaPayload> attachments = {}) {
  model.check();
  ModelRequest req;
  req.request_hash = canonical_request_hash(model, system_text, user_text, attachments);
  req.model = std::move(model);
  req.system_text = std::move(system_text);
  req.user_text = std::move(user_text);
  req.attachments = std::move(attachments);
  return req;
}

// ---------------------------------------------------------------------------
// Provider errors

enum class ProviderErrorKind { auth, rate_limit, timeout, malformed, http, replay_miss, scripted };

inline std::string to_string(ProviderErrorKind k) {
  switch (k) {
    case ProviderErrorKind::auth: return "auth";
    case ProviderErrorKind::rate_limit: return "rate_limit";
    case ProviderErrorKind::timeout: return "timeout";
    case ProviderErrorKind::malformed: return "malformed";
    case ProviderErrorKind::http: return "http";
    case ProviderErrorKind::replay_miss: return "replay_miss";
    case ProviderErrorKind::scripted: return "scripted";
  }
  return "?";
}

class ProviderError : public Error {
 public:
  ProviderError(ProviderErrorKind kind, const std::string& msg, bool retryable,
                std::optional<int64_t> retry_after_ms = std::nullopt)
      : Error(ErrorKind::provider, "[" + upstreamqa::to_string(kind) + "] " + msg),
        provider_kind_(kind),
        retryable_(retryable),
        retry_after_ms_(retry_after_ms) {}

  ProviderErrorKind provider_kind() const { return provider_kind_; }
  bool retryable() const { return retryable_; }
  std::optional<int64_t> retry_after_ms() const { return retry_after_ms_; }

 private:
  ProviderErrorKind provider_kind_;
  bool retryable_;
  std::optional<int64_t> retry_after_ms_;
};

// One model endpoint. invoke() either returns the endpoint's text or throws
// ProviderError; retries and caching live in Client, not here.
class Provider {
 public:
  virtual ~Provider() = default;
  virtual ModelResponse invoke(const ModelRequest& request) = 0;
  virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Retry policy

struct RetryPolicy {
  int max_attempts = 6;
  int64_t base_delay_ms = 1000;
  int64_t max_delay_ms = 60000;
  uint64_t jitter_seed = 0x5eedf00d;
  // Test seam; defaults to a real sleep.
  std::function<void(int64_t)> sleeper =
      [](int64_t ms) { std::this_thread::sleep_for(std::chrono::milliseconds(ms)); };
};

// ---------------------------------------------------------------------------
// Content-addressed response cache: cache/responses/<hh>/<hash>

class ResponseCache {
 public:
  explicit ResponseCache(std::filesystem::path cache_dir) : dir_(std::move(cache_dir)) {}

  std::optional<ModelResponse> lookup(const std::string& hash) const {
    auto p = path_for(hash);
    if (!std::filesystem::is_regular_file(p)) return std::nullopt;
    nlohmann::json j = nlohmann::json::parse(read_text_file(p));
    ModelResponse resp;
    resp.text = j.at("text").get<std::string>();
    resp.usage.input_tokens = j.value("input_tokens", int64_t{0});
    resp.usage.output_tokens = j.value("output_tokens", int64_t{0});
    resp.from_cache = true;
    return resp;
  }

  void store(const std::string& hash, const ModelResponse& resp) const {
    nlohmann::json j;
    j["text"] = resp.text;
    j["input_tokens"] = resp.usage.input_tokens;
    j["output_tokens"] = resp.usage.output_tokens;
    write_file_atomic(path_for(hash), j.dump(2) + "\n");
  }

 private:
  std::filesystem::path path_for(const std::string& hash) const {
    return dir_ / "responses" / hash.substr(0, 2) / hash;
  }
  std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// Record/replay cassette: append-only JSONL of (request_hash, summary, response)

class CassetteRecorder {
 public:
  explicit CassetteRecorder(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) ensure_dir(path_.parent_path());
    // Resuming a recording keeps earlier entries and skips duplicates.
    if (std::filesystem::is_regular_file(path_)) {
      for (const auto& line : split(read_text_file(path_), '\n')) {
        if (trim(line).empty()) continue;
        seen_.insert(nlohmann::json::parse(line).at("request_hash").get<std::string>());
      }
    }
    out_.open(path_, std::ios::app | std::ios::binary);
    if (!out_) throw Error(ErrorKind::missing_input, "cannot open cassette for append: " + path_.string());
  }

  void record(const ModelRequest& request, const ModelResponse& response) {
    std::lock_guard<std::mutex> lock(mu_);
    if (!seen_.insert(request.request_hash).second) return;
    nlohmann::json j;
    j["request_hash"] = request.request_hash;
    j["summary"] = {{"model", request.model.model_name},
                    {"provider", request.model.provider_id},
                    {"user_text_prefix", request.user_text.substr(0, 120)},
                    {"attachments", request.attachments.size()}};
    j["response"] = {{"text", response.text},
                     {"input_tokens", response.usage.input_tokens},
                     {"output_tokens", response.usage.output_tokens}};
    out_ << j.dump() << "\n";
    out_.flush();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::set<std::string> seen_;
  std::mutex mu_;
};

// Serves recorded responses by request hash. A miss fails the run loudly;
// it never falls through to a live endpoint.
class ReplayProvider : public Provider {
 public:
  explicit ReplayProvider(const std::filesystem::path& cassette_path)
      : cassette_path_(cassette_path) {
    if (!std::filesystem::is_regular_file(cassette_path))
      throw Error(ErrorKind::missing_input, "cassette not found: " + cassette_path.string());
    for (const auto& line : split(read_text_file(cassette_path), '\n')) {
      if (trim(line).empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      ModelResponse resp;
      resp.text = j.at("response").at("text").get<std::string>();
      resp.usage.input_tokens = j["response"].value("input_tokens", int64_t{0});
      resp.usage.output_tokens = j["response"].value("output_tokens", int64_t{0});
      responses_[j.at("request_hash").get<std::string>()] = std::move(resp);
    }
  }

  ModelResponse invoke(const ModelRequest& request) override {
    auto it = responses_.find(request.request_hash);
    if (it == responses_.end())
      throw ProviderError(ProviderErrorKind::replay_miss,
                          "replay miss: request_hash " + request.request_hash +
                              " not present in cassette " + cassette_path_.string() +
                              " (model " + request.model.model_name + ")",
                          /*retryable=*/false);
    return it->second;
  }

  std::string name() const override { return "replay:" + cassette_path_.string(); }

  size_t size() const { return responses_.size(); }

 private:
  std::filesystem::path cassette_path_;
  std::map<std::string, ModelResponse> responses_;
};

// ---------------------------------------------------------------------------
// Scripted mock provider

// Deterministic in-process endpoint for tests and offline demos. Responses
// come from an in-code responder function or from substring match rules;
// planned failures let tests drive the retry machinery.
class MockProvider : public Provider {
 public:
  using Responder = std::function<std::string(const ModelRequest&)>;
  using FailureHook =
      std::function<std::optional<ProviderError>(const ModelRequest&, int64_t call_index)>;

  struct Rule {
    std::optional<std::string> model_name;
    std::optional<std::string> contains;  // substring of user_text
    std::string response_text;
  };

  MockProvider() = default;
  explicit MockProvider(std::string default_text) : default_text_(std::move(default_text)) {}

  static std::shared_ptr<MockProvider> from_script_file(const std::filesystem::path& path) {
    auto mock = std::make_shared<MockProvider>();
    nlohmann::json j = nlohmann::json::parse(read_text_file(path), nullptr, true, true);
    mock->default_text_ = j.value("default", std::string("OK"));
    if (j.contains("rules")) {
      for (const auto& r : j["rules"]) {
        Rule rule;
        if (r.contains("model")) rule.model_name = r["model"].get<std::string>();
        if (r.contains("contains")) rule.contains = r["contains"].get<std::string>();
        rule.response_text = r.at("response").get<std::string>();
        mock->rules_.push_back(std::move(rule));
      }
    }
    return mock;
  }

  void set_responder(Responder fn) { responder_ = std::move(fn); }
  void set_failure_hook(FailureHook fn) { failure_hook_ = std::move(fn); }
  void set_delay_ms(int64_t ms) { delay_ms_ = ms; }
  void add_rule(Rule rule) { rules_.push_back(std::move(rule)); }

  ModelResponse invoke(const ModelRequest& request) override {
    int64_t call_index = total_calls_.fetch_add(1);
    {
      std::lock_guard<std::mutex> lock(mu_);
      ++calls_by_model_[request.model.model_name];
    }
    InFlightGuard guard(*this);
    if (delay_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));
    if (failure_hook_) {
      if (auto err = failure_hook_(request, call_index)) throw *err;
    }
    ModelResponse resp;
    resp.text = respond(request);
    resp.usage.input_tokens = static_cast<int64_t>(request.user_text.size() / 4 + 1);
    resp.usage.output_tokens = static_cast<int64_t>(resp.text.size() / 4 + 1);
    return resp;
  }

  std::string name() const override { return "mock"; }

  int64_t total_calls() const { return total_calls_.load(); }
  int64_t calls_for_model(const std::string& model) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = calls_by_model_.find(model);
    return it == calls_by_model_.end() ? 0 : it->second;
  }
  int64_t max_in_flight() const { return max_in_flight_.load(); }

 private:
  struct InFlightGuard {
    explicit InFlightGuard(MockProvider& m) : mock(m) {
      int64_t now = mock.in_flight_.fetch_add(1) + 1;
      int64_t prev = mock.max_in_flight_.load();
      while (now > prev && !mock.max_in_flight_.compare_exchange_weak(prev, now)) {
      }
    }
    ~InFlightGuard() { mock.in_flight_.fetch_sub(1); }
    MockProvider& mock;
  };

  std::string respond(const ModelRequest& request) const {
    if (responder_) return responder_(request);
    for (const auto& rule : rules_) {
      if (rule.model_name && *rule.model_name != request.model.model_name) continue;
      if (rule.contains && request.user_text.find(*rule.contains) == std::string::npos) continue;
      return rule.response_text;
    }
    return default_text_;
  }

  Responder responder_;
  FailureHook failure_hook_;
  std::vector<Rule> rules_;
  std::string default_text_ = "OK";
  int64_t delay_ms_ = 0;
  std::atomic<int64_t> total_calls_{0};
  std::atomic<int64_t> in_flight_{0};
  std::atomic<int64_t> max_in_flight_{0};
  mutable std::mutex mu_;
  std::map<std::string, int64_t> calls_by_model_;
};

// ---------------------------------------------------------------------------
// Client: cache + retry + bounded concurrency in front of one provider

namespace detail {

class Semaphore {
 public:
  explicit Semaphore(int count) : count_(count) {}
  void acquire() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return count_ > 0; });
    --count_;
  }
  void release() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      ++count_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  int count_;
};

}  // namespace detail

struct ClientOptions {
  std::optional<std::filesystem::path> cache_dir;  // nullopt disables caching
  int concurrency_limit = 4;
  RetryPolicy retry;
  std::shared_ptr<CassetteRecorder> recorder;  // optional record mode
};

class Client {
 public:
  Client(std::shared_ptr<Provider> provider, ClientOptions options)
      : provider_(std::move(provider)),
        options_(std::move(options)),
        semaphore_(std::max(1, options_.concurrency_limit)),
        jitter_rng_(options_.retry.jitter_seed) {
    if (options_.cache_dir) cache_.emplace(*options_.cache_dir);
  }

  ModelResponse complete(const ModelRequest& request) {
    if (cache_) {
      if (auto hit = cache_->lookup(request.request_hash)) {
        if (options_.recorder) options_.recorder->record(request, *hit);
        return *hit;
      }
    }

    auto started = std::chrono::steady_clock::now();
    semaphore_.acquire();
    struct Release {
      detail::Semaphore& s;
      ~Release() { s.release(); }
    } release{semaphore_};

    const auto& policy = options_.retry;
    int attempt = 0;
    for (;;) {
      ++attempt;
      try {
        ModelResponse resp = provider_->invoke(request);
        if (resp.text.empty())
          throw ProviderError(ProviderErrorKind::malformed,
                              "provider returned empty response text", /*retryable=*/false);
        live_calls_.fetch_add(1);
        resp.attempts = attempt;
        resp.from_cache = false;
        resp.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                              std::chrono::steady_clock::now() - started)
                              .count();
        if (cache_) cache_->store(request.request_hash, resp);
        if (options_.recorder) options_.recorder->record(request, resp);
        return resp;
      } catch (const ProviderError& e) {
        if (!e.retryable() || attempt >= policy.max_attempts) throw;
        int64_t delay = backoff_delay_ms(attempt);
        // Server hints win over the computed backoff.
        if (e.retry_after_ms()) delay = *e.retry_after_ms();
        if (policy.sleeper) policy.sleeper(delay);
      }
    }
  }

  int64_t live_calls() const { return live_calls_.load(); }
  Provider& provider() { return *provider_; }

 private:
  int64_t backoff_delay_ms(int attempt) {
    const auto& policy = options_.retry;
    int64_t base = policy.base_delay_ms;
    for (int i = 1; i < attempt && base < policy.max_delay_ms; ++i) base *= 2;
    base = std::min(base, policy.max_delay_ms);
    std::uniform_real_distribution<double> dist(0.5, 1.0);
    double jitter;
    {
      std::lock_guard<std::mutex> lock(rng_mu_);
      jitter = dist(jitter_rng_);
    }
    return static_cast<int64_t>(static_cast<double>(base) * jitter);
  }

  std::shared_ptr<Provider> provider_;
  ClientOptions options_;
  std::optional<ResponseCache> cache_;
  detail::Semaphore semaphore_;
  std::mt19937_64 jitter_rng_;
  std::mutex rng_mu_;
  std::atomic<int64_t> live_calls_{0};
};

// Routes requests to one Client per provider_id so per-provider concurrency
// limits hold across model roles sharing an endpoint.
class ProviderHub {
 public:
  using ClientFactory = std::function<std::shared_ptr<Client>(const std::string& provider_id)>;

  explicit ProviderHub(ClientFactory factory) : factory_(std::move(factory)) {}

  ModelResponse complete(const ModelRequest& request) {
    return client_for(request.model.provider_id)->complete(request);
  }

  std::shared_ptr<Client> client_for(const std::string& provider_id) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = clients_.find(provider_id);
    if (it != clients_.end()) return it->second;
    auto client = factory_(provider_id);
    if (!client)
      throw Error(ErrorKind::validation, "no provider configured for id \"" + provider_id + "\"");
    clients_[provider_id] = client;
    return client;
  }

  int64_t total_live_calls() {
    std::lock_guard<std::mutex> lock(mu_);
    int64_t total = 0;
    for (auto& [id, client] : clients_) total += client->live_calls();
    return total;
  }

 private:
  ClientFactory factory_;
  std::map<std::string, std::shared_ptr<Client>> clients_;
  std::mutex mu_;
};

}  // namespace upstreamqa
