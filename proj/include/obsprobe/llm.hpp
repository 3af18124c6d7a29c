#pragma once

#include <chrono>
#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "obsprobe/util.hpp"

namespace obsprobe::llm {

struct ChatMessage {
    std::string role;
    std::string content;
};

/// A fully assembled request; cache_key is a SHA-256 digest of
/// (system_prompt, user_prompt, model_id) with length framing, so it is
/// deterministic in exactly those three inputs.
struct GenerationRequest {
    std::string system_prompt;  // empty means "no system message"
    std::string user_prompt;
    std::string model_id;

    std::string cache_key() const;
    std::vector<ChatMessage> messages() const;
};

struct ClientError : RuntimeError {
    ClientError(const std::string& what, std::string request_id_)
        : RuntimeError(what), request_id(std::move(request_id_)) {}
    std::string request_id;
};

/// Chat-completion client interface. complete() returns the assistant text.
class Client {
public:
    virtual ~Client() = default;
    virtual std::string complete(const GenerationRequest& req) = 0;
    virtual std::string name() const = 0;
};

struct HttpClientConfig {
    std::string base_url;             // e.g. "https://api.openai.com"
    std::string api_key_env = "OBSERVER_PROBE_API_KEY";
    std::string path = "/v1/chat/completions";
    int max_retries = 3;
    std::chrono::milliseconds retry_backoff{500};
    std::chrono::seconds timeout{120};
};

/// OpenAI-style chat-completions HTTP client. The API key is read from the
/// configured environment variable at call time.
class HttpClient : public Client {
public:
    explicit HttpClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {}
    std::string complete(const GenerationRequest& req) override;
    std::string name() const override { return "http:" + cfg_.base_url; }

private:
    HttpClientConfig cfg_;
};

/// Deterministic in-process client for tests and offline runs.
class MockClient : public Client {
public:
    using Fn = std::function<std::string(const GenerationRequest&)>;
    explicit MockClient(Fn fn, std::string name = "mock")
        : fn_(std::move(fn)), name_(std::move(name)) {}
    std::string complete(const GenerationRequest& req) override {
        ++calls_;
        return fn_(req);
    }
    std::string name() const override { return name_; }
    int calls() const { return calls_; }

private:
    Fn fn_;
    std::string name_;
    int calls_ = 0;
};

/// Blocking token bucket; tokens refill at `per_second`, burst up to
/// `capacity`.
class RateLimiter {
public:
    RateLimiter(double per_second, double capacity);
    void acquire();

private:
    double per_second_;
    double capacity_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
    std::mutex mu_;
};

/// File cache in front of a Client: one file per cache key, first writer
/// wins, at most one underlying call per key per cache directory (in-flight
/// keys are claimed with a .lock file so concurrent writers wait).
class CachedClient {
public:
    CachedClient(std::shared_ptr<Client> inner, fs::path cache_dir,
                 std::shared_ptr<RateLimiter> limiter = nullptr);

    /// Returns the cached response, or calls through and caches.
    std::string complete(const GenerationRequest& req);

    bool cached(const GenerationRequest& req) const;
    Client& inner() { return *inner_; }
    const fs::path& cache_dir() const { return cache_dir_; }

    /// Model id stamped onto requests built on the caller's behalf.
    const std::string& default_model_id() const { return default_model_id_; }
    void set_default_model_id(std::string id) { default_model_id_ = std::move(id); }

private:
    std::shared_ptr<Client> inner_;
    fs::path cache_dir_;
    std::string default_model_id_;
    std::shared_ptr<RateLimiter> limiter_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::set<std::string> in_flight_;
};

/// Runs `job(i)` for i in [0, n) on up to `parallelism` threads. Exceptions
/// are collected; the first one is rethrown after all workers finish.
void parallel_for(size_t n, int parallelism, const std::function<void(size_t)>& job);

}  // namespace obsprobe::llm
