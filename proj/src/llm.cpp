#include "obsprobe/llm.hpp"

#include <httplib.h>

#include <cstdlib>
#include <thread>

#include <json.hpp>

namespace obsprobe::llm {

using nlohmann::json;

std::string GenerationRequest::cache_key() const {
    std::string framed;
    auto frame = [&framed](std::string_view tag, const std::string& s) {
        framed += tag;
        framed += std::to_string(s.size());
        framed += ':';
        framed += s;
    };
    frame("s", system_prompt);
    frame("u", user_prompt);
    frame("m", model_id);
    return sha256_hex(framed);
}

std::vector<ChatMessage> GenerationRequest::messages() const {
    std::vector<ChatMessage> out;
    if (!system_prompt.empty()) out.push_back({"system", system_prompt});
    out.push_back({"user", user_prompt});
    return out;
}

std::string HttpClient::complete(const GenerationRequest& req) {
    const char* key = std::getenv(cfg_.api_key_env.c_str());
    if (!key || !*key) {
        throw ClientError("missing API key in environment variable " + cfg_.api_key_env,
                          req.cache_key());
    }
    json body;
    body["model"] = req.model_id;
    body["messages"] = json::array();
    for (const auto& m : req.messages()) {
        body["messages"].push_back({{"role", m.role}, {"content", m.content}});
    }
    const std::string payload = body.dump();

    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
        if (attempt > 0) std::this_thread::sleep_for(cfg_.retry_backoff * attempt);
        httplib::Client cli(cfg_.base_url);
        cli.set_read_timeout(cfg_.timeout);
        cli.set_connection_timeout(cfg_.timeout);
        httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
        auto res = cli.Post(cfg_.path, headers, payload, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw ClientError("HTTP " + std::to_string(res->status) + ": " + res->body,
                              req.cache_key());
        }
        try {
            json out = json::parse(res->body);
            return out.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const std::exception& e) {
            throw ClientError(std::string("malformed completion response: ") + e.what(),
                              req.cache_key());
        }
    }
    throw ClientError("request failed after " + std::to_string(cfg_.max_retries + 1) +
                          " attempts (" + last_error + ")",
                      req.cache_key());
}

RateLimiter::RateLimiter(double per_second, double capacity)
    : per_second_(per_second), capacity_(capacity), tokens_(capacity),
      last_(std::chrono::steady_clock::now()) {}

void RateLimiter::acquire() {
    std::unique_lock lock(mu_);
    for (;;) {
        auto now = std::chrono::steady_clock::now();
        tokens_ = std::min(capacity_,
                           tokens_ + per_second_ * std::chrono::duration<double>(now - last_).count());
        last_ = now;
        if (tokens_ >= 1.0) {
            tokens_ -= 1.0;
            return;
        }
        double wait_s = (1.0 - tokens_) / per_second_;
        lock.unlock();
        std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
        lock.lock();
    }
}

CachedClient::CachedClient(std::shared_ptr<Client> inner, fs::path cache_dir,
                           std::shared_ptr<RateLimiter> limiter)
    : inner_(std::move(inner)), cache_dir_(std::move(cache_dir)), limiter_(std::move(limiter)) {
    fs::create_directories(cache_dir_);
}

bool CachedClient::cached(const GenerationRequest& req) const {
    return fs::exists(cache_dir_ / (req.cache_key() + ".txt"));
}

std::string CachedClient::complete(const GenerationRequest& req) {
    const std::string key = req.cache_key();
    const fs::path file = cache_dir_ / (key + ".txt");

    {
        std::unique_lock lock(mu_);
        while (in_flight_.count(key)) cv_.wait(lock);
        if (fs::exists(file)) return read_text_file(file);
        in_flight_.insert(key);
    }

    // Cross-process claim: an exclusive .lock file. If someone else holds it,
    // wait for their result instead of issuing a duplicate call.
    const fs::path lock_file = cache_dir_ / (key + ".lock");
    bool own_lock = false;
    {
        std::FILE* f = std::fopen(lock_file.c_str(), "wx");
        if (f) {
            std::fclose(f);
            own_lock = true;
        }
    }

    std::string result;
    try {
        if (!own_lock) {
            for (int i = 0; i < 600 && !fs::exists(file); ++i) {
                std::this_thread::sleep_for(std::chrono::milliseconds(100));
            }
            if (!fs::exists(file)) {
                throw ClientError("timed out waiting for concurrent writer of key " + key, key);
            }
            result = read_text_file(file);
        } else {
            if (limiter_) limiter_->acquire();
            result = inner_->complete(req);
            write_text_file_atomic(file, result);
            fs::remove(lock_file);
        }
    } catch (...) {
        if (own_lock) fs::remove(lock_file);
        std::lock_guard lock(mu_);
        in_flight_.erase(key);
        cv_.notify_all();
        throw;
    }

    {
        std::lock_guard lock(mu_);
        in_flight_.erase(key);
        cv_.notify_all();
    }
    return result;
}

void parallel_for(size_t n, int parallelism, const std::function<void(size_t)>& job) {
    if (parallelism < 1) parallelism = 1;
    if (n == 0) return;
    std::mutex mu;
    size_t next = 0;
    std::exception_ptr first_error;
    auto worker = [&]() {
        for (;;) {
            size_t i;
            {
                std::lock_guard lock(mu);
                if (next >= n || first_error) return;
                i = next++;
            }
            try {
                job(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    int nt = static_cast<int>(std::min<size_t>(n, static_cast<size_t>(parallelism)));
    threads.reserve(static_cast<size_t>(nt));
    for (int t = 0; t < nt; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace obsprobe::llm
