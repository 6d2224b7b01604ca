#pragma once

#include "visaff/rng.hpp"

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

namespace visaff::testing {

// Conforming /embed test double. Deterministic: the embedding is a pure
// function of the prompt text, so repeated extractions agree byte-for-byte.
class MockEmbedServer {
public:
    struct Options {
        std::uint32_t dim = 8;
        int fail_first_n = 0;       // respond 503 to the first n requests
        int wrong_dim_requests = 0; // respond with dim-1 vectors to the first n
        std::string model_name = "mock-embed";
    };

    MockEmbedServer() : MockEmbedServer(Options{}) {}

    explicit MockEmbedServer(Options options) : options_(options) {
        server_.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
            const int n = request_count_.fetch_add(1) + 1;
            if (n <= options_.fail_first_n) {
                res.status = 503;
                res.set_content("temporarily unavailable", "text/plain");
                return;
            }
            nlohmann::json body = nlohmann::json::parse(req.body);
            const std::string prompt = body.at("prompt").get<std::string>();
            const std::uint32_t dim =
                (n - options_.fail_first_n) <= options_.wrong_dim_requests ? options_.dim - 1
                                                                           : options_.dim;
            auto rng = std::mt19937_64(fnv1a64(prompt));
            std::vector<double> embedding(dim);
            for (double& v : embedding) v = uniform_in(rng, -1.0, 1.0);
            nlohmann::json reply;
            reply["embedding"] = embedding;
            reply["dim"] = dim;
            reply["model"] = options_.model_name;
            res.set_content(reply.dump(), "application/json");
        });
    }

    ~MockEmbedServer() { stop(); }

    void start() {
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this]() { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    void start_on(int port) {
        if (!server_.bind_to_port("127.0.0.1", port)) {
            throw std::runtime_error("cannot bind port " + std::to_string(port));
        }
        port_ = port;
        thread_ = std::thread([this]() { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    void stop() {
        if (thread_.joinable()) {
            server_.stop();
            thread_.join();
        }
    }

    int port() const { return port_; }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
    int request_count() const { return request_count_.load(); }

private:
    Options options_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::atomic<int> request_count_{0};
};

} // namespace visaff::testing
