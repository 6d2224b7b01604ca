#include "visaff/errors.hpp"
#include "visaff/providers.hpp"
#include "visaff/util.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <thread>

using nlohmann::json;

namespace visaff::providers {

EmbedResult post_embed(const EndpointConfig& endpoint, const EmbedRequest& request) {
    if (endpoint.base_url.empty()) throw ValidationError("embedding endpoint not configured");

    json body;
    body["frames"] = request.frames_b64;
    body["reference"] = request.reference_b64;
    body["prompt"] = request.prompt;
    const std::string payload = body.dump();

    httplib::Client client(endpoint.base_url);
    client.set_connection_timeout(0, endpoint.timeout_ms * 1000);
    client.set_read_timeout(endpoint.timeout_ms / 1000, (endpoint.timeout_ms % 1000) * 1000);

    std::string last_error;
    const int attempts_allowed = endpoint.max_retries + 1;
    for (int attempt = 0; attempt < attempts_allowed; ++attempt) {
        if (attempt > 0) {
            const int delay = endpoint.initial_backoff_ms * (1 << (attempt - 1));
            std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        }
        auto res = client.Post("/embed", payload, "application/json");
        if (!res) {
            last_error = "connection failure: " + httplib::to_string(res.error());
            continue; // transient
        }
        if (res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
            continue; // transient
        }
        if (res->status < 200 || res->status >= 300) {
            throw RemoteError("embedding service returned HTTP " + std::to_string(res->status) +
                              ": " + res->body);
        }
        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const json::exception& e) {
            throw RemoteError(std::string("embedding service returned invalid JSON: ") + e.what());
        }
        EmbedResult result;
        result.attempts = static_cast<std::size_t>(attempt + 1);
        try {
            result.dim = reply.at("dim").get<std::uint32_t>();
            result.model = reply.value("model", "");
            for (const auto& v : reply.at("embedding")) {
                result.embedding.push_back(v.get<float>());
            }
        } catch (const json::exception& e) {
            throw RemoteError(std::string("embedding response missing fields: ") + e.what());
        }
        if (result.embedding.size() != result.dim) {
            throw RemoteError("embedding length " + std::to_string(result.embedding.size()) +
                              " does not match declared dim " + std::to_string(result.dim));
        }
        for (float v : result.embedding) {
            if (!std::isfinite(v)) throw RemoteError("embedding contains a non-finite value");
        }
        return result;
    }
    throw RemoteError("embedding request failed after " + std::to_string(attempts_allowed) +
                      " attempts; last error: " + last_error);
}

FeatureRecord extract_remote(const prompting::PromptBundle& bundle,
                             const std::vector<std::vector<std::uint8_t>>& frames,
                             const std::vector<std::uint8_t>& reference,
                             const EndpointConfig& endpoint) {
    if (frames.empty()) throw ValidationError("extract_remote: no frames provided");

    EmbedRequest request;
    for (const auto& f : frames) request.frames_b64.push_back(base64_encode(f));
    request.reference_b64 = base64_encode(reference);
    request.prompt = bundle.composed;

    EmbedResult result = post_embed(endpoint, request);

    FeatureRecord rec;
    rec.key = {bundle.conv_id, bundle.index};
    rec.modality = Modality::visual;
    rec.provider = Provider::remote;
    rec.values = std::move(result.embedding);
    return rec;
}

} // namespace visaff::providers
