#pragma once

// HTTP plumbing shared by the chat-completion transport and the external
// scoring client.

#include <cstdlib>
#include <string>
#include <string_view>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "nlecal/error.hpp"
#include "nlecal/llm.hpp"

namespace nlecal {

// Bearer token for the LLM endpoint and scoring service, when set.
inline constexpr const char* kApiKeyEnv = "NLECAL_API_KEY";

struct Url {
    std::string scheme_host_port;  // e.g. "http://127.0.0.1:8000"
    std::string path;              // e.g. "/v1/chat/completions"
};

inline Url parse_url(std::string_view url) {
    auto sep = url.find("://");
    if (sep == std::string_view::npos) throw ConfigError("endpoint URL needs a scheme: " + std::string(url));
    std::string_view scheme = url.substr(0, sep);
    if (scheme != "http") throw ConfigError("only http endpoints are supported (got " + std::string(scheme) + ")");
    auto slash = url.find('/', sep + 3);
    Url out;
    out.scheme_host_port = std::string(url.substr(0, slash));
    out.path = slash == std::string_view::npos ? "/" : std::string(url.substr(slash));
    if (out.scheme_host_port.size() <= sep + 3) throw ConfigError("endpoint URL has no host: " + std::string(url));
    return out;
}

inline nlohmann::json post_json(const std::string& endpoint, const nlohmann::json& body, double timeout_s) {
    Url url = parse_url(endpoint);
    httplib::Client cli(url.scheme_host_port);
    auto secs = static_cast<time_t>(timeout_s);
    auto usecs = static_cast<time_t>((timeout_s - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (const char* key = std::getenv(kApiKeyEnv); key && *key) headers.emplace("Authorization", std::string("Bearer ") + key);
    auto res = cli.Post(url.path, headers, body.dump(), "application/json");
    if (!res) throw TransportError("request to " + endpoint + " failed: " + httplib::to_string(res.error()));
    if (res->status < 200 || res->status >= 300) throw EndpointError("endpoint " + endpoint + " returned an error", res->status);
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
        throw ProtocolError("endpoint " + endpoint + " returned invalid JSON: " + e.what());
    }
}

// OpenAI-compatible chat completion:
//   {model, messages, temperature, max_tokens, n} -> {choices[].message.content}
class HttpChatTransport : public Transport {
public:
    explicit HttpChatTransport(std::string endpoint) : endpoint_(std::move(endpoint)) { parse_url(endpoint_); }

    static nlohmann::json request_body(const ChatRequest& req) {
        return {{"model", req.model},
                {"messages", nlohmann::json::array({{{"role", "user"}, {"content", req.prompt}}})},
                {"temperature", req.temperature},
                {"max_tokens", req.max_tokens},
                {"n", 1}};
    }

    std::string complete(const ChatRequest& req) override {
        auto reply = post_json(endpoint_, request_body(req), req.timeout);
        try {
            return reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ProtocolError("chat completion reply lacks choices[0].message.content: " + std::string(e.what()));
        }
    }

private:
    std::string endpoint_;
};

}  // namespace nlecal
