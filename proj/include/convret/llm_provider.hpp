#pragma once

#include <cstdlib>
#include <optional>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "convret/prompts.hpp"
#include "convret/robustness.hpp"

namespace convret {

// Optional chat-completion provider. When unset (empty endpoint) the
// deterministic generators run instead; when set but unreachable, callers
// fall back deterministically and flag the report.
struct LlmProviderConfig {
  std::string endpoint;  // e.g. "http://localhost:8089"
  std::string model = "gpt-3.5-turbo";
  std::string auth_env = "CONVRET_LLM_TOKEN";
  std::string path = "/v1/chat/completions";
  int timeout_s = 30;
  int max_retries = 2;

  bool configured() const { return !endpoint.empty(); }
};

inline std::optional<std::string> llm_chat(const LlmProviderConfig& cfg,
                                           const std::string& prompt) {
  if (!cfg.configured()) return std::nullopt;
  httplib::Client client(cfg.endpoint);
  client.set_connection_timeout(cfg.timeout_s, 0);
  client.set_read_timeout(cfg.timeout_s, 0);
  if (const char* token = std::getenv(cfg.auth_env.c_str())) {
    client.set_default_headers({{"Authorization", std::string("Bearer ") + token}});
  }
  const nlohmann::json body{{"model", cfg.model},
                            {"messages", {{{"role", "user"}, {"content", prompt}}}}};
  const std::string payload = body.dump();
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    auto res = client.Post(cfg.path, payload, "application/json");
    if (!res || res->status != 200) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
      continue;
    }
  }
  return std::nullopt;
}

namespace detail {

inline std::string render_context(const std::vector<Turn>& turns) {
  std::string out;
  for (const Turn& t : turns) {
    out += std::string(role_name(t.role)) + ": " + t.text + "\n";
  }
  return out;
}

}  // namespace detail

// Provider-backed response generation; deterministic fallback on any
// failure, recorded through `used_fallback`.
inline ResponderFn make_provider_responder(const LlmProviderConfig& cfg, bool* used_fallback) {
  return [cfg, used_fallback](const ResponderInput& in) -> std::string {
    std::string passages;
    for (const Passage& p : in.top_passages) passages += "- " + p.text + "\n";
    std::vector<Turn> context;
    if (in.conversation) {
      for (size_t j = 0; j < in.turn_index; ++j) {
        context.push_back({in.conversation->turns[j].role, in.conversation->turns[j].text});
      }
    }
    const std::string prompt = prompts::render(
        prompts::kGenerateResponse,
        {{"context", detail::render_context(context)},
         {"query", context.empty() ? std::string() : context.back().text},
         {"passages", passages}});
    if (auto reply = llm_chat(cfg, prompt)) return normalize_whitespace(*reply);
    if (used_fallback) *used_fallback = true;
    return synthesize_response(in.top_passages);
  };
}

inline JudgeFn make_provider_judge(const LlmProviderConfig& cfg, bool* used_fallback) {
  return [cfg, used_fallback](const std::string& query, const std::vector<Turn>& ctx,
                              const std::string& original_response,
                              const std::string& rewrite) -> JudgeVerdict {
    const std::string prompt =
        prompts::render(prompts::kJudgeReasonable,
                        {{"context", detail::render_context(ctx)}, {"query", query}});
    if (auto reply = llm_chat(cfg, prompt)) {
      const std::string verdict = to_lower(normalize_whitespace(*reply));
      if (verdict.rfind("yes", 0) == 0) return {true, std::nullopt};
      if (verdict.rfind("no", 0) == 0) return {false, rewrite};
    }
    if (used_fallback) *used_fallback = true;
    return judge_query_reasonable(query, ctx, original_response, rewrite);
  };
}

}  // namespace convret
