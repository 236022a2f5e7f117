#pragma once

#include <map>
#include <string>

namespace convret::prompts {

// Request templates for the optional chat-completion provider. Placeholders
// use {{name}} and are filled by render().

inline constexpr const char* kGenerateResponse =
    "You are the response generator of a conversational search system.\n"
    "Conversation so far:\n{{context}}\n"
    "Current question: {{query}}\n"
    "Top retrieved passages:\n{{passages}}\n"
    "Write a short answer to the current question grounded in the passages. "
    "Reply with the answer text only.";

inline constexpr const char* kJudgeReasonable =
    "You are checking a conversational search trace.\n"
    "Conversation so far:\n{{context}}\n"
    "Next question: {{query}}\n"
    "Given only this conversation, is the next question still well posed and "
    "answerable (all references resolvable)? Reply with exactly YES or NO.";

inline constexpr const char* kGenerateContext =
    "Write a plausible short conversation between a user and an assistant "
    "that could precede this question: {{query}}\n"
    "A standalone phrasing of the question is: {{rewrite}}\n"
    "Use the form 'user: ...' and 'assistant: ...', one turn per line, at "
    "most {{max_turns}} turns, and do not include the question itself.";

inline std::string render(std::string tmpl, const std::map<std::string, std::string>& vars) {
  for (const auto& [key, value] : vars) {
    const std::string needle = "{{" + key + "}}";
    size_t pos = 0;
    while ((pos = tmpl.find(needle, pos)) != std::string::npos) {
      tmpl.replace(pos, needle.size(), value);
      pos += value.size();
    }
  }
  return tmpl;
}

}  // namespace convret::prompts
