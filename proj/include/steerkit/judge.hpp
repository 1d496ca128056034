#pragma once

// Feature verification: decides whether an SAE feature belongs to a taxonomy.

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "steerkit/concept_data.hpp"
#include "steerkit/sae_engine.hpp"

namespace steerkit {

class FeatureJudge {
public:
    virtual ~FeatureJudge() = default;
    virtual bool accepts(const FeatureCandidate& candidate, const ConceptSet& concept_set) = 0;
};

class AcceptAllJudge final : public FeatureJudge {
public:
    bool accepts(const FeatureCandidate&, const ConceptSet&) override { return true; }
};

class RejectAllJudge final : public FeatureJudge {
public:
    bool accepts(const FeatureCandidate&, const ConceptSet&) override { return false; }
};

// Offline judge: accepts when a taxonomy keyword begins a word of the explanation
// or of a top token. Keywords come from the concept file, else a built-in list.
class RuleBasedJudge final : public FeatureJudge {
public:
    bool accepts(const FeatureCandidate& candidate, const ConceptSet& concept_set) override;

    static const std::vector<std::string>& default_keywords(Taxonomy taxonomy);
};

// One aligned feature shown to the external judge as a few-shot example.
struct JudgeExample {
    std::string explanation;
    std::string activations;  // key tokens wrapped in <top>...</top>
};

std::string render_verification_prompt(const FeatureCandidate& candidate, const ConceptSet& concept_set,
                                       const std::vector<JudgeExample>& examples);

// Reads the leading YES/NO of a judge reply (case-insensitive, leading whitespace and
// markdown emphasis ignored). nullopt when neither leads the reply.
std::optional<bool> parse_verdict(std::string_view reply);

// Sends a prompt to a chat model and returns the reply text. Throws on transport failure.
using CompletionFn = std::function<std::string(const std::string& prompt)>;

class LlmJudge final : public FeatureJudge {
public:
    explicit LlmJudge(CompletionFn complete, std::vector<JudgeExample> examples = {})
        : complete_(std::move(complete)), examples_(std::move(examples)) {}

    bool accepts(const FeatureCandidate& candidate, const ConceptSet& concept_set) override;

private:
    CompletionFn complete_;
    std::vector<JudgeExample> examples_;
};

// Chat-completions client. url is the full endpoint, e.g. https://host/v1/chat/completions.
struct HttpChatCompletion {
    std::string url;
    std::string api_key;
    std::string model = "o3-mini";
    std::chrono::seconds timeout{60};

    // Reads STEERKIT_JUDGE_URL and STEERKIT_JUDGE_KEY; throws ConfigError if the URL is unset.
    static HttpChatCompletion from_env();

    std::string operator()(const std::string& prompt) const;
};

}  // namespace steerkit
