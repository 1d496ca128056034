#include "steerkit/judge.hpp"

#include <cctype>
#include <cstdlib>
#include <sstream>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>

#include "steerkit/errors.hpp"
#include "steerkit/text_util.hpp"

namespace steerkit {

namespace {

bool keyword_starts_word(const std::string& haystack, const std::string& keyword) {
    for (auto pos = haystack.find(keyword); pos != std::string::npos; pos = haystack.find(keyword, pos + 1)) {
        if (pos == 0 || !std::isalnum(static_cast<unsigned char>(haystack[pos - 1]))) return true;
    }
    return false;
}

std::string taxonomy_label(Taxonomy t) {
    std::string s(to_string(t));
    for (auto& c : s) {
        if (c == '_') c = ' ';
    }
    return s;
}

}  // namespace

const std::vector<std::string>& RuleBasedJudge::default_keywords(Taxonomy taxonomy) {
    static const std::vector<std::string> spatial{"spatial", "position", "location", "locat", "preposition", "left",
                                                  "right", "above", "below", "behind", "in front", "under", "relative",
                                                  "direction", "beside", "near"};
    static const std::vector<std::string> counting{"number", "numeral", "count", "quantit", "how many", "amount",
                                                   "digit", "cardinal"};
    static const std::vector<std::string> attribute{"color", "colour", "size", "shape", "adjective", "attribute",
                                                    "texture", "material", "descriptive", "appearance"};
    static const std::vector<std::string> entity{"object", "entity", "entities", "noun", "animal", "thing", "person",
                                                 "people", "concrete"};
    switch (taxonomy) {
        case Taxonomy::spatial_relationship: return spatial;
        case Taxonomy::counting: return counting;
        case Taxonomy::attribute: return attribute;
        case Taxonomy::entity: return entity;
    }
    return counting;
}

bool RuleBasedJudge::accepts(const FeatureCandidate& candidate, const ConceptSet& concept_set) {
    const auto& keywords = concept_set.keywords.empty() ? default_keywords(concept_set.taxonomy) : concept_set.keywords;
    std::string haystack = text::to_lower(candidate.explanation);
    for (const auto& tok : candidate.top_tokens) haystack += " " + text::to_lower(tok);
    for (const auto& kw : keywords) {
        if (keyword_starts_word(haystack, kw)) return true;
    }
    return false;
}

std::string render_verification_prompt(const FeatureCandidate& candidate, const ConceptSet& concept_set,
                                       const std::vector<JudgeExample>& examples) {
    const auto taxonomy = taxonomy_label(concept_set.taxonomy);
    std::ostringstream p;
    p << "Task: Determine if a neural network's sparse autoencoder (SAE) feature aligns with the taxonomy \""
      << taxonomy << "\".\n\n";
    p << "Taxonomy Definition: " << concept_set.definition << "\n\n";
    p << "Feature Information:\n";
    p << "1. Feature's explanation: " << candidate.explanation << "\n";
    p << "2. Top activation examples (tokens wrapped in <top>...</top> have the highest activation values and are "
         "the most important to focus on):\n";
    const std::size_t n_examples = std::min<std::size_t>(5, candidate.top_tokens.size());
    for (std::size_t i = 0; i < n_examples; ++i) {
        p << "    " << (i + 1) << ". <top>" << candidate.top_tokens[i] << "</top>\n";
    }
    p << "\n";
    if (!examples.empty()) {
        p << "Examples of features that DO align with the " << taxonomy
          << " taxonomy (notice how the key words are highlighted with <top>...</top> tags):\n";
        for (std::size_t i = 0; i < examples.size(); ++i) {
            p << "Example " << (i + 1) << ":\n";
            p << "- Explanation: " << examples[i].explanation << "\n";
            p << "- Activations: " << examples[i].activations << "\n";
        }
        p << "\n";
    }
    p << "When making your decision, you should follow these rules:\n";
    p << "1. First pay attention to the feature's explanation.\n";
    p << "2. If you cannot decide, you should then pay special attention to the tokens highlighted with <top>...</top> "
         "tags, as these are the most highly activated tokens and strongest indicators of what the feature detects.\n";
    p << "3. Also consider the diversity of the activation examples provided. If one feature only activates one "
         "particular word, it may not be as aligned as a feature that activates on a variety of words.\n\n";
    p << "Based on the feature's explanation and the highlighted tokens in the activation examples, does this feature "
         "specifically detect or respond to "
      << concept_set.definition
      << "? Your answer should start with YES or NO, then provide a brief reason. Do not start with any other words "
         "or phrases such as 'answer'.";
    return p.str();
}

std::optional<bool> parse_verdict(std::string_view reply) {
    auto s = text::trim(reply);
    while (!s.empty() && (s.front() == '*' || s.front() == '_' || s.front() == '"' || s.front() == '\'')) {
        s.remove_prefix(1);
    }
    auto word_ends_at = [&](std::size_t n) { return s.size() == n || !std::isalpha(static_cast<unsigned char>(s[n])); };
    if (text::starts_with_icase(s, "yes") && word_ends_at(3)) return true;
    if (text::starts_with_icase(s, "no") && word_ends_at(2)) return false;
    return std::nullopt;
}

bool LlmJudge::accepts(const FeatureCandidate& candidate, const ConceptSet& concept_set) {
    const auto prompt = render_verification_prompt(candidate, concept_set, examples_);
    std::string reply;
    try {
        reply = complete_(prompt);
    } catch (const std::exception& e) {
        throw JudgeError(std::string("judge transport failure: ") + e.what(), candidate.feature_id);
    }
    const auto verdict = parse_verdict(reply);
    if (!verdict) {
        throw JudgeError("judge reply does not start with YES or NO: \"" + reply.substr(0, 80) + "\"",
                         candidate.feature_id);
    }
    return *verdict;
}

HttpChatCompletion HttpChatCompletion::from_env() {
    HttpChatCompletion c;
    const char* url = std::getenv("STEERKIT_JUDGE_URL");
    if (url == nullptr || *url == '\0') throw ConfigError("STEERKIT_JUDGE_URL is not set");
    c.url = url;
    if (const char* key = std::getenv("STEERKIT_JUDGE_KEY")) c.api_key = key;
    return c;
}

std::string HttpChatCompletion::operator()(const std::string& prompt) const {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("judge URL must include a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    const auto origin = url.substr(0, path_start);
    const auto path = path_start == std::string::npos ? std::string("/") : url.substr(path_start);

    httplib::Client client(origin);
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);

    const nlohmann::json body = {{"model", model}, {"messages", {{{"role", "user"}, {"content", prompt}}}}};
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) throw Error("judge request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw Error("judge endpoint returned HTTP " + std::to_string(res->status));
    try {
        const auto reply = nlohmann::json::parse(res->body);
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("malformed chat-completions response: ") + e.what());
    }
}

}  // namespace steerkit
