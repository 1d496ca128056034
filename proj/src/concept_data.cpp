#include "steerkit/concept_data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>

#include "steerkit/errors.hpp"
#include "steerkit/text_util.hpp"

namespace steerkit {

std::string_view to_string(Taxonomy taxonomy) {
    switch (taxonomy) {
        case Taxonomy::spatial_relationship: return "spatial_relationship";
        case Taxonomy::counting: return "counting";
        case Taxonomy::attribute: return "attribute";
        case Taxonomy::entity: return "entity";
    }
    return "counting";
}

Taxonomy parse_taxonomy(std::string_view name) {
    std::string key = text::to_lower(text::trim(name));
    std::replace(key.begin(), key.end(), ' ', '_');
    std::replace(key.begin(), key.end(), '-', '_');
    if (key == "spatial_relationship" || key == "spatial") return Taxonomy::spatial_relationship;
    if (key == "counting") return Taxonomy::counting;
    if (key == "attribute") return Taxonomy::attribute;
    if (key == "entity") return Taxonomy::entity;
    throw ValidationError("unknown taxonomy \"" + std::string(name) + "\"");
}

bool contains_word(std::string_view sentence, std::string_view anchor) {
    if (anchor.empty()) return false;
    auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    for (std::size_t pos = sentence.find(anchor); pos != std::string_view::npos; pos = sentence.find(anchor, pos + 1)) {
        const bool left_ok = pos == 0 || !is_word(sentence[pos - 1]) || !is_word(anchor.front());
        const std::size_t end = pos + anchor.size();
        const bool right_ok = end == sentence.size() || !is_word(sentence[end]) || !is_word(anchor.back());
        if (left_ok && right_ok) return true;
    }
    return false;
}

ConceptSet load_concept_set(std::istream& source) {
    ConceptSet set;
    bool have_taxonomy = false;
    bool have_definition = false;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto trimmed = text::trim(line);
        if (trimmed.empty() || trimmed.front() == '#') continue;

        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            const auto colon = line.find(':');
            if (colon == std::string::npos) {
                throw ValidationError("concept file line " + std::to_string(line_no) +
                                      ": expected 'key: value' header or 'sentence<TAB>anchor' row");
            }
            const auto key = text::to_lower(text::trim(std::string_view(line).substr(0, colon)));
            const auto value = std::string(text::trim(std::string_view(line).substr(colon + 1)));
            if (key == "taxonomy") {
                set.taxonomy = parse_taxonomy(value);
                have_taxonomy = true;
            } else if (key == "definition") {
                set.definition = value;
                have_definition = true;
            } else if (key == "keywords") {
                for (const auto& kw : text::split(value, ',')) {
                    auto k = text::to_lower(text::trim(kw));
                    if (!k.empty()) set.keywords.push_back(std::move(k));
                }
            } else {
                throw ValidationError("concept file line " + std::to_string(line_no) + ": unknown header \"" + key + "\"");
            }
            continue;
        }

        SentenceAnchorPair pair;
        pair.sentence = std::string(text::trim(std::string_view(line).substr(0, tab)));
        pair.anchor = std::string(text::trim(std::string_view(line).substr(tab + 1)));
        pair.sentence_id = static_cast<std::int32_t>(set.pairs.size());
        if (!contains_word(pair.sentence, pair.anchor)) {
            throw ValidationError("concept file line " + std::to_string(line_no) + " (row " +
                                  std::to_string(pair.sentence_id + 1) + "): anchor \"" + pair.anchor +
                                  "\" does not occur in sentence \"" + pair.sentence + "\"");
        }
        set.pairs.push_back(std::move(pair));
    }
    if (!have_taxonomy) throw ValidationError("concept file is missing the 'taxonomy:' header");
    if (!have_definition) throw ValidationError("concept file is missing the 'definition:' header");
    if (set.pairs.size() < 2) {
        throw ValidationError("concept set needs at least 2 sentence/anchor rows, got " + std::to_string(set.pairs.size()));
    }
    return set;
}

ConceptSet load_concept_set_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open concept file " + path);
    return load_concept_set(in);
}

void write_concept_set(const ConceptSet& set, std::ostream& sink) {
    sink << "taxonomy: " << to_string(set.taxonomy) << '\n';
    sink << "definition: " << set.definition << '\n';
    if (!set.keywords.empty()) {
        sink << "keywords: ";
        for (std::size_t i = 0; i < set.keywords.size(); ++i) sink << (i ? ", " : "") << set.keywords[i];
        sink << '\n';
    }
    for (const auto& p : set.pairs) sink << p.sentence << '\t' << p.anchor << '\n';
}

TokenPartition partition_tokens(const ConceptSet& set, const ActivationTrace& trace) {
    std::vector<const TokenRecord*> ordered;
    ordered.reserve(trace.tokens().size());
    for (const auto& tok : trace.tokens()) ordered.push_back(&tok);
    std::sort(ordered.begin(), ordered.end(),
              [](const TokenRecord* a, const TokenRecord* b) { return a->token_index < b->token_index; });

    TokenPartition part;
    std::set<std::int32_t> anchor_sentences;
    for (std::size_t i = 0; i < ordered.size(); ++i) {
        const auto& tok = *ordered[i];
        if (tok.role != TokenRole::anchor) continue;
        if (tok.sentence_id < 0 || static_cast<std::size_t>(tok.sentence_id) >= set.pairs.size()) {
            throw ValidationError("anchor token " + std::to_string(tok.token_index) + " has sentence_id " +
                                  std::to_string(tok.sentence_id) + " outside the concept set");
        }
        anchor_sentences.insert(tok.sentence_id);
        // A run of adjacent anchor subtokens in one sentence is one occurrence; keep its last piece.
        const bool continues = i + 1 < ordered.size() && ordered[i + 1]->role == TokenRole::anchor &&
                               ordered[i + 1]->sentence_id == tok.sentence_id &&
                               ordered[i + 1]->token_index == tok.token_index + 1;
        if (!continues) part.anchor_indices.insert(tok.token_index);
    }
    if (part.anchor_indices.empty()) throw ValidationError("trace contains no anchor-tagged tokens");

    for (const auto* tok : ordered) {
        if (tok->role == TokenRole::anchor || tok->role == TokenRole::output) continue;
        if (anchor_sentences.contains(tok->sentence_id)) part.control_indices.insert(tok->token_index);
    }
    if (part.control_indices.empty()) throw ValidationError("control token set is empty");
    return part;
}

}  // namespace steerkit
