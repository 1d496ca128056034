#pragma once

#include <cstdint>
#include <iosfwd>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "steerkit/trace_store.hpp"

namespace steerkit {

enum class Taxonomy { spatial_relationship, counting, attribute, entity };

std::string_view to_string(Taxonomy taxonomy);
// Accepts the canonical snake_case name or the spaced form ("spatial relationship").
Taxonomy parse_taxonomy(std::string_view name);

struct SentenceAnchorPair {
    std::string sentence;
    std::string anchor;
    std::int32_t sentence_id = 0;
};

struct ConceptSet {
    Taxonomy taxonomy = Taxonomy::counting;
    std::vector<SentenceAnchorPair> pairs;
    std::string definition;
    // Lower-case keywords used by the offline judge. Empty means the built-in list.
    std::vector<std::string> keywords;

    std::size_t size() const noexcept { return pairs.size(); }
};

// True when `anchor` appears in `sentence` delimited by non-alphanumeric characters.
bool contains_word(std::string_view sentence, std::string_view anchor);

// Parses the concept TSV:
//
//   taxonomy: counting
//   definition: the number of objects ...
//   keywords: number, count, quantity        (optional)
//   <sentence> TAB <anchor>
//   ...
//
// Blank lines and lines starting with '#' are skipped. sentence_id is the 0-based row index.
ConceptSet load_concept_set(std::istream& source);
ConceptSet load_concept_set_file(const std::string& path);

void write_concept_set(const ConceptSet& set, std::ostream& sink);

struct TokenPartition {
    std::set<std::uint32_t> anchor_indices;
    std::set<std::uint32_t> control_indices;
};

// Splits traced tokens into anchors (final subtoken of each tagged anchor run) and
// controls (every other non-output token sharing a sentence with an anchor).
TokenPartition partition_tokens(const ConceptSet& set, const ActivationTrace& trace);

}  // namespace steerkit
