#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace steerkit {

enum class AnswerKind { mcq, numeric };

struct AnswerFormat {
    AnswerKind kind = AnswerKind::mcq;
    std::vector<std::string> choices;  // mcq only; letter i labels choices[i]

    static AnswerFormat numeric() { return {AnswerKind::numeric, {}}; }
    static AnswerFormat mcq(std::vector<std::string> choices) { return {AnswerKind::mcq, std::move(choices)}; }
};

struct EvalItem {
    std::string item_id;
    std::string image_ref;
    std::string question;
    AnswerFormat format;
    std::string gold;

    void validate() const;
};

struct EvalRecord {
    std::string item_id;
    std::string raw_answer;
    std::string normalized_answer;
    bool correct = false;
};

// Sentinel for replies with no extractable answer.
inline constexpr std::string_view kNoAnswer = "⟂";

// mcq: first standalone letter A-E (case-insensitive, punctuation stripped).
// numeric: first integer token; spelled-out zero..twenty map to digits.
std::string normalize_answer(std::string_view raw, const AnswerFormat& format);

EvalRecord score_answer(const EvalItem& item, std::string raw_answer);
double accuracy(const std::vector<EvalRecord>& records);

// Letter label for choice i ("A", "B", ...).
std::string choice_letter(std::size_t i);

nlohmann::json item_to_json(const EvalItem& item, bool include_gold = true);
EvalItem item_from_json(const nlohmann::json& j);

// One EvalItem per line.
std::vector<EvalItem> read_dataset_jsonl(std::istream& source);
std::vector<EvalItem> load_dataset(const std::string& path);
void write_dataset_jsonl(const std::vector<EvalItem>& items, std::ostream& sink);

}  // namespace steerkit
