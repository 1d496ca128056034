#include "steerkit/eval_types.hpp"

#include <array>
#include <cctype>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>

#include "steerkit/errors.hpp"
#include "steerkit/text_util.hpp"

namespace steerkit {

namespace {

constexpr std::array<std::string_view, 21> kNumberWords{
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty"};

bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

std::string normalize_mcq(std::string_view raw) {
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const char c = raw[i];
        if (!is_alpha(c)) continue;
        const bool starts = i == 0 || !is_alpha(raw[i - 1]);
        const bool ends = i + 1 == raw.size() || !is_alpha(raw[i + 1]);
        if (!(starts && ends)) {
            while (i + 1 < raw.size() && is_alpha(raw[i + 1])) ++i;
            continue;
        }
        const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        // A lone lower-case "a" in prose is the article, not a choice.
        if (c == 'a' && i + 1 < raw.size() && raw[i + 1] == ' ' && i + 2 < raw.size() && is_alpha(raw[i + 2])) continue;
        if (up >= 'A' && up <= 'E') return std::string(1, up);
    }
    return std::string(kNoAnswer);
}

std::string normalize_numeric(std::string_view raw) {
    std::size_t i = 0;
    while (i < raw.size()) {
        const char c = raw[i];
        if (is_digit(c) || (c == '-' && i + 1 < raw.size() && is_digit(raw[i + 1]) && (i == 0 || !is_alpha(raw[i - 1])))) {
            std::size_t j = i + 1;
            while (j < raw.size() && is_digit(raw[j])) ++j;
            if (i > 0 && is_alpha(raw[i - 1])) {
                i = j;
                continue;
            }
            std::string digits(raw.substr(i, j - i));
            // Strip leading zeros but keep the sign and a single zero.
            const bool neg = digits.front() == '-';
            std::string body = neg ? digits.substr(1) : digits;
            const auto nz = body.find_first_not_of('0');
            body = nz == std::string::npos ? "0" : body.substr(nz);
            return (neg && body != "0") ? "-" + body : body;
        }
        if (is_alpha(c)) {
            std::size_t j = i;
            while (j < raw.size() && is_alpha(raw[j])) ++j;
            const auto word = text::to_lower(raw.substr(i, j - i));
            for (std::size_t k = 0; k < kNumberWords.size(); ++k) {
                if (word == kNumberWords[k]) return std::to_string(k);
            }
            i = j;
            continue;
        }
        ++i;
    }
    return std::string(kNoAnswer);
}

}  // namespace

std::string choice_letter(std::size_t i) { return std::string(1, static_cast<char>('A' + i)); }

void EvalItem::validate() const {
    if (item_id.empty()) throw ValidationError("eval item has an empty item_id");
    if (format.kind == AnswerKind::mcq) {
        if (format.choices.empty()) throw ValidationError("mcq item " + item_id + " has no choices");
        if (format.choices.size() > 26) throw ValidationError("mcq item " + item_id + " has too many choices");
        bool found = false;
        for (std::size_t i = 0; i < format.choices.size(); ++i) found = found || gold == choice_letter(i);
        if (!found) throw ValidationError("mcq item " + item_id + " gold \"" + gold + "\" is not a choice letter");
    } else {
        std::size_t pos = 0;
        try {
            (void)std::stoll(gold, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (gold.empty() || pos != gold.size()) {
            throw ValidationError("numeric item " + item_id + " gold \"" + gold + "\" is not an integer");
        }
    }
}

std::string normalize_answer(std::string_view raw, const AnswerFormat& format) {
    return format.kind == AnswerKind::mcq ? normalize_mcq(raw) : normalize_numeric(raw);
}

EvalRecord score_answer(const EvalItem& item, std::string raw_answer) {
    EvalRecord r;
    r.item_id = item.item_id;
    r.normalized_answer = normalize_answer(raw_answer, item.format);
    r.raw_answer = std::move(raw_answer);
    r.correct = r.normalized_answer != kNoAnswer && r.normalized_answer == normalize_answer(item.gold, item.format);
    return r;
}

double accuracy(const std::vector<EvalRecord>& records) {
    if (records.empty()) return 0.0;
    const auto hits = std::count_if(records.begin(), records.end(), [](const EvalRecord& r) { return r.correct; });
    return static_cast<double>(hits) / static_cast<double>(records.size());
}

nlohmann::json item_to_json(const EvalItem& item, bool include_gold) {
    nlohmann::json j = {{"item_id", item.item_id}, {"image_ref", item.image_ref}, {"question", item.question}};
    if (item.format.kind == AnswerKind::mcq) {
        j["answer_format"] = {{"type", "mcq"}, {"choices", item.format.choices}};
    } else {
        j["answer_format"] = {{"type", "numeric"}};
    }
    if (include_gold) j["gold"] = item.gold;
    return j;
}

EvalItem item_from_json(const nlohmann::json& j) {
    EvalItem item;
    item.item_id = j.at("item_id").is_string() ? j.at("item_id").get<std::string>() : j.at("item_id").dump();
    item.image_ref = j.value("image_ref", std::string());
    item.question = j.value("question", std::string());
    const auto& fmt = j.at("answer_format");
    const auto type = fmt.is_string() ? fmt.get<std::string>() : fmt.at("type").get<std::string>();
    if (type == "mcq") {
        item.format.kind = AnswerKind::mcq;
        if (fmt.is_object() && fmt.contains("choices")) item.format.choices = fmt.at("choices").get<std::vector<std::string>>();
        else if (j.contains("choices")) item.format.choices = j.at("choices").get<std::vector<std::string>>();
    } else if (type == "numeric") {
        item.format.kind = AnswerKind::numeric;
    } else {
        throw ValidationError("unknown answer_format \"" + type + "\"");
    }
    if (j.contains("gold")) {
        item.gold = j.at("gold").is_string() ? j.at("gold").get<std::string>() : j.at("gold").dump();
    }
    return item;
}

std::vector<EvalItem> read_dataset_jsonl(std::istream& source) {
    std::vector<EvalItem> items;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        try {
            auto item = item_from_json(nlohmann::json::parse(line));
            item.validate();
            items.push_back(std::move(item));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("dataset line " + std::to_string(line_no) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("dataset line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return items;
}

std::vector<EvalItem> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open dataset " + path);
    return read_dataset_jsonl(in);
}

void write_dataset_jsonl(const std::vector<EvalItem>& items, std::ostream& sink) {
    for (const auto& item : items) sink << item_to_json(item).dump() << '\n';
}

}  // namespace steerkit
