#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "steerkit/concept_data.hpp"
#include "steerkit/eval_types.hpp"
#include "steerkit/rng.hpp"
#include "steerkit/sae_engine.hpp"
#include "steerkit/steering_vector.hpp"
#include "steerkit/trace_store.hpp"

namespace test {

inline std::filesystem::path data_dir() { return STEERKIT_TEST_DATA; }

// Fresh empty directory under the build tree.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::path(STEERKIT_TEST_TMP) / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    f << content;
}

inline steerkit::ActivationTrace random_trace(steerkit::rng::Generator& g, std::uint32_t d, std::size_t n_tokens,
                                              std::size_t n_layers) {
    std::vector<std::uint32_t> layers;
    std::uint32_t l = static_cast<std::uint32_t>(g.below(3));
    for (std::size_t i = 0; i < n_layers; ++i) {
        layers.push_back(l);
        l += 1 + static_cast<std::uint32_t>(g.below(4));
    }
    std::vector<steerkit::TokenRecord> tokens;
    std::map<std::string, std::string> meta{{"source", "random"}};
    for (std::size_t t = 0; t < n_tokens; ++t) {
        auto role = static_cast<steerkit::TokenRole>(g.below(6));
        const auto sid = static_cast<std::int32_t>(g.below(4));
        if (role == steerkit::TokenRole::anchor) meta[steerkit::sentence_key(sid)] = "sentence " + std::to_string(sid);
        tokens.push_back({"tok" + std::to_string(t) + (g.bernoulli(0.2) ? "\xC3\xA9" : ""),
                          static_cast<std::uint32_t>(t * 2 + g.below(2)), role, sid});
    }
    steerkit::ActivationTrace trace("model-" + std::to_string(g.below(100)), d, layers, tokens, meta);
    for (std::size_t lp = 0; lp < n_layers; ++lp)
        for (std::size_t tp = 0; tp < n_tokens; ++tp)
            for (auto& x : trace.row(lp, tp)) x = static_cast<float>(g.normal() * 10.0);
    return trace;
}

inline steerkit::SAEModel random_sae(steerkit::rng::Generator& g, std::uint32_t d, std::uint32_t f, bool jump,
                                     std::uint32_t layer = 0) {
    std::vector<float> we(std::size_t(f) * d), be(f), wd(std::size_t(d) * f), bd(d), th;
    for (auto& x : we) x = static_cast<float>(g.normal());
    for (auto& x : be) x = static_cast<float>(g.normal() * 0.5);
    for (auto& x : wd) x = static_cast<float>(g.normal());
    for (auto& x : bd) x = static_cast<float>(g.normal() * 0.1);
    steerkit::SaeActivation act;
    if (jump) {
        act.kind = steerkit::SaeActivationKind::jumprelu;
        for (std::uint32_t i = 0; i < f; ++i) th.push_back(static_cast<float>(g.uniform()));
        act.thresholds = th;
    }
    return steerkit::SAEModel(layer, d, f, we, be, wd, bd, act);
}

// Items with ids q000.., alternating mcq and numeric formats.
inline std::vector<steerkit::EvalItem> make_items(std::size_t n, bool mixed = true) {
    std::vector<steerkit::EvalItem> items;
    for (std::size_t i = 0; i < n; ++i) {
        steerkit::EvalItem it;
        char id[32];
        std::snprintf(id, sizeof id, "q%04zu", i);
        it.item_id = id;
        it.image_ref = "images/" + it.item_id + ".png";
        if (mixed && i % 3 == 2) {
            it.question = "How many apples are there?";
            it.format = steerkit::AnswerFormat::numeric();
            it.gold = std::to_string(1 + i % 7);
        } else {
            it.question = "Is the cup left or right of the plate?";
            it.format = steerkit::AnswerFormat::mcq({"left", "right", "above", "below"});
            it.gold = steerkit::choice_letter(i % 4);
        }
        items.push_back(it);
    }
    return items;
}

inline steerkit::ConceptSet counting_set(std::size_t k = 4) {
    static const char* words[] = {"three", "two", "five", "four", "seven", "six", "nine", "eight", "ten", "one"};
    std::ostringstream doc;
    doc << "taxonomy: counting\ndefinition: the number of objects of a kind in the image\n";
    for (std::size_t i = 0; i < k; ++i) {
        const char* w = words[i % 10];
        doc << "There are " << w << " apples in basket " << i << ".\t" << w << "\n";
    }
    std::istringstream in(doc.str());
    return steerkit::load_concept_set(in);
}

}  // namespace test
