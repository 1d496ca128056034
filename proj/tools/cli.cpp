#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <toml.hpp>

#include "steerkit/concept_data.hpp"
#include "steerkit/errors.hpp"
#include "steerkit/eval_types.hpp"
#include "steerkit/judge.hpp"
#include "steerkit/mock_runner.hpp"
#include "steerkit/protocol.hpp"
#include "steerkit/runner_client.hpp"
#include "steerkit/sae_engine.hpp"
#include "steerkit/search_eval.hpp"
#include "steerkit/stats.hpp"
#include "steerkit/steering_core.hpp"
#include "steerkit/steering_vector.hpp"
#include "steerkit/text_util.hpp"
#include "steerkit/toy_sim.hpp"
#include "steerkit/trace_store.hpp"
#include "steerkit/vector_extractors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace steerkit::cli {

namespace {

// ---------------------------------------------------------------- settings

std::vector<std::uint32_t> parse_layer_spec(const std::string& spec) {
    std::vector<std::uint32_t> layers;
    for (const auto& part : text::split(spec, ',')) {
        const auto p = std::string(text::trim(part));
        if (p.empty()) continue;
        const auto dash = p.find('-');
        try {
            if (dash == std::string::npos) {
                layers.push_back(static_cast<std::uint32_t>(std::stoul(p)));
            } else {
                const auto a = std::stoul(p.substr(0, dash));
                const auto b = std::stoul(p.substr(dash + 1));
                if (b < a) throw ConfigError("empty layer range '" + p + "'");
                for (auto l = a; l <= b; ++l) layers.push_back(static_cast<std::uint32_t>(l));
            }
        } catch (const std::logic_error&) {
            throw ConfigError("bad layer list '" + spec + "'");
        }
    }
    return layers;
}

double parse_number(std::string_view s, const std::string& key) {
    s = text::trim(s);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw ConfigError("option '" + key + "': '" + std::string(s) + "' is not a number");
    }
    return v;
}

// Layered key/value configuration. Every value a command reads is recorded in `used`,
// which becomes the manifest's "config" and can be replayed with --from-manifest.
class Settings {
public:
    void merge(const json& layer) {
        for (const auto& [k, v] : layer.items()) values_[k] = v;
    }

    bool has(const std::string& key) const { return values_.contains(key) && !values_.at(key).is_null(); }

    std::optional<std::string> opt_str(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = values_.at(key);
        if (!v.is_string()) throw ConfigError("option '" + key + "' must be a string");
        used_[key] = v;
        return v.get<std::string>();
    }
    std::string str(const std::string& key, const std::string& fallback) {
        auto v = opt_str(key);
        used_[key] = v.value_or(fallback);
        return v.value_or(fallback);
    }
    std::string required_str(const std::string& key) {
        auto v = opt_str(key);
        if (!v) throw ConfigError("missing required option --" + flag_name(key));
        return *v;
    }

    std::optional<double> opt_number(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = values_.at(key);
        double d = 0.0;
        if (v.is_number()) {
            d = v.get<double>();
        } else if (v.is_string()) {
            d = parse_number(v.get<std::string>(), key);
        } else {
            throw ConfigError("option '" + key + "' must be a number");
        }
        used_[key] = d;
        return d;
    }
    double number(const std::string& key, double fallback) {
        auto v = opt_number(key);
        used_[key] = v.value_or(fallback);
        return v.value_or(fallback);
    }
    std::optional<long long> opt_integer(const std::string& key) {
        const auto d = opt_number(key);
        if (!d) return std::nullopt;
        if (*d != static_cast<double>(static_cast<long long>(*d))) throw ConfigError("option '" + key + "' must be an integer");
        used_[key] = static_cast<long long>(*d);
        return static_cast<long long>(*d);
    }
    long long integer(const std::string& key, long long fallback) {
        auto v = opt_integer(key);
        used_[key] = v.value_or(fallback);
        return v.value_or(fallback);
    }
    std::size_t count(const std::string& key, std::size_t fallback) {
        const auto v = integer(key, static_cast<long long>(fallback));
        if (v < 0) throw ConfigError("option '" + key + "' must be non-negative");
        return static_cast<std::size_t>(v);
    }
    bool flag(const std::string& key, bool fallback = false) {
        bool b = fallback;
        if (has(key)) {
            const auto& v = values_.at(key);
            if (!v.is_boolean()) throw ConfigError("option '" + key + "' must be true or false");
            b = v.get<bool>();
        }
        used_[key] = b;
        return b;
    }

    std::optional<std::vector<std::uint32_t>> opt_layers(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = values_.at(key);
        std::vector<std::uint32_t> layers;
        if (v.is_string()) {
            layers = parse_layer_spec(v.get<std::string>());
        } else if (v.is_array()) {
            for (const auto& e : v) {
                if (e.is_number_integer() && e.get<long long>() >= 0) {
                    layers.push_back(e.get<std::uint32_t>());
                } else if (e.is_string()) {
                    const auto more = parse_layer_spec(e.get<std::string>());
                    layers.insert(layers.end(), more.begin(), more.end());
                } else {
                    throw ConfigError("option '" + key + "' must list non-negative layer indices");
                }
            }
        } else if (v.is_number_integer()) {
            layers.push_back(v.get<std::uint32_t>());
        } else {
            throw ConfigError("option '" + key + "' must be a layer list");
        }
        std::sort(layers.begin(), layers.end());
        layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
        if (layers.empty()) throw ConfigError("option '" + key + "' is empty");
        used_[key] = layers;
        return layers;
    }

    std::optional<std::vector<double>> opt_numbers(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = values_.at(key);
        std::vector<double> out;
        auto add_string = [&](const std::string& s) {
            for (const auto& part : text::split(s, ',')) {
                if (!text::trim(part).empty()) out.push_back(parse_number(part, key));
            }
        };
        if (v.is_string()) {
            add_string(v.get<std::string>());
        } else if (v.is_array()) {
            for (const auto& e : v) {
                if (e.is_number()) {
                    out.push_back(e.get<double>());
                } else if (e.is_string()) {
                    add_string(e.get<std::string>());
                } else {
                    throw ConfigError("option '" + key + "' must be a list of numbers");
                }
            }
        } else if (v.is_number()) {
            out.push_back(v.get<double>());
        } else {
            throw ConfigError("option '" + key + "' must be a list of numbers");
        }
        if (out.empty()) throw ConfigError("option '" + key + "' is empty");
        used_[key] = out;
        return out;
    }

    std::optional<std::vector<std::string>> opt_strings(const std::string& key) {
        if (!has(key)) return std::nullopt;
        const auto& v = values_.at(key);
        std::vector<std::string> out;
        auto add = [&](const std::string& s) {
            for (const auto& part : text::split(s, ',')) {
                auto t = text::trim(part);
                if (!t.empty()) out.emplace_back(t);
            }
        };
        if (v.is_string()) {
            add(v.get<std::string>());
        } else if (v.is_array()) {
            for (const auto& e : v) {
                if (!e.is_string()) throw ConfigError("option '" + key + "' must be a list of strings");
                add(e.get<std::string>());
            }
        } else {
            throw ConfigError("option '" + key + "' must be a list of strings");
        }
        used_[key] = out;
        return out;
    }

    // {"5": "a.saew"} or ["5=a.saew", ...] or "5=a.saew,6=b.saew".
    std::map<std::uint32_t, std::string> layer_paths(const std::string& key) {
        std::map<std::uint32_t, std::string> out;
        if (!has(key)) return out;
        const auto& v = values_.at(key);
        auto add_pair = [&](const std::string& k, const std::string& path) {
            try {
                out[static_cast<std::uint32_t>(std::stoul(std::string(text::trim(k))))] = std::string(text::trim(path));
            } catch (const std::logic_error&) {
                throw ConfigError("option '" + key + "': bad layer '" + k + "'");
            }
        };
        auto add_assignments = [&](const std::string& s) {
            for (const auto& part : text::split(s, ',')) {
                if (text::trim(part).empty()) continue;
                const auto eq = part.find('=');
                if (eq == std::string::npos) throw ConfigError("option '" + key + "' expects LAYER=PATH, got '" + part + "'");
                add_pair(part.substr(0, eq), part.substr(eq + 1));
            }
        };
        if (v.is_object()) {
            for (const auto& [k, p] : v.items()) {
                if (!p.is_string()) throw ConfigError("option '" + key + "' must map layers to paths");
                add_pair(k, p.get<std::string>());
            }
        } else if (v.is_array()) {
            for (const auto& e : v) {
                if (!e.is_string()) throw ConfigError("option '" + key + "' expects LAYER=PATH entries");
                add_assignments(e.get<std::string>());
            }
        } else if (v.is_string()) {
            add_assignments(v.get<std::string>());
        } else {
            throw ConfigError("option '" + key + "' must map layers to paths");
        }
        json rec = json::object();
        for (const auto& [l, p] : out) rec[std::to_string(l)] = p;
        used_[key] = rec;
        return out;
    }

    const json& used() const { return used_; }

    static std::string flag_name(std::string key) {
        std::replace(key.begin(), key.end(), '_', '-');
        return key;
    }

private:
    json values_ = json::object();
    json used_ = json::object();
};

json toml_to_json(const toml::node& node) {
    if (const auto* t = node.as_table()) {
        json out = json::object();
        for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
        return out;
    }
    if (const auto* a = node.as_array()) {
        json out = json::array();
        for (const auto& v : *a) out.push_back(toml_to_json(v));
        return out;
    }
    if (const auto* s = node.as_string()) return s->get();
    if (const auto* i = node.as_integer()) return i->get();
    if (const auto* f = node.as_floating_point()) return f->get();
    if (const auto* b = node.as_boolean()) return b->get();
    throw ConfigError("unsupported TOML value type (dates and times are not accepted)");
}

std::string normalize_key(std::string key) {
    std::replace(key.begin(), key.end(), '-', '_');
    return key;
}

// Top-level scalars, the [runner] table, and the command's own table.
json load_toml_layer(const std::string& path, const std::string& command) {
    toml::table table;
    try {
        table = toml::parse_file(path);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << "config " << path << ": " << e.description() << " (line " << e.source().begin.line << ")";
        throw ConfigError(msg.str());
    }
    const json all = toml_to_json(table);
    json layer = json::object();
    for (const auto& [k, v] : all.items()) {
        if (!v.is_object()) layer[normalize_key(k)] = v;
    }
    if (all.contains("runner") && all["runner"].is_object()) {
        const auto& r = all["runner"];
        if (r.contains("address")) layer["runner"] = r["address"];
        if (r.contains("command")) layer["runner_cmd"] = r["command"];
        if (r.contains("timeout")) layer["timeout"] = r["timeout"];
        if (r.contains("parallel")) layer["parallel"] = r["parallel"];
    }
    const auto section = normalize_key(command);
    if (all.contains(section) && all[section].is_object()) {
        for (const auto& [k, v] : all[section].items()) layer[normalize_key(k)] = v;
    }
    return layer;
}

// ---------------------------------------------------------------- flags

class FlagSet {
public:
    enum class Type { string, number, list, boolean };

    void add(CLI::App* app, const std::string& flag, const std::string& help, Type type = Type::string) {
        const auto key = normalize_key(flag);
        CLI::Option* opt = nullptr;
        switch (type) {
            case Type::boolean: opt = app->add_flag("--" + flag, bools_[key], help); break;
            case Type::list: opt = app->add_option("--" + flag, lists_[key], help)->allow_extra_args(false); break;
            default: opt = app->add_option("--" + flag, strings_[key], help); break;
        }
        options_.push_back({key, type, opt});
    }

    json to_json() const {
        json out = json::object();
        for (const auto& o : options_) {
            if (o.option->count() == 0) continue;
            switch (o.type) {
                case Type::boolean: out[o.key] = bools_.at(o.key); break;
                case Type::list: out[o.key] = lists_.at(o.key); break;
                case Type::number: out[o.key] = parse_number(strings_.at(o.key), o.key); break;
                case Type::string: out[o.key] = strings_.at(o.key); break;
            }
        }
        return out;
    }

private:
    struct Entry {
        std::string key;
        Type type;
        CLI::Option* option;
    };
    std::vector<Entry> options_;
    std::map<std::string, std::string> strings_;
    std::map<std::string, std::vector<std::string>> lists_;
    std::map<std::string, bool> bools_;
};

// ---------------------------------------------------------------- helpers

struct Context {
    std::ostream& out;
    std::ostream& err;
};

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// Writes through a temporary file so an interrupted run never leaves a torn file.
void write_file(const fs::path& path, const std::string& content) {
    ensure_parent(path);
    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw ConfigError("cannot write " + path.string());
        f << content;
        if (!f) throw ConfigError("cannot write " + path.string());
    }
    fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("invalid JSON in " + path + ": " + e.what());
    }
}

// Collects every missing input so the user sees them all at once.
class InputCheck {
public:
    void file(const std::string& what, const std::string& path) {
        if (!fs::is_regular_file(path)) missing_.push_back(what + " (" + path + ")");
    }
    void dir(const std::string& what, const std::string& path) {
        if (!fs::is_directory(path)) missing_.push_back(what + " (" + path + ")");
    }
    void require(bool ok, const std::string& what) {
        if (!ok) missing_.push_back(what);
    }
    void raise() const {
        if (missing_.empty()) return;
        std::string msg = "missing inputs:";
        for (const auto& m : missing_) msg += "\n  - " + m;
        throw ConfigError(msg);
    }

private:
    std::vector<std::string> missing_;
};

json records_to_json(const std::vector<EvalRecord>& records) {
    json out = json::array();
    for (const auto& r : records) {
        out.push_back({{"item_id", r.item_id},
                       {"raw_answer", r.raw_answer},
                       {"normalized_answer", r.normalized_answer},
                       {"correct", r.correct}});
    }
    return out;
}

json run_manifest(const std::string& command, const Settings& s) {
    return {{"command", command}, {"config", s.used()}, {"tool", "steerkit"}, {"manifest_version", 1}};
}

json records_manifest(const std::string& command, const Settings& s, const std::vector<EvalRecord>& records) {
    auto m = run_manifest(command, s);
    m["accuracy"] = accuracy(records);
    m["n"] = records.size();
    m["records"] = records_to_json(records);
    return m;
}

// ---------------------------------------------------------------- runner sessions

class SessionPool {
public:
    std::vector<RunnerClient*> sessions;

    RunnerClient& first() { return *sessions.front(); }

    void add_mock(std::unique_ptr<LocalMockRunner> mock) {
        mock->connect();
        sessions.push_back(&mock->client());
        mocks_.push_back(std::move(mock));
    }
    void add_client(std::unique_ptr<protocol::Transport> transport) {
        auto client = std::make_unique<RunnerClient>(std::move(transport));
        client->handshake();
        sessions.push_back(client.get());
        clients_.push_back(std::move(client));
    }

private:
    std::vector<std::unique_ptr<LocalMockRunner>> mocks_;
    std::vector<std::unique_ptr<RunnerClient>> clients_;
};

bool runner_configured(Settings& s) { return s.has("runner") || s.has("runner_cmd"); }

void check_runner_inputs(Settings& s, InputCheck& check) {
    const bool configured = runner_configured(s);
    check.require(configured, "runner (--runner ADDRESS, --runner-cmd COMMAND or STEERKIT_RUNNER)");
    if (!s.has("runner_cmd") && s.has("runner")) {
        const auto addr = s.str("runner", "");
        if (addr.starts_with("mock:")) check.file("mock runner script", addr.substr(5));
    }
}

std::unique_ptr<SessionPool> open_sessions(Settings& s, std::size_t n, const std::vector<EvalItem>* dataset) {
    const auto timeout = std::chrono::milliseconds(static_cast<long long>(s.number("timeout", 30.0) * 1000.0));
    auto pool = std::make_unique<SessionPool>();
    if (auto cmd = s.opt_str("runner_cmd")) {
        for (std::size_t i = 0; i < n; ++i) pool->add_client(protocol::spawn_process(*cmd, timeout));
        return pool;
    }
    const auto addr = s.opt_str("runner");
    if (!addr) throw ConfigError("no runner configured (--runner, --runner-cmd or STEERKIT_RUNNER)");
    if (addr->starts_with("mock:")) {
        auto script = MockScript::load(addr->substr(5));
        if (dataset != nullptr) {
            for (const auto& item : *dataset) script.answer_key.try_emplace(item.item_id, item.gold);
        }
        for (std::size_t i = 0; i < n; ++i) pool->add_mock(std::make_unique<LocalMockRunner>(script));
        return pool;
    }
    for (std::size_t i = 0; i < n; ++i) pool->add_client(protocol::connect_tcp(*addr, timeout));
    return pool;
}

std::unique_ptr<FeatureJudge> make_judge(const std::string& name) {
    if (name == "rule") return std::make_unique<RuleBasedJudge>();
    if (name == "accept") return std::make_unique<AcceptAllJudge>();
    if (name == "reject") return std::make_unique<RejectAllJudge>();
    if (name == "llm") return std::make_unique<LlmJudge>(HttpChatCompletion::from_env());
    throw ConfigError("unknown judge '" + name + "' (expected rule, accept, reject or llm)");
}

std::map<std::uint32_t, SteeringVector> load_vector_dir(const std::string& dir) {
    std::map<std::uint32_t, SteeringVector> vectors;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (!entry.is_regular_file() || !name.starts_with("layer_") || entry.path().extension() != ".svec") continue;
        auto v = load_svec(entry.path().string());
        vectors[v.layer] = std::move(v);
    }
    if (vectors.empty()) throw ConfigError("no layer_<l>.svec files in " + dir);
    return vectors;
}

std::vector<EvalItem> select_split(Settings& s, const std::vector<EvalItem>& dataset, const std::string& which) {
    if (which == "all") return dataset;
    const auto n_train = s.count("n_train", static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(dataset.size()))));
    const auto split = split_dataset(dataset, n_train, static_cast<std::uint64_t>(s.integer("seed", kDefaultSplitSeed)));
    if (which == "train") return split.train;
    if (which == "test") return split.test;
    throw ConfigError("split must be all, train or test (got '" + which + "')");
}

std::vector<std::string> ids_of(const std::vector<EvalItem>& items) {
    std::vector<std::string> ids;
    for (const auto& i : items) ids.push_back(i.item_id);
    return ids;
}

ActivationTrace obtain_trace(Settings& s, const ConceptSet& concepts, const std::vector<std::uint32_t>& layers) {
    if (auto path = s.opt_str("trace")) {
        auto trace = load_trace(*path);
        for (auto l : layers) {
            if (!trace.has_layer(l)) throw ConfigError("trace " + *path + " has no layer " + std::to_string(l));
        }
        return trace;
    }
    auto pool = open_sessions(s, 1, nullptr);
    return pool->first().request_trace(concepts, layers);
}

// ---------------------------------------------------------------- commands

int cmd_extract(Settings& s, Context& ctx) {
    const auto method = parse_method(s.required_str("method"));
    const auto concepts_path = s.required_str("concepts");
    const auto layers = s.opt_layers("layers");
    const auto out = fs::path(s.str("out", "out"));
    const auto sae_paths = s.layer_paths("sae");
    const auto catalog_paths = s.layer_paths("catalog");

    InputCheck check;
    check.file("concept set", concepts_path);
    check.require(layers.has_value(), "layers (--layers)");
    if (s.has("trace")) {
        check.file("trace", s.str("trace", ""));
    } else {
        check_runner_inputs(s, check);
    }
    if (method == ExtractionMethod::sae && layers) {
        for (auto l : *layers) {
            auto it = sae_paths.find(l);
            if (it == sae_paths.end()) {
                check.require(false, "SAE weights for layer " + std::to_string(l) + " (--sae " + std::to_string(l) + "=PATH)");
            } else {
                check.file("SAE weights for layer " + std::to_string(l), it->second);
            }
        }
    }
    for (const auto& [l, p] : catalog_paths) check.file("feature catalog for layer " + std::to_string(l), p);
    check.raise();

    const auto concepts = load_concept_set_file(concepts_path);
    const std::string taxonomy(to_string(concepts.taxonomy));
    std::unique_ptr<FeatureJudge> judge;
    std::size_t top_n = kDefaultTopN;
    if (method == ExtractionMethod::sae) {
        judge = make_judge(s.str("judge", "rule"));
        top_n = s.count("top_n", kDefaultTopN);
    }
    std::optional<std::size_t> probe_dim;
    if (method == ExtractionMethod::probe) {
        if (auto d = s.opt_integer("probe_dim")) probe_dim = static_cast<std::size_t>(*d);
    }

    const auto trace = obtain_trace(s, concepts, *layers);
    const auto partition = partition_tokens(concepts, trace);

    auto manifest = run_manifest("extract", s);
    manifest["taxonomy"] = taxonomy;
    manifest["method"] = std::string(to_string(method));
    manifest["model_id"] = trace.model_id();
    manifest["n_anchor_tokens"] = partition.anchor_indices.size();
    manifest["n_control_tokens"] = partition.control_indices.size();
    json outputs = json::array();
    std::vector<std::uint32_t> skipped;

    for (auto l : *layers) {
        std::optional<SteeringVector> vec;
        json info = {{"layer", l}};
        if (method == ExtractionMethod::sae) {
            const auto sae = load_sae(sae_paths.at(l));
            std::optional<FeatureCatalog> catalog;
            if (catalog_paths.contains(l)) catalog = load_feature_catalog_file(catalog_paths.at(l));
            auto result = find_sae_vector(concepts, trace, sae, *judge, top_n, catalog ? &*catalog : nullptr);
            json accepted = json::array();
            for (const auto& f : result.accepted) accepted.push_back(f.feature_id);
            info["accepted_features"] = accepted;
            info["n_candidates"] = result.candidates.size();
            vec = std::move(result.vector);
        } else {
            const auto pos = gather_rows(trace, l, partition.anchor_indices);
            const auto neg = gather_rows(trace, l, partition.control_indices);
            if (method == ExtractionMethod::meanshift) {
                vec = compute_meanshift(pos, neg);
            } else {
                const auto model = train_probe(pos, neg, probe_dim);
                vec = probe_steering_vector(model, taxonomy, l);
                info["probe"] = {{"d", model.projection.dim()},
                                 {"train_accuracy", model.train_accuracy},
                                 {"final_loss", model.final_loss},
                                 {"iterations", model.iterations}};
            }
        }
        if (!vec) {
            skipped.push_back(l);
            ctx.err << "warning: no accepted SAE features at layer " << l << "; no vector written\n";
            continue;
        }
        vec->taxonomy = taxonomy;
        vec->layer = l;
        vec->method = method;
        vec->validate();
        const auto rel = svec_relative_path(*vec);
        const auto path = out / rel;
        ensure_parent(path);
        save_svec(*vec, path.string());
        info["file"] = rel;
        info["norm"] = vec->norm();
        info["normalized"] = vec->normalized;
        info["provenance"] = vec->provenance;
        outputs.push_back(info);
        ctx.out << "wrote " << path.string() << "\n";
    }
    manifest["outputs"] = outputs;
    manifest["skipped_layers"] = skipped;
    if (method == ExtractionMethod::probe) {
        manifest["probe_dim"] = probe_dim.value_or(default_probe_dim(partition.anchor_indices.size()));
    }
    write_json(out / taxonomy / std::string(to_string(method)) / "manifest.json", manifest);
    return skipped.empty() ? kSuccess : kIncomplete;
}

int cmd_grid(Settings& s, Context& ctx) {
    const auto vectors_dir = s.required_str("vectors");
    const auto dataset_path = s.required_str("dataset");
    const auto out = fs::path(s.str("out", "out"));
    InputCheck check;
    check.dir("vector directory", vectors_dir);
    check.file("dataset", dataset_path);
    check_runner_inputs(s, check);
    check.raise();

    const auto vectors = load_vector_dir(vectors_dir);
    const auto dataset = load_dataset(dataset_path);
    GridSpec spec;
    if (auto l = s.opt_layers("layers")) {
        spec.layers = *l;
    } else {
        for (const auto& [l, v] : vectors) spec.layers.push_back(l);
        s.merge({{"layers", spec.layers}});
        s.opt_layers("layers");
    }
    const bool normalized = vectors.begin()->second.normalized;
    const auto backbone = s.str("backbone", "gemma");
    if (auto a = s.opt_numbers("alphas")) {
        spec.alphas = *a;
    } else {
        spec.alphas = default_alpha_grid(normalized, backbone);
        s.merge({{"alphas", spec.alphas}});
        s.opt_numbers("alphas");
    }
    spec.classes = parse_token_classes(s.str("token_classes", "both"));
    const auto n_train = s.count("n_train", static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(dataset.size()))));
    const auto seed = static_cast<std::uint64_t>(s.integer("seed", kDefaultSplitSeed));
    const auto split = split_dataset(dataset, n_train, seed);
    const auto parallel = std::max<std::size_t>(1, s.count("parallel", 1));
    const bool resume = s.flag("resume");

    const auto csv_path = out / "grid.csv";
    GridOptions options;
    if (resume && fs::exists(csv_path)) {
        std::ifstream in(csv_path);
        for (const auto& c : read_grid_csv(in)) {
            const bool in_grid = std::find(spec.layers.begin(), spec.layers.end(), c.layer) != spec.layers.end() &&
                                 std::find(spec.alphas.begin(), spec.alphas.end(), c.alpha) != spec.alphas.end();
            if (in_grid && c.n_total == split.train.size()) options.completed.push_back(c);
        }
        ctx.err << "resuming: " << options.completed.size() << " cell(s) already complete\n";
    }
    std::vector<GridCell> table = options.completed;
    auto persist = [&](std::vector<GridCell> cells) {
        std::sort(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
            return a.layer != b.layer ? a.layer < b.layer : a.alpha < b.alpha;
        });
        std::ostringstream csv;
        write_grid_csv(cells, csv);
        write_file(csv_path, csv.str());
    };
    options.on_cell = [&](const GridCell& c) {
        table.push_back(c);
        persist(table);
    };

    auto manifest = run_manifest("grid", s);
    manifest["split"] = {{"train", split.train.size()}, {"test", split.test.size()}, {"seed", seed},
                         {"train_ids", ids_of(split.train)}, {"test_ids", ids_of(split.test)}};
    manifest["tie_break"] = kGridTieBreak;
    manifest["token_classes"] = to_string(spec.classes);

    auto pool = open_sessions(s, parallel, &dataset);
    try {
        const auto result = grid_search(pool->sessions, split.train, vectors, spec, options);
        persist(result.cells);
        manifest["complete"] = true;
        manifest["best"] = {{"layer", result.best.layer}, {"alpha", result.best.alpha}, {"accuracy", result.best.accuracy}};
        manifest["vectors"] = vectors_dir;
        write_json(out / "grid_manifest.json", manifest);
        ctx.out << "best layer=" << result.best.layer << " alpha=" << format_double(result.best.alpha)
                << " accuracy=" << format_double(result.best.accuracy) << "\n";
        return kSuccess;
    } catch (const GridAbortedError& e) {
        persist(e.partial());
        manifest["complete"] = false;
        manifest["completed_cells"] = e.partial().size();
        manifest["error"] = e.what();
        write_json(out / "grid_manifest.json", manifest);
        ctx.err << "partial grid table written to " << csv_path.string() << "\n";
        std::rethrow_exception(e.cause());
    }
}

int cmd_eval(Settings& s, Context& ctx) {
    const auto dataset_path = s.required_str("dataset");
    const auto out = fs::path(s.str("out", "out"));
    InputCheck check;
    check.file("dataset", dataset_path);
    if (s.has("vector")) check.file("steering vector", s.str("vector", ""));
    check_runner_inputs(s, check);
    check.raise();

    const auto dataset = load_dataset(dataset_path);
    const auto items = select_split(s, dataset, s.str("split", "all"));
    std::optional<SteeringPlan> plan;
    if (auto vpath = s.opt_str("vector")) {
        const auto v = load_svec(*vpath);
        const auto layer = static_cast<std::uint32_t>(s.integer("layer", v.layer));
        plan = build_plan(v, layer, s.number("alpha", 1.0), parse_token_classes(s.str("token_classes", "both")));
        for (const auto& w : plan->warnings) ctx.err << "warning: " << w << "\n";
    }
    const auto prompt = s.opt_str("prompt");
    auto pool = open_sessions(s, 1, &dataset);
    const auto records = pool->first().run_eval(items, plan ? &*plan : nullptr, prompt);
    const auto name = s.str("name", "eval");
    write_json(out / (name + ".json"), records_manifest("eval", s, records));
    ctx.out << "accuracy=" << format_double(accuracy(records)) << " n=" << records.size() << "\n";
    return kSuccess;
}

int cmd_ood(Settings& s, Context& ctx) {
    const auto dataset_path = s.required_str("dataset");
    const auto out = fs::path(s.str("out", "out"));
    InputCheck check;
    check.file("dataset", dataset_path);
    if (s.has("from_grid")) check.file("grid manifest", s.str("from_grid", ""));
    check_runner_inputs(s, check);
    check.raise();

    std::string vectors_dir;
    std::optional<std::uint32_t> layer;
    std::optional<double> alpha;
    if (auto g = s.opt_str("from_grid")) {
        const auto gm = read_json(*g);
        if (!gm.value("complete", false)) throw ConfigError("grid manifest " + *g + " is from an incomplete run");
        layer = gm.at("best").at("layer").get<std::uint32_t>();
        alpha = gm.at("best").at("alpha").get<double>();
        vectors_dir = gm.at("vectors").get<std::string>();
    }
    if (auto v = s.opt_str("vectors")) vectors_dir = *v;
    if (auto l = s.opt_integer("layer")) layer = static_cast<std::uint32_t>(*l);
    if (auto a = s.opt_number("alpha")) alpha = *a;
    if (vectors_dir.empty() || !layer || !alpha) {
        throw ConfigError("ood needs frozen hyperparameters: --from-grid MANIFEST or --vectors, --layer and --alpha");
    }
    s.merge({{"vectors", vectors_dir}, {"layer", *layer}, {"alpha", *alpha}});
    s.opt_str("vectors");
    s.opt_integer("layer");
    s.opt_number("alpha");

    const auto vectors = load_vector_dir(vectors_dir);
    if (!vectors.contains(*layer)) throw ConfigError("no steering vector for layer " + std::to_string(*layer) + " in " + vectors_dir);
    const auto dataset = load_dataset(dataset_path);
    const FrozenSteering frozen{*layer, *alpha, vectors.at(*layer)};
    const auto validation_size = s.count("validation_size", 50);
    const auto seed = static_cast<std::uint64_t>(s.integer("seed", kDefaultSplitSeed));

    auto pool = open_sessions(s, 1, &dataset);
    const auto result = ood_evaluate(pool->first(), dataset, frozen, validation_size, seed);

    auto manifest = run_manifest("ood", s);
    manifest["token_classes"] = to_string(result.classes);
    json validation = json::object();
    for (const auto& [name, acc] : result.validation) validation[name] = acc;
    manifest["validation_accuracy"] = validation;
    manifest["test_accuracy"] = result.test_accuracy;
    manifest["baseline_accuracy"] = result.baseline_accuracy;
    manifest["n_validation"] = result.n_validation;
    manifest["n_test"] = result.n_test;
    manifest["tie_break"] = kOodTieBreak;
    write_json(out / "ood_manifest.json", manifest);
    write_json(out / "ood_steered.json", records_manifest("ood", s, result.test_records));
    write_json(out / "ood_baseline.json", records_manifest("ood", s, result.baseline_records));
    ctx.out << "token_classes=" << to_string(result.classes) << " accuracy=" << format_double(result.test_accuracy)
            << " baseline=" << format_double(result.baseline_accuracy) << " n_test=" << result.n_test << "\n";
    return kSuccess;
}

int cmd_prompt(Settings& s, Context& ctx) {
    const auto dataset_path = s.required_str("dataset");
    const auto prompts_path = s.required_str("prompts");
    const auto out = fs::path(s.str("out", "out"));
    InputCheck check;
    check.file("dataset", dataset_path);
    check.file("prompt file", prompts_path);
    check_runner_inputs(s, check);
    check.raise();

    const auto dataset = load_dataset(dataset_path);
    const auto prompts = load_prompts(prompts_path);
    const auto n_train = s.count("n_train", static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(dataset.size()))));
    const auto split = split_dataset(dataset, n_train, static_cast<std::uint64_t>(s.integer("seed", kDefaultSplitSeed)));
    auto pool = open_sessions(s, 1, &dataset);
    const auto sel = select_prompt(pool->first(), split.train, prompts);

    std::ostringstream csv;
    csv << "prompt,accuracy\n";
    for (const auto& p : sel.scores) {
        auto quoted = p.prompt;
        std::string escaped;
        for (char c : quoted) escaped += c == '"' ? std::string("\"\"") : std::string(1, c);
        csv << '"' << escaped << "\"," << format_double(p.accuracy) << "\n";
    }
    write_file(out / "prompt_scores.csv", csv.str());
    auto manifest = run_manifest("prompt", s);
    manifest["best"] = sel.best;
    manifest["n_candidates"] = prompts.size();
    manifest["tie_break"] = "max accuracy; ties -> shortest prompt, then earliest";
    write_json(out / "prompt_manifest.json", manifest);
    if (!split.test.empty()) {
        const auto records = pool->first().run_eval(split.test, nullptr, sel.best);
        write_json(out / "prompt_test.json", records_manifest("prompt", s, records));
    }
    ctx.out << "best prompt: " << sel.best << "\n";
    return kSuccess;
}

int cmd_ablate(Settings& s, Context& ctx) {
    const auto dataset_path = s.required_str("dataset");
    const auto out = fs::path(s.str("out", "out"));
    InputCheck check;
    check.file("dataset", dataset_path);
    check_runner_inputs(s, check);
    check.raise();

    const auto dataset = load_dataset(dataset_path);
    auto pool = open_sessions(s, 1, &dataset);
    std::vector<std::uint32_t> layers;
    if (auto l = s.opt_layers("layers")) {
        layers = *l;
    } else {
        for (std::uint32_t l = 0; l < pool->first().session().n_layers; ++l) layers.push_back(l);
    }
    const auto width = s.count("width", 16);
    const auto curve = ablation_curve(pool->first(), dataset, layers);
    const auto range = choose_layer_range(curve, width);

    std::ostringstream csv;
    csv << "layer,accuracy\n";
    for (const auto& [l, a] : curve) csv << l << ',' << format_double(a) << '\n';
    write_file(out / "ablation.csv", csv.str());
    auto manifest = run_manifest("ablate", s);
    manifest["layer_range"] = range;
    manifest["tie_break"] = "max curve[end] - curve[start]; ties -> earliest window";
    write_json(out / "ablation_manifest.json", manifest);
    ctx.out << "layer range " << range.front() << ".." << range.back() << "\n";
    return kSuccess;
}

int cmd_census(Settings& s, Context& ctx) {
    const auto concepts_path = s.required_str("concepts");
    const auto out = fs::path(s.str("out", "out"));
    const auto sae_paths = s.layer_paths("sae");
    const auto catalog_paths = s.layer_paths("catalog");
    InputCheck check;
    check.file("concept set", concepts_path);
    check.require(!sae_paths.empty(), "SAE weights (--sae LAYER=PATH)");
    for (const auto& [l, p] : sae_paths) check.file("SAE weights for layer " + std::to_string(l), p);
    for (const auto& [l, p] : catalog_paths) check.file("feature catalog for layer " + std::to_string(l), p);
    if (s.has("trace")) {
        check.file("trace", s.str("trace", ""));
    } else {
        check_runner_inputs(s, check);
    }
    check.raise();

    const auto concepts = load_concept_set_file(concepts_path);
    std::vector<std::uint32_t> layers;
    for (const auto& [l, p] : sae_paths) layers.push_back(l);
    const auto trace = obtain_trace(s, concepts, layers);
    auto judge = make_judge(s.str("judge", "rule"));
    const auto top_n = s.count("top_n", kDefaultTopN);
    std::map<std::uint32_t, std::size_t> census;
    for (const auto& [l, p] : sae_paths) {
        const auto sae = load_sae(p);
        std::optional<FeatureCatalog> catalog;
        if (catalog_paths.contains(l)) catalog = load_feature_catalog_file(catalog_paths.at(l));
        census[l] = find_sae_vector(concepts, trace, sae, *judge, top_n, catalog ? &*catalog : nullptr).accepted.size();
    }
    std::ostringstream csv;
    write_census_csv(census, csv);
    write_file(out / "census.csv", csv.str());
    write_json(out / "census_manifest.json", run_manifest("census", s));
    ctx.out << csv.str();
    return kSuccess;
}

std::vector<EvalRecord> load_records(const std::string& path) {
    const auto m = read_json(path);
    if (!m.contains("records")) throw ConfigError(path + " has no records");
    std::vector<EvalRecord> records;
    for (const auto& r : m["records"]) {
        records.push_back({r.at("item_id").get<std::string>(), r.value("raw_answer", std::string()),
                           r.value("normalized_answer", std::string()), r.at("correct").get<bool>()});
    }
    return records;
}

int cmd_stats(Settings& s, Context& ctx) {
    const auto base_path = s.required_str("base");
    const auto treated_path = s.required_str("treated");
    InputCheck check;
    check.file("base run manifest", base_path);
    check.file("treated run manifest", treated_path);
    check.raise();

    const auto base = load_records(base_path);
    const auto treated = load_records(treated_path);
    std::map<std::string, bool> base_map;
    std::map<std::string, bool> treated_map;
    for (const auto& r : base) {
        if (!base_map.emplace(r.item_id, r.correct).second) throw ConfigError("duplicate item " + r.item_id + " in " + base_path);
    }
    for (const auto& r : treated) {
        if (!treated_map.emplace(r.item_id, r.correct).second) throw ConfigError("duplicate item " + r.item_id + " in " + treated_path);
    }
    std::vector<std::string> only_base;
    std::vector<std::string> only_treated;
    for (const auto& [id, c] : base_map) {
        if (!treated_map.contains(id)) only_base.push_back(id);
    }
    for (const auto& [id, c] : treated_map) {
        if (!base_map.contains(id)) only_treated.push_back(id);
    }
    if (!only_base.empty() || !only_treated.empty()) {
        std::string msg = "runs cover different items;";
        msg += " only in base:";
        for (const auto& id : only_base) msg += " " + id;
        msg += "; only in treated:";
        for (const auto& id : only_treated) msg += " " + id;
        throw ConfigError(msg);
    }
    PairedOutcomes pairs;
    for (const auto& r : base) {
        pairs.base.push_back(r.correct);
        pairs.treated.push_back(treated_map.at(r.item_id));
    }
    const auto row = significance(pairs, s.count("samples", kDefaultBootstrapSamples),
                                  static_cast<std::uint64_t>(s.integer("seed", 0)), std::max<std::size_t>(1, s.count("parallel", 1)));
    std::ostringstream csv;
    csv << "n,base_accuracy,treated_accuracy,improvement,ci_lo,ci_hi,p_value,test,b,c,significant\n";
    csv << row.n << ',' << format_double(row.base_accuracy) << ',' << format_double(row.treated_accuracy) << ','
        << format_double(row.ci.improvement) << ',' << format_double(row.ci.lo) << ',' << format_double(row.ci.hi) << ','
        << format_double(row.test.p_value) << ',' << (row.test.exact ? "exact" : "chi2") << ',' << row.test.b << ','
        << row.test.c << ',' << (row.significant ? "true" : "false") << '\n';
    if (auto table = s.opt_str("table")) write_file(*table, csv.str());
    ctx.out << csv.str();
    return kSuccess;
}

int cmd_toy_sim(Settings& s, Context& ctx) {
    const auto dim = static_cast<std::uint32_t>(s.count("dim", 16));
    const auto source = s.str("source", "yelloworange");
    const auto target = s.str("target", "red");
    const auto intermediate = s.str("intermediate", "orange");
    auto distractors = s.opt_strings("distractors").value_or(std::vector<std::string>{"green", "blue"});
    const auto seed = static_cast<std::uint64_t>(s.integer("seed", 0));
    const auto n_seeds = std::max<std::size_t>(1, s.count("seeds", 20));
    const auto image_norm = s.number("image_norm", kDefaultImageNorm);
    const auto grid = alpha_sweep(s.number("alpha_max", 100.0), s.number("alpha_step", 1.0));
    PlantedModelOptions opts;
    opts.temperature = s.number("temperature", 1.0);
    opts.noise_scale = s.number("noise", 0.0);
    const bool sweep = s.flag("sweep");
    const auto out = fs::path(s.str("out", "out"));

    std::vector<std::string> names{source, target};
    names.insert(names.end(), distractors.begin(), distractors.end());
    bool all_ok = true;
    for (std::size_t k = 0; k < n_seeds; ++k) {
        const auto model_seed = seed + k;
        auto model = make_planted_model(dim, names, model_seed, opts);
        add_intermediate(model, intermediate, source, target);
        const auto curve = crossover_curve(model, source, target, grid, image_norm, model_seed);
        const auto check = check_crossover(curve, source, intermediate, target);
        all_ok = all_ok && check.ok();
        std::string runs;
        for (const auto& r : check.argmax_runs) runs += (runs.empty() ? "" : " -> ") + r;
        ctx.out << "seed " << model_seed << ": " << (check.ok() ? "ok" : "FAILED") << " (" << runs
                << "; target nondecreasing=" << (check.target_nondecreasing ? "yes" : "no")
                << ", intermediate unimodal=" << (check.intermediate_unimodal ? "yes" : "no") << ")\n";
        if (sweep && k == 0) {
            std::ostringstream csv;
            write_crossover_csv(curve, csv);
            write_file(out / "toy_crossover.csv", csv.str());
        }
    }
    write_json(out / "toy_manifest.json", run_manifest("toy-sim", s));
    return all_ok ? kSuccess : kFailure;
}

int cmd_mock_runner(Settings& s, Context& ctx) {
    const auto script_path = s.required_str("script");
    InputCheck check;
    check.file("mock runner script", script_path);
    if (s.has("dataset")) check.file("dataset", s.str("dataset", ""));
    if (s.has("trace")) check.file("trace", s.str("trace", ""));
    check.raise();

    auto script = MockScript::load(script_path);
    if (auto d = s.opt_str("dataset")) {
        for (const auto& item : load_dataset(*d)) script.answer_key.try_emplace(item.item_id, item.gold);
    }
    MockRunner runner(script);
    if (auto t = s.opt_str("trace")) runner.set_fixed_trace(load_trace(*t));
    if (auto port = s.opt_integer("listen")) {
        if (*port <= 0 || *port > 65535) throw ConfigError("--listen needs a port in 1..65535");
        auto transport = protocol::accept_tcp_once(static_cast<std::uint16_t>(*port));
        runner.serve(*transport);
        return kSuccess;
    }
    ctx.err.flush();
    protocol::FdTransport stdio(0, 1, false, std::chrono::hours(24));
    runner.serve(stdio);
    return kSuccess;
}

struct CommandSpec {
    const char* name;
    const char* help;
    int (*fn)(Settings&, Context&);
    std::vector<std::tuple<const char*, const char*, FlagSet::Type>> flags;
};

using T = FlagSet::Type;

const std::vector<CommandSpec>& commands() {
    static const std::vector<CommandSpec> specs = {
        {"extract", "extract steering vectors (sae, meanshift, probe) into SVEC files", cmd_extract,
         {{"method", "sae | meanshift | probe", T::string},
          {"concepts", "concept set TSV", T::string},
          {"layers", "layers, e.g. 5-20 or 5,6,7", T::string},
          {"trace", "STRC trace (otherwise traced live by the runner)", T::string},
          {"sae", "LAYER=PATH SAE weights (.saew or two-file header); repeatable", T::list},
          {"catalog", "LAYER=PATH feature catalog TSV; repeatable", T::list},
          {"judge", "rule | accept | reject | llm", T::string},
          {"top-n", "candidates per anchor token", T::number},
          {"probe-dim", "PCA width for the probe (default K/2)", T::number}}},
        {"grid", "grid search over (layer, alpha) on the train split", cmd_grid,
         {{"vectors", "directory of layer_<l>.svec files", T::string},
          {"dataset", "JSONL dataset", T::string},
          {"layers", "layers to search (default: every vector)", T::string},
          {"alphas", "comma-separated scale factors", T::string},
          {"backbone", "gemma | llama (default alpha grid for normalized vectors)", T::string},
          {"token-classes", "image | text | both", T::string},
          {"n-train", "train split size", T::number},
          {"resume", "skip cells already in <out>/grid.csv", T::boolean}}},
        {"eval", "evaluate a dataset split, optionally steered or prompted", cmd_eval,
         {{"dataset", "JSONL dataset", T::string},
          {"split", "all | train | test", T::string},
          {"n-train", "train split size", T::number},
          {"vector", "SVEC steering vector", T::string},
          {"layer", "injection layer (default: the vector's layer)", T::number},
          {"alpha", "scale factor", T::number},
          {"token-classes", "image | text | both", T::string},
          {"prompt", "prompt prefix", T::string},
          {"name", "output name (<out>/<name>.json)", T::string}}},
        {"ood", "OOD transfer: choose token classes on a validation subset", cmd_ood,
         {{"dataset", "JSONL OOD dataset", T::string},
          {"from-grid", "grid_manifest.json supplying layer, alpha and vectors", T::string},
          {"vectors", "directory of layer_<l>.svec files", T::string},
          {"layer", "frozen layer", T::number},
          {"alpha", "frozen alpha", T::number},
          {"validation-size", "validation subset size", T::number}}},
        {"prompt", "prompting baseline: pick the best prompt on the train split", cmd_prompt,
         {{"dataset", "JSONL dataset", T::string},
          {"prompts", "prompt file, one per line", T::string},
          {"n-train", "train split size", T::number}}},
        {"ablate", "image-attention ablation curve and layer-range choice", cmd_ablate,
         {{"dataset", "JSONL dataset", T::string},
          {"layers", "layers to ablate after (default: all)", T::string},
          {"width", "layer range width", T::number}}},
        {"census", "accepted SAE feature count per layer", cmd_census,
         {{"concepts", "concept set TSV", T::string},
          {"trace", "STRC trace (otherwise traced live)", T::string},
          {"sae", "LAYER=PATH SAE weights; repeatable", T::list},
          {"catalog", "LAYER=PATH feature catalog TSV; repeatable", T::list},
          {"judge", "rule | accept | reject | llm", T::string},
          {"top-n", "candidates per anchor token", T::number}}},
        {"stats", "paired bootstrap CI and McNemar test between two runs", cmd_stats,
         {{"base", "baseline run manifest (with records)", T::string},
          {"treated", "treated run manifest (with records)", T::string},
          {"samples", "bootstrap samples", T::number},
          {"table", "also write the table to this CSV file", T::string}}},
        {"toy-sim", "planted-direction color steering simulator", cmd_toy_sim,
         {{"sweep", "write <out>/toy_crossover.csv for the first seed", T::boolean},
          {"seeds", "number of seeds to check", T::number},
          {"dim", "model dimension", T::number},
          {"image-norm", "norm of the image token", T::number},
          {"alpha-max", "largest alpha in the sweep", T::number},
          {"alpha-step", "alpha step", T::number},
          {"source", "perceived concept", T::string},
          {"target", "steering target concept", T::string},
          {"intermediate", "midpoint concept", T::string},
          {"distractors", "extra concepts, comma-separated", T::string},
          {"temperature", "readout temperature", T::number},
          {"noise", "image token noise scale", T::number}}},
        {"mock-runner", "serve the scripted mock runner on stdio or TCP", cmd_mock_runner,
         {{"script", "mock script JSON", T::string},
          {"dataset", "dataset supplying the answer key", T::string},
          {"trace", "fixed STRC trace to serve", T::string},
          {"listen", "TCP port on 127.0.0.1 (default: stdio)", T::number}}},
    };
    return specs;
}

int exit_code_for(std::exception_ptr e, std::ostream& err) {
    try {
        std::rethrow_exception(e);
    } catch (const IncompleteResultsError& ex) {
        err << "error: " << ex.what() << "\n";
        return kIncomplete;
    } catch (const ProtocolError& ex) {
        err << "error: runner protocol: " << ex.what() << "\n";
        return kRunnerError;
    } catch (const RunnerError& ex) {
        err << "error: runner: " << ex.what() << "\n";
        return kRunnerError;
    } catch (const ConfigError& ex) {
        err << "error: " << ex.what() << "\n";
        return kConfigError;
    } catch (const ValidationError& ex) {
        err << "error: " << ex.what() << "\n";
        return kConfigError;
    } catch (const ParseError& ex) {
        err << "error: " << ex.what() << "\n";
        return kConfigError;
    } catch (const std::filesystem::filesystem_error& ex) {
        err << "error: " << ex.what() << "\n";
        return kConfigError;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return kFailure;
    }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"steerkit: textual steering vectors for visual concepts"};
    app.name("steerkit");
    app.require_subcommand(0, 1);
    app.fallthrough();
    FlagSet global;
    std::string config_path;
    std::string manifest_path;
    app.add_option("--config", config_path, "TOML config file");
    app.add_option("--from-manifest", manifest_path, "replay the configuration recorded in a run manifest");
    global.add(&app, "seed", "master seed", T::number);
    global.add(&app, "out", "output directory", T::string);
    global.add(&app, "runner", "runner address host:port or mock:<script.json> (env STEERKIT_RUNNER)", T::string);
    global.add(&app, "runner-cmd", "command that starts a runner speaking the protocol on stdio", T::string);
    global.add(&app, "parallel", "concurrent runner sessions", T::number);
    global.add(&app, "timeout", "runner timeout in seconds", T::number);

    std::vector<std::pair<const CommandSpec*, CLI::App*>> subs;
    std::vector<std::unique_ptr<FlagSet>> flag_sets;
    for (const auto& spec : commands()) {
        auto* sub = app.add_subcommand(spec.name, spec.help);
        auto fs_ptr = std::make_unique<FlagSet>();
        for (const auto& [flag, help, type] : spec.flags) fs_ptr->add(sub, flag, help, type);
        subs.emplace_back(&spec, sub);
        flag_sets.push_back(std::move(fs_ptr));
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kSuccess;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kSuccess;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    }

    try {
        const CommandSpec* spec = nullptr;
        const FlagSet* sub_flags = nullptr;
        for (std::size_t i = 0; i < subs.size(); ++i) {
            if (subs[i].second->parsed()) {
                spec = subs[i].first;
                sub_flags = flag_sets[i].get();
            }
        }
        json manifest_config;
        if (!manifest_path.empty()) {
            const auto m = read_json(manifest_path);
            if (!m.contains("command") || !m.contains("config")) throw ConfigError(manifest_path + " is not a run manifest");
            const auto command = m["command"].get<std::string>();
            if (spec != nullptr && command != spec->name) {
                throw ConfigError("manifest " + manifest_path + " records command '" + command + "', not '" + spec->name + "'");
            }
            for (std::size_t i = 0; spec == nullptr && i < subs.size(); ++i) {
                if (command == subs[i].first->name) spec = subs[i].first;
            }
            if (spec == nullptr) throw ConfigError("manifest names unknown command '" + command + "'");
            manifest_config = m["config"];
        }
        if (spec == nullptr) {
            out << app.help();
            return kConfigError;
        }

        Settings settings;
        if (const char* env = std::getenv("STEERKIT_RUNNER"); env != nullptr && *env != '\0') settings.merge({{"runner", env}});
        if (!config_path.empty()) {
            if (!fs::is_regular_file(config_path)) throw ConfigError("missing inputs:\n  - config file (" + config_path + ")");
            settings.merge(load_toml_layer(config_path, spec->name));
        }
        if (!manifest_config.is_null()) settings.merge(manifest_config);
        settings.merge(global.to_json());
        if (sub_flags != nullptr) settings.merge(sub_flags->to_json());

        Context ctx{out, err};
        return spec->fn(settings, ctx);
    } catch (...) {
        return exit_code_for(std::current_exception(), err);
    }
}

}  // namespace steerkit::cli
