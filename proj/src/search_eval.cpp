#include "steerkit/search_eval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <fstream>
#include <istream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>

#include "steerkit/rng.hpp"
#include "steerkit/text_util.hpp"

namespace steerkit {

namespace {

bool cell_key_less(const GridCell& a, const GridCell& b) {
    return a.layer != b.layer ? a.layer < b.layer : a.alpha < b.alpha;
}

GridCell score_cell(std::uint32_t layer, double alpha, const std::vector<EvalRecord>& records) {
    GridCell cell{layer, alpha, 0.0, 0, records.size()};
    for (const auto& r : records) cell.n_correct += r.correct ? 1 : 0;
    cell.accuracy = accuracy(records);
    return cell;
}

double parse_double(const std::string& s, std::size_t line) {
    double v = 0.0;
    const auto t = text::trim(s);
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size()) {
        throw ValidationError("grid csv line " + std::to_string(line) + ": bad number '" + std::string(t) + "'");
    }
    return v;
}

}  // namespace

DatasetSplit split_dataset(const std::vector<EvalItem>& items, std::size_t n_train, std::uint64_t seed) {
    if (n_train > items.size()) {
        throw ValidationError("train size " + std::to_string(n_train) + " exceeds dataset size " + std::to_string(items.size()));
    }
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    rng::Generator g(seed);
    g.shuffle(order);
    std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> test_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    DatasetSplit split;
    for (auto i : train_idx) split.train.push_back(items[i]);
    for (auto i : test_idx) split.test.push_back(items[i]);
    return split;
}

std::vector<std::uint32_t> choose_layer_range(const std::map<std::uint32_t, double>& curve, std::size_t width) {
    if (width == 0) throw ValidationError("layer range width must be positive");
    if (width > curve.size()) {
        throw ValidationError("layer range width " + std::to_string(width) + " exceeds the " + std::to_string(curve.size()) +
                              " layers in the curve");
    }
    std::vector<std::pair<std::uint32_t, double>> points(curve.begin(), curve.end());
    std::size_t best_start = 0;
    double best_rise = 0.0;
    for (std::size_t s = 0; s + width <= points.size(); ++s) {
        const double rise = points[s + width - 1].second - points[s].second;
        if (s == 0 || rise > best_rise) {
            best_rise = rise;
            best_start = s;
        }
    }
    std::vector<std::uint32_t> layers;
    for (std::size_t i = best_start; i < best_start + width; ++i) layers.push_back(points[i].first);
    return layers;
}

std::map<std::uint32_t, double> ablation_curve(RunnerClient& client, const std::vector<EvalItem>& items,
                                               const std::vector<std::uint32_t>& layers) {
    std::map<std::uint32_t, double> curve;
    for (auto l : layers) curve[l] = client.ablate_after_layer(items, l);
    return curve;
}

GridCell best_cell(const std::vector<GridCell>& cells) {
    if (cells.empty()) throw ValidationError("grid has no cells");
    const GridCell* best = &cells.front();
    for (const auto& c : cells) {
        if (c.accuracy > best->accuracy) {
            best = &c;
        } else if (c.accuracy == best->accuracy) {
            if (c.alpha < best->alpha || (c.alpha == best->alpha && c.layer < best->layer)) best = &c;
        }
    }
    return *best;
}

std::vector<double> default_alpha_grid(bool normalized, const std::string& backbone) {
    if (!normalized) return {0.1, 0.2, 0.4, 0.6, 0.8, 1.0};
    if (backbone == "gemma") return {10, 20, 30, 40, 50, 60};
    if (backbone == "llama") return {0.2, 0.4, 0.6, 0.8, 1.0, 1.2};
    throw ConfigError("unknown backbone '" + backbone + "' (expected gemma or llama)");
}

GridResult grid_search(std::span<RunnerClient* const> sessions, const std::vector<EvalItem>& train,
                       const std::map<std::uint32_t, SteeringVector>& vectors, const GridSpec& spec,
                       const GridOptions& options) {
    if (sessions.empty()) throw ValidationError("grid search needs at least one runner session");
    if (spec.layers.empty() || spec.alphas.empty()) throw ValidationError("grid layers and alphas must be non-empty");
    if (train.empty()) throw ValidationError("grid search needs a non-empty train split");
    std::vector<std::uint32_t> missing;
    for (auto l : spec.layers) {
        if (!vectors.contains(l)) missing.push_back(l);
    }
    if (!missing.empty()) {
        std::string msg = "no steering vector for layer(s)";
        for (auto l : missing) msg += " " + std::to_string(l);
        throw ValidationError(msg);
    }
    if (spec.classes.empty()) throw ValidationError("grid search needs at least one token class");

    std::vector<GridCell> done;
    std::set<std::pair<std::uint32_t, double>> done_keys;
    for (const auto& c : options.completed) {
        if (done_keys.emplace(c.layer, c.alpha).second) done.push_back(c);
    }
    std::vector<std::pair<std::uint32_t, double>> todo;
    for (auto l : spec.layers) {
        for (auto a : spec.alphas) {
            if (!done_keys.contains({l, a})) todo.emplace_back(l, a);
        }
    }

    std::mutex mutex;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    auto worker = [&](RunnerClient* session) {
        for (;;) {
            if (failed.load()) return;
            const auto i = next.fetch_add(1);
            if (i >= todo.size()) return;
            const auto [layer, alpha] = todo[i];
            try {
                const auto plan = build_plan(vectors.at(layer), layer, alpha, spec.classes);
                const auto cell = score_cell(layer, alpha, session->run_eval(train, &plan));
                std::lock_guard lock(mutex);
                done.push_back(cell);
                if (options.on_cell) options.on_cell(cell);
            } catch (...) {
                std::lock_guard lock(mutex);
                if (!error) error = std::current_exception();
                failed.store(true);
                return;
            }
        }
    };
    const auto n_workers = std::min(sessions.size(), std::max<std::size_t>(todo.size(), 1));
    if (n_workers == 1) {
        worker(sessions.front());
    } else {
        std::vector<std::thread> threads;
        for (std::size_t w = 0; w < n_workers; ++w) threads.emplace_back(worker, sessions[w]);
        for (auto& t : threads) t.join();
    }

    std::sort(done.begin(), done.end(), cell_key_less);
    if (error) {
        std::string what = "grid search aborted";
        try {
            std::rethrow_exception(error);
        } catch (const std::exception& e) {
            what += ": ";
            what += e.what();
        }
        throw GridAbortedError(what, std::move(done), error);
    }
    GridResult result;
    result.cells = std::move(done);
    result.best = best_cell(result.cells);
    result.n_train = train.size();
    return result;
}

GridResult grid_search(RunnerClient& session, const std::vector<EvalItem>& train,
                       const std::map<std::uint32_t, SteeringVector>& vectors, const GridSpec& spec,
                       const GridOptions& options) {
    RunnerClient* sessions[] = {&session};
    return grid_search(std::span<RunnerClient* const>(sessions), train, vectors, spec, options);
}

std::string format_double(double value) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, ptr);
}

void write_grid_csv(const std::vector<GridCell>& cells, std::ostream& sink) {
    sink << "layer,alpha,accuracy,n_correct,n_total\n";
    for (const auto& c : cells) {
        sink << c.layer << ',' << format_double(c.alpha) << ',' << format_double(c.accuracy) << ',' << c.n_correct << ','
             << c.n_total << '\n';
    }
}

std::vector<GridCell> read_grid_csv(std::istream& source) {
    std::vector<GridCell> cells;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(source, line)) {
        ++line_no;
        if (text::trim(line).empty()) continue;
        if (line_no == 1 && text::starts_with_icase(line, "layer")) continue;
        const auto fields = text::split(line, ',');
        if (fields.size() != 3 && fields.size() != 5) {
            throw ValidationError("grid csv line " + std::to_string(line_no) + ": expected 3 or 5 columns");
        }
        GridCell c;
        c.layer = static_cast<std::uint32_t>(parse_double(fields[0], line_no));
        c.alpha = parse_double(fields[1], line_no);
        c.accuracy = parse_double(fields[2], line_no);
        if (fields.size() == 5) {
            c.n_correct = static_cast<std::size_t>(parse_double(fields[3], line_no));
            c.n_total = static_cast<std::size_t>(parse_double(fields[4], line_no));
        }
        cells.push_back(c);
    }
    return cells;
}

PromptSelection select_prompt(RunnerClient& session, const std::vector<EvalItem>& train,
                              const std::vector<std::string>& prompts) {
    if (prompts.empty()) throw ValidationError("prompt list is empty");
    PromptSelection sel;
    std::size_t best = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const double acc = accuracy(session.run_eval(train, nullptr, prompts[i]));
        sel.scores.push_back({prompts[i], acc});
        const auto& b = sel.scores[best];
        if (i > 0 && (acc > b.accuracy || (acc == b.accuracy && prompts[i].size() < b.prompt.size()))) best = i;
    }
    sel.best = prompts[best];
    return sel;
}

std::vector<std::string> read_prompts(std::istream& source) {
    std::vector<std::string> prompts;
    std::string line;
    while (std::getline(source, line)) {
        auto t = text::trim(line);
        if (!t.empty()) prompts.emplace_back(t);
    }
    return prompts;
}

std::vector<std::string> load_prompts(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open prompt file " + path);
    auto prompts = read_prompts(in);
    if (prompts.empty()) throw ConfigError("prompt file " + path + " has no prompts");
    return prompts;
}

OodResult ood_evaluate(RunnerClient& session, const std::vector<EvalItem>& dataset, const FrozenSteering& frozen,
                       std::size_t validation_size, std::uint64_t seed) {
    if (validation_size == 0 || validation_size >= dataset.size()) {
        throw ValidationError("validation size " + std::to_string(validation_size) + " must be in [1, " +
                              std::to_string(dataset.size()) + ")");
    }
    const auto split = split_dataset(dataset, validation_size, seed);
    const std::pair<const char*, TokenClasses> options[] = {
        {"text", TokenClasses::text_only()}, {"image", TokenClasses::image_only()}, {"both", TokenClasses::both()}};

    OodResult result;
    result.n_validation = split.train.size();
    result.n_test = split.test.size();
    double best_acc = -1.0;
    for (const auto& [name, classes] : options) {
        const auto plan = build_plan(frozen.vector, frozen.layer, frozen.alpha, classes);
        const double acc = accuracy(session.run_eval(split.train, &plan));
        result.validation.emplace_back(name, acc);
        if (acc > best_acc) {
            best_acc = acc;
            result.classes = classes;
        }
    }
    const auto plan = build_plan(frozen.vector, frozen.layer, frozen.alpha, result.classes);
    result.test_records = session.run_eval(split.test, &plan);
    result.baseline_records = session.run_eval(split.test);
    result.test_accuracy = accuracy(result.test_records);
    result.baseline_accuracy = accuracy(result.baseline_records);
    return result;
}

}  // namespace steerkit
