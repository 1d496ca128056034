#pragma once

// Dataset splits, layer-range selection, (layer, alpha) grid search, prompt baseline
// selection and the OOD token-class protocol.

#include <cstdint>
#include <exception>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steerkit/errors.hpp"
#include "steerkit/eval_types.hpp"
#include "steerkit/runner_client.hpp"
#include "steerkit/steering_core.hpp"
#include "steerkit/steering_vector.hpp"

namespace steerkit {

inline constexpr std::uint64_t kDefaultSplitSeed = 17;

struct DatasetSplit {
    std::vector<EvalItem> train;
    std::vector<EvalItem> test;
};

// Seeded shuffle, then the first n_train items form the train split. Each side keeps
// the original dataset order.
DatasetSplit split_dataset(const std::vector<EvalItem>& items, std::size_t n_train, std::uint64_t seed = kDefaultSplitSeed);

// Contiguous window of `width` layers maximizing curve[end] - curve[start]; earliest on ties.
std::vector<std::uint32_t> choose_layer_range(const std::map<std::uint32_t, double>& curve, std::size_t width = 16);

std::map<std::uint32_t, double> ablation_curve(RunnerClient& client, const std::vector<EvalItem>& items,
                                               const std::vector<std::uint32_t>& layers);

struct GridCell {
    std::uint32_t layer = 0;
    double alpha = 0.0;
    double accuracy = 0.0;
    std::size_t n_correct = 0;
    std::size_t n_total = 0;
};

struct GridSpec {
    std::vector<std::uint32_t> layers;
    std::vector<double> alphas;
    TokenClasses classes = TokenClasses::both();
};

struct GridResult {
    std::vector<GridCell> cells;  // ordered by (layer, alpha)
    GridCell best;
    std::size_t n_train = 0;
};

// Highest accuracy; ties go to the smaller alpha, then the smaller layer.
GridCell best_cell(const std::vector<GridCell>& cells);

inline constexpr const char* kGridTieBreak = "max accuracy; ties -> smaller alpha, then smaller layer";

// Default alpha grids. backbone: "gemma" or "llama" (normalized vectors only).
std::vector<double> default_alpha_grid(bool normalized, const std::string& backbone = "gemma");

// Raised when a cell fails. partial holds every cell that completed, cause the original error.
class GridAbortedError : public Error {
public:
    GridAbortedError(const std::string& what, std::vector<GridCell> partial, std::exception_ptr cause)
        : Error(what), partial_(std::move(partial)), cause_(std::move(cause)) {}
    const std::vector<GridCell>& partial() const noexcept { return partial_; }
    std::exception_ptr cause() const noexcept { return cause_; }

private:
    std::vector<GridCell> partial_;
    std::exception_ptr cause_;
};

struct GridOptions {
    // Cells already evaluated (resume); they are not re-run.
    std::vector<GridCell> completed;
    // Called once per newly finished cell, serialized across sessions.
    std::function<void(const GridCell&)> on_cell;
};

// Evaluates every (layer, alpha) cell on `train`, spreading cells over the given sessions
// (each session is used by one thread at a time).
GridResult grid_search(std::span<RunnerClient* const> sessions, const std::vector<EvalItem>& train,
                       const std::map<std::uint32_t, SteeringVector>& vectors, const GridSpec& spec,
                       const GridOptions& options = {});
GridResult grid_search(RunnerClient& session, const std::vector<EvalItem>& train,
                       const std::map<std::uint32_t, SteeringVector>& vectors, const GridSpec& spec,
                       const GridOptions& options = {});

// Columns: layer,alpha,accuracy,n_correct,n_total.
void write_grid_csv(const std::vector<GridCell>& cells, std::ostream& sink);
std::vector<GridCell> read_grid_csv(std::istream& source);
std::string format_double(double value);

struct PromptScore {
    std::string prompt;
    double accuracy = 0.0;
};

struct PromptSelection {
    std::string best;
    std::vector<PromptScore> scores;  // in input order
};

// Ties go to the shortest prompt, then the earliest.
PromptSelection select_prompt(RunnerClient& session, const std::vector<EvalItem>& train,
                              const std::vector<std::string>& prompts);

// One prompt per non-empty line.
std::vector<std::string> read_prompts(std::istream& source);
std::vector<std::string> load_prompts(const std::string& path);

struct FrozenSteering {
    std::uint32_t layer = 0;
    double alpha = 0.0;
    SteeringVector vector;
};

struct OodResult {
    TokenClasses classes;
    std::vector<std::pair<std::string, double>> validation;  // option -> accuracy, in preference order
    double test_accuracy = 0.0;
    double baseline_accuracy = 0.0;
    std::vector<EvalRecord> test_records;
    std::vector<EvalRecord> baseline_records;
    std::size_t n_validation = 0;
    std::size_t n_test = 0;
};

inline constexpr const char* kOodTieBreak = "max validation accuracy; ties -> text, image, both";

OodResult ood_evaluate(RunnerClient& session, const std::vector<EvalItem>& dataset, const FrozenSteering& frozen,
                       std::size_t validation_size, std::uint64_t seed = kDefaultSplitSeed);

}  // namespace steerkit
