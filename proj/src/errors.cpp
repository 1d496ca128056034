#include "steerkit/errors.hpp"

namespace steerkit {

namespace {

std::string missing_message(const std::vector<std::string>& missing) {
    std::string msg = "runner returned no result for " + std::to_string(missing.size()) + " item(s):";
    for (const auto& id : missing) msg += " " + id;
    return msg;
}

}  // namespace

IncompleteResultsError::IncompleteResultsError(std::vector<std::string> missing)
    : Error(missing_message(missing)), missing_(std::move(missing)) {}

}  // namespace steerkit
