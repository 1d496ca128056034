#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace steerkit::text {

std::string_view trim(std::string_view s);
std::string to_lower(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
std::vector<std::string> split_whitespace(std::string_view s);
bool starts_with_icase(std::string_view s, std::string_view prefix);

}  // namespace steerkit::text
