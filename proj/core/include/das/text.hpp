#pragma once

#include <string>
#include <vector>

namespace das {

/// Shortest decimal form that round-trips to the same double.
std::string format_double(double v);

double parse_double(const std::string& s);

std::vector<std::string> split(const std::string& s, char sep);

}  // namespace das
