#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mmr::cli {

// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.
// Failures print a single JSON object {"error", "message"[, "field"]} to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmr::cli
