#pragma once

#include <string>
#include <vector>

namespace nrsfm::cli {

// Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
int run(int argc, const char* const* argv);
// argv[0] is the program name.
int run(const std::vector<std::string>& args);

}  // namespace nrsfm::cli
