#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qure::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Runs one subcommand (synth, validate, mine, train, rank, eval, prefrate).
// Exit 0 on success, 1 on usage/validation/config errors, 2 on runtime
// errors. Errors go to `err` as one JSON object unless --json-errors=false.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace qure::cli
