// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace clora::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 2;         // unknown subcommand, flag or malformed value
inline constexpr int kConfig = 3;        // unreadable or invalid configuration / file
inline constexpr int kVerifyFailed = 4;  // a verification subcommand found a violation
inline constexpr int kNumeric = 5;       // non-convergence or non-finite values
inline constexpr int kInternal = 1;

/// Runs one subcommand. `args` excludes the program name. Failures print
/// one line `error: kind=<kind> message="<text>"` to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace clora::cli
