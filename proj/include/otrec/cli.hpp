#pragma once

namespace otrec {

// Dispatches one CLI invocation. Exit codes: 0 success, 1 usage error,
// 2 runtime error.
int cli_main(int argc, const char* const* argv);

}  // namespace otrec
