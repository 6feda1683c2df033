// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace rar {

// Entry point for the rar tool. Returns the process exit code: 0 on
// success, 1 on operational failure, 2 on usage errors.
int run_cli(int argc, const char* const* argv);

}  // namespace rar
