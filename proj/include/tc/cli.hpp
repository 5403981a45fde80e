#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tc::cli {

/// Runs one `tc` invocation. `args` excludes the program name. Returns 0 on
/// success, 1 on a usage error and 2 on a runtime error.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace tc::cli
