#pragma once

#include <string>

namespace amalgam {

inline constexpr const char* kLogEnv = "AMALGAM_LOG";

// Reads AMALGAM_LOG (trace|debug|info|warn|error|off); default warn.
void configure_logging();
void set_log_level(const std::string& level);

}  // namespace amalgam
