#include "amalgam/log.hpp"

#include <cstdlib>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "amalgam/error.hpp"

namespace amalgam {

void set_log_level(const std::string& level) {
  const auto parsed = spdlog::level::from_str(level);
  if (parsed == spdlog::level::off && level != "off") {
    throw UsageError("unknown log level '" + level + "'");
  }
  spdlog::set_level(parsed);
}

void configure_logging() {
  static bool sink_installed = false;
  if (!sink_installed) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("amalgam"));
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    sink_installed = true;
  }
  const char* env = std::getenv(kLogEnv);
  set_log_level(env && *env ? env : "warn");
}

}  // namespace amalgam
