#include "tilefuse/log.hpp"

#include <cstdlib>
#include <memory>
#include <mutex>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace tilefuse::log {
namespace {

spdlog::logger& logger() {
  static std::once_flag once;
  static std::shared_ptr<spdlog::logger> instance;
  std::call_once(once, [] {
    instance = spdlog::stderr_color_mt("tilefuse");
    instance->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    auto level = spdlog::level::warn;
    if (const char* env = std::getenv("TILEFUSE_LOG"); env != nullptr && *env != '\0') {
      level = spdlog::level::from_str(env);
    }
    instance->set_level(level);
  });
  return *instance;
}

}  // namespace

void debug(std::string_view message) { logger().debug("{}", message); }
void info(std::string_view message) { logger().info("{}", message); }
void warn(std::string_view message) { logger().warn("{}", message); }
void error(std::string_view message) { logger().error("{}", message); }

}  // namespace tilefuse::log
