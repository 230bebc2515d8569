#pragma once

#include <string_view>

namespace tilefuse::log {

// Level is read once from TILEFUSE_LOG (trace|debug|info|warn|error|off).
void debug(std::string_view message);
void info(std::string_view message);
void warn(std::string_view message);
void error(std::string_view message);

}  // namespace tilefuse::log
