#pragma once

#include <filesystem>
#include <string>

namespace tilefuse {

struct ProcessResult {
  int exit_code = 0;  // 128 + signal when killed by a signal
  bool timed_out = false;
};

/// Runs `command` through /bin/sh -c in `cwd`, stdin/stdout on /dev/null and
/// stderr redirected to `stderr_path`. A positive timeout kills the whole
/// process group once exceeded.
ProcessResult run_shell(const std::string& command, const std::filesystem::path& cwd,
                        const std::filesystem::path& stderr_path, double timeout_seconds = 0.0);

/// POSIX single-quoting for interpolation into a shell command.
std::string shell_quote(const std::string& s);

/// Trailing `limit` bytes of a text file, without the final newline.
std::string read_tail(const std::filesystem::path& path, std::size_t limit = 4096);

}  // namespace tilefuse
