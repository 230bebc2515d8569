#pragma once

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "tilefuse/error.hpp"
#include "tilefuse/volume.hpp"

namespace fixture {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction unless
// TILEFUSE_KEEP_TEST_DIRS is set.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("tilefuse_" + tag + "_" + std::to_string(rd()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    if (std::getenv("TILEFUSE_KEEP_TEST_DIRS") == nullptr) {
      std::error_code ec;
      fs::remove_all(path_, ec);
    }
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline tilefuse::Volume random_volume(tilefuse::Dims dims, std::mt19937_64& rng, float lo = 0.0f, float hi = 100.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  tilefuse::Volume v(tilefuse::Grid::make(dims, {1, 1, 1}));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = u(rng);
  return v;
}

inline tilefuse::LabelVolume random_labels(tilefuse::Grid grid, int label_count, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, label_count - 1);
  tilefuse::LabelVolume v(std::move(grid), label_count);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<tilefuse::Label>(u(rng));
  return v;
}

// Code of the tilefuse::Error thrown by f, or nullopt when it returns.
inline std::optional<tilefuse::ErrorCode> code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const tilefuse::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

inline std::string run_quiet(const std::string& cmd) { return cmd + " >/dev/null 2>&1"; }

// std::system wrapper returning the process exit status.
inline int run_status(const std::string& cmd) {
  const int raw = std::system(cmd.c_str());
  if (raw == -1) return -1;
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : 128 + WTERMSIG(raw);
}

inline bool same_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  return std::vector<char>(std::istreambuf_iterator<char>(fa), {}) ==
         std::vector<char>(std::istreambuf_iterator<char>(fb), {});
}

}  // namespace fixture
