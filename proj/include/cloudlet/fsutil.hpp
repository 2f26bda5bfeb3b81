#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace cloudlet {

namespace fs = std::filesystem;

// Write-temp-then-rename. Readers observe either the old or the new content.
void atomic_write_file(const fs::path& path, std::string_view content, bool sync = true);

std::string read_file(const fs::path& path);

// Sum of regular-file sizes below |root|.
std::uint64_t directory_bytes(const fs::path& root);

void fsync_directory(const fs::path& dir);

// Exclusive advisory lock on <dir>/.lock holding the owner pid.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;
  DirLock(DirLock&& other) noexcept;
  DirLock& operator=(DirLock&& other) noexcept;

 private:
  int fd_ = -1;
};

}  // namespace cloudlet
