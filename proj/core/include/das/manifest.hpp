#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace das {

/// Git-style blob hash (SHA-1 over "blob <len>\0<content>"), hex encoded.
std::string git_blob_sha1(std::string_view content);
std::string git_blob_sha1_file(const std::string& path);

std::string iso8601_utc_now();

/// Provenance record written alongside every command's outputs. Identical
/// command + config + seed + input hashes reproduce identical output
/// hashes; the timestamps and timings are informational.
struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // path -> blob hash
  std::map<std::string, std::string> outputs;  // path -> blob hash
  std::string output_dir;
  std::string started_at;
  std::string finished_at;
  std::map<std::string, double> phase_seconds;

  std::string to_json_string() const;
  void write(const std::string& path) const;
};

/// Exclusive ownership of a run directory for the process lifetime.
/// Creating the lock fails if another process holds it (or a stale lock
/// was left behind).
class DirLock {
 public:
  explicit DirLock(const std::string& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
  bool owned_ = false;
};

}  // namespace das
