#pragma once

#include <chrono>
#include <fstream>
#include <mutex>
#include <string>

#include <json.hpp>

#include "upstreamqa/util.hpp"

namespace upstreamqa {

// Append-only JSONL event log. Machine-readable side of the run output; the
// human summary goes to stderr separately.
class RunLog {
 public:
  RunLog() = default;

  explicit RunLog(const std::filesystem::path& path) {
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    out_.open(path, std::ios::app | std::ios::binary);
    if (!out_) throw Error(ErrorKind::missing_input, "cannot open log file: " + path.string());
  }

  void event(const std::string& name, nlohmann::json fields = nlohmann::json::object()) {
    if (!out_.is_open()) return;
    fields["event"] = name;
    fields["ts"] = timestamp();
    std::lock_guard<std::mutex> lock(mu_);
    out_ << fields.dump() << "\n";
    out_.flush();
  }

 private:
  static std::string timestamp() {
    auto now = std::chrono::system_clock::now();
    auto t = std::chrono::system_clock::to_time_t(now);
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()) % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec,
                  static_cast<int>(ms.count()));
    return buf;
  }

  std::ofstream out_;
  std::mutex mu_;
};

}  // namespace upstreamqa
