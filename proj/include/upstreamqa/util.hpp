#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace upstreamqa {

// Error categories map 1:1 onto CLI exit statuses (1/2/3).
enum class ErrorKind { validation, missing_input, provider };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  int exit_status() const {
    switch (kind_) {
      case ErrorKind::validation: return 1;
      case ErrorKind::missing_input: return 2;
      case ErrorKind::provider: return 3;
    }
    return 1;
  }

 private:
  ErrorKind kind_;
};

inline std::string trim(std::string_view s) {
  size_t b = 0;
  while (b < s.size() && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  size_t e = s.size();
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  for (size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::optional<std::string> env_var(const std::string& name) {
  const char* v = std::getenv(name.c_str());
  if (v == nullptr) return std::nullopt;
  return std::string(v);
}

// Identifier made safe for use as a path component. Dataset ids may contain
// '/' (episode histories) which would otherwise nest directories.
inline std::string path_safe(std::string_view id) {
  std::string out;
  out.reserve(id.size());
  for (char c : id) {
    bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    out.push_back(ok ? c : '_');
  }
  if (out.empty()) out = "_";
  return out;
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_input, "cannot open file: " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<unsigned char> read_binary_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::missing_input, "cannot open file: " + p.string());
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return data;
}

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec && !std::filesystem::is_directory(p))
    throw Error(ErrorKind::missing_input, "cannot create directory " + p.string() + ": " + ec.message());
}

// Write-temp-then-rename so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& p, std::string_view bytes) {
  if (p.has_parent_path()) ensure_dir(p.parent_path());
  static std::atomic<uint64_t> counter{0};
  static const uint64_t nonce = std::random_device{}();
  std::filesystem::path tmp = p;
  tmp += ".tmp" + std::to_string(nonce) + "_" + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::missing_input, "cannot write file: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::missing_input, "short write: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, p, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error(ErrorKind::missing_input, "cannot rename " + tmp.string() + " -> " + p.string() + ": " + ec.message());
  }
}

inline void write_file_atomic(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  write_file_atomic(p, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

// Fixed-point decimal string, ties rounded away from zero. Built from the
// scaled integer so the result never depends on printf tie behavior.
inline std::string format_fixed(double v, int decimals) {
  long long scale = 1;
  for (int i = 0; i < decimals; ++i) scale *= 10;
  long long r = std::llround(v * static_cast<double>(scale));
  bool neg = r < 0;
  unsigned long long mag = neg ? 0ULL - static_cast<unsigned long long>(r)
                               : static_cast<unsigned long long>(r);
  std::string digits = std::to_string(mag);
  if (decimals == 0) return (neg ? "-" : "") + digits;
  if (digits.size() <= static_cast<size_t>(decimals))
    digits.insert(0, static_cast<size_t>(decimals) + 1 - digits.size(), '0');
  digits.insert(digits.size() - static_cast<size_t>(decimals), 1, '.');
  return (neg ? "-" : "") + digits;
}

inline std::string format_signed_fixed(double v, int decimals) {
  std::string s = format_fixed(v, decimals);
  if (!s.empty() && s[0] != '-') s.insert(0, 1, '+');
  return s;
}

}  // namespace upstreamqa
