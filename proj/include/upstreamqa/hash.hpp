#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include <openssl/evp.h>

#include "upstreamqa/util.hpp"

namespace upstreamqa {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (ctx_ == nullptr || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1)
      throw std::runtime_error("sha256 init failed");
  }
  ~Sha256() {
    if (ctx_ != nullptr) EVP_MD_CTX_free(ctx_);
  }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t len) {
    if (EVP_DigestUpdate(ctx_, data, len) != 1) throw std::runtime_error("sha256 update failed");
  }
  void update(std::string_view s) { update(s.data(), s.size()); }

  // Finalizes the digest; the object must not be updated afterwards.
  std::string hex_digest() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned int out_len = 0;
    if (EVP_DigestFinal_ex(ctx_, out, &out_len) != 1)
      throw std::runtime_error("sha256 final failed");
    static const char* kHex = "0123456789abcdef";
    std::string hex;
    hex.reserve(out_len * 2);
    for (unsigned int i = 0; i < out_len; ++i) {
      hex.push_back(kHex[out[i] >> 4]);
      hex.push_back(kHex[out[i] & 0x0f]);
    }
    return hex;
  }

 private:
  EVP_MD_CTX* ctx_;
};

inline std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data);
  return h.hex_digest();
}

// Shortest round-trip decimal form; identical across platforms for IEEE doubles.
inline std::string canonical_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Length-prefixed field stream feeding a SHA-256. The prefix makes the
// encoding unambiguous regardless of field contents.
class CanonicalHasher {
 public:
  explicit CanonicalHasher(std::string_view domain_tag) { field(domain_tag); }

  void field(std::string_view bytes) {
    uint64_t len = bytes.size();
    unsigned char prefix[8];
    for (int i = 0; i < 8; ++i) prefix[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    sha_.update(prefix, sizeof(prefix));
    sha_.update(bytes.data(), bytes.size());
  }
  void field(const void* data, size_t len) {
    field(std::string_view(static_cast<const char*>(data), len));
  }
  void field_u64(uint64_t v) { field(std::to_string(v)); }
  void field_i64(int64_t v) { field(std::to_string(v)); }
  void field_double(double v) { field(canonical_double(v)); }

  std::string hex() { return sha_.hex_digest(); }

 private:
  Sha256 sha_;
};

}  // namespace upstreamqa
