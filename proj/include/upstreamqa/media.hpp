#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "upstreamqa/util.hpp"

namespace upstreamqa {

// One encoded attachment as sent to a provider. Frames carry their pixel
// dimensions; non-image payloads (audio pass-through) leave them at 0.
struct MediaPayload {
  std::string media_type;
  std::vector<unsigned char> bytes;
  int width = 0;
  int height = 0;
};

inline std::string media_type_for_extension(std::string ext) {
  ext = to_lower(ext);
  if (!ext.empty() && ext[0] == '.') ext.erase(0, 1);
  if (ext == "jpg" || ext == "jpeg") return "image/jpeg";
  if (ext == "png") return "image/png";
  if (ext == "webp") return "image/webp";
  if (ext == "bmp") return "image/bmp";
  if (ext == "m4a") return "audio/mp4";
  if (ext == "mp3") return "audio/mpeg";
  if (ext == "wav") return "audio/wav";
  return "application/octet-stream";
}

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = to_lower(p.extension().string());
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".webp" || ext == ".bmp";
}

// Frame directories hold zero-padded, numerically ordered image files, so a
// lexicographic sort recovers temporal order.
inline std::vector<std::filesystem::path> list_frame_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw Error(ErrorKind::missing_input, "not a frame directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename().string() < b.filename().string(); });
  return files;
}

}  // namespace upstreamqa
