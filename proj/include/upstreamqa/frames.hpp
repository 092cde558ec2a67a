#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "upstreamqa/datasets.hpp"
#include "upstreamqa/media.hpp"
#include "upstreamqa/util.hpp"

namespace upstreamqa {

struct FrameSet {
  std::string video_id;
  std::vector<int64_t> indices;
  std::vector<MediaPayload> images;
  int64_t sample_budget = 0;
};

// Uniform sampling anchored at frame 0: index_i = floor(i * N / k) with
// k = min(budget, N). Pure integer math, identical on every platform.
inline std::vector<int64_t> sample_indices(int64_t frame_count, int64_t budget) {
  if (frame_count < 1) throw Error(ErrorKind::validation, "frame_count must be >= 1");
  if (budget < 1) throw Error(ErrorKind::validation, "budget must be >= 1");
  int64_t k = std::min(budget, frame_count);
  std::vector<int64_t> indices;
  indices.reserve(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i) indices.push_back(i * frame_count / k);
  return indices;
}

struct ExtractionConfig {
  // Shell command run for video-file sources. Substitution slots:
  //   {input}           quoted source path
  //   {output_pattern}  quoted printf-style output path (%d, 1-based)
  //   {indices_expr}    eq(n\,i)+eq(n\,j)+... selector for ffmpeg
  //   {indices_csv}     comma-separated raw indices
  std::string tool_template =
      "ffmpeg -nostdin -loglevel error -i {input} -vf \"select='{indices_expr}'\" "
      "-vsync 0 -q:v 2 {output_pattern}";
  int size_cap = 768;  // max long-edge pixels sent to providers
  std::string cache_dir = "cache";
  bool use_cache = true;
  // Receives the extraction tool's combined stdout/stderr for run logs.
  std::function<void(const std::string&)> tool_output_sink;
};

namespace detail {

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += "'\\''";
    else out.push_back(c);
  }
  out.push_back('\'');
  return out;
}

inline std::string replace_all(std::string text, const std::string& needle, const std::string& value) {
  size_t pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    text.replace(pos, needle.size(), value);
    pos += value.size();
  }
  return text;
}

struct ToolResult {
  int exit_status = 0;
  std::string output;  // combined stdout + stderr
};

inline ToolResult run_tool(const std::string& command) {
  std::string cmd = command + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (pipe == nullptr) throw Error(ErrorKind::missing_input, "cannot launch extraction tool");
  ToolResult result;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) result.output.append(buf, n);
  int rc = ::pclose(pipe);
  result.exit_status = (rc >= 0 && WIFEXITED(rc)) ? WEXITSTATUS(rc) : -1;
  return result;
}

// Decode once to learn dimensions; re-encode only when the long edge exceeds
// the cap, otherwise pass the original bytes through untouched.
inline MediaPayload fit_to_cap(std::vector<unsigned char> bytes, const std::string& media_type,
                               int size_cap) {
  cv::Mat img = cv::imdecode(cv::Mat(1, static_cast<int>(bytes.size()), CV_8UC1, bytes.data()),
                             cv::IMREAD_COLOR);
  if (img.empty()) throw Error(ErrorKind::validation, "cannot decode frame image");
  MediaPayload payload;
  int long_edge = std::max(img.cols, img.rows);
  if (size_cap > 0 && long_edge > size_cap) {
    double scale = static_cast<double>(size_cap) / static_cast<double>(long_edge);
    int w = std::max(1, static_cast<int>(std::lround(img.cols * scale)));
    int h = std::max(1, static_cast<int>(std::lround(img.rows * scale)));
    cv::Mat resized;
    cv::resize(img, resized, cv::Size(w, h), 0, 0, cv::INTER_AREA);
    std::vector<unsigned char> encoded;
    const char* ext = media_type == "image/png" ? ".png" : ".jpg";
    if (!cv::imencode(ext, resized, encoded))
      throw Error(ErrorKind::validation, "cannot encode downscaled frame");
    payload.bytes = std::move(encoded);
    payload.media_type = media_type == "image/png" ? "image/png" : "image/jpeg";
    payload.width = w;
    payload.height = h;
  } else {
    payload.bytes = std::move(bytes);
    payload.media_type = media_type;
    payload.width = img.cols;
    payload.height = img.rows;
  }
  return payload;
}

inline std::filesystem::path frame_cache_dir(const ExtractionConfig& cfg,
                                             const std::string& video_id, int64_t budget) {
  return std::filesystem::path(cfg.cache_dir) / "frames" / path_safe(video_id) /
         std::to_string(budget);
}

}  // namespace detail

// Materializes the sampled frames for one video, downscaled to the size cap
// and cached under cache/frames/<video_id>/<budget>/<index>.<ext>.
inline FrameSet materialize(const VideoRef& video, const std::vector<int64_t>& indices,
                            int64_t sample_budget, const ExtractionConfig& cfg) {
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= video.frame_count)
      throw Error(ErrorKind::validation,
                  "frame index " + std::to_string(indices[i]) + " out of range for video " +
                      video.video_id + " (frame_count " + std::to_string(video.frame_count) + ")");
    if (i > 0 && indices[i] <= indices[i - 1])
      throw Error(ErrorKind::validation, "frame indices must be strictly increasing");
  }

  FrameSet set;
  set.video_id = video.video_id;
  set.indices = indices;
  set.sample_budget = sample_budget;

  auto cache_dir = detail::frame_cache_dir(cfg, video.video_id, sample_budget);
  if (cfg.use_cache) {
    std::vector<MediaPayload> cached;
    bool all_present = true;
    for (int64_t idx : indices) {
      bool found = false;
      for (const char* ext : {".jpg", ".png"}) {
        auto p = cache_dir / (std::to_string(idx) + ext);
        if (std::filesystem::is_regular_file(p)) {
          MediaPayload payload = detail::fit_to_cap(read_binary_file(p),
                                                    media_type_for_extension(ext), cfg.size_cap);
          cached.push_back(std::move(payload));
          found = true;
          break;
        }
      }
      if (!found) {
        all_present = false;
        break;
      }
    }
    if (all_present) {
      set.images = std::move(cached);
      return set;
    }
  }

  std::vector<MediaPayload> images;
  if (video.is_frame_dir) {
    auto files = list_frame_files(video.source_path);
    if (static_cast<int64_t>(files.size()) != video.frame_count)
      throw Error(ErrorKind::validation,
                  "frame directory " + video.source_path + " holds " +
                      std::to_string(files.size()) + " files, expected " +
                      std::to_string(video.frame_count));
    for (int64_t idx : indices) {
      const auto& file = files[static_cast<size_t>(idx)];
      auto media_type = media_type_for_extension(file.extension().string());
      images.push_back(detail::fit_to_cap(read_binary_file(file), media_type, cfg.size_cap));
    }
  } else {
    if (!std::filesystem::is_regular_file(video.source_path))
      throw Error(ErrorKind::missing_input, "video file not found: " + video.source_path);
    std::filesystem::path tmp_dir =
        std::filesystem::temp_directory_path() /
        ("uqa_extract_" + path_safe(video.video_id) + "_" + std::to_string(std::random_device{}()));
    ensure_dir(tmp_dir);
    std::string pattern = (tmp_dir / "frame_%d.jpg").string();

    std::string expr;
    std::string csv;
    for (size_t i = 0; i < indices.size(); ++i) {
      if (i > 0) {
        expr += "+";
        csv += ",";
      }
      expr += "eq(n\\," + std::to_string(indices[i]) + ")";
      csv += std::to_string(indices[i]);
    }
    std::string cmd = cfg.tool_template;
    cmd = detail::replace_all(cmd, "{input}", detail::shell_quote(video.source_path));
    cmd = detail::replace_all(cmd, "{output_pattern}", detail::shell_quote(pattern));
    cmd = detail::replace_all(cmd, "{indices_expr}", expr);
    cmd = detail::replace_all(cmd, "{indices_csv}", csv);

    auto result = detail::run_tool(cmd);
    if (cfg.tool_output_sink) cfg.tool_output_sink(result.output);
    if (result.exit_status != 0) {
      std::filesystem::remove_all(tmp_dir);
      throw Error(ErrorKind::missing_input,
                  "extraction tool failed with status " + std::to_string(result.exit_status) +
                      " for video " + video.video_id + ": " + trim(result.output));
    }
    for (size_t i = 0; i < indices.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof(name), "frame_%d.jpg", static_cast<int>(i + 1));
      auto p = tmp_dir / name;
      if (!std::filesystem::is_regular_file(p)) {
        std::filesystem::remove_all(tmp_dir);
        throw Error(ErrorKind::missing_input,
                    "extraction produced no frame for index " + std::to_string(indices[i]) +
                        " of video " + video.video_id);
      }
      images.push_back(detail::fit_to_cap(read_binary_file(p), "image/jpeg", cfg.size_cap));
    }
    std::filesystem::remove_all(tmp_dir);
  }

  if (cfg.use_cache) {
    for (size_t i = 0; i < indices.size(); ++i) {
      const char* ext = images[i].media_type == "image/png" ? ".png" : ".jpg";
      write_file_atomic(cache_dir / (std::to_string(indices[i]) + ext), images[i].bytes);
    }
  }
  set.images = std::move(images);
  return set;
}

}  // namespace upstreamqa
