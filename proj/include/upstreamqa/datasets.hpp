#pragma once

#include <array>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "upstreamqa/media.hpp"
#include "upstreamqa/util.hpp"

namespace upstreamqa {

using json = nlohmann::json;

enum class DatasetKind { nextqa, openeqa };

inline std::string to_string(DatasetKind k) {
  return k == DatasetKind::nextqa ? "nextqa" : "openeqa";
}

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  std::string v = to_lower(trim(s));
  if (v == "nextqa" || v == "next-qa" || v == "nextqa_mc") return DatasetKind::nextqa;
  if (v == "openeqa" || v == "open-eqa" || v == "em-eqa") return DatasetKind::openeqa;
  throw Error(ErrorKind::validation, "unknown dataset kind: " + s);
}

struct VideoRef {
  std::string video_id;
  std::string source_path;       // video file or frame directory
  bool is_frame_dir = false;
  int64_t frame_count = 0;       // for frame dirs: number of files discovered
  std::optional<double> duration_seconds;
};

struct QAItem {
  std::string item_id;
  DatasetKind dataset = DatasetKind::nextqa;
  VideoRef video;
  std::string question;
  std::optional<int> answer_key;                     // NExTQA gold choice 0..4
  std::optional<std::string> reference_answer;       // OpenEQA human answer
  std::optional<std::vector<std::string>> choices;   // NExTQA answer options, exactly 5
  std::optional<std::string> category;               // question type, verbatim
};

struct DurationWindow {
  double lo = 0.0;
  double hi = 0.0;
};

enum class VideoSelection { all, fewest_frames };

struct DatasetFilter {
  int64_t max_questions = std::numeric_limits<int64_t>::max();
  VideoSelection selection = VideoSelection::all;
  int64_t fewest_frames_n = 0;  // meaningful when selection == fewest_frames
  std::optional<DurationWindow> duration_window;

  static DatasetFilter all_videos() { return DatasetFilter{}; }
  static DatasetFilter fewest_frames(int64_t n) {
    if (n < 1) throw Error(ErrorKind::validation, "fewest_frames_n requires n >= 1");
    DatasetFilter f;
    f.selection = VideoSelection::fewest_frames;
    f.fewest_frames_n = n;
    return f;
  }
};

enum class OpenEqaSubset { hm3d, scannet };

inline const std::vector<std::string>& openeqa_categories() {
  static const std::vector<std::string> kCategories = {
      "object recognition",       "object localization", "attribute recognition",
      "spatial understanding",    "object state recognition",
      "functional reasoning",     "world knowledge"};
  return kCategories;
}

inline std::string normalize_category(std::string_view raw) {
  std::string out;
  bool pending_space = false;
  for (char c : raw) {
    unsigned char u = static_cast<unsigned char>(c);
    if (std::isspace(u) || c == '_' || c == '-') {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(std::tolower(u)));
  }
  return out;
}

inline bool is_known_openeqa_category(std::string_view raw) {
  std::string norm = normalize_category(raw);
  for (const auto& c : openeqa_categories())
    if (c == norm) return true;
  return false;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> parse_csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool in_quotes = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (c == '"') {
      if (in_quotes && i + 1 < line.size() && line[i + 1] == '"') {
        cell.push_back('"');
        ++i;
      } else {
        in_quotes = !in_quotes;
      }
    } else if (c == ',' && !in_quotes) {
      cells.push_back(cell);
      cell.clear();
    } else {
      cell.push_back(c);
    }
  }
  cells.push_back(cell);
  if (!cells.empty() && !cells.back().empty() && cells.back().back() == '\r')
    cells.back().pop_back();
  return cells;
}

inline int64_t parse_int_field(const std::string& raw, const std::string& what, size_t row) {
  try {
    size_t pos = 0;
    long long v = std::stoll(trim(raw), &pos);
    if (pos != trim(raw).size()) throw std::invalid_argument("trailing garbage");
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::validation,
                "malformed " + what + " at row " + std::to_string(row) + ": \"" + raw + "\"");
  }
}

}  // namespace detail

using WarnFn = std::function<void(const std::string&)>;

inline void default_warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

// Duration window, fewest-frames video selection, stable (video_id, item_id)
// order, then max_questions truncation. Works on any item list, loaded or
// prepared.
inline std::vector<QAItem> apply_filter(std::vector<QAItem> items, const DatasetFilter& filter,
                                        const WarnFn& warn = default_warn) {
  bool warned_no_duration = false;
  auto passes_window = [&](const QAItem& it) {
    if (!filter.duration_window) return true;
    if (filter.duration_window->lo > filter.duration_window->hi)
      throw Error(ErrorKind::validation, "duration window lower bound exceeds upper bound");
    if (!it.video.duration_seconds) {
      if (!warned_no_duration && warn) {
        warn("duration window requested but no duration is known for video " +
             it.video.video_id + "; window skipped for such videos");
        warned_no_duration = true;
      }
      return true;
    }
    double d = *it.video.duration_seconds;
    return d >= filter.duration_window->lo && d <= filter.duration_window->hi;
  };

  std::vector<QAItem> windowed;
  for (auto& it : items)
    if (passes_window(it)) windowed.push_back(std::move(it));

  // Video selection: ascending frame_count, video_id as tiebreak.
  std::set<std::string> selected;
  if (filter.selection == VideoSelection::fewest_frames) {
    if (filter.fewest_frames_n < 1)
      throw Error(ErrorKind::validation, "fewest_frames_n requires n >= 1");
    std::vector<std::pair<int64_t, std::string>> ordered;
    std::set<std::string> seen;
    for (const auto& it : windowed)
      if (seen.insert(it.video.video_id).second)
        ordered.emplace_back(it.video.frame_count, it.video.video_id);
    std::sort(ordered.begin(), ordered.end());
    for (size_t i = 0; i < ordered.size() && i < static_cast<size_t>(filter.fewest_frames_n); ++i)
      selected.insert(ordered[i].second);
  }

  std::vector<QAItem> out;
  for (auto& it : windowed) {
    if (filter.selection == VideoSelection::fewest_frames && selected.count(it.video.video_id) == 0)
      continue;
    out.push_back(std::move(it));
  }
  std::sort(out.begin(), out.end(), [](const QAItem& a, const QAItem& b) {
    if (a.video.video_id != b.video.video_id) return a.video.video_id < b.video.video_id;
    return a.item_id < b.item_id;
  });
  if (static_cast<int64_t>(out.size()) > filter.max_questions)
    out.resize(static_cast<size_t>(filter.max_questions));
  return out;
}

// ---------------------------------------------------------------------------
// NExTQA loader
//
// Manifest: CSV with header row naming at least
//   video, frame_count, question, answer, qid, type, a0..a4
// (width/height are tolerated and ignored; an optional duration column feeds
// the duration window filter).
//
// Video sources resolve relative to the manifest directory:
//   <dir>/frames/<video>/ when present, else <dir>/videos/<video>.mp4.

inline std::vector<QAItem> load_nextqa(const std::filesystem::path& manifest_path,
                                       const DatasetFilter& filter,
                                       const WarnFn& warn = default_warn) {
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorKind::missing_input, "manifest not found: " + manifest_path.string());
  const std::filesystem::path base = manifest_path.parent_path();

  std::string header_line;
  if (!std::getline(in, header_line))
    throw Error(ErrorKind::validation, "empty manifest: " + manifest_path.string());
  auto headers = detail::parse_csv_row(header_line);
  std::map<std::string, size_t> col;
  for (size_t i = 0; i < headers.size(); ++i) col[to_lower(trim(headers[i]))] = i;

  auto need = [&](const std::string& name) -> size_t {
    auto it = col.find(name);
    if (it == col.end())
      throw Error(ErrorKind::validation, "manifest missing column \"" + name + "\": " + manifest_path.string());
    return it->second;
  };
  const size_t c_video = need("video");
  const size_t c_frames = need("frame_count");
  const size_t c_question = need("question");
  const size_t c_answer = need("answer");
  const size_t c_qid = need("qid");
  const size_t c_type = need("type");
  std::array<size_t, 5> c_opts{};
  for (int i = 0; i < 5; ++i) c_opts[static_cast<size_t>(i)] = need("a" + std::to_string(i));
  std::optional<size_t> c_duration;
  if (auto it = col.find("duration"); it != col.end()) c_duration = it->second;
  else if (auto it2 = col.find("duration_seconds"); it2 != col.end()) c_duration = it2->second;

  struct VideoMeta {
    int64_t frame_count = 0;
    std::optional<double> duration;
  };
  std::map<std::string, VideoMeta> videos;
  std::vector<QAItem> raw_items;

  std::string line;
  size_t row = 1;  // header was row 1
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    auto cells = detail::parse_csv_row(line);
    size_t max_col = std::max({c_video, c_frames, c_question, c_answer, c_qid, c_type,
                               c_opts[0], c_opts[1], c_opts[2], c_opts[3], c_opts[4]});
    if (cells.size() <= max_col)
      throw Error(ErrorKind::validation,
                  "malformed row " + std::to_string(row) + ": expected at least " +
                      std::to_string(max_col + 1) + " columns, got " + std::to_string(cells.size()));

    QAItem item;
    item.dataset = DatasetKind::nextqa;
    std::string video_id = trim(cells[c_video]);
    if (video_id.empty())
      throw Error(ErrorKind::validation, "malformed row " + std::to_string(row) + ": empty video id");
    int64_t frame_count = detail::parse_int_field(cells[c_frames], "frame_count", row);
    if (frame_count < 1)
      throw Error(ErrorKind::validation,
                  "malformed row " + std::to_string(row) + ": frame_count must be >= 1");
    int64_t gold = detail::parse_int_field(cells[c_answer], "answer", row);
    if (gold < 0 || gold > 4)
      throw Error(ErrorKind::validation,
                  "row " + std::to_string(row) + ": gold index " + std::to_string(gold) +
                      " outside 0..4");

    item.item_id = video_id + "_" + trim(cells[c_qid]);
    item.question = trim(cells[c_question]);
    item.answer_key = static_cast<int>(gold);
    item.category = trim(cells[c_type]);
    std::vector<std::string> opts;
    for (int i = 0; i < 5; ++i) opts.push_back(trim(cells[c_opts[static_cast<size_t>(i)]]));
    item.choices = std::move(opts);

    std::optional<double> duration;
    if (c_duration && cells.size() > *c_duration && !trim(cells[*c_duration]).empty()) {
      try {
        duration = std::stod(trim(cells[*c_duration]));
      } catch (const std::exception&) {
        throw Error(ErrorKind::validation, "malformed duration at row " + std::to_string(row));
      }
    }

    auto [it, inserted] = videos.try_emplace(video_id, VideoMeta{frame_count, duration});
    if (!inserted && it->second.frame_count != frame_count)
      throw Error(ErrorKind::validation,
                  "row " + std::to_string(row) + ": frame_count disagrees with earlier rows for video " + video_id);

    item.video.video_id = video_id;
    item.video.frame_count = frame_count;
    item.video.duration_seconds = duration;
    std::filesystem::path frame_dir = base / "frames" / video_id;
    if (std::filesystem::is_directory(frame_dir)) {
      item.video.is_frame_dir = true;
      item.video.source_path = frame_dir.string();
      item.video.frame_count = static_cast<int64_t>(list_frame_files(frame_dir).size());
    } else {
      item.video.is_frame_dir = false;
      item.video.source_path = (base / "videos" / (video_id + ".mp4")).string();
    }
    raw_items.push_back(std::move(item));
  }

  return apply_filter(std::move(raw_items), filter, warn);
}

// ---------------------------------------------------------------------------
// OpenEQA loader
//
// Manifest: JSON array of objects with question, answer, episode_history,
// category, question_id. Episode histories resolve to frame directories at
// <manifest_dir>/frames/<episode_history>/.

inline std::vector<QAItem> load_openeqa(const std::filesystem::path& manifest_path,
                                        const std::set<OpenEqaSubset>& subsets) {
  std::string text = read_text_file(manifest_path);
  const std::filesystem::path base = manifest_path.parent_path();
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::validation, "manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!doc.is_array())
    throw Error(ErrorKind::validation, "manifest must be a JSON array: " + manifest_path.string());

  auto subset_of = [](const std::string& episode) -> std::optional<OpenEqaSubset> {
    std::string lo = to_lower(episode);
    if (lo.rfind("hm3d", 0) == 0) return OpenEqaSubset::hm3d;
    if (lo.rfind("scannet", 0) == 0) return OpenEqaSubset::scannet;
    return std::nullopt;
  };

  std::vector<QAItem> out;
  size_t idx = 0;
  for (const auto& entry : doc) {
    ++idx;
    auto require = [&](const char* key) -> std::string {
      if (!entry.contains(key) || !entry[key].is_string())
        throw Error(ErrorKind::validation,
                    "entry " + std::to_string(idx) + " missing string field \"" + key + "\"");
      return entry[key].get<std::string>();
    };
    std::string episode = require("episode_history");
    auto sub = subset_of(episode);
    if (!sub || subsets.count(*sub) == 0) continue;

    QAItem item;
    item.dataset = DatasetKind::openeqa;
    item.item_id = require("question_id");
    item.question = require("question");
    item.reference_answer = require("answer");
    std::string category = require("category");
    if (!is_known_openeqa_category(category))
      throw Error(ErrorKind::validation,
                  "entry " + std::to_string(idx) + " (" + item.item_id + "): unknown category \"" +
                      category + "\"");
    item.category = category;

    std::filesystem::path frame_dir = base / "frames" / episode;
    if (!std::filesystem::is_directory(frame_dir))
      throw Error(ErrorKind::missing_input,
                  "entry " + std::to_string(idx) + " (" + item.item_id +
                      "): dangling episode-history reference " + episode + " (no directory " +
                      frame_dir.string() + ")");
    auto files = list_frame_files(frame_dir);
    if (files.empty())
      throw Error(ErrorKind::missing_input,
                  "episode " + episode + " has no frame files in " + frame_dir.string());
    item.video.video_id = episode;
    item.video.is_frame_dir = true;
    item.video.source_path = frame_dir.string();
    item.video.frame_count = static_cast<int64_t>(files.size());
    out.push_back(std::move(item));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validation

struct Violation {
  std::string item_id;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

inline ValidationReport validate(const std::vector<QAItem>& items) {
  ValidationReport report;
  auto add = [&](const QAItem& it, const std::string& msg) {
    report.violations.push_back({it.item_id, msg});
  };
  for (const auto& it : items) {
    if (it.video.frame_count < 1) add(it, "frame_count must be >= 1");
    if (it.dataset == DatasetKind::nextqa) {
      if (!it.choices) add(it, "NExTQA item missing choices");
      else if (it.choices->size() != 5)
        add(it, "NExTQA item has " + std::to_string(it.choices->size()) + " choices, expected 5");
      if (!it.answer_key) add(it, "NExTQA item missing answer_key");
      else if (*it.answer_key < 0 || *it.answer_key > 4)
        add(it, "answer_key outside 0..4");
      if (it.reference_answer) add(it, "NExTQA item must not carry reference_answer");
    } else {
      if (!it.reference_answer) add(it, "OpenEQA item missing reference_answer");
      if (it.choices) add(it, "OpenEQA item must not carry choices");
      if (it.answer_key) add(it, "OpenEQA item must not carry answer_key");
      if (!it.category || !is_known_openeqa_category(*it.category))
        add(it, "OpenEQA item category missing or unknown");
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Prepared-item serialization (stable key order, byte-deterministic)

inline json item_to_json(const QAItem& it) {
  json j;
  j["item_id"] = it.item_id;
  j["dataset"] = to_string(it.dataset);
  j["question"] = it.question;
  j["video"] = {{"video_id", it.video.video_id},
                {"source_path", it.video.source_path},
                {"is_frame_dir", it.video.is_frame_dir},
                {"frame_count", it.video.frame_count}};
  if (it.video.duration_seconds) j["video"]["duration_seconds"] = *it.video.duration_seconds;
  if (it.answer_key) j["answer_key"] = *it.answer_key;
  if (it.reference_answer) j["reference_answer"] = *it.reference_answer;
  if (it.choices) j["choices"] = *it.choices;
  if (it.category) j["category"] = *it.category;
  return j;
}

inline QAItem item_from_json(const json& j) {
  QAItem it;
  it.item_id = j.at("item_id").get<std::string>();
  it.dataset = dataset_kind_from_string(j.at("dataset").get<std::string>());
  it.question = j.at("question").get<std::string>();
  const auto& v = j.at("video");
  it.video.video_id = v.at("video_id").get<std::string>();
  it.video.source_path = v.at("source_path").get<std::string>();
  it.video.is_frame_dir = v.at("is_frame_dir").get<bool>();
  it.video.frame_count = v.at("frame_count").get<int64_t>();
  if (v.contains("duration_seconds")) it.video.duration_seconds = v["duration_seconds"].get<double>();
  if (j.contains("answer_key")) it.answer_key = j["answer_key"].get<int>();
  if (j.contains("reference_answer")) it.reference_answer = j["reference_answer"].get<std::string>();
  if (j.contains("choices")) it.choices = j["choices"].get<std::vector<std::string>>();
  if (j.contains("category")) it.category = j["category"].get<std::string>();
  return it;
}

inline std::string items_to_json_text(const std::vector<QAItem>& items) {
  json arr = json::array();
  for (const auto& it : items) arr.push_back(item_to_json(it));
  return arr.dump(2) + "\n";
}

inline std::vector<QAItem> items_from_json_text(const std::string& text) {
  json arr = json::parse(text);
  std::vector<QAItem> items;
  for (const auto& j : arr) items.push_back(item_from_json(j));
  return items;
}

}  // namespace upstreamqa
