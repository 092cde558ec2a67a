#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "upstreamqa/evaluation.hpp"
#include "upstreamqa/pipeline.hpp"

namespace upstreamqa {

enum class ReportLayout { table1, table3 };

inline ReportLayout layout_from_string(const std::string& s) {
  if (s == "table1") return ReportLayout::table1;
  if (s == "table3") return ReportLayout::table3;
  throw Error(ErrorKind::validation, "unknown report layout: " + s + " (expected table1 or table3)");
}

enum class ReportFormat { text, csv, json };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "text" || s == "txt") return ReportFormat::text;
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  throw Error(ErrorKind::validation, "unknown report format: " + s);
}

struct LabeledReport {
  std::string lmm;
  std::optional<std::string> lrm;
  UpstreamTask task = UpstreamTask::none;
  AggregateReport report;
};

// One score cell as printed: full-precision value plus optional delta against
// the same-LMM baseline.
struct MatrixCell {
  double score = 0.0;
  std::optional<double> delta;
};

struct MatrixRow {
  std::string lmm;
  std::string lrm;   // "—" on baseline rows
  std::string task;  // "baseline", "object identification", "scene context"
  UpstreamTask task_kind = UpstreamTask::none;
  int64_t n = 0;
  std::vector<MatrixCell> cells;  // parallel to ResultsMatrix::columns
};

struct ResultsMatrix {
  std::string matrix_id;
  DatasetKind dataset = DatasetKind::nextqa;
  Metric metric = Metric::accuracy_percent;
  std::vector<std::string> columns;        // display headers
  std::vector<std::string> category_keys;  // "" = overall, else category name
  std::vector<MatrixRow> rows;
};

namespace detail {

inline std::string task_display(UpstreamTask task) {
  switch (task) {
    case UpstreamTask::none: return "baseline";
    case UpstreamTask::object_identification: return "object identification";
    case UpstreamTask::scene_context: return "scene context";
  }
  return "?";
}

inline double report_value(const AggregateReport& r, const std::string& category_key) {
  if (category_key.empty()) return r.overall;
  auto it = r.by_category.find(category_key);
  if (it == r.by_category.end())
    throw Error(ErrorKind::validation,
                "run " + r.run_id + " has no \"" + category_key + "\" category slice");
  return it->second.score;
}

// Scores print with the dataset's table precision: hundredths for accuracy
// percentages, tenths for LLM-Match.
inline int score_digits(DatasetKind dataset) { return dataset == DatasetKind::nextqa ? 2 : 1; }

}  // namespace detail

inline ResultsMatrix build_matrix(const std::vector<LabeledReport>& reports, ReportLayout layout,
                                  const std::string& matrix_id) {
  if (reports.empty()) {
    ResultsMatrix empty;
    empty.matrix_id = matrix_id;
    empty.columns = {"Overall"};
    empty.category_keys = {""};
    return empty;
  }

  const DatasetKind dataset = reports[0].report.dataset;
  for (const auto& r : reports)
    if (r.report.dataset != dataset)
      throw Error(ErrorKind::validation, "cannot mix datasets in one matrix (run " +
                                             r.report.run_id + " differs)");
  if (layout == ReportLayout::table3 && dataset != DatasetKind::openeqa)
    throw Error(ErrorKind::validation, "table3 layout requires OpenEQA category slices");

  ResultsMatrix matrix;
  matrix.matrix_id = matrix_id;
  matrix.dataset = dataset;
  matrix.metric = reports[0].report.metric;
  if (layout == ReportLayout::table1) {
    matrix.columns = {"Overall"};
    matrix.category_keys = {""};
  } else {
    matrix.columns = {"Overall", "Object Recognition", "World Knowledge"};
    matrix.category_keys = {"", "object recognition", "world knowledge"};
  }

  // Baseline per LMM; every non-baseline row deltas against it.
  std::map<std::string, const LabeledReport*> baselines;
  for (const auto& r : reports) {
    if (r.task != UpstreamTask::none) continue;
    if (!baselines.emplace(r.lmm, &r).second)
      throw Error(ErrorKind::validation, "two baseline runs for LMM " + r.lmm);
  }

  auto make_row = [&](const LabeledReport& r) {
    MatrixRow row;
    row.lmm = r.lmm;
    row.lrm = r.lrm.value_or("—");
    row.task = detail::task_display(r.task);
    row.task_kind = r.task;
    row.n = r.report.n;
    const LabeledReport* baseline = nullptr;
    if (r.task != UpstreamTask::none) {
      auto it = baselines.find(r.lmm);
      if (it == baselines.end())
        throw Error(ErrorKind::validation,
                    "no baseline run for LMM " + r.lmm + " (needed by run " + r.report.run_id + ")");
      baseline = it->second;
    }
    for (const auto& key : matrix.category_keys) {
      MatrixCell cell;
      cell.score = detail::report_value(r.report, key);
      if (baseline) cell.delta = cell.score - detail::report_value(baseline->report, key);
      row.cells.push_back(cell);
    }
    return row;
  };

  // Section order mirrors the results table: baseline, object identification,
  // scene context; rows sort by (lmm, lrm) within a section.
  for (UpstreamTask section : {UpstreamTask::none, UpstreamTask::object_identification,
                               UpstreamTask::scene_context}) {
    std::vector<const LabeledReport*> in_section;
    for (const auto& r : reports)
      if (r.task == section) in_section.push_back(&r);
    std::sort(in_section.begin(), in_section.end(),
              [](const LabeledReport* a, const LabeledReport* b) {
                if (a->lmm != b->lmm) return a->lmm < b->lmm;
                return a->lrm.value_or("") < b->lrm.value_or("");
              });
    for (const auto* r : in_section) matrix.rows.push_back(make_row(*r));
  }
  return matrix;
}

// ---------------------------------------------------------------------------
// Emission

namespace detail {

inline std::string pad_right(const std::string& s, size_t width) {
  return s + std::string(width > s.size() ? width - s.size() : 0, ' ');
}

inline std::string pad_left(const std::string& s, size_t width) {
  return std::string(width > s.size() ? width - s.size() : 0, ' ') + s;
}

// Display width, counting the em-dash (3 bytes in UTF-8) as one column.
inline size_t display_width(const std::string& s) {
  size_t w = 0;
  for (size_t i = 0; i < s.size();) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    i += c < 0x80 ? 1 : c < 0xE0 ? 2 : c < 0xF0 ? 3 : 4;
    ++w;
  }
  return w;
}

inline std::string pad_right_display(const std::string& s, size_t width) {
  size_t w = display_width(s);
  return s + std::string(width > w ? width - w : 0, ' ');
}

}  // namespace detail

inline std::string emit_text(const ResultsMatrix& matrix) {
  const int digits = detail::score_digits(matrix.dataset);
  struct Col {
    std::string header;
    bool numeric;
  };
  std::vector<Col> cols{{"LMM", false}, {"LRM", false}, {"Task", false}, {"N", true}};
  for (const auto& c : matrix.columns) {
    cols.push_back({c, true});
    cols.push_back({"Δ " + c, true});
  }

  std::vector<std::vector<std::string>> table;
  for (const auto& row : matrix.rows) {
    std::vector<std::string> cells{row.lmm, row.lrm, row.task, std::to_string(row.n)};
    for (const auto& cell : row.cells) {
      cells.push_back(format_fixed(cell.score, digits));
      cells.push_back(cell.delta ? format_signed_fixed(*cell.delta, digits) : "");
    }
    table.push_back(std::move(cells));
  }

  std::vector<size_t> widths(cols.size());
  for (size_t i = 0; i < cols.size(); ++i) {
    widths[i] = detail::display_width(cols[i].header);
    for (const auto& row : table) widths[i] = std::max(widths[i], detail::display_width(row[i]));
  }

  std::string out;
  out += "matrix: " + matrix.matrix_id + "\n";
  out += "dataset: " + to_string(matrix.dataset) + "  metric: " + to_string(matrix.metric) + "\n\n";
  for (size_t i = 0; i < cols.size(); ++i) {
    if (i) out += " | ";
    out += detail::pad_right_display(cols[i].header, widths[i]);
  }
  out += "\n";
  for (size_t i = 0; i < cols.size(); ++i) {
    if (i) out += "-+-";
    out += std::string(widths[i], '-');
  }
  out += "\n";
  for (const auto& row : table) {
    for (size_t i = 0; i < cols.size(); ++i) {
      if (i) out += " | ";
      out += cols[i].numeric ? detail::pad_left(row[i], widths[i])
                             : detail::pad_right_display(row[i], widths[i]);
    }
    out += "\n";
  }
  return out;
}

namespace detail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

inline std::string column_slug(const std::string& header) {
  std::string out;
  for (char c : header) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    else if (!out.empty() && out.back() != '_')
      out.push_back('_');
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

}  // namespace detail

inline std::string emit_csv(const ResultsMatrix& matrix) {
  const int digits = detail::score_digits(matrix.dataset);
  std::string out = "lmm,lrm,task,n";
  for (const auto& c : matrix.columns) {
    std::string slug = detail::column_slug(c);
    out += "," + slug + "," + slug + "_delta";
  }
  out += "\n";
  for (const auto& row : matrix.rows) {
    out += detail::csv_escape(row.lmm) + "," + detail::csv_escape(row.lrm) + "," +
           detail::csv_escape(row.task) + "," + std::to_string(row.n);
    for (const auto& cell : row.cells) {
      out += "," + format_fixed(cell.score, digits);
      out += ",";
      if (cell.delta) out += format_signed_fixed(*cell.delta, digits);
    }
    out += "\n";
  }
  return out;
}

// Mirrors every printed cell (rounded string) alongside the full-precision
// value so downstream tooling never re-derives the rounding.
inline std::string emit_json(const ResultsMatrix& matrix) {
  const int digits = detail::score_digits(matrix.dataset);
  nlohmann::json j;
  j["matrix_id"] = matrix.matrix_id;
  j["dataset"] = to_string(matrix.dataset);
  j["metric"] = to_string(matrix.metric);
  j["columns"] = matrix.columns;
  j["rows"] = nlohmann::json::array();
  for (const auto& row : matrix.rows) {
    nlohmann::json r;
    r["lmm"] = row.lmm;
    r["lrm"] = row.lrm;
    r["task"] = row.task;
    r["n"] = row.n;
    r["cells"] = nlohmann::json::array();
    for (size_t i = 0; i < row.cells.size(); ++i) {
      nlohmann::json cell;
      cell["column"] = matrix.columns[i];
      cell["score"] = row.cells[i].score;
      cell["printed"] = format_fixed(row.cells[i].score, digits);
      if (row.cells[i].delta) {
        cell["delta"] = *row.cells[i].delta;
        cell["delta_printed"] = format_signed_fixed(*row.cells[i].delta, digits);
      }
      r["cells"].push_back(cell);
    }
    j["rows"].push_back(r);
  }
  return j.dump(2) + "\n";
}

inline std::string emit(const ResultsMatrix& matrix, ReportFormat format) {
  switch (format) {
    case ReportFormat::text: return emit_text(matrix);
    case ReportFormat::csv: return emit_csv(matrix);
    case ReportFormat::json: return emit_json(matrix);
  }
  throw Error(ErrorKind::validation, "unhandled report format");
}

inline std::filesystem::path write_report(const ResultsMatrix& matrix, ReportFormat format,
                                          const std::filesystem::path& runs_dir) {
  const char* ext = format == ReportFormat::text ? ".txt"
                    : format == ReportFormat::csv ? ".csv"
                                                  : ".json";
  auto path = runs_dir / "_reports" / (path_safe(matrix.matrix_id) + ext);
  write_file_atomic(path, emit(matrix, format));
  return path;
}

// ---------------------------------------------------------------------------
// Loading labeled reports back from run directories

inline LabeledReport load_labeled_report(const std::filesystem::path& run_dir) {
  auto config_path = run_dir / "config.json";
  if (!std::filesystem::is_regular_file(config_path))
    throw Error(ErrorKind::missing_input, "no config.json in " + run_dir.string());
  ExperimentConfig config = config_from_json(nlohmann::json::parse(read_text_file(config_path)));
  ScoreSet scores = read_score_set(run_dir);
  LabeledReport labeled;
  labeled.lmm = config.lmm.model_name;
  if (config.lrm) labeled.lrm = config.lrm->model_name;
  labeled.task = config.upstream_task;
  labeled.report = aggregate_scores(scores);
  return labeled;
}

}  // namespace upstreamqa
