#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "upstreamqa/datasets.hpp"
#include "upstreamqa/prompts.hpp"
#include "upstreamqa/providers.hpp"

namespace upstreamqa {

enum class Metric { accuracy_percent, llm_match_C };

inline std::string to_string(Metric m) {
  return m == Metric::accuracy_percent ? "accuracy_percent" : "llm_match_C";
}

inline Metric metric_from_string(const std::string& s) {
  if (s == "accuracy_percent") return Metric::accuracy_percent;
  if (s == "llm_match_C") return Metric::llm_match_C;
  throw Error(ErrorKind::validation, "unknown metric: " + s);
}

struct JudgeScore {
  std::string item_id;
  int sigma = 0;  // 1..5
  std::string judge_raw_text;
  std::string judge_request_hash;
};

struct CategoryScore {
  int64_t n = 0;
  double score = 0.0;
};

struct AggregateReport {
  std::string run_id;
  DatasetKind dataset = DatasetKind::nextqa;
  int64_t n = 0;
  Metric metric = Metric::accuracy_percent;
  double overall = 0.0;
  std::map<std::string, CategoryScore> by_category;
  std::optional<std::map<std::string, double>> deltas_vs_baseline;
};

// What the downstream model produced for one item, independent of how the
// pipeline stores it.
struct Prediction {
  std::string item_id;
  std::optional<int> choice;        // NExTQA
  std::optional<std::string> text;  // OpenEQA
};

// ---------------------------------------------------------------------------
// MCQ answer extraction

namespace detail {

inline bool is_open_punct(char c) {
  return c == '(' || c == '[' || c == '*' || c == '#' || c == '"' || c == '\'';
}

inline bool is_close_punct(char c) {
  return c == '.' || c == ')' || c == ']' || c == ':' || c == ',' || c == ';' || c == '*' ||
         c == '"' || c == '\'' || c == '-';
}

// A letter counts only when the following character cannot extend it into a
// word ("B." yes, "Brown" no).
inline std::optional<int> standalone_letter_at(const std::string& s, size_t pos,
                                               size_t num_choices) {
  if (pos >= s.size()) return std::nullopt;
  char c = static_cast<char>(std::toupper(static_cast<unsigned char>(s[pos])));
  if (c < 'A' || c >= static_cast<char>('A' + num_choices)) return std::nullopt;
  if (pos + 1 < s.size()) {
    unsigned char next = static_cast<unsigned char>(s[pos + 1]);
    if (std::isalnum(next)) return std::nullopt;
    if (!std::isspace(next) && !is_close_punct(s[pos + 1]) && s[pos + 1] != '\n')
      return std::nullopt;
  }
  return c - 'A';
}

inline std::string normalize_answer_text(const std::string& s) {
  std::string out;
  bool in_space = true;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!in_space) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

}  // namespace detail

// Rule cascade: (1) leading standalone letter, (2) "Answer: X" anywhere,
// (3) whole response equals one option text. First hit wins; total function.
inline std::optional<int> extract_choice(const std::string& response_text,
                                         const std::vector<std::string>& choices) {
  const size_t num_choices = choices.size();
  if (num_choices == 0 || num_choices > 26) return std::nullopt;

  // Rule 1: leading letter, allowing opening punctuation/markdown before it.
  {
    size_t pos = 0;
    while (pos < response_text.size() &&
           (std::isspace(static_cast<unsigned char>(response_text[pos])) ||
            detail::is_open_punct(response_text[pos])))
      ++pos;
    if (auto idx = detail::standalone_letter_at(response_text, pos, num_choices)) return idx;
  }

  // Rule 2: "answer[ is][:] X" at any position, case-insensitive.
  {
    std::string lower = to_lower(response_text);
    size_t from = 0;
    while (true) {
      size_t hit = lower.find("answer", from);
      if (hit == std::string::npos) break;
      size_t pos = hit + 6;
      while (pos < lower.size() && lower[pos] == ' ') ++pos;
      if (pos + 1 < lower.size() && lower.compare(pos, 2, "is") == 0 &&
          (pos + 2 >= lower.size() || !std::isalnum(static_cast<unsigned char>(lower[pos + 2]))))
        pos += 2;
      while (pos < response_text.size() &&
             (std::isspace(static_cast<unsigned char>(response_text[pos])) ||
              response_text[pos] == ':' || response_text[pos] == '-' ||
              detail::is_open_punct(response_text[pos])))
        ++pos;
      if (auto idx = detail::standalone_letter_at(response_text, pos, num_choices)) return idx;
      from = hit + 1;
    }
  }

  // Rule 3: full-option echo.
  {
    std::string norm = detail::normalize_answer_text(response_text);
    for (size_t i = 0; i < choices.size(); ++i)
      if (norm == detail::normalize_answer_text(choices[i])) return static_cast<int>(i);
  }

  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Per-item score records (the scores.json payload)

struct ItemScore {
  std::string item_id;
  std::string category;
  // accuracy fields
  std::optional<int> predicted_choice;
  std::optional<int> gold_choice;
  std::optional<bool> correct;
  // llm-match fields
  std::optional<int> sigma;
  std::optional<std::string> judge_raw_text;
  std::optional<std::string> judge_request_hash;
};

struct ScoreSet {
  std::string run_id;
  DatasetKind dataset = DatasetKind::nextqa;
  Metric metric = Metric::accuracy_percent;
  std::vector<ItemScore> items;  // sorted by item_id
};

inline nlohmann::json score_set_to_json(const ScoreSet& s) {
  nlohmann::json j;
  j["run_id"] = s.run_id;
  j["dataset"] = to_string(s.dataset);
  j["metric"] = to_string(s.metric);
  j["items"] = nlohmann::json::array();
  for (const auto& it : s.items) {
    nlohmann::json e;
    e["item_id"] = it.item_id;
    e["category"] = it.category;
    if (it.predicted_choice) e["predicted_choice"] = *it.predicted_choice;
    if (it.gold_choice) e["gold_choice"] = *it.gold_choice;
    if (it.correct) e["correct"] = *it.correct;
    if (it.sigma) e["sigma"] = *it.sigma;
    if (it.judge_raw_text) e["judge_raw_text"] = *it.judge_raw_text;
    if (it.judge_request_hash) e["judge_request_hash"] = *it.judge_request_hash;
    j["items"].push_back(e);
  }
  return j;
}

inline ScoreSet score_set_from_json(const nlohmann::json& j) {
  ScoreSet s;
  s.run_id = j.at("run_id").get<std::string>();
  s.dataset = dataset_kind_from_string(j.at("dataset").get<std::string>());
  s.metric = metric_from_string(j.at("metric").get<std::string>());
  for (const auto& e : j.at("items")) {
    ItemScore it;
    it.item_id = e.at("item_id").get<std::string>();
    it.category = e.value("category", std::string());
    if (e.contains("predicted_choice")) it.predicted_choice = e["predicted_choice"].get<int>();
    if (e.contains("gold_choice")) it.gold_choice = e["gold_choice"].get<int>();
    if (e.contains("correct")) it.correct = e["correct"].get<bool>();
    if (e.contains("sigma")) it.sigma = e["sigma"].get<int>();
    if (e.contains("judge_raw_text")) it.judge_raw_text = e["judge_raw_text"].get<std::string>();
    if (e.contains("judge_request_hash"))
      it.judge_request_hash = e["judge_request_hash"].get<std::string>();
    s.items.push_back(std::move(it));
  }
  return s;
}

inline void write_score_set(const std::filesystem::path& run_dir, const ScoreSet& s) {
  write_file_atomic(run_dir / "scores.json", score_set_to_json(s).dump(2) + "\n");
}

inline ScoreSet read_score_set(const std::filesystem::path& run_dir) {
  auto p = run_dir / "scores.json";
  if (!std::filesystem::is_regular_file(p))
    throw Error(ErrorKind::missing_input, "score file not found: " + p.string());
  return score_set_from_json(nlohmann::json::parse(read_text_file(p)));
}

// ---------------------------------------------------------------------------
// Accuracy (NExTQA)

inline ScoreSet score_accuracy_items(const std::vector<Prediction>& predictions,
                                     const std::vector<QAItem>& items,
                                     const std::string& run_id) {
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) {
    if (!by_id.emplace(p.item_id, &p).second)
      throw Error(ErrorKind::validation, "duplicate prediction for item " + p.item_id);
  }
  if (predictions.size() != items.size())
    throw Error(ErrorKind::validation,
                "prediction/item count mismatch: " + std::to_string(predictions.size()) + " vs " +
                    std::to_string(items.size()));
  ScoreSet out;
  out.run_id = run_id;
  out.dataset = DatasetKind::nextqa;
  out.metric = Metric::accuracy_percent;
  for (const auto& item : items) {
    auto it = by_id.find(item.item_id);
    if (it == by_id.end())
      throw Error(ErrorKind::validation, "no prediction for item " + item.item_id);
    if (!item.answer_key)
      throw Error(ErrorKind::validation, "item " + item.item_id + " has no answer key");
    ItemScore score;
    score.item_id = item.item_id;
    score.category = item.category.value_or("");
    score.gold_choice = *item.answer_key;
    if (it->second->choice) score.predicted_choice = *it->second->choice;
    // A failed extraction is a wrong answer, not a dropped item.
    score.correct = score.predicted_choice && *score.predicted_choice == *item.answer_key;
    out.items.push_back(std::move(score));
  }
  std::sort(out.items.begin(), out.items.end(),
            [](const ItemScore& a, const ItemScore& b) { return a.item_id < b.item_id; });
  return out;
}

// ---------------------------------------------------------------------------
// LLM-Match (OpenEQA)

// First maximal digit run whose value lies in 1..5; runs like "10" are
// skipped, not truncated.
inline std::optional<int> parse_sigma(const std::string& text) {
  size_t i = 0;
  while (i < text.size()) {
    if (std::isdigit(static_cast<unsigned char>(text[i]))) {
      size_t j = i;
      while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
      if (j - i == 1) {
        int v = text[i] - '0';
        if (v >= 1 && v <= 5) return v;
      }
      i = j;
    } else {
      ++i;
    }
  }
  return std::nullopt;
}

// One judge call per item, temperature pinned by the caller's ModelSpec.
// A reply with no usable score gets a single format-reminder retry.
inline JudgeScore judge(const QAItem& item, const std::string& predicted_text, ProviderHub& hub,
                        const ModelSpec& judge_model, const PromptTemplate& judge_template) {
  if (item.dataset != DatasetKind::openeqa)
    throw Error(ErrorKind::validation, "judge applies to OpenEQA items only");
  if (!item.reference_answer || item.reference_answer->empty())
    throw Error(ErrorKind::validation, "item " + item.item_id + " has no reference answer");

  RenderedPrompt prompt = render(judge_template, {{"question", item.question},
                                                  {"reference_answer", *item.reference_answer},
                                                  {"model_answer", predicted_text}});
  ModelRequest req = make_request(judge_model, std::nullopt, prompt.text);
  ModelResponse resp = hub.complete(req);
  auto sigma = parse_sigma(resp.text);
  if (!sigma) {
    ModelRequest retry = make_request(
        judge_model, std::nullopt,
        prompt.text +
            "\n\nYour previous reply did not contain a score. Respond with only a single "
            "integer from 1 to 5.");
    resp = hub.complete(retry);
    sigma = parse_sigma(resp.text);
    if (!sigma)
      throw ProviderError(ProviderErrorKind::malformed,
                          "judge output for item " + item.item_id +
                              " contained no integer in 1..5 after retry: " +
                              resp.text.substr(0, 200),
                          /*retryable=*/false);
    req = retry;
  }
  JudgeScore score;
  score.item_id = item.item_id;
  score.sigma = *sigma;
  score.judge_raw_text = resp.text;
  score.judge_request_hash = req.request_hash;
  return score;
}

inline ScoreSet llm_match_items(const std::vector<JudgeScore>& scores,
                                const std::vector<QAItem>& items, const std::string& run_id) {
  std::map<std::string, const JudgeScore*> by_id;
  for (const auto& s : scores) {
    if (s.sigma < 1 || s.sigma > 5)
      throw Error(ErrorKind::validation,
                  "sigma out of range for item " + s.item_id + ": " + std::to_string(s.sigma));
    if (!by_id.emplace(s.item_id, &s).second)
      throw Error(ErrorKind::validation, "duplicate judge score for item " + s.item_id);
  }
  ScoreSet out;
  out.run_id = run_id;
  out.dataset = DatasetKind::openeqa;
  out.metric = Metric::llm_match_C;
  for (const auto& item : items) {
    auto it = by_id.find(item.item_id);
    if (it == by_id.end())
      throw Error(ErrorKind::validation, "missing judge score for item " + item.item_id);
    ItemScore score;
    score.item_id = item.item_id;
    score.category = item.category.value_or("");
    score.sigma = it->second->sigma;
    score.judge_raw_text = it->second->judge_raw_text;
    score.judge_request_hash = it->second->judge_request_hash;
    out.items.push_back(std::move(score));
  }
  if (by_id.size() != items.size())
    throw Error(ErrorKind::validation, "judge scores do not match the item list one-to-one");
  std::sort(out.items.begin(), out.items.end(),
            [](const ItemScore& a, const ItemScore& b) { return a.item_id < b.item_id; });
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

namespace detail {

// sigma in {1..5} contributes (sigma-1)/4 * 100; computed over an integer sum
// so the only division happens once.
inline double llm_match_value(int64_t sigma_minus_one_sum, int64_t n) {
  return static_cast<double>(sigma_minus_one_sum) * 100.0 / (4.0 * static_cast<double>(n));
}

inline double accuracy_value(int64_t correct, int64_t n) {
  return static_cast<double>(correct) * 100.0 / static_cast<double>(n);
}

}  // namespace detail

inline AggregateReport aggregate_scores(const ScoreSet& scores) {
  if (scores.items.empty())
    throw Error(ErrorKind::validation, "cannot aggregate an empty score set");
  AggregateReport report;
  report.run_id = scores.run_id;
  report.dataset = scores.dataset;
  report.metric = scores.metric;
  report.n = static_cast<int64_t>(scores.items.size());

  struct Accum {
    int64_t n = 0;
    int64_t numer = 0;  // correct count or Σ(σ-1)
  };
  Accum total;
  std::map<std::string, Accum> per_category;
  for (const auto& item : scores.items) {
    int64_t numer;
    if (scores.metric == Metric::accuracy_percent) {
      if (!item.correct.has_value())
        throw Error(ErrorKind::validation, "item " + item.item_id + " lacks a correctness flag");
      numer = *item.correct ? 1 : 0;
    } else {
      if (!item.sigma || *item.sigma < 1 || *item.sigma > 5)
        throw Error(ErrorKind::validation, "item " + item.item_id + " lacks a valid sigma");
      numer = *item.sigma - 1;
    }
    total.n += 1;
    total.numer += numer;
    auto& cat = per_category[item.category];
    cat.n += 1;
    cat.numer += numer;
  }

  auto value = [&](const Accum& a) {
    return scores.metric == Metric::accuracy_percent ? detail::accuracy_value(a.numer, a.n)
                                                     : detail::llm_match_value(a.numer, a.n);
  };
  report.overall = value(total);
  for (const auto& [name, accum] : per_category)
    report.by_category[name] = CategoryScore{accum.n, value(accum)};
  return report;
}

// Spec-shaped convenience wrappers.

inline AggregateReport score_accuracy(const std::vector<Prediction>& predictions,
                                      const std::vector<QAItem>& items,
                                      const std::string& run_id) {
  return aggregate_scores(score_accuracy_items(predictions, items, run_id));
}

inline AggregateReport aggregate_llm_match(const std::vector<JudgeScore>& scores,
                                           const std::vector<QAItem>& items,
                                           const std::string& run_id) {
  return aggregate_scores(llm_match_items(scores, items, run_id));
}

inline nlohmann::json report_to_json(const AggregateReport& r) {
  nlohmann::json j;
  j["run_id"] = r.run_id;
  j["dataset"] = to_string(r.dataset);
  j["n"] = r.n;
  j["metric"] = to_string(r.metric);
  j["overall"] = r.overall;
  j["by_category"] = nlohmann::json::object();
  for (const auto& [name, cat] : r.by_category)
    j["by_category"][name] = {{"n", cat.n}, {"score", cat.score}};
  if (r.deltas_vs_baseline) {
    j["deltas_vs_baseline"] = nlohmann::json::object();
    for (const auto& [name, d] : *r.deltas_vs_baseline) j["deltas_vs_baseline"][name] = d;
  }
  return j;
}

}  // namespace upstreamqa
