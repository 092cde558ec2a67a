#pragma once

#include <atomic>
#include <chrono>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "upstreamqa/datasets.hpp"
#include "upstreamqa/evaluation.hpp"
#include "upstreamqa/frames.hpp"
#include "upstreamqa/prompts.hpp"
#include "upstreamqa/providers.hpp"

namespace upstreamqa {

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
  std::string run_id;
  DatasetKind dataset_kind = DatasetKind::nextqa;
  std::filesystem::path items_file;  // prepared items (JSON array)
  DatasetFilter filter;
  ModelSpec lmm;
  std::optional<ModelSpec> lrm;
  UpstreamTask upstream_task = UpstreamTask::none;
  int64_t frame_budget = 50;
  std::optional<ModelSpec> judge;
  int parallelism = 4;
  std::filesystem::path runs_dir = "runs";
  std::filesystem::path prompts_dir = "prompts";
  std::filesystem::path judge_template_file = "prompts/judge.txt";
  ExtractionConfig extraction;
  nlohmann::json providers = nlohmann::json::object();
  // Human-readable task name substituted for {upstream_task_placeholder}.
  std::string label_object_identification = "object identification";
  std::string label_scene_context = "scene context";
  bool attach_audio = false;

  void check() const {
    if (run_id.empty()) throw Error(ErrorKind::validation, "config: run_id must be non-empty");
    if (items_file.empty()) throw Error(ErrorKind::validation, "config: items_file is required");
    bool has_task = upstream_task != UpstreamTask::none;
    if (has_task != lrm.has_value())
      throw Error(ErrorKind::validation,
                  "config: upstream_task and lrm must be set together (task \"" +
                      to_string(upstream_task) + "\", lrm " + (lrm ? "set" : "absent") + ")");
    if (dataset_kind == DatasetKind::openeqa && !judge)
      throw Error(ErrorKind::validation, "config: OpenEQA runs require a judge model");
    if (dataset_kind == DatasetKind::nextqa && judge)
      throw Error(ErrorKind::validation, "config: NExTQA runs must not configure a judge");
    if (frame_budget < 1) throw Error(ErrorKind::validation, "config: frame_budget must be >= 1");
    if (parallelism < 1) throw Error(ErrorKind::validation, "config: parallelism must be >= 1");
    lmm.check();
    if (lrm) lrm->check();
    if (judge) judge->check();
  }

  const std::string& task_label() const {
    return upstream_task == UpstreamTask::scene_context ? label_scene_context
                                                        : label_object_identification;
  }

  std::filesystem::path run_dir() const { return runs_dir / run_id; }
};

namespace detail {

inline int64_t default_max_tokens(ModelRole role) {
  // Upstream traces are long-form; answers and judge verdicts are short.
  return role == ModelRole::lrm ? 4096 : 1024;
}

}  // namespace detail

inline nlohmann::json model_spec_to_json(const ModelSpec& spec) {
  return {{"provider", spec.provider_id},
          {"model", spec.model_name},
          {"temperature", spec.decoding.temperature},
          {"max_output_tokens", spec.decoding.max_output_tokens}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j, ModelRole role) {
  ModelSpec spec;
  spec.provider_id = j.at("provider").get<std::string>();
  spec.model_name = j.at("model").get<std::string>();
  spec.role = role;
  spec.decoding.temperature = j.value("temperature", 0.0);
  spec.decoding.max_output_tokens = j.value("max_output_tokens", detail::default_max_tokens(role));
  return spec;
}

inline nlohmann::json filter_to_json(const DatasetFilter& f) {
  nlohmann::json j = nlohmann::json::object();
  if (f.max_questions != std::numeric_limits<int64_t>::max()) j["max_questions"] = f.max_questions;
  if (f.selection == VideoSelection::fewest_frames) j["fewest_frames_videos"] = f.fewest_frames_n;
  if (f.duration_window)
    j["duration_window"] = {{"lo", f.duration_window->lo}, {"hi", f.duration_window->hi}};
  return j;
}

inline DatasetFilter filter_from_json(const nlohmann::json& j) {
  DatasetFilter f;
  if (j.contains("max_questions")) f.max_questions = j["max_questions"].get<int64_t>();
  if (j.contains("fewest_frames_videos"))
    f = [&] {
      auto g = DatasetFilter::fewest_frames(j["fewest_frames_videos"].get<int64_t>());
      g.max_questions = f.max_questions;
      return g;
    }();
  if (j.contains("duration_window")) {
    DurationWindow w;
    w.lo = j["duration_window"].at("lo").get<double>();
    w.hi = j["duration_window"].at("hi").get<double>();
    f.duration_window = w;
  }
  return f;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["run_id"] = c.run_id;
  j["dataset"] = {{"kind", to_string(c.dataset_kind)},
                  {"items_file", c.items_file.string()},
                  {"filter", filter_to_json(c.filter)}};
  j["lmm"] = model_spec_to_json(c.lmm);
  if (c.lrm) j["lrm"] = model_spec_to_json(*c.lrm);
  j["upstream_task"] = to_string(c.upstream_task);
  j["frame_budget"] = c.frame_budget;
  if (c.judge) j["judge"] = model_spec_to_json(*c.judge);
  j["parallelism"] = c.parallelism;
  j["runs_dir"] = c.runs_dir.string();
  j["prompts_dir"] = c.prompts_dir.string();
  j["judge_template"] = c.judge_template_file.string();
  j["frames"] = {{"tool_template", c.extraction.tool_template},
                 {"size_cap", c.extraction.size_cap},
                 {"cache_dir", c.extraction.cache_dir},
                 {"use_cache", c.extraction.use_cache}};
  j["providers"] = c.providers;
  j["upstream_label"] = {{"object_identification", c.label_object_identification},
                         {"scene_context", c.label_scene_context}};
  j["attach_audio"] = c.attach_audio;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.run_id = j.at("run_id").get<std::string>();
  const auto& d = j.at("dataset");
  c.dataset_kind = dataset_kind_from_string(d.at("kind").get<std::string>());
  c.items_file = d.at("items_file").get<std::string>();
  if (d.contains("filter")) c.filter = filter_from_json(d["filter"]);
  c.lmm = model_spec_from_json(j.at("lmm"), ModelRole::lmm);
  if (j.contains("lrm")) c.lrm = model_spec_from_json(j["lrm"], ModelRole::lrm);
  c.upstream_task = upstream_task_from_string(j.value("upstream_task", std::string("none")));
  c.frame_budget = j.value("frame_budget", int64_t{50});
  if (j.contains("judge")) c.judge = model_spec_from_json(j["judge"], ModelRole::judge);
  c.parallelism = j.value("parallelism", 4);
  c.runs_dir = j.value("runs_dir", std::string("runs"));
  c.prompts_dir = j.value("prompts_dir", std::string("prompts"));
  c.judge_template_file = j.value("judge_template", std::string("prompts/judge.txt"));
  if (j.contains("frames")) {
    const auto& f = j["frames"];
    c.extraction.tool_template = f.value("tool_template", c.extraction.tool_template);
    c.extraction.size_cap = f.value("size_cap", c.extraction.size_cap);
    c.extraction.cache_dir = f.value("cache_dir", c.extraction.cache_dir);
    c.extraction.use_cache = f.value("use_cache", c.extraction.use_cache);
  }
  if (j.contains("providers")) c.providers = j["providers"];
  if (j.contains("upstream_label")) {
    c.label_object_identification =
        j["upstream_label"].value("object_identification", c.label_object_identification);
    c.label_scene_context = j["upstream_label"].value("scene_context", c.label_scene_context);
  }
  c.attach_audio = j.value("attach_audio", false);
  return c;
}

// Config files allow // and /* */ comments.
inline nlohmann::json parse_config_text(const std::string& text) {
  nlohmann::json j =
      nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false, /*ignore_comments=*/true);
  if (j.is_discarded())
    throw Error(ErrorKind::validation, "config file is not valid JSON (after comment stripping)");
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) {
  return sha256_hex(config_to_json(c).dump());
}

// Dotted-key overrides ("lmm.model=x"). Keys must already exist in the
// document so typos fail instead of silently adding dead settings.
inline void apply_override(nlohmann::json& doc, const std::string& dotted_key,
                           const std::string& raw_value) {
  std::vector<std::string> parts = split(dotted_key, '.');
  if (parts.empty()) throw Error(ErrorKind::validation, "empty override key");
  nlohmann::json* node = &doc;
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i]))
      throw Error(ErrorKind::validation,
                  "override key \"" + dotted_key + "\" does not match an existing config key");
    node = &(*node)[parts[i]];
  }
  if (!node->is_object() || !node->contains(parts.back()))
    throw Error(ErrorKind::validation,
                "override key \"" + dotted_key + "\" does not match an existing config key");
  nlohmann::json value = nlohmann::json::parse(raw_value, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = raw_value;  // bare strings stay strings
  (*node)[parts.back()] = value;
}

// ---------------------------------------------------------------------------
// Experiment matrix expansion
//
// {
//   "base": { ... config without run_id/lmm/lrm/upstream_task ... },
//   "run_id_prefix": "exp",
//   "lmms": [ {"provider": ..., "model": ...}, ... ],
//   "lrms": [ ... ],
//   "tasks": ["object_identification", "scene_context"]
// }
//
// Expands to per-LMM rows: baseline first, then task-major LRM variants,
// mirroring the results-table row order.

inline std::vector<nlohmann::json> expand_matrix(const nlohmann::json& matrix) {
  if (!matrix.contains("base") || !matrix.contains("lmms"))
    throw Error(ErrorKind::validation, "matrix file requires \"base\" and \"lmms\"");
  const std::string prefix = matrix.value("run_id_prefix", std::string("run"));
  std::vector<std::string> tasks;
  for (const auto& t : matrix.value("tasks", nlohmann::json::array()))
    tasks.push_back(t.get<std::string>());
  std::vector<nlohmann::json> out;
  for (const auto& lmm : matrix.at("lmms")) {
    std::string lmm_tag = path_safe(lmm.at("model").get<std::string>());
    {
      nlohmann::json cfg = matrix["base"];
      cfg["lmm"] = lmm;
      cfg["upstream_task"] = "none";
      cfg["run_id"] = prefix + "-" + lmm_tag + "-baseline";
      out.push_back(std::move(cfg));
    }
    for (const auto& task : tasks) {
      upstream_task_from_string(task);  // validate early
      for (const auto& lrm : matrix.value("lrms", nlohmann::json::array())) {
        nlohmann::json cfg = matrix["base"];
        cfg["lmm"] = lmm;
        cfg["lrm"] = lrm;
        cfg["upstream_task"] = task;
        cfg["run_id"] = prefix + "-" + lmm_tag + "-" + path_safe(task) + "-" +
                        path_safe(lrm.at("model").get<std::string>());
        out.push_back(std::move(cfg));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run records

struct ReasoningTrace {
  UpstreamTask task = UpstreamTask::none;
  std::string text;
  ModelSpec produced_by;
  std::string video_id;
  std::string request_hash;
};

inline nlohmann::json trace_to_json(const ReasoningTrace& t) {
  return {{"task", to_string(t.task)},
          {"text", t.text},
          {"produced_by", model_spec_to_json(t.produced_by)},
          {"video_id", t.video_id},
          {"request_hash", t.request_hash}};
}

inline ReasoningTrace trace_from_json(const nlohmann::json& j, ModelRole role = ModelRole::lrm) {
  ReasoningTrace t;
  t.task = upstream_task_from_string(j.at("task").get<std::string>());
  t.text = j.at("text").get<std::string>();
  t.produced_by = model_spec_from_json(j.at("produced_by"), role);
  t.video_id = j.at("video_id").get<std::string>();
  t.request_hash = j.at("request_hash").get<std::string>();
  return t;
}

struct StageOne {
  std::string prompt_hash;  // sha256 of the rendered upstream prompt
  std::string video_id;
  std::string trace_request_hash;
};

struct StageTwo {
  std::string prompt_hash;  // sha256 of the rendered QA prompt
  std::string request_hash;
  std::string response_text;
};

struct RunRecord {
  std::string run_id;
  std::string item_id;
  std::optional<StageOne> stage1;
  StageTwo stage2;
  std::optional<int> predicted_choice;        // NExTQA
  std::optional<std::string> predicted_text;  // OpenEQA
  std::optional<double> score;                // filled by evaluation
  struct Timing {
    int64_t stage1_ms = 0;
    int64_t stage2_ms = 0;
  } timing;
};

inline nlohmann::json record_to_json(const RunRecord& r) {
  nlohmann::json j;
  j["run_id"] = r.run_id;
  j["item_id"] = r.item_id;
  if (r.stage1)
    j["stage1"] = {{"prompt_hash", r.stage1->prompt_hash},
                   {"video_id", r.stage1->video_id},
                   {"trace_request_hash", r.stage1->trace_request_hash}};
  j["stage2"] = {{"prompt_hash", r.stage2.prompt_hash},
                 {"request_hash", r.stage2.request_hash},
                 {"response_text", r.stage2.response_text}};
  if (r.predicted_choice) j["predicted_choice"] = *r.predicted_choice;
  if (r.predicted_text) j["predicted_text"] = *r.predicted_text;
  if (r.score) j["score"] = *r.score;
  j["timing"] = {{"stage1_ms", r.timing.stage1_ms}, {"stage2_ms", r.timing.stage2_ms}};
  return j;
}

inline RunRecord record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.item_id = j.at("item_id").get<std::string>();
  if (j.contains("stage1")) {
    StageOne s;
    s.prompt_hash = j["stage1"].at("prompt_hash").get<std::string>();
    s.video_id = j["stage1"].at("video_id").get<std::string>();
    s.trace_request_hash = j["stage1"].at("trace_request_hash").get<std::string>();
    r.stage1 = std::move(s);
  }
  r.stage2.prompt_hash = j.at("stage2").at("prompt_hash").get<std::string>();
  r.stage2.request_hash = j.at("stage2").at("request_hash").get<std::string>();
  r.stage2.response_text = j.at("stage2").at("response_text").get<std::string>();
  if (j.contains("predicted_choice")) r.predicted_choice = j["predicted_choice"].get<int>();
  if (j.contains("predicted_text")) r.predicted_text = j["predicted_text"].get<std::string>();
  if (j.contains("score")) r.score = j["score"].get<double>();
  if (j.contains("timing")) {
    r.timing.stage1_ms = j["timing"].value("stage1_ms", int64_t{0});
    r.timing.stage2_ms = j["timing"].value("stage2_ms", int64_t{0});
  }
  return r;
}

// Timing is measurement, not result; strip it before byte comparisons.
inline nlohmann::json record_json_without_timing(nlohmann::json j) {
  j.erase("timing");
  return j;
}

inline std::filesystem::path record_path(const std::filesystem::path& run_dir,
                                         const std::string& item_id) {
  return run_dir / "records" / (path_safe(item_id) + ".json");
}

inline std::filesystem::path trace_path(const std::filesystem::path& run_dir,
                                        const std::string& video_id) {
  return run_dir / "traces" / (path_safe(video_id) + ".json");
}

inline std::vector<RunRecord> read_records(const std::filesystem::path& run_dir) {
  auto dir = run_dir / "records";
  if (!std::filesystem::is_directory(dir))
    throw Error(ErrorKind::missing_input, "no records directory in " + run_dir.string());
  std::vector<RunRecord> records;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
    records.push_back(record_from_json(nlohmann::json::parse(read_text_file(entry.path()))));
  }
  std::sort(records.begin(), records.end(),
            [](const RunRecord& a, const RunRecord& b) { return a.item_id < b.item_id; });
  return records;
}

// ---------------------------------------------------------------------------
// Single-flight memoization: one computation per key, shared across workers.

namespace detail {

template <typename V>
class SingleFlight {
 public:
  V get(const std::string& key, const std::function<V()>& compute) {
    std::shared_ptr<std::promise<V>> promise;
    std::shared_future<V> fut;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = futures_.find(key);
      if (it != futures_.end()) {
        fut = it->second;
      } else {
        promise = std::make_shared<std::promise<V>>();
        fut = promise->get_future().share();
        futures_[key] = fut;
      }
    }
    if (promise) {
      try {
        promise->set_value(compute());
      } catch (...) {
        promise->set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

 private:
  std::map<std::string, std::shared_future<V>> futures_;
  std::mutex mu_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage operations

inline ReasoningTrace run_upstream(const VideoRef& video, UpstreamTask task, const ModelSpec& lrm,
                                   const FrameSet& frames, ProviderHub& hub,
                                   const PromptLibrary& prompts) {
  if (task == UpstreamTask::none)
    throw Error(ErrorKind::validation, "run_upstream requires a concrete upstream task");
  RenderedPrompt prompt = render(prompts.get(template_for(task, Stage::upstream)), {});
  ModelRequest req = make_request(lrm, std::nullopt, prompt.text, frames.images);
  ModelResponse resp;
  try {
    resp = hub.complete(req);
  } catch (const ProviderError& e) {
    throw ProviderError(e.provider_kind(),
                        std::string(e.what()) + " (upstream call for video " + video.video_id + ")",
                        e.retryable(), e.retry_after_ms());
  }
  ReasoningTrace trace;
  trace.task = task;
  trace.text = resp.text;
  trace.produced_by = lrm;
  trace.video_id = video.video_id;
  trace.request_hash = req.request_hash;
  if (trace.text.empty())
    throw Error(ErrorKind::validation, "upstream trace for video " + video.video_id + " is empty");
  return trace;
}

// The exact text the downstream model sees in {question}: OpenEQA questions
// pass through, NExTQA questions carry the five lettered options.
inline std::string question_block(const QAItem& item) {
  if (item.dataset != DatasetKind::nextqa) return item.question;
  if (!item.choices || item.choices->size() != 5)
    throw Error(ErrorKind::validation, "NExTQA item " + item.item_id + " lacks five choices");
  std::string out = item.question;
  for (size_t i = 0; i < item.choices->size(); ++i) {
    out += "\n";
    out.push_back(static_cast<char>('A' + i));
    out += ". " + (*item.choices)[i];
  }
  return out;
}

struct DownstreamContext {
  const ExperimentConfig& config;
  const PromptLibrary& prompts;
  ProviderHub& hub;
};

inline RunRecord run_downstream(const QAItem& item, const FrameSet& frames,
                                const std::optional<ReasoningTrace>& trace,
                                const DownstreamContext& ctx) {
  const ExperimentConfig& config = ctx.config;
  if ((config.upstream_task != UpstreamTask::none) != trace.has_value())
    throw Error(ErrorKind::validation,
                "trace presence must match the configured upstream task for item " + item.item_id);

  std::map<std::string, std::string> bindings{{"question", question_block(item)}};
  if (trace) {
    bindings["upstream_task"] = trace->text;
    bindings["upstream_task_placeholder"] = config.task_label();
  }
  RenderedPrompt prompt =
      render(ctx.prompts.get(template_for(config.upstream_task, Stage::downstream)), bindings);

  std::vector<MediaPayload> attachments = frames.images;
  ModelRequest req = make_request(config.lmm, std::nullopt, prompt.text, std::move(attachments));
  ModelResponse resp;
  try {
    resp = ctx.hub.complete(req);
  } catch (const ProviderError& e) {
    throw ProviderError(e.provider_kind(),
                        std::string(e.what()) + " (downstream call for item " + item.item_id + ")",
                        e.retryable(), e.retry_after_ms());
  }

  RunRecord record;
  record.run_id = config.run_id;
  record.item_id = item.item_id;
  if (trace) {
    StageOne s;
    s.prompt_hash = sha256_hex(
        render(ctx.prompts.get(template_for(config.upstream_task, Stage::upstream)), {}).text);
    s.video_id = trace->video_id;
    s.trace_request_hash = trace->request_hash;
    record.stage1 = std::move(s);
  }
  record.stage2.prompt_hash = sha256_hex(prompt.text);
  record.stage2.request_hash = req.request_hash;
  record.stage2.response_text = resp.text;
  record.timing.stage2_ms = resp.latency_ms;
  if (item.dataset == DatasetKind::nextqa) {
    // extract_choice never throws; a failed parse stays unanswered and is
    // scored incorrect downstream.
    record.predicted_choice = extract_choice(resp.text, *item.choices);
    if (!record.predicted_choice) record.predicted_text = std::nullopt;
  } else {
    record.predicted_text = resp.text;
  }
  return record;
}

// ---------------------------------------------------------------------------
// run_experiment

struct RunOutcome {
  std::filesystem::path run_dir;
  int64_t total_items = 0;
  int64_t existing_records = 0;
  int64_t new_records = 0;
  int64_t distinct_videos = 0;
};

struct DryRunEntry {
  std::string item_id;
  std::string stage2_prompt_hash;
};

inline std::vector<QAItem> load_config_items(const ExperimentConfig& config) {
  auto items = items_from_json_text(read_text_file(config.items_file));
  items = apply_filter(std::move(items), config.filter, nullptr);
  if (items.empty())
    throw Error(ErrorKind::validation, "config selects zero items from " + config.items_file.string());
  for (const auto& item : items) {
    if (item.dataset != config.dataset_kind)
      throw Error(ErrorKind::validation,
                  "item " + item.item_id + " belongs to dataset " + to_string(item.dataset) +
                      " but the config expects " + to_string(config.dataset_kind));
  }
  auto report = validate(items);
  if (!report.ok())
    throw Error(ErrorKind::validation, "item validation failed: " + report.violations[0].item_id +
                                           ": " + report.violations[0].message +
                                           (report.violations.size() > 1
                                                ? " (+" + std::to_string(report.violations.size() - 1) +
                                                      " more)"
                                                : ""));
  return items;
}

// Renders every stage-2 prompt without touching a provider. Upstream configs
// bind a visible placeholder where the trace would go.
inline std::vector<DryRunEntry> dry_run(const ExperimentConfig& config,
                                        const PromptLibrary& prompts) {
  config.check();
  auto items = load_config_items(config);
  std::vector<DryRunEntry> out;
  for (const auto& item : items) {
    std::map<std::string, std::string> bindings{{"question", question_block(item)}};
    if (config.upstream_task != UpstreamTask::none) {
      bindings["upstream_task"] = "[upstream trace pending]";
      bindings["upstream_task_placeholder"] = config.task_label();
    }
    RenderedPrompt prompt =
        render(prompts.get(template_for(config.upstream_task, Stage::downstream)), bindings);
    out.push_back({item.item_id, sha256_hex(prompt.text)});
  }
  return out;
}

class ExperimentRunner {
 public:
  ExperimentRunner(ExperimentConfig config, ProviderHub& hub, PromptLibrary prompts)
      : config_(std::move(config)), hub_(hub), prompts_(std::move(prompts)) {
    config_.check();
  }

  // Cooperative cancellation: workers finish their current item, then stop.
  void request_cancel() { cancel_.store(true); }
  bool cancelled() const { return cancel_.load(); }

  RunOutcome run() {
    auto items = load_config_items(config_);
    const auto run_dir = config_.run_dir();
    ensure_dir(run_dir);
    ensure_dir(run_dir / "records");
    if (config_.upstream_task != UpstreamTask::none) ensure_dir(run_dir / "traces");

    // A run directory is bound to one effective config for its lifetime.
    const std::string hash = config_hash(config_);
    const auto config_path = run_dir / "config.json";
    if (std::filesystem::is_regular_file(config_path)) {
      auto existing = config_hash(config_from_json(nlohmann::json::parse(read_text_file(config_path))));
      if (existing != hash)
        throw Error(ErrorKind::validation,
                    "run directory " + run_dir.string() +
                        " was created with a different config; refusing to mix runs");
    } else {
      write_file_atomic(config_path, config_to_json(config_).dump(2) + "\n");
    }

    std::set<std::string> videos;
    for (const auto& item : items) videos.insert(item.video.video_id);

    std::vector<const QAItem*> pending;
    int64_t existing = 0;
    for (const auto& item : items) {
      if (std::filesystem::is_regular_file(record_path(run_dir, item.item_id)))
        ++existing;  // resumability: done items stay done
      else
        pending.push_back(&item);
    }

    std::atomic<size_t> next{0};
    std::atomic<int64_t> written{0};
    std::mutex error_mu;
    std::exception_ptr first_error;

    auto worker = [&] {
      while (!cancel_.load()) {
        size_t i = next.fetch_add(1);
        if (i >= pending.size()) return;
        const QAItem& item = *pending[i];
        try {
          RunRecord record = process_item(item, run_dir);
          write_file_atomic(record_path(run_dir, item.item_id),
                            record_to_json(record).dump(2) + "\n");
          written.fetch_add(1);
        } catch (...) {
          {
            std::lock_guard<std::mutex> lock(error_mu);
            if (!first_error) first_error = std::current_exception();
          }
          cancel_.store(true);
          return;
        }
      }
    };

    size_t n_workers = std::min<size_t>(static_cast<size_t>(config_.parallelism),
                                        std::max<size_t>(pending.size(), 1));
    std::vector<std::thread> threads;
    for (size_t i = 0; i < n_workers; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
    if (cancel_.load())
      throw Error(ErrorKind::provider, "run " + config_.run_id + " cancelled before completion");

    RunOutcome outcome;
    outcome.run_dir = run_dir;
    outcome.total_items = static_cast<int64_t>(items.size());
    outcome.existing_records = existing;
    outcome.new_records = written.load();
    outcome.distinct_videos = static_cast<int64_t>(videos.size());
    write_manifest(run_dir, items, hash);
    return outcome;
  }

 private:
  RunRecord process_item(const QAItem& item, const std::filesystem::path& run_dir) {
    auto t0 = std::chrono::steady_clock::now();
    FrameSet frames = frames_.get(item.video.video_id, [&] {
      auto indices = sample_indices(item.video.frame_count, config_.frame_budget);
      return materialize(item.video, indices, config_.frame_budget, config_.extraction);
    });

    std::optional<ReasoningTrace> trace;
    if (config_.upstream_task != UpstreamTask::none) {
      trace = traces_.get(item.video.video_id, [&] {
        // Traces persist under the run dir; restarted runs reload instead of
        // re-calling the LRM.
        auto path = trace_path(run_dir, item.video.video_id);
        if (std::filesystem::is_regular_file(path))
          return trace_from_json(nlohmann::json::parse(read_text_file(path)));
        ReasoningTrace fresh =
            run_upstream(item.video, config_.upstream_task, *config_.lrm, frames, hub_, prompts_);
        write_file_atomic(path, trace_to_json(fresh).dump(2) + "\n");
        return fresh;
      });
    }
    auto t1 = std::chrono::steady_clock::now();

    RunRecord record = run_downstream(item, frames, trace, {config_, prompts_, hub_});
    record.timing.stage1_ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
    return record;
  }

  void write_manifest(const std::filesystem::path& run_dir, const std::vector<QAItem>& items,
                      const std::string& hash) {
    nlohmann::json manifest;
    manifest["run_id"] = config_.run_id;
    manifest["config_hash"] = hash;
    manifest["dataset"] = to_string(config_.dataset_kind);
    manifest["n_items"] = items.size();
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& item : items) ids.push_back(item.item_id);
    manifest["item_ids"] = ids;
    write_file_atomic(run_dir / "manifest.json", manifest.dump(2) + "\n");
  }

  ExperimentConfig config_;
  ProviderHub& hub_;
  PromptLibrary prompts_;
  detail::SingleFlight<FrameSet> frames_;
  detail::SingleFlight<ReasoningTrace> traces_;
  std::atomic<bool> cancel_{false};
};

inline RunOutcome run_experiment(ExperimentConfig config, ProviderHub& hub,
                                 PromptLibrary prompts) {
  ExperimentRunner runner(std::move(config), hub, std::move(prompts));
  return runner.run();
}

// ---------------------------------------------------------------------------
// Scoring a finished run (NExTQA locally, OpenEQA through the judge)

inline ScoreSet evaluate_run(const ExperimentConfig& config, ProviderHub& hub) {
  auto items = load_config_items(config);
  auto records = read_records(config.run_dir());
  if (records.size() != items.size())
    throw Error(ErrorKind::validation,
                "run " + config.run_id + " has " + std::to_string(records.size()) +
                    " records for " + std::to_string(items.size()) + " items; finish the run first");

  ScoreSet scores;
  if (config.dataset_kind == DatasetKind::nextqa) {
    std::vector<Prediction> predictions;
    for (const auto& r : records) predictions.push_back({r.item_id, r.predicted_choice, std::nullopt});
    scores = score_accuracy_items(predictions, items, config.run_id);
  } else {
    std::map<std::string, const RunRecord*> by_id;
    for (const auto& r : records) by_id[r.item_id] = &r;
    PromptTemplate judge_template = load_template_file(config.judge_template_file);

    std::vector<JudgeScore> judged(items.size());
    std::atomic<size_t> next{0};
    std::mutex error_mu;
    std::exception_ptr first_error;
    auto worker = [&] {
      while (true) {
        size_t i = next.fetch_add(1);
        if (i >= items.size()) return;
        try {
          const auto& item = items[i];
          auto it = by_id.find(item.item_id);
          if (it == by_id.end())
            throw Error(ErrorKind::validation, "no record for item " + item.item_id);
          std::string predicted = it->second->predicted_text.value_or("");
          judged[i] = judge(item, predicted, hub, *config.judge, judge_template);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    };
    size_t n_workers = std::min<size_t>(static_cast<size_t>(config.parallelism), items.size());
    std::vector<std::thread> threads;
    for (size_t i = 0; i < std::max<size_t>(n_workers, 1); ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
    scores = llm_match_items(judged, items, config.run_id);
  }
  write_score_set(config.run_dir(), scores);
  return scores;
}

}  // namespace upstreamqa
