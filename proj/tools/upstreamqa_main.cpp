// Command-line entry point: prepare datasets, sample frames, run experiments,
// judge, and report. Exit statuses: 0 success, 1 config/validation error,
// 2 missing input, 3 provider/terminal network error.

#include <atomic>
#include <csignal>
#include <fnmatch.h>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "upstreamqa/datasets.hpp"
#include "upstreamqa/evaluation.hpp"
#include "upstreamqa/frames.hpp"
#include "upstreamqa/log.hpp"
#include "upstreamqa/pipeline.hpp"
#include "upstreamqa/prompts.hpp"
#include "upstreamqa/providers.hpp"
#include "upstreamqa/providers_http.hpp"
#include "upstreamqa/reporting.hpp"

namespace uqa = upstreamqa;

namespace {

std::atomic<uqa::ExperimentRunner*> g_active_runner{nullptr};

void handle_sigint(int) {
  // Workers flush their in-flight record and stop; records already written
  // stay valid for the resumed run.
  if (auto* runner = g_active_runner.load()) runner->request_cancel();
}

struct HubSettings {
  nlohmann::json providers = nlohmann::json::object();
  std::string cache_dir = "cache";
  bool use_cache = true;
  std::optional<std::string> replay_cassette;
  std::shared_ptr<uqa::CassetteRecorder> recorder;
};

// One Client per provider id; replay mode swaps every endpoint for the
// cassette while keeping retry/cache behavior identical.
uqa::ProviderHub make_hub(const HubSettings& settings) {
  return uqa::ProviderHub([settings](const std::string& provider_id) {
    std::shared_ptr<uqa::Provider> provider;
    if (settings.replay_cassette)
      provider = std::make_shared<uqa::ReplayProvider>(*settings.replay_cassette);
    else
      provider = uqa::build_provider(provider_id, settings.providers);
    uqa::ClientOptions options;
    if (settings.use_cache) options.cache_dir = settings.cache_dir;
    options.recorder = settings.recorder;
    if (settings.providers.contains(provider_id)) {
      const auto& entry = settings.providers[provider_id];
      options.concurrency_limit = entry.value("concurrency", 4);
      options.retry.max_attempts = entry.value("max_attempts", options.retry.max_attempts);
      options.retry.base_delay_ms = entry.value("base_delay_ms", options.retry.base_delay_ms);
      options.retry.max_delay_ms = entry.value("max_delay_ms", options.retry.max_delay_ms);
    }
    return std::make_shared<uqa::Client>(std::move(provider), std::move(options));
  });
}

uqa::ExperimentConfig load_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
  nlohmann::json doc = uqa::parse_config_text(uqa::read_text_file(config_path));
  for (const auto& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw uqa::Error(uqa::ErrorKind::validation, "override must be key=value: " + kv);
    uqa::apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return uqa::config_from_json(doc);
}

void print_prepare_summary(const std::vector<uqa::QAItem>& items) {
  std::set<std::string> videos;
  std::map<std::string, int64_t> categories;
  for (const auto& item : items) {
    videos.insert(item.video.video_id);
    ++categories[item.category.value_or("(none)")];
  }
  std::cerr << "items: " << items.size() << "\nvideos: " << videos.size() << "\n";
  for (const auto& [name, count] : categories) std::cerr << "  " << name << ": " << count << "\n";
}

int run_one_config(uqa::ExperimentConfig config, const HubSettings& hub_settings, bool dry_run) {
  uqa::PromptLibrary prompts = uqa::PromptLibrary::load(config.prompts_dir);
  if (dry_run) {
    auto entries = uqa::dry_run(config, prompts);
    for (const auto& e : entries)
      std::cout << e.item_id << " " << e.stage2_prompt_hash << "\n";
    std::cerr << "dry run: " << entries.size() << " stage-2 prompts rendered, 0 provider calls\n";
    return 0;
  }
  uqa::ProviderHub hub = make_hub(hub_settings);
  uqa::RunLog log(config.run_dir() / "log.jsonl");
  log.event("run_start", {{"run_id", config.run_id}, {"config_hash", uqa::config_hash(config)}});
  uqa::ExperimentRunner runner(config, hub, std::move(prompts));
  g_active_runner.store(&runner);
  try {
    uqa::RunOutcome outcome = runner.run();
    g_active_runner.store(nullptr);
    log.event("run_complete", {{"run_id", config.run_id},
                               {"new_records", outcome.new_records},
                               {"existing_records", outcome.existing_records},
                               {"total_items", outcome.total_items}});
    std::cerr << "run " << config.run_id << ": " << outcome.total_items << " items ("
              << outcome.existing_records << " already done, " << outcome.new_records
              << " new) across " << outcome.distinct_videos << " videos -> "
              << outcome.run_dir.string() << "\n";
    return 0;
  } catch (...) {
    g_active_runner.store(nullptr);
    log.event("run_aborted", {{"run_id", config.run_id}});
    throw;
  }
}

int64_t dir_stats(const std::filesystem::path& dir, int64_t& bytes) {
  int64_t files = 0;
  bytes = 0;
  if (!std::filesystem::is_directory(dir)) return 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) {
      ++files;
      bytes += static_cast<int64_t>(entry.file_size());
    }
  }
  return files;
}

std::vector<std::filesystem::path> expand_run_dirs(const std::vector<std::string>& patterns) {
  std::vector<std::filesystem::path> dirs;
  for (const auto& pattern : patterns) {
    if (pattern.find_first_of("*?[") == std::string::npos) {
      dirs.emplace_back(pattern);
      continue;
    }
    std::filesystem::path p(pattern);
    std::filesystem::path parent = p.parent_path().empty() ? "." : p.parent_path();
    std::string leaf = p.filename().string();
    if (!std::filesystem::is_directory(parent))
      throw uqa::Error(uqa::ErrorKind::missing_input,
                       "no such directory for glob: " + parent.string());
    std::vector<std::filesystem::path> matched;
    for (const auto& entry : std::filesystem::directory_iterator(parent))
      if (entry.is_directory() &&
          fnmatch(leaf.c_str(), entry.path().filename().string().c_str(), 0) == 0)
        matched.push_back(entry.path());
    std::sort(matched.begin(), matched.end());
    dirs.insert(dirs.end(), matched.begin(), matched.end());
  }
  return dirs;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-stage VideoQA evaluation harness"};
  app.require_subcommand(1);

  // prepare ------------------------------------------------------------
  auto* prepare = app.add_subcommand("prepare", "load a dataset manifest into a prepared item file");
  std::string prep_dataset, prep_manifest, prep_out, prep_subsets = "hm3d,scannet";
  int64_t prep_max_questions = 0, prep_fewest = 0;
  std::vector<double> prep_duration;
  prepare->add_option("--dataset", prep_dataset, "nextqa or openeqa")->required();
  prepare->add_option("--manifest", prep_manifest, "dataset manifest path")->required();
  prepare->add_option("--out", prep_out, "output prepared items file")->required();
  prepare->add_option("--max-questions", prep_max_questions, "keep at most N questions");
  prepare->add_option("--fewest-frames", prep_fewest, "keep the N videos with fewest frames");
  prepare->add_option("--duration", prep_duration, "duration window LO HI in seconds")
      ->expected(2);
  prepare->add_option("--subsets", prep_subsets, "OpenEQA episode subsets (hm3d,scannet)");

  // sample-frames -------------------------------------------------------
  auto* sample = app.add_subcommand("sample-frames", "materialize sampled frames into the cache");
  std::string sf_items, sf_cache = "cache", sf_tool;
  int64_t sf_budget = 50;
  int sf_size_cap = 768;
  sample->add_option("--items", sf_items, "prepared items file")->required();
  sample->add_option("--budget", sf_budget, "frame budget per video");
  sample->add_option("--cache-dir", sf_cache, "cache directory");
  sample->add_option("--size-cap", sf_size_cap, "max long-edge pixels");
  sample->add_option("--tool", sf_tool, "frame extraction command template");

  // run ------------------------------------------------------------------
  auto* run = app.add_subcommand("run", "execute an experiment config (or matrix)");
  std::string run_config;
  std::vector<std::string> run_overrides;
  std::string run_replay, run_record;
  bool run_dry = false, run_matrix = false;
  run->add_option("config", run_config, "experiment config file")->required();
  run->add_option("--set", run_overrides, "dotted-key override, e.g. --set lmm.model=gpt-4o");
  run->add_option("--replay", run_replay, "serve all provider calls from this cassette");
  run->add_option("--record", run_record, "append all provider traffic to this cassette");
  run->add_flag("--dry-run", run_dry, "render prompts and hashes, no provider calls");
  run->add_flag("--matrix", run_matrix, "treat the config as an experiment matrix");

  // judge ------------------------------------------------------------------
  auto* judge_cmd = app.add_subcommand("judge", "score a finished run (judge model for OpenEQA)");
  std::string judge_run_dir, judge_replay, judge_record;
  judge_cmd->add_option("run_dir", judge_run_dir, "run directory to score")->required();
  judge_cmd->add_option("--replay", judge_replay, "serve judge calls from this cassette");
  judge_cmd->add_option("--record", judge_record, "append judge traffic to this cassette");

  // report ------------------------------------------------------------------
  auto* report = app.add_subcommand("report", "aggregate scored runs into a results table");
  std::vector<std::string> rep_runs;
  std::string rep_layout = "table1", rep_format = "text", rep_id = "results";
  std::string rep_out_dir = "runs";
  report->add_option("runs", rep_runs, "run directories (globs allowed)")->required();
  report->add_option("--layout", rep_layout, "table1 or table3");
  report->add_option("--format", rep_format, "text, csv, or json");
  report->add_option("--id", rep_id, "matrix id (names the output file)");
  report->add_option("--out-dir", rep_out_dir, "directory whose _reports/ receives the file");

  // cache ------------------------------------------------------------------
  auto* cache = app.add_subcommand("cache", "inspect or clear the response/frame caches");
  std::string cache_action = "stats", cache_dir = "cache";
  cache->add_option("action", cache_action, "stats or clear");
  cache->add_option("--dir", cache_dir, "cache directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*prepare) {
      uqa::DatasetFilter filter;
      if (prep_fewest > 0) filter = uqa::DatasetFilter::fewest_frames(prep_fewest);
      if (prep_max_questions > 0) filter.max_questions = prep_max_questions;
      if (!prep_duration.empty())
        filter.duration_window = uqa::DurationWindow{prep_duration[0], prep_duration[1]};

      std::vector<uqa::QAItem> items;
      if (uqa::dataset_kind_from_string(prep_dataset) == uqa::DatasetKind::nextqa) {
        items = uqa::load_nextqa(prep_manifest, filter);
      } else {
        std::set<uqa::OpenEqaSubset> subsets;
        for (const auto& s : uqa::split(prep_subsets, ',')) {
          auto v = uqa::to_lower(uqa::trim(s));
          if (v == "hm3d") subsets.insert(uqa::OpenEqaSubset::hm3d);
          else if (v == "scannet") subsets.insert(uqa::OpenEqaSubset::scannet);
          else throw uqa::Error(uqa::ErrorKind::validation, "unknown OpenEQA subset: " + s);
        }
        items = uqa::apply_filter(uqa::load_openeqa(prep_manifest, subsets), filter);
      }
      auto report_v = uqa::validate(items);
      if (!report_v.ok())
        throw uqa::Error(uqa::ErrorKind::validation,
                         "validation failed: " + report_v.violations[0].item_id + ": " +
                             report_v.violations[0].message);
      uqa::write_file_atomic(prep_out, uqa::items_to_json_text(items));
      print_prepare_summary(items);
      std::cerr << "wrote " << prep_out << "\n";
      return 0;
    }

    if (*sample) {
      auto items = uqa::items_from_json_text(uqa::read_text_file(sf_items));
      uqa::ExtractionConfig cfg;
      cfg.cache_dir = sf_cache;
      cfg.size_cap = sf_size_cap;
      if (!sf_tool.empty()) cfg.tool_template = sf_tool;
      std::set<std::string> done;
      for (const auto& item : items) {
        if (!done.insert(item.video.video_id).second) continue;
        auto indices = uqa::sample_indices(item.video.frame_count, sf_budget);
        auto frames = uqa::materialize(item.video, indices, sf_budget, cfg);
        std::cerr << item.video.video_id << ": " << frames.images.size() << " frames\n";
      }
      std::cerr << "sampled " << done.size() << " videos at budget " << sf_budget << "\n";
      return 0;
    }

    if (*run) {
      std::signal(SIGINT, handle_sigint);
      std::shared_ptr<uqa::CassetteRecorder> recorder;
      if (!run_record.empty()) recorder = std::make_shared<uqa::CassetteRecorder>(run_record);
      auto settings_for = [&](const uqa::ExperimentConfig& config) {
        HubSettings settings;
        settings.providers = config.providers;
        settings.cache_dir = config.extraction.cache_dir;
        settings.use_cache = config.extraction.use_cache;
        if (!run_replay.empty()) settings.replay_cassette = run_replay;
        settings.recorder = recorder;
        return settings;
      };

      if (run_matrix) {
        nlohmann::json matrix = uqa::parse_config_text(uqa::read_text_file(run_config));
        auto docs = uqa::expand_matrix(matrix);
        for (auto& doc : docs) {
          for (const auto& kv : run_overrides) {
            auto eq = kv.find('=');
            if (eq == std::string::npos)
              throw uqa::Error(uqa::ErrorKind::validation, "override must be key=value: " + kv);
            uqa::apply_override(doc, kv.substr(0, eq), kv.substr(eq + 1));
          }
          uqa::ExperimentConfig config = uqa::config_from_json(doc);
          int status = run_one_config(config, settings_for(config), run_dry);
          if (status != 0) return status;
        }
        std::cerr << "matrix complete: " << docs.size() << " runs\n";
        return 0;
      }
      uqa::ExperimentConfig config = load_config(run_config, run_overrides);
      return run_one_config(config, settings_for(config), run_dry);
    }

    if (*judge_cmd) {
      std::filesystem::path run_dir(judge_run_dir);
      auto config_path = run_dir / "config.json";
      if (!std::filesystem::is_regular_file(config_path))
        throw uqa::Error(uqa::ErrorKind::missing_input, "no config.json in " + judge_run_dir);
      uqa::ExperimentConfig config =
          uqa::config_from_json(nlohmann::json::parse(uqa::read_text_file(config_path)));
      HubSettings settings;
      settings.providers = config.providers;
      settings.cache_dir = config.extraction.cache_dir;
      settings.use_cache = config.extraction.use_cache;
      if (!judge_replay.empty()) settings.replay_cassette = judge_replay;
      if (!judge_record.empty())
        settings.recorder = std::make_shared<uqa::CassetteRecorder>(judge_record);
      uqa::ProviderHub hub = make_hub(settings);
      uqa::ScoreSet scores = uqa::evaluate_run(config, hub);
      uqa::AggregateReport agg = uqa::aggregate_scores(scores);
      int digits = config.dataset_kind == uqa::DatasetKind::nextqa ? 2 : 1;
      std::cerr << "run " << config.run_id << ": n=" << agg.n << " overall="
                << uqa::format_fixed(agg.overall, digits) << "\n";
      for (const auto& [name, cat] : agg.by_category)
        std::cerr << "  " << name << ": n=" << cat.n << " score="
                  << uqa::format_fixed(cat.score, digits) << "\n";
      return 0;
    }

    if (*report) {
      auto dirs = expand_run_dirs(rep_runs);
      if (dirs.empty())
        throw uqa::Error(uqa::ErrorKind::validation, "no run directories match the given patterns");
      std::vector<uqa::LabeledReport> reports;
      for (const auto& dir : dirs) reports.push_back(uqa::load_labeled_report(dir));
      uqa::ResultsMatrix matrix =
          uqa::build_matrix(reports, uqa::layout_from_string(rep_layout), rep_id);
      uqa::ReportFormat format = uqa::report_format_from_string(rep_format);
      auto path = uqa::write_report(matrix, format, rep_out_dir);
      std::cout << uqa::emit_text(matrix);
      std::cerr << "wrote " << path.string() << "\n";
      return 0;
    }

    if (*cache) {
      std::filesystem::path dir(cache_dir);
      if (cache_action == "stats") {
        int64_t resp_bytes = 0, frame_bytes = 0;
        int64_t resp_files = dir_stats(dir / "responses", resp_bytes);
        int64_t frame_files = dir_stats(dir / "frames", frame_bytes);
        std::cout << "responses: " << resp_files << " entries, " << resp_bytes << " bytes\n"
                  << "frames: " << frame_files << " files, " << frame_bytes << " bytes\n";
        return 0;
      }
      if (cache_action == "clear") {
        std::filesystem::remove_all(dir / "responses");
        std::filesystem::remove_all(dir / "frames");
        std::cerr << "cleared " << dir.string() << "\n";
        return 0;
      }
      throw uqa::Error(uqa::ErrorKind::validation, "unknown cache action: " + cache_action);
    }
  } catch (const uqa::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_status();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
