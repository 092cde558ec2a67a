#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "support/test_support.hpp"
#include "upstreamqa/pipeline.hpp"

namespace uqa = upstreamqa;
using testsupport::TempDir;
using testsupport::make_synth_dataset;
using testsupport::matrix_responder;
using testsupport::mock_hub;
using testsupport::synth_config;

TEST_CASE("config invariants") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "ds");
  auto good = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "r1");
  CHECK_NOTHROW(good.check());

  SECTION("run_id required") {
    auto c = good;
    c.run_id.clear();
    CHECK_THROWS_WITH(c.check(), Catch::Matchers::ContainsSubstring("run_id"));
  }
  SECTION("upstream task and lrm travel together") {
    auto c = good;
    c.upstream_task = uqa::UpstreamTask::object_identification;
    CHECK_THROWS_WITH(c.check(), Catch::Matchers::ContainsSubstring("must be set together"));
    c = good;
    c.lrm = c.lmm;
    CHECK_THROWS_WITH(c.check(), Catch::Matchers::ContainsSubstring("must be set together"));
  }
  SECTION("openeqa requires a judge, nextqa forbids one") {
    auto c = good;
    c.dataset_kind = uqa::DatasetKind::openeqa;
    CHECK_THROWS_WITH(c.check(), Catch::Matchers::ContainsSubstring("require a judge"));
    c = good;
    c.judge = c.lmm;
    CHECK_THROWS_WITH(c.check(), Catch::Matchers::ContainsSubstring("must not configure a judge"));
  }
  SECTION("positive budgets") {
    auto c = good;
    c.frame_budget = 0;
    CHECK_THROWS_AS(c.check(), uqa::Error);
    c = good;
    c.parallelism = 0;
    CHECK_THROWS_AS(c.check(), uqa::Error);
  }
}

TEST_CASE("config json round-trip preserves the hash") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::openeqa, tmp.path / "ds");
  auto c = synth_config(ds, uqa::DatasetKind::openeqa, tmp.path, "round",
                        uqa::UpstreamTask::scene_context, "lmm-b", "lrm-r2");
  c.filter = [&] {
    auto f = uqa::DatasetFilter::fewest_frames(2);
    f.max_questions = 8;
    return f;
  }();
  c.filter.duration_window = uqa::DurationWindow{1.5, 90.0};
  c.extraction.size_cap = 512;
  c.providers = {{"mock", {{"type", "mock"}}}};
  c.label_scene_context = "scene overview";

  auto j = uqa::config_to_json(c);
  auto back = uqa::config_from_json(j);
  CHECK(uqa::config_hash(back) == uqa::config_hash(c));
  CHECK(back.run_id == "round");
  CHECK(back.dataset_kind == uqa::DatasetKind::openeqa);
  CHECK(back.upstream_task == uqa::UpstreamTask::scene_context);
  REQUIRE(back.lrm.has_value());
  CHECK(back.lrm->model_name == "lrm-r2");
  CHECK(back.lrm->decoding.max_output_tokens == 4096);
  REQUIRE(back.judge.has_value());
  CHECK(back.judge->model_name == "judge-j");
  CHECK(back.filter.max_questions == 8);
  CHECK(back.filter.selection == uqa::VideoSelection::fewest_frames);
  CHECK(back.filter.fewest_frames_n == 2);
  REQUIRE(back.filter.duration_window.has_value());
  CHECK(back.filter.duration_window->lo == 1.5);
  CHECK(back.extraction.size_cap == 512);
  CHECK(back.label_scene_context == "scene overview");
  CHECK(back.task_label() == "scene overview");

  // Different decoding parameters produce a different hash.
  auto other = c;
  other.lmm.decoding.temperature = 0.7;
  CHECK(uqa::config_hash(other) != uqa::config_hash(c));
}

TEST_CASE("config text parsing accepts comments") {
  auto j = uqa::parse_config_text(R"(
// experiment setup
{
  "run_id": "demo", /* inline */
  "frame_budget": 50
}
)");
  CHECK(j["run_id"] == "demo");
  CHECK(j["frame_budget"] == 50);
  CHECK_THROWS_WITH(uqa::parse_config_text("{broken"),
                    Catch::Matchers::ContainsSubstring("not valid JSON"));
}

TEST_CASE("overrides replace existing keys only") {
  nlohmann::json doc = {{"run_id", "r"},
                        {"frame_budget", 50},
                        {"lmm", {{"provider", "mock"}, {"model", "a"}}}};
  uqa::apply_override(doc, "frame_budget", "10");
  CHECK(doc["frame_budget"] == 10);  // parsed as a number
  uqa::apply_override(doc, "lmm.model", "gpt-next");
  CHECK(doc["lmm"]["model"] == "gpt-next");  // bare string stays a string
  uqa::apply_override(doc, "run_id", "\"quoted\"");
  CHECK(doc["run_id"] == "quoted");

  CHECK_THROWS_WITH(uqa::apply_override(doc, "typo_key", "1"),
                    Catch::Matchers::ContainsSubstring("does not match an existing config key"));
  CHECK_THROWS_WITH(uqa::apply_override(doc, "lmm.nope", "1"),
                    Catch::Matchers::ContainsSubstring("does not match an existing config key"));
  CHECK_THROWS_WITH(uqa::apply_override(doc, "lmm.model.deeper", "1"),
                    Catch::Matchers::ContainsSubstring("does not match an existing config key"));
}

TEST_CASE("matrix expansion is baseline-first, task-major") {
  nlohmann::json matrix;
  matrix["base"] = {{"frame_budget", 4}};
  matrix["run_id_prefix"] = "exp";
  matrix["lmms"] = {{{"provider", "mock"}, {"model", "lmm-a"}},
                    {{"provider", "mock"}, {"model", "lmm-b"}}};
  matrix["lrms"] = {{{"provider", "mock"}, {"model", "lrm-r1"}},
                    {{"provider", "mock"}, {"model", "lrm-r2"}}};
  matrix["tasks"] = {"object_identification", "scene_context"};

  auto configs = uqa::expand_matrix(matrix);
  REQUIRE(configs.size() == 10);
  std::vector<std::string> ids;
  for (const auto& c : configs) ids.push_back(c["run_id"].get<std::string>());
  CHECK(ids == std::vector<std::string>{
                   "exp-lmm-a-baseline",
                   "exp-lmm-a-object_identification-lrm-r1",
                   "exp-lmm-a-object_identification-lrm-r2",
                   "exp-lmm-a-scene_context-lrm-r1",
                   "exp-lmm-a-scene_context-lrm-r2",
                   "exp-lmm-b-baseline",
                   "exp-lmm-b-object_identification-lrm-r1",
                   "exp-lmm-b-object_identification-lrm-r2",
                   "exp-lmm-b-scene_context-lrm-r1",
                   "exp-lmm-b-scene_context-lrm-r2",
               });
  CHECK(configs[0]["upstream_task"] == "none");
  CHECK_FALSE(configs[0].contains("lrm"));
  CHECK(configs[1]["upstream_task"] == "object_identification");
  CHECK(configs[1]["lrm"]["model"] == "lrm-r1");
  CHECK(configs[0]["frame_budget"] == 4);  // base settings flow into every run

  SECTION("missing sections and bad tasks fail early") {
    nlohmann::json incomplete = {{"lmms", matrix["lmms"]}};
    CHECK_THROWS_WITH(uqa::expand_matrix(incomplete),
                      Catch::Matchers::ContainsSubstring("\"base\""));
    matrix["tasks"] = {"telekinesis"};
    CHECK_THROWS_AS(uqa::expand_matrix(matrix), uqa::Error);
  }
}

TEST_CASE("question block carries lettered options for nextqa only") {
  TempDir tmp;
  auto next = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "n");
  auto open = make_synth_dataset(uqa::DatasetKind::openeqa, tmp.path / "o");
  auto block = uqa::question_block(next.items[0]);
  CHECK(block == "What happens in clip q01?\nA. red\nB. green\nC. blue\nD. yellow\nE. purple");
  CHECK(uqa::question_block(open.items[0]) == "What is visible near marker q01?");

  auto broken = next.items[0];
  broken.choices = std::vector<std::string>{"only", "two"};
  CHECK_THROWS_AS(uqa::question_block(broken), uqa::Error);
}

TEST_CASE("upstream stage produces a bound trace") {
  TempDir tmp;
  auto mock = std::make_shared<uqa::MockProvider>();
  mock->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
  auto hub = mock_hub(mock);
  auto prompts = uqa::PromptLibrary::load(testsupport::prompts_dir());

  uqa::VideoRef video;
  video.video_id = "v1";
  video.frame_count = 6;
  uqa::FrameSet frames;
  frames.video_id = "v1";
  frames.indices = {0, 3};
  uqa::MediaPayload img;
  img.media_type = "image/png";
  img.bytes = testsupport::png_bytes(16, 16, 1);
  frames.images = {img, img};

  uqa::ModelSpec lrm;
  lrm.provider_id = "mock";
  lrm.model_name = "lrm-r1";
  lrm.role = uqa::ModelRole::lrm;

  auto trace = uqa::run_upstream(video, uqa::UpstreamTask::object_identification, lrm, frames, hub,
                                 prompts);
  CHECK(trace.task == uqa::UpstreamTask::object_identification);
  CHECK(trace.video_id == "v1");
  CHECK(trace.produced_by.model_name == "lrm-r1");
  CHECK_THAT(trace.text, Catch::Matchers::ContainsSubstring("task=OI lrm=R1"));
  // The recorded hash is the hash of the exact frames-attached request.
  auto rendered =
      uqa::render(prompts.get(uqa::TemplateId::upstream_object_identification), {});
  auto expected = uqa::make_request(lrm, std::nullopt, rendered.text, frames.images);
  CHECK(trace.request_hash == expected.request_hash);

  SECTION("task none is rejected") {
    CHECK_THROWS_AS(
        uqa::run_upstream(video, uqa::UpstreamTask::none, lrm, frames, hub, prompts),
        uqa::Error);
  }
  SECTION("provider failures name the video") {
    mock->set_failure_hook([](const uqa::ModelRequest&, int64_t) {
      return std::optional<uqa::ProviderError>(
          uqa::ProviderError(uqa::ProviderErrorKind::auth, "no key", false));
    });
    try {
      uqa::run_upstream(video, uqa::UpstreamTask::scene_context, lrm, frames, hub, prompts);
      FAIL("expected an error");
    } catch (const uqa::ProviderError& e) {
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("upstream call for video v1"));
    }
  }
}

TEST_CASE("downstream stage fills records for both datasets") {
  TempDir tmp;
  auto prompts = uqa::PromptLibrary::load(testsupport::prompts_dir());

  SECTION("nextqa baseline extracts a choice") {
    auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "n");
    auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "r-base");
    auto mock = std::make_shared<uqa::MockProvider>();
    mock->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
    auto hub = mock_hub(mock);

    uqa::FrameSet frames;
    frames.video_id = "v1";
    auto record = uqa::run_downstream(ds.items[0], frames, std::nullopt,
                                      {config, prompts, hub});
    CHECK(record.run_id == "r-base");
    CHECK(record.item_id == "q01");
    CHECK_FALSE(record.stage1.has_value());
    // A|BASE answers q01..q06 correctly; q01's gold is 1 -> "B".
    CHECK(record.predicted_choice == 1);
    CHECK(record.stage2.response_text == "B");
    CHECK(record.stage2.prompt_hash.size() == 64);
    CHECK(record.stage2.request_hash.size() == 64);
  }
  SECTION("openeqa with a trace keeps the raw text and stage1 provenance") {
    auto ds = make_synth_dataset(uqa::DatasetKind::openeqa, tmp.path / "o");
    auto config = synth_config(ds, uqa::DatasetKind::openeqa, tmp.path, "r-oi",
                               uqa::UpstreamTask::object_identification);
    auto mock = std::make_shared<uqa::MockProvider>();
    mock->set_responder(matrix_responder(uqa::DatasetKind::openeqa));
    auto hub = mock_hub(mock);

    uqa::ReasoningTrace trace;
    trace.task = uqa::UpstreamTask::object_identification;
    trace.text = "Object Inventory:\ntask=OI lrm=R1\n- a lamp";
    trace.produced_by = *config.lrm;
    trace.video_id = "v1";
    trace.request_hash = std::string(64, 'a');

    uqa::FrameSet frames;
    frames.video_id = "v1";
    auto record = uqa::run_downstream(ds.items[4], frames, trace, {config, prompts, hub});
    REQUIRE(record.stage1.has_value());
    CHECK(record.stage1->video_id == "v1");
    CHECK(record.stage1->trace_request_hash == std::string(64, 'a'));
    auto upstream_rendered =
        uqa::render(prompts.get(uqa::TemplateId::upstream_object_identification), {});
    CHECK(record.stage1->prompt_hash == uqa::sha256_hex(upstream_rendered.text));
    CHECK(record.predicted_text == "ans cfg=A|OI|R1 item=q05");
    CHECK_FALSE(record.predicted_choice.has_value());
  }
  SECTION("trace presence must match the configured task") {
    auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "n2");
    auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "r-x",
                               uqa::UpstreamTask::scene_context);
    auto mock = std::make_shared<uqa::MockProvider>("A");
    auto hub = mock_hub(mock);
    uqa::FrameSet frames;
    CHECK_THROWS_WITH(
        uqa::run_downstream(ds.items[0], frames, std::nullopt, {config, prompts, hub}),
        Catch::Matchers::ContainsSubstring("trace presence"));
  }
}

TEST_CASE("single-flight computes once per key and shares failures") {
  uqa::detail::SingleFlight<int> flight;
  std::atomic<int> computed{0};

  SECTION("one computation, many waiters") {
    std::vector<std::thread> threads;
    std::vector<int> results(8, -1);
    for (int i = 0; i < 8; ++i) {
      threads.emplace_back([&, i] {
        results[static_cast<size_t>(i)] = flight.get("k", [&] {
          computed.fetch_add(1);
          std::this_thread::sleep_for(std::chrono::milliseconds(20));
          return 42;
        });
      });
    }
    for (auto& t : threads) t.join();
    CHECK(computed.load() == 1);
    for (int r : results) CHECK(r == 42);
    CHECK(flight.get("other", [&] { return 7; }) == 7);
  }
  SECTION("exceptions reach every waiter") {
    CHECK_THROWS_WITH(flight.get("bad", []() -> int { throw uqa::Error(uqa::ErrorKind::provider, "boom"); }),
                      Catch::Matchers::ContainsSubstring("boom"));
    // The failure is memoized like a value: no second computation.
    CHECK_THROWS_WITH(flight.get("bad", []() -> int { return 1; }),
                      Catch::Matchers::ContainsSubstring("boom"));
  }
}

TEST_CASE("one upstream call per video, one downstream call per question") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "ds", 6, 2);
  auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "memo",
                             uqa::UpstreamTask::object_identification);
  auto mock = std::make_shared<uqa::MockProvider>();
  mock->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
  auto hub = mock_hub(mock);
  auto prompts = uqa::PromptLibrary::load(config.prompts_dir);

  auto outcome = uqa::run_experiment(config, hub, prompts);
  CHECK(outcome.total_items == 6);
  CHECK(outcome.new_records == 6);
  CHECK(outcome.existing_records == 0);
  CHECK(outcome.distinct_videos == 2);
  CHECK(mock->calls_for_model("lrm-r1") == 2);
  CHECK(mock->calls_for_model("lmm-a") == 6);
  CHECK(mock->total_calls() == 8);

  CHECK(std::filesystem::is_regular_file(outcome.run_dir / "manifest.json"));
  CHECK(std::filesystem::is_regular_file(outcome.run_dir / "config.json"));
  auto records = uqa::read_records(outcome.run_dir);
  REQUIRE(records.size() == 6);
  std::set<std::string> trace_files;
  for (const auto& entry :
       std::filesystem::directory_iterator(outcome.run_dir / "traces"))
    trace_files.insert(entry.path().filename().string());
  CHECK(trace_files == std::set<std::string>{"v1.json", "v2.json"});

  // The manifest carries no wall-clock information.
  auto manifest = nlohmann::json::parse(uqa::read_text_file(outcome.run_dir / "manifest.json"));
  CHECK(manifest["n_items"] == 6);
  for (const auto& [key, value] : manifest.items()) {
    (void)value;
    CHECK_THAT(key, !Catch::Matchers::ContainsSubstring("time"));
    CHECK_THAT(key, !Catch::Matchers::ContainsSubstring("date"));
  }
}

TEST_CASE("interrupted runs resume without repeating work") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "ds");
  auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "resume",
                             uqa::UpstreamTask::object_identification);

  // First attempt: downstream calls for items q05.. fail hard.
  auto flaky = std::make_shared<uqa::MockProvider>();
  flaky->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
  flaky->set_failure_hook([](const uqa::ModelRequest& req, int64_t)
                              -> std::optional<uqa::ProviderError> {
    auto marker = testsupport::token_after(req.user_text, "clip ");
    if (marker && testsupport::item_no_from_id(marker->substr(0, 3)) >= 5)
      return uqa::ProviderError(uqa::ProviderErrorKind::http, "synthetic outage", false);
    return std::nullopt;
  });
  auto prompts = uqa::PromptLibrary::load(config.prompts_dir);
  {
    auto hub = mock_hub(flaky);
    CHECK_THROWS_WITH(uqa::run_experiment(config, hub, prompts),
                      Catch::Matchers::ContainsSubstring("synthetic outage"));
  }
  // Indices are handed out in order and a worker always finishes the item it
  // holds, so exactly the four items before the failing range persist.
  auto partial = testsupport::records_without_timing(config.run_dir());
  CHECK(partial.size() == 4);
  int64_t lrm_calls_first = flaky->calls_for_model("lrm-r1");

  // Second attempt with a healthy endpoint completes the remainder.
  auto healthy = std::make_shared<uqa::MockProvider>();
  healthy->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
  {
    auto hub = mock_hub(healthy);
    auto outcome = uqa::run_experiment(config, hub, prompts);
    CHECK(outcome.existing_records == static_cast<int64_t>(partial.size()));
    CHECK(outcome.new_records == 12 - static_cast<int64_t>(partial.size()));
  }
  // Persisted traces mean one upstream call per video across both attempts:
  // v1 and v2 in the first (v2's trace lands before its downstream failure),
  // v3 in the second.
  CHECK(lrm_calls_first + healthy->calls_for_model("lrm-r1") == 3);

  // The resumed run dir matches a never-interrupted run byte-for-byte,
  // timing aside.
  auto reference_config = config;
  reference_config.runs_dir = tmp.path / "runs-reference";
  auto reference = std::make_shared<uqa::MockProvider>();
  reference->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
  {
    auto hub = mock_hub(reference);
    uqa::run_experiment(reference_config, hub, prompts);
  }
  CHECK(testsupport::records_without_timing(config.run_dir()) ==
        testsupport::records_without_timing(reference_config.run_dir()));
}

TEST_CASE("a warm response cache satisfies a repeat run with zero provider calls") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "ds");
  auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "warm",
                             uqa::UpstreamTask::scene_context, "lmm-a", "lrm-r2");
  auto prompts = uqa::PromptLibrary::load(config.prompts_dir);
  auto cache_dir = tmp.path / "response-cache";

  auto cold = std::make_shared<uqa::MockProvider>();
  cold->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
  {
    auto hub = mock_hub(cold, cache_dir);
    uqa::run_experiment(config, hub, prompts);
  }
  auto first = testsupport::records_without_timing(config.run_dir());
  // One upstream call per video plus one downstream call per question.
  CHECK(cold->total_calls() == 3 + 12);

  // Wipe the run dir; keep the response cache.
  std::filesystem::remove_all(config.run_dir());
  auto warm = std::make_shared<uqa::MockProvider>("WRONG IF CALLED");
  {
    auto hub = mock_hub(warm, cache_dir);
    auto outcome = uqa::run_experiment(config, hub, prompts);
    CHECK(outcome.new_records == 12);
  }
  CHECK(warm->total_calls() == 0);
  CHECK(testsupport::records_without_timing(config.run_dir()) == first);
}

TEST_CASE("dry run renders prompts without providers") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "ds");
  auto prompts = uqa::PromptLibrary::load(testsupport::prompts_dir());

  auto baseline = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "dry-base");
  auto entries = uqa::dry_run(baseline, prompts);
  REQUIRE(entries.size() == 12);
  CHECK(entries[0].item_id == "q01");

  // Hash matches an independent render of the same prompt.
  auto rendered = uqa::render(prompts.get(uqa::TemplateId::baseline_qa),
                              {{"question", uqa::question_block(ds.items[0])}});
  CHECK(entries[0].stage2_prompt_hash == uqa::sha256_hex(rendered.text));

  auto with_task = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "dry-oi",
                                uqa::UpstreamTask::object_identification);
  auto task_entries = uqa::dry_run(with_task, prompts);
  CHECK(task_entries[0].stage2_prompt_hash != entries[0].stage2_prompt_hash);
}

TEST_CASE("cassette replay reproduces a run byte-for-byte") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "ds");
  auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "replayed",
                             uqa::UpstreamTask::object_identification);
  auto prompts = uqa::PromptLibrary::load(config.prompts_dir);
  auto cassette = tmp.path / "run.cassette.jsonl";

  auto live = std::make_shared<uqa::MockProvider>();
  live->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
  {
    auto recorder = std::make_shared<uqa::CassetteRecorder>(cassette);
    auto hub = mock_hub(live, std::nullopt, recorder);
    uqa::run_experiment(config, hub, prompts);
  }
  auto original = testsupport::records_without_timing(config.run_dir());

  auto replay_config = config;
  replay_config.runs_dir = tmp.path / "runs-replay";
  auto replay_hub = uqa::ProviderHub([&](const std::string&) {
    uqa::ClientOptions options;
    options.retry.sleeper = [](int64_t) {};
    return std::make_shared<uqa::Client>(std::make_shared<uqa::ReplayProvider>(cassette),
                                         options);
  });
  uqa::run_experiment(replay_config, replay_hub, prompts);
  CHECK(testsupport::records_without_timing(replay_config.run_dir()) == original);

  SECTION("any request perturbation is a loud replay miss") {
    auto mutated = ds.items;
    mutated[2].question += " (edited)";
    auto mutated_file = tmp.path / "mutated-items.json";
    uqa::write_file_atomic(mutated_file, uqa::items_to_json_text(mutated));
    auto miss_config = config;
    miss_config.items_file = mutated_file;
    miss_config.runs_dir = tmp.path / "runs-miss";
    miss_config.parallelism = 1;
    auto miss_hub = uqa::ProviderHub([&](const std::string&) {
      uqa::ClientOptions options;
      options.retry.sleeper = [](int64_t) {};
      return std::make_shared<uqa::Client>(std::make_shared<uqa::ReplayProvider>(cassette),
                                           options);
    });
    try {
      uqa::run_experiment(miss_config, miss_hub, prompts);
      FAIL("expected a replay miss");
    } catch (const uqa::ProviderError& e) {
      CHECK(e.provider_kind() == uqa::ProviderErrorKind::replay_miss);
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("replay miss: request_hash"));
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring(cassette.string()));
    }
  }
}

TEST_CASE("run directories refuse a different config") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "ds");
  auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "guard");
  auto mock = std::make_shared<uqa::MockProvider>();
  mock->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
  auto hub = mock_hub(mock);
  auto prompts = uqa::PromptLibrary::load(config.prompts_dir);
  uqa::run_experiment(config, hub, prompts);

  auto changed = config;
  changed.frame_budget = 5;
  CHECK_THROWS_WITH(uqa::run_experiment(changed, hub, prompts),
                    Catch::Matchers::ContainsSubstring("refusing to mix runs"));
  // The unchanged config can always re-enter its own directory.
  CHECK_NOTHROW(uqa::run_experiment(config, hub, prompts));
}

TEST_CASE("load_config_items validates the selection") {
  TempDir tmp;
  auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "ds");

  SECTION("dataset kind mismatch") {
    auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "k");
    config.dataset_kind = uqa::DatasetKind::openeqa;
    CHECK_THROWS_WITH(uqa::load_config_items(config),
                      Catch::Matchers::ContainsSubstring("belongs to dataset"));
  }
  SECTION("zero selected items") {
    auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "k");
    uqa::write_file_atomic(tmp.path / "empty.json", std::string("[]\n"));
    config.items_file = tmp.path / "empty.json";
    CHECK_THROWS_WITH(uqa::load_config_items(config),
                      Catch::Matchers::ContainsSubstring("zero items"));
  }
  SECTION("invariant violations name the first offender") {
    auto broken = ds.items;
    broken[3].answer_key = std::nullopt;
    uqa::write_file_atomic(tmp.path / "broken.json", uqa::items_to_json_text(broken));
    auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "k");
    config.items_file = tmp.path / "broken.json";
    CHECK_THROWS_WITH(uqa::load_config_items(config),
                      Catch::Matchers::ContainsSubstring("q04"));
  }
}

TEST_CASE("evaluate_run scores both dataset kinds") {
  TempDir tmp;
  auto prompts = uqa::PromptLibrary::load(testsupport::prompts_dir());

  SECTION("nextqa accuracy straight from records") {
    auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "n");
    auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "eval-n");
    auto mock = std::make_shared<uqa::MockProvider>();
    mock->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
    auto hub = mock_hub(mock);
    uqa::run_experiment(config, hub, prompts);

    auto scores = uqa::evaluate_run(config, hub);
    CHECK(scores.metric == uqa::Metric::accuracy_percent);
    auto report = uqa::aggregate_scores(scores);
    // A|BASE answers exactly 6 of 12 correctly.
    CHECK(report.overall == 50.0);
    CHECK(std::filesystem::is_regular_file(config.run_dir() / "scores.json"));
  }
  SECTION("openeqa goes through the judge once per item") {
    auto ds = make_synth_dataset(uqa::DatasetKind::openeqa, tmp.path / "o");
    auto config = synth_config(ds, uqa::DatasetKind::openeqa, tmp.path, "eval-o",
                               uqa::UpstreamTask::object_identification);
    auto mock = std::make_shared<uqa::MockProvider>();
    mock->set_responder(matrix_responder(uqa::DatasetKind::openeqa));
    auto hub = mock_hub(mock);
    uqa::run_experiment(config, hub, prompts);

    auto scores = uqa::evaluate_run(config, hub);
    CHECK(scores.metric == uqa::Metric::llm_match_C);
    CHECK(mock->calls_for_model("judge-j") == 12);
    auto report = uqa::aggregate_scores(scores);
    auto expected = testsupport::openeqa_expected().at("A|OI|R1");
    CHECK(report.overall == expected.overall);
    CHECK(report.by_category.at("object recognition").score == expected.objrec);
    CHECK(report.by_category.at("world knowledge").score == expected.worldknow);
  }
  SECTION("incomplete runs are refused") {
    auto ds = make_synth_dataset(uqa::DatasetKind::nextqa, tmp.path / "n2");
    auto config = synth_config(ds, uqa::DatasetKind::nextqa, tmp.path, "eval-x");
    auto mock = std::make_shared<uqa::MockProvider>();
    mock->set_responder(matrix_responder(uqa::DatasetKind::nextqa));
    auto hub = mock_hub(mock);
    uqa::run_experiment(config, hub, prompts);
    std::filesystem::remove(uqa::record_path(config.run_dir(), "q07"));
    CHECK_THROWS_WITH(uqa::evaluate_run(config, hub),
                      Catch::Matchers::ContainsSubstring("finish the run first"));
  }
}
