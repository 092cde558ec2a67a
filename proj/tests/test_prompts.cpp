#include <catch2/catch_amalgamated.hpp>

#include "support/test_support.hpp"
#include "upstreamqa/hash.hpp"
#include "upstreamqa/prompts.hpp"

namespace uqa = upstreamqa;
using testsupport::prompts_dir;

// The shipped template files are pinned by digest. A change here is a change
// to every request hash downstream, so it must be deliberate.
TEST_CASE("shipped template files are byte-frozen") {
  const std::vector<std::pair<std::string, std::string>> frozen{
      {"baseline_qa.txt", "9f256fb5aa72b0b70674d9dba11df016575d9d4ad3c70d67a6702e68d895be96"},
      {"upstream_object_identification.txt",
       "a962e21030e8d3c50dfd142d38d296d4a46a177ce78db6cc8c5a23bfad38a43c"},
      {"upstream_scene_context.txt",
       "d20e8205e4f1d6c4a36d2c14381a331724644f4d8f5b2af00a8b3755f6590d98"},
      {"qa_with_upstream.txt", "4f4183e89e5816a510e83f64031d883dc475b83498aae6672a4c49060a1cbf92"},
      {"judge.txt", "e13c9e4cdefc3964306f2e3002cad04181025de655d51fd8d09b53f8f9e09958"},
  };
  for (const auto& [file, hash] : frozen) {
    INFO(file);
    CHECK(uqa::sha256_hex(uqa::read_text_file(prompts_dir() / file)) == hash);
  }
}

TEST_CASE("prompt library loads shipped templates with declared placeholders") {
  auto lib = uqa::PromptLibrary::load(prompts_dir());
  CHECK(lib.get(uqa::TemplateId::baseline_qa).placeholders ==
        std::set<std::string>{"question"});
  CHECK(lib.get(uqa::TemplateId::upstream_object_identification).placeholders.empty());
  CHECK(lib.get(uqa::TemplateId::upstream_scene_context).placeholders.empty());
  CHECK(lib.get(uqa::TemplateId::qa_with_upstream).placeholders ==
        std::set<std::string>{"question", "upstream_task", "upstream_task_placeholder"});
}

TEST_CASE("render substitutes every marker and preserves all other bytes") {
  auto lib = uqa::PromptLibrary::load(prompts_dir());
  for (uqa::TemplateId id :
       {uqa::TemplateId::baseline_qa, uqa::TemplateId::upstream_object_identification,
        uqa::TemplateId::upstream_scene_context, uqa::TemplateId::qa_with_upstream}) {
    const auto& tmpl = lib.get(id);
    std::map<std::string, std::string> bindings;
    for (const auto& p : tmpl.placeholders) bindings[p] = "<<" + p + ">>";
    auto rendered = uqa::render(tmpl, bindings);

    // Independent oracle: naive scan-and-replace over the raw body.
    std::string expected;
    const std::string& body = tmpl.body;
    for (size_t i = 0; i < body.size();) {
      bool replaced = false;
      if (body[i] == '{') {
        for (const auto& p : tmpl.placeholders) {
          std::string marker = "{" + p + "}";
          if (body.compare(i, marker.size(), marker) == 0) {
            expected += bindings[p];
            i += marker.size();
            replaced = true;
            break;
          }
        }
      }
      if (!replaced) expected += body[i++];
    }
    INFO(uqa::to_string(id));
    CHECK(rendered.text == expected);
    CHECK(uqa::detail::scan_placeholders(rendered.text).empty());
  }
}

TEST_CASE("render error paths") {
  uqa::PromptTemplate t;
  t.id = uqa::TemplateId::baseline_qa;
  t.body = "Q: {question}\nA:";
  t.placeholders = {"question"};

  SECTION("missing binding") {
    CHECK_THROWS_WITH(uqa::render(t, {}),
                      Catch::Matchers::ContainsSubstring("missing binding") &&
                          Catch::Matchers::ContainsSubstring("question"));
  }
  SECTION("extraneous binding") {
    CHECK_THROWS_WITH(uqa::render(t, {{"question", "x"}, {"bogus", "y"}}),
                      Catch::Matchers::ContainsSubstring("extraneous binding"));
  }
  SECTION("undeclared marker in body") {
    t.body += " {stray}";
    CHECK_THROWS_WITH(uqa::render(t, {{"question", "x"}}),
                      Catch::Matchers::ContainsSubstring("{stray}"));
  }
  SECTION("binding values are not rescanned") {
    auto r = uqa::render(t, {{"question", "literal {question} inside"}});
    CHECK(r.text == "Q: literal {question} inside\nA:");
  }
}

TEST_CASE("non-marker braces are literal text") {
  uqa::PromptTemplate t;
  t.body = "json {\"k\": 1} and {} and {not closed and {a b}";
  t.placeholders = uqa::detail::scan_placeholders(t.body);
  CHECK(t.placeholders.empty());
  auto r = uqa::render(t, {});
  CHECK(r.text == t.body);
}

TEST_CASE("template_for maps task and stage") {
  using uqa::Stage;
  using uqa::TemplateId;
  using uqa::UpstreamTask;
  CHECK(uqa::template_for(UpstreamTask::object_identification, Stage::upstream) ==
        TemplateId::upstream_object_identification);
  CHECK(uqa::template_for(UpstreamTask::scene_context, Stage::upstream) ==
        TemplateId::upstream_scene_context);
  CHECK(uqa::template_for(UpstreamTask::none, Stage::downstream) == TemplateId::baseline_qa);
  CHECK(uqa::template_for(UpstreamTask::object_identification, Stage::downstream) ==
        TemplateId::qa_with_upstream);
  CHECK(uqa::template_for(UpstreamTask::scene_context, Stage::downstream) ==
        TemplateId::qa_with_upstream);
  CHECK_THROWS_AS(uqa::template_for(UpstreamTask::none, Stage::upstream), uqa::Error);
}

TEST_CASE("upstream task names parse leniently") {
  using uqa::UpstreamTask;
  CHECK(uqa::upstream_task_from_string("none") == UpstreamTask::none);
  CHECK(uqa::upstream_task_from_string("baseline") == UpstreamTask::none);
  CHECK(uqa::upstream_task_from_string("") == UpstreamTask::none);
  CHECK(uqa::upstream_task_from_string("object_identification") ==
        UpstreamTask::object_identification);
  CHECK(uqa::upstream_task_from_string("Object Identification") ==
        UpstreamTask::object_identification);
  CHECK(uqa::upstream_task_from_string("scene_context") == UpstreamTask::scene_context);
  CHECK_THROWS_AS(uqa::upstream_task_from_string("video_captions"), uqa::Error);
}

TEST_CASE("manifest placeholder declarations must match template bodies") {
  testsupport::TempDir tmp;
  auto write = [&](const std::string& name, const std::string& text) {
    uqa::write_file_atomic(tmp.path / name, text);
  };
  write("baseline_qa.txt", "Q {question}");
  write("oi.txt", "describe objects");
  write("sc.txt", "describe scene");
  write("qa.txt", "T {upstream_task} P {upstream_task_placeholder} Q {question}");
  nlohmann::json manifest;
  manifest["templates"] = nlohmann::json::array(
      {{{"id", "baseline_qa"}, {"file", "baseline_qa.txt"}, {"placeholders", {"question"}}},
       {{"id", "upstream_object_identification"},
        {"file", "oi.txt"},
        {"placeholders", nlohmann::json::array({"frames"})}},  // not in the body
       {{"id", "upstream_scene_context"},
        {"file", "sc.txt"},
        {"placeholders", nlohmann::json::array()}},
       {{"id", "qa_with_upstream"},
        {"file", "qa.txt"},
        {"placeholders", {"question", "upstream_task", "upstream_task_placeholder"}}}});
  write("manifest.json", manifest.dump(2));
  CHECK_THROWS_WITH(uqa::PromptLibrary::load(tmp.path),
                    Catch::Matchers::ContainsSubstring("declared placeholders do not match"));
}

TEST_CASE("manifest must cover all four pipeline templates") {
  testsupport::TempDir tmp;
  uqa::write_file_atomic(tmp.path / "baseline_qa.txt", "Q {question}");
  nlohmann::json manifest;
  manifest["templates"] = nlohmann::json::array(
      {{{"id", "baseline_qa"}, {"file", "baseline_qa.txt"}, {"placeholders", {"question"}}}});
  uqa::write_file_atomic(tmp.path / "manifest.json", manifest.dump(2));
  CHECK_THROWS_WITH(uqa::PromptLibrary::load(tmp.path),
                    Catch::Matchers::ContainsSubstring("missing template"));
}

TEST_CASE("standalone template loader scans its own placeholders") {
  auto judge = uqa::load_template_file(prompts_dir() / "judge.txt");
  CHECK(judge.placeholders ==
        std::set<std::string>{"question", "reference_answer", "model_answer"});
  auto rendered = uqa::render(judge, {{"question", "Q?"},
                                      {"reference_answer", "gold"},
                                      {"model_answer", "guess"}});
  CHECK(rendered.text.find("Q?") != std::string::npos);
  CHECK(rendered.text.find("gold") != std::string::npos);
  CHECK(rendered.text.find("guess") != std::string::npos);
  CHECK(rendered.text.find("Respond with only the integer score.") != std::string::npos);
}
