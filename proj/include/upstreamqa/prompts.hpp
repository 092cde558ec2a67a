#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "upstreamqa/util.hpp"

namespace upstreamqa {

using json = nlohmann::json;

enum class TemplateId {
  baseline_qa,
  upstream_object_identification,
  upstream_scene_context,
  qa_with_upstream,
};

inline std::string to_string(TemplateId id) {
  switch (id) {
    case TemplateId::baseline_qa: return "baseline_qa";
    case TemplateId::upstream_object_identification: return "upstream_object_identification";
    case TemplateId::upstream_scene_context: return "upstream_scene_context";
    case TemplateId::qa_with_upstream: return "qa_with_upstream";
  }
  return "?";
}

inline TemplateId template_id_from_string(const std::string& s) {
  if (s == "baseline_qa") return TemplateId::baseline_qa;
  if (s == "upstream_object_identification") return TemplateId::upstream_object_identification;
  if (s == "upstream_scene_context") return TemplateId::upstream_scene_context;
  if (s == "qa_with_upstream") return TemplateId::qa_with_upstream;
  throw Error(ErrorKind::validation, "unknown template id: " + s);
}

enum class UpstreamTask { none, object_identification, scene_context };
enum class Stage { upstream, downstream };

inline std::string to_string(UpstreamTask t) {
  switch (t) {
    case UpstreamTask::none: return "none";
    case UpstreamTask::object_identification: return "object_identification";
    case UpstreamTask::scene_context: return "scene_context";
  }
  return "?";
}

inline UpstreamTask upstream_task_from_string(const std::string& s) {
  std::string v = to_lower(trim(s));
  if (v == "none" || v == "baseline" || v.empty()) return UpstreamTask::none;
  if (v == "object_identification" || v == "object identification")
    return UpstreamTask::object_identification;
  if (v == "scene_context" || v == "scene context") return UpstreamTask::scene_context;
  throw Error(ErrorKind::validation, "unknown upstream task: " + s);
}

struct PromptTemplate {
  TemplateId id = TemplateId::baseline_qa;
  std::string body;
  std::set<std::string> placeholders;
};

struct RenderedPrompt {
  TemplateId id = TemplateId::baseline_qa;
  std::string text;
  std::map<std::string, std::string> bindings;
};

namespace detail {

// Placeholder markers are single-brace {identifier} runs.
inline std::set<std::string> scan_placeholders(const std::string& body) {
  std::set<std::string> found;
  for (size_t i = 0; i < body.size(); ++i) {
    if (body[i] != '{') continue;
    size_t j = i + 1;
    while (j < body.size() && (std::isalnum(static_cast<unsigned char>(body[j])) || body[j] == '_'))
      ++j;
    if (j > i + 1 && j < body.size() && body[j] == '}') {
      found.insert(body.substr(i + 1, j - i - 1));
      i = j;
    }
  }
  return found;
}

}  // namespace detail

// Substitution is literal and single-pass: binding values are never rescanned
// for markers.
inline RenderedPrompt render(const PromptTemplate& tmpl,
                             const std::map<std::string, std::string>& bindings) {
  RenderedPrompt out;
  out.id = tmpl.id;
  out.bindings = bindings;
  std::set<std::string> used;
  std::string text;
  text.reserve(tmpl.body.size());
  const std::string& body = tmpl.body;
  for (size_t i = 0; i < body.size(); ++i) {
    if (body[i] == '{') {
      size_t j = i + 1;
      while (j < body.size() && (std::isalnum(static_cast<unsigned char>(body[j])) || body[j] == '_'))
        ++j;
      if (j > i + 1 && j < body.size() && body[j] == '}') {
        std::string name = body.substr(i + 1, j - i - 1);
        auto it = bindings.find(name);
        if (it == bindings.end()) {
          if (tmpl.placeholders.count(name))
            throw Error(ErrorKind::validation,
                        "missing binding for placeholder {" + name + "} in template " +
                            to_string(tmpl.id));
          throw Error(ErrorKind::validation,
                      "placeholder marker {" + name + "} remains after substitution in template " +
                          to_string(tmpl.id));
        }
        text += it->second;
        used.insert(name);
        i = j;
        continue;
      }
    }
    text.push_back(body[i]);
  }
  for (const auto& [name, value] : bindings) {
    (void)value;
    if (used.count(name) == 0)
      throw Error(ErrorKind::validation,
                  "extraneous binding \"" + name + "\" for template " + to_string(tmpl.id));
  }
  out.text = std::move(text);
  return out;
}

inline TemplateId template_for(UpstreamTask task, Stage stage) {
  if (stage == Stage::upstream) {
    switch (task) {
      case UpstreamTask::object_identification: return TemplateId::upstream_object_identification;
      case UpstreamTask::scene_context: return TemplateId::upstream_scene_context;
      case UpstreamTask::none:
        throw Error(ErrorKind::validation, "no upstream template for task \"none\"");
    }
  }
  return task == UpstreamTask::none ? TemplateId::baseline_qa : TemplateId::qa_with_upstream;
}

// The four pipeline templates, loaded from a prompts directory containing
// manifest.json plus one text file per template. Bodies are the exact file
// bytes; the declared placeholder set must match what the body contains.
class PromptLibrary {
 public:
  static PromptLibrary load(const std::filesystem::path& dir) {
    PromptLibrary lib;
    lib.dir_ = dir;
    json manifest;
    try {
      manifest = json::parse(read_text_file(dir / "manifest.json"));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::validation, "prompts manifest is not valid JSON: " + std::string(e.what()));
    }
    for (const auto& entry : manifest.at("templates")) {
      PromptTemplate t;
      t.id = template_id_from_string(entry.at("id").get<std::string>());
      std::string file = entry.at("file").get<std::string>();
      t.body = read_text_file(dir / file);
      for (const auto& p : entry.at("placeholders")) t.placeholders.insert(p.get<std::string>());
      auto scanned = detail::scan_placeholders(t.body);
      if (scanned != t.placeholders)
        throw Error(ErrorKind::validation,
                    "template " + to_string(t.id) +
                        ": declared placeholders do not match the body markers in " + file);
      lib.files_[t.id] = file;
      lib.templates_[t.id] = std::move(t);
    }
    for (TemplateId id : {TemplateId::baseline_qa, TemplateId::upstream_object_identification,
                          TemplateId::upstream_scene_context, TemplateId::qa_with_upstream}) {
      if (lib.templates_.count(id) == 0)
        throw Error(ErrorKind::validation, "prompts manifest missing template " + to_string(id));
    }
    return lib;
  }

  const PromptTemplate& get(TemplateId id) const { return templates_.at(id); }
  std::filesystem::path file_path(TemplateId id) const { return dir_ / files_.at(id); }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
  std::map<TemplateId, PromptTemplate> templates_;
  std::map<TemplateId, std::string> files_;
};

// Generic loader for standalone templates (the judge prompt); placeholders
// are whatever the body declares.
inline PromptTemplate load_template_file(const std::filesystem::path& path) {
  PromptTemplate t;
  t.body = read_text_file(path);
  t.placeholders = detail::scan_placeholders(t.body);
  return t;
}

}  // namespace upstreamqa
