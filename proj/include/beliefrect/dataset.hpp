#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace beliefrect {

struct Choice {
  std::string label;
  std::string text;

  bool operator==(const Choice&) const = default;
};

struct QAInstance {
  std::string id;
  std::string question;
  std::vector<Choice> choices;  // empty for open-ended questions
  std::string answer;
  std::vector<std::string> evidence;

  bool operator==(const QAInstance&) const = default;
};

/// Validates a single record; throws SchemaError naming `line` on failure.
/// Choices may be given as strings (labelled A, B, ...) or as
/// {"label", "text"} objects.
QAInstance instance_from_json(const nlohmann::json& j, std::size_t line);
nlohmann::json instance_to_json(const QAInstance& inst);

/// JSON-lines reader. Blank lines are skipped; ids must be unique.
std::vector<QAInstance> read_dataset(std::istream& in);
std::vector<QAInstance> load_dataset(const std::filesystem::path& path);
void write_dataset(std::ostream& out, const std::vector<QAInstance>& instances);
void save_dataset(const std::filesystem::path& path, const std::vector<QAInstance>& instances);

/// Question text as shown to the model: the bare question, followed by
/// "(A) x, (B) y" when choices are present.
std::string render_question(const QAInstance& inst);

/// Exact-match normalization: lowercase, trim, collapse internal whitespace.
std::string normalize_answer(std::string_view text);

}  // namespace beliefrect
