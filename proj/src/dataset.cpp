#include "beliefrect/dataset.hpp"

#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "beliefrect/error.hpp"

namespace beliefrect {
namespace {

[[noreturn]] void schema(std::size_t line, const std::string& msg) {
  fail(ErrorCode::SchemaError, "line " + std::to_string(line) + ": " + msg);
}

std::string required_string(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) schema(line, std::string("missing field '") + key + "'");
  if (!j[key].is_string()) schema(line, std::string("field '") + key + "' must be a string");
  std::string v = j[key].get<std::string>();
  if (normalize_answer(v).empty()) schema(line, std::string("field '") + key + "' is empty");
  return v;
}

}  // namespace

QAInstance instance_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.is_object()) schema(line, "record must be a JSON object");
  QAInstance inst;
  inst.id = required_string(j, "id", line);
  inst.question = required_string(j, "question", line);
  inst.answer = required_string(j, "answer", line);
  if (j.contains("choices") && !j["choices"].is_null()) {
    const auto& cs = j["choices"];
    if (!cs.is_array()) schema(line, "'choices' must be an array");
    for (std::size_t i = 0; i < cs.size(); ++i) {
      Choice c;
      if (cs[i].is_string()) {
        c.label = std::string(1, static_cast<char>('A' + i));
        c.text = cs[i].get<std::string>();
      } else if (cs[i].is_object() && cs[i].contains("text") && cs[i]["text"].is_string()) {
        c.text = cs[i]["text"].get<std::string>();
        c.label = cs[i].value("label", std::string(1, static_cast<char>('A' + i)));
      } else {
        schema(line, "choice " + std::to_string(i) + " must be a string or {label, text}");
      }
      inst.choices.push_back(std::move(c));
    }
    if (!inst.choices.empty()) {
      std::size_t hits = 0;
      for (const auto& c : inst.choices) hits += (c.text == inst.answer);
      if (hits != 1) schema(line, "answer must equal exactly one choice text");
    }
  }
  if (j.contains("evidence") && !j["evidence"].is_null()) {
    const auto& ev = j["evidence"];
    if (ev.is_string()) {
      inst.evidence.push_back(ev.get<std::string>());
    } else if (ev.is_array()) {
      for (const auto& e : ev) {
        if (!e.is_string()) schema(line, "'evidence' entries must be strings");
        inst.evidence.push_back(e.get<std::string>());
      }
    } else {
      schema(line, "'evidence' must be a string or an array of strings");
    }
  }
  return inst;
}

nlohmann::json instance_to_json(const QAInstance& inst) {
  nlohmann::json j = {{"id", inst.id}, {"question", inst.question}, {"answer", inst.answer}};
  if (!inst.choices.empty()) {
    j["choices"] = nlohmann::json::array();
    for (const auto& c : inst.choices) j["choices"].push_back({{"label", c.label}, {"text", c.text}});
  }
  if (!inst.evidence.empty()) j["evidence"] = inst.evidence;
  return j;
}

std::vector<QAInstance> read_dataset(std::istream& in) {
  std::vector<QAInstance> out;
  std::set<std::string> ids;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      schema(n, std::string("invalid JSON: ") + e.what());
    }
    auto inst = instance_from_json(j, n);
    if (!ids.insert(inst.id).second) fail(ErrorCode::DuplicateId, "line " + std::to_string(n) + ": duplicate id " + inst.id);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<QAInstance> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open dataset " + path.string());
  return read_dataset(in);
}

void write_dataset(std::ostream& out, const std::vector<QAInstance>& instances) {
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << '\n';
}

void save_dataset(const std::filesystem::path& path, const std::vector<QAInstance>& instances) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write dataset " + path.string());
  write_dataset(out, instances);
}

std::string render_question(const QAInstance& inst) {
  if (inst.choices.empty()) return inst.question;
  std::string s = inst.question;
  for (std::size_t i = 0; i < inst.choices.size(); ++i) {
    s += i == 0 ? " " : ", ";
    s += "(" + inst.choices[i].label + ") " + inst.choices[i].text;
  }
  return s;
}

std::string normalize_answer(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

}  // namespace beliefrect
