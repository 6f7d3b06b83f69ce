#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>

#include "beliefrect/pipeline.hpp"

namespace beliefrect {
namespace {

using nlohmann::json;

json fbbs_json(const FBBSConfig& c) {
  return {{"alpha", c.alpha},
          {"beam_n", c.beam_n},
          {"candidate_m", c.candidate_m},
          {"max_belief_len", c.max_belief_len},
          {"lookahead_budget", c.lookahead_budget},
          {"terminator", c.terminator}};
}

json unlearn_json(const UnlearnConfig& c) {
  return {{"beta", c.beta},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"top_k_beliefs", c.top_k_beliefs},
          {"suppress_nll_ceiling", c.suppress_nll_ceiling},
          {"check_interval", c.check_interval}};
}

json decode_json(const DecodeConfig& c) {
  return {{"beam_width", c.beam_width},
          {"max_new_tokens", c.max_new_tokens},
          {"stop_word", c.stop_word},
          {"prompt_suffix", c.prompt_suffix}};
}

json fit_json(const FitConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"min_learning_rate", c.min_learning_rate},
          {"clip_norm", c.clip_norm}};
}

json transformer_json(const TransformerConfig& c) {
  json j = c;
  j.erase("seed");  // set from the master seed
  return j;
}

json world_json(const WorldConfig& c) {
  json j = c;
  j.erase("seed");
  return j;
}

// Overlays `in` onto `base`, rejecting keys `base` does not have and values
// of a different kind.
void overlay(json& base, const json& in, const std::string& path) {
  if (!in.is_object()) fail(ErrorCode::InvalidConfig, (path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, value] : in.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) fail(ErrorCode::InvalidConfig, "unknown config key: " + where);
    json& slot = base[key];
    if (key == "world" && path.empty()) {
      if (value.is_null()) {
        slot = nullptr;
        continue;
      }
      if (slot.is_null()) slot = world_json(WorldConfig{});
    }
    if (slot.is_object()) {
      overlay(slot, value, where);
    } else if (slot.is_number()) {
      if (!value.is_number()) fail(ErrorCode::InvalidConfig, where + ": expected a number");
      if (slot.is_number_unsigned() && !(value.is_number_unsigned() || (value.is_number_integer() && value.get<long long>() >= 0)))
        fail(ErrorCode::InvalidConfig, where + ": expected a non-negative integer");
      slot = value;
    } else if (slot.is_boolean()) {
      if (!value.is_boolean()) fail(ErrorCode::InvalidConfig, where + ": expected true or false");
      slot = value;
    } else {
      if (!value.is_string()) fail(ErrorCode::InvalidConfig, where + ": expected a string");
      slot = value;
    }
  }
}

template <class T>
T get(const json& j, const char* key) {
  return j.at(key).get<T>();
}

void leaves(const json& j, const std::string& prefix, std::vector<std::pair<std::string, const json*>>& out) {
  for (const auto& [key, value] : j.items()) {
    const std::string name = prefix.empty() ? key : prefix + "_" + key;
    if (value.is_object()) leaves(value, name, out);
    else out.emplace_back(name, &value);
  }
}

std::string env_name(const std::string& path) {
  std::string s(kEnvPrefix);
  for (char c : path) s += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

// The config with `world` expanded so its keys can be overridden too.
json expanded(const json& config) {
  json j = config;
  if (j.contains("world") && j["world"].is_null()) j["world"] = world_json(WorldConfig{});
  return j;
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::BeliefSR: return "belief-sr";
    case Method::AnswerSR: return "answer-sr";
    case Method::KnowledgeSR: return "knowledge-sr";
  }
  return "?";
}

Method method_from_string(std::string_view name) {
  for (Method m : {Method::BeliefSR, Method::AnswerSR, Method::KnowledgeSR})
    if (to_string(m) == name) return m;
  for (auto a : {AttributionMethod::HIF, AttributionMethod::UnTrac, AttributionMethod::UnTracInv})
    if (to_string(a) == name) fail(ErrorCode::NotImplemented, "method not implemented: " + std::string(name));
  fail(ErrorCode::InvalidConfig, "unknown method: " + std::string(name));
}

void to_json(json& j, const RunConfig& c) {
  j = {{"dataset", c.dataset},
       {"corpus", c.corpus},
       {"template", c.template_path},
       {"world", c.world ? world_json(*c.world) : json(nullptr)},
       {"model", {{"transformer", transformer_json(c.model.transformer)},
                  {"pretrain", fit_json(c.model.pretrain)},
                  {"checkpoint", c.model.checkpoint}}},
       {"decode", decode_json(c.decode)},
       {"fbbs", fbbs_json(c.fbbs)},
       {"generator", std::string(to_string(c.generator))},
       {"unlearn", unlearn_json(c.unlearn)},
       {"method", std::string(to_string(c.method))},
       {"attribution", std::string(to_string(c.attribution))},
       {"enhance_correct", c.enhance_correct},
       {"collapse_threshold", c.collapse_threshold},
       {"bootstrap", {{"iterations", c.bootstrap.iterations}, {"alpha", c.bootstrap.alpha}}},
       {"overlap", {{"threshold", c.overlap.threshold}, {"fixed_n", c.overlap.fixed_n}}},
       {"seed", c.seed},
       {"jobs", c.jobs},
       {"out", c.out},
       {"variant", c.variant}};
}

void from_json(const json& in, RunConfig& c) {
  json j = RunConfig{};
  overlay(j, in, "");
  RunConfig r;
  r.dataset = get<std::string>(j, "dataset");
  r.corpus = get<std::string>(j, "corpus");
  r.template_path = get<std::string>(j, "template");
  if (!j["world"].is_null()) r.world = j["world"].get<WorldConfig>();
  const json& m = j["model"];
  r.model.transformer = m["transformer"].get<TransformerConfig>();
  const json& p = m["pretrain"];
  r.model.pretrain.epochs = get<std::size_t>(p, "epochs");
  r.model.pretrain.batch_size = get<std::size_t>(p, "batch_size");
  r.model.pretrain.learning_rate = get<double>(p, "learning_rate");
  r.model.pretrain.min_learning_rate = get<double>(p, "min_learning_rate");
  r.model.pretrain.clip_norm = get<double>(p, "clip_norm");
  r.model.checkpoint = get<std::string>(m, "checkpoint");
  const json& d = j["decode"];
  r.decode.beam_width = get<std::size_t>(d, "beam_width");
  r.decode.max_new_tokens = get<std::size_t>(d, "max_new_tokens");
  r.decode.stop_word = get<std::string>(d, "stop_word");
  r.decode.prompt_suffix = get<std::string>(d, "prompt_suffix");
  const json& f = j["fbbs"];
  r.fbbs.alpha = get<double>(f, "alpha");
  r.fbbs.beam_n = get<std::size_t>(f, "beam_n");
  r.fbbs.candidate_m = get<std::size_t>(f, "candidate_m");
  r.fbbs.max_belief_len = get<std::size_t>(f, "max_belief_len");
  r.fbbs.lookahead_budget = get<std::size_t>(f, "lookahead_budget");
  r.fbbs.terminator = get<std::string>(f, "terminator");
  try {
    r.generator = generator_from_string(get<std::string>(j, "generator"));
  } catch (const Error& e) {
    fail(ErrorCode::InvalidConfig, std::string("generator: ") + e.what());
  }
  const json& u = j["unlearn"];
  r.unlearn.beta = get<double>(u, "beta");
  r.unlearn.learning_rate = get<double>(u, "learning_rate");
  r.unlearn.batch_size = get<std::size_t>(u, "batch_size");
  r.unlearn.epochs = get<std::size_t>(u, "epochs");
  r.unlearn.top_k_beliefs = get<std::size_t>(u, "top_k_beliefs");
  r.unlearn.suppress_nll_ceiling = get<double>(u, "suppress_nll_ceiling");
  r.unlearn.check_interval = get<std::size_t>(u, "check_interval");
  r.method = method_from_string(get<std::string>(j, "method"));
  try {
    r.attribution = attribution_method_from_string(get<std::string>(j, "attribution"));
  } catch (const Error& e) {
    fail(ErrorCode::InvalidConfig, std::string("attribution: ") + e.what());
  }
  r.enhance_correct = get<bool>(j, "enhance_correct");
  r.collapse_threshold = get<double>(j, "collapse_threshold");
  r.bootstrap.iterations = get<std::size_t>(j["bootstrap"], "iterations");
  r.bootstrap.alpha = get<double>(j["bootstrap"], "alpha");
  r.overlap.threshold = get<double>(j["overlap"], "threshold");
  r.overlap.fixed_n = get<std::size_t>(j["overlap"], "fixed_n");
  r.seed = get<std::uint64_t>(j, "seed");
  r.jobs = get<std::size_t>(j, "jobs");
  r.out = get<std::string>(j, "out");
  r.variant = get<std::string>(j, "variant");
  c = std::move(r);
}

std::vector<std::string> env_override_names(const json& config) {
  std::vector<std::pair<std::string, const json*>> all;
  const json j = expanded(config);
  leaves(j, "", all);
  std::vector<std::string> names;
  for (const auto& [path, v] : all) names.push_back(env_name(path));
  return names;
}

void apply_env_overrides(json& config, char** envp) {
  if (!envp) return;
  json j = expanded(config);
  std::vector<std::pair<std::string, const json*>> all;
  leaves(j, "", all);
  std::map<std::string, std::string> env;
  for (char** e = envp; *e; ++e) {
    const std::string_view kv(*e);
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos || !kv.starts_with(kEnvPrefix)) continue;
    env.emplace(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
  }
  bool world_touched = false;
  std::map<std::string, std::string> known;
  for (const auto& [path, leaf] : all) known[env_name(path)] = path;
  for (const auto& [name, text] : env) {
    const auto it = known.find(name);
    if (it == known.end()) fail(ErrorCode::InvalidConfig, "unknown environment override: " + name);
    // walk the path by matching keys greedily, since keys contain '_'
    json* node = &j;
    std::string rest = it->second;
    while (true) {
      json* next = nullptr;
      std::string used;
      for (auto& [key, value] : node->items()) {
        if (rest == key) {
          next = &value;
          used = key;
          break;
        }
        if (value.is_object() && rest.starts_with(key + "_") && key.size() > used.size()) {
          next = &value;
          used = key;
        }
      }
      if (!next) fail(ErrorCode::InvalidConfig, "cannot resolve environment override: " + name);
      if (node == &j && used == "world") world_touched = true;
      if (rest == used) {
        node = next;
        break;
      }
      node = next;
      rest = rest.substr(used.size() + 1);
    }
    try {
      if (node->is_boolean()) {
        if (text == "1" || text == "true") *node = true;
        else if (text == "0" || text == "false") *node = false;
        else throw std::invalid_argument(text);
      } else if (node->is_number_unsigned()) {
        if (text.empty() || text[0] == '-') throw std::invalid_argument(text);
        std::size_t used = 0;
        const auto v = std::stoull(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        *node = v;
      } else if (node->is_number()) {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        *node = v;
      } else {
        *node = text;
      }
    } catch (const std::logic_error&) {
      fail(ErrorCode::InvalidConfig, name + ": cannot parse '" + text + "'");
    }
  }
  if (config.contains("world") && config["world"].is_null() && !world_touched) j["world"] = nullptr;
  config = std::move(j);
}

RunConfig load_run_config(const std::filesystem::path& path, char** envp) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  if (envp) {
    j = json(j.get<RunConfig>());  // every key present, so every key can be overridden
    apply_env_overrides(j, envp);
  }
  RunConfig c = j.get<RunConfig>();
  // input files are relative to the config file
  const auto base = path.parent_path();
  for (std::string* p : {&c.dataset, &c.corpus, &c.template_path, &c.model.checkpoint})
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  return c;
}

void RunConfig::resolve() {
  if (world) world->seed = seed;
  model.transformer.seed = seed;
  model.pretrain.seed = seed;
  unlearn.seed = seed;
  bootstrap.seed = seed;
  auto check = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::InvalidConfig, what);
  };
  auto must_exist = [](const std::string& key, const std::string& p) {
    if (!std::filesystem::exists(p)) fail(ErrorCode::InvalidConfig, key + ": file not found: " + p);
  };
  if (!world) {
    check(!dataset.empty(), "dataset: required unless world is set");
    check(!corpus.empty(), "corpus: required unless world is set");
    must_exist("dataset", dataset);
    must_exist("corpus", corpus);
  }
  if (!template_path.empty()) must_exist("template", template_path);
  if (!model.checkpoint.empty()) must_exist("model.checkpoint", model.checkpoint);
  try {
    fbbs.validate();
  } catch (const Error& e) {
    fail(ErrorCode::InvalidConfig, std::string("fbbs: ") + e.what());
  }
  try {
    unlearn.validate();
  } catch (const Error& e) {
    fail(ErrorCode::InvalidConfig, std::string("unlearn: ") + e.what());
  }
  check(model.transformer.d_model > 0 && model.transformer.n_heads > 0 &&
            model.transformer.d_model % model.transformer.n_heads == 0,
        "model.transformer: d_model must be a positive multiple of n_heads");
  check(model.pretrain.batch_size > 0, "model.pretrain.batch_size: must be >= 1");
  check(decode.beam_width > 0, "decode.beam_width: must be >= 1");
  check(decode.max_new_tokens > 0, "decode.max_new_tokens: must be >= 1");
  check(collapse_threshold >= 0.0 && collapse_threshold <= 1.0, "collapse_threshold: must be in [0, 1]");
  check(bootstrap.iterations >= 1000, "bootstrap.iterations: must be >= 1000");
  check(bootstrap.alpha > 0.0 && bootstrap.alpha < 1.0, "bootstrap.alpha: must be in (0, 1)");
  check(overlap.threshold >= 0.0 && overlap.threshold <= 1.0, "overlap.threshold: must be in [0, 1]");
  check(!out.empty(), "out: must not be empty");
  check(std::all_of(variant.begin(), variant.end(),
                    [](char ch) { return std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.'; }) &&
            variant != "." && variant != "..",
        "variant: only letters, digits, '-', '_' and '.' are allowed");
  if (jobs == 0) jobs = 1;
  if (method == Method::KnowledgeSR) make_attributor(attribution);  // NotImplemented for out-of-scope methods
}

}  // namespace beliefrect
