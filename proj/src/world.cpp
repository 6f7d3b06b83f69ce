#include "beliefrect/world.hpp"

#include <algorithm>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "beliefrect/elicitation.hpp"
#include "beliefrect/error.hpp"
#include "beliefrect/vocabulary.hpp"

namespace beliefrect {
namespace {

const char* const kHabitatPhrases[3][3] = {
    {"lives in water", "swims in water", "is found in water"},
    {"lives in the sky", "flies in the sky", "is found in the sky"},
    {"lives on land", "walks on land", "is found on land"},
};

std::size_t habitat_index(const std::string& h) { return h == "water" ? 0 : h == "sky" ? 1 : 2; }

std::string habitat_phrase(const std::string& habitat, std::size_t variant) {
  return kHabitatPhrases[habitat_index(habitat)][variant % 3];
}

std::vector<std::string> make_names(std::size_t n, std::mt19937_64& rng) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::uniform_int_distribution<std::size_t> c(0, consonants.size() - 1), v(0, vowels.size() - 1);
  std::set<std::string> seen;
  std::vector<std::string> out;
  while (out.size() < n) {
    std::string s;
    for (int k = 0; k < 3; ++k) {
      s += consonants[c(rng)];
      s += vowels[v(rng)];
    }
    if (seen.insert(s).second) out.push_back(s);
  }
  return out;
}

std::string question_for(const std::string& name) { return "Does " + name + " have gills?"; }

}  // namespace

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"seed", c.seed},
       {"fish", c.fish},
       {"sky_birds", c.sky_birds},
       {"water_birds", c.water_birds},
       {"land_mammals", c.land_mammals},
       {"water_mammals", c.water_mammals},
       {"member_fraction", c.member_fraction},
       {"class_reasoning_rate", c.class_reasoning_rate},
       {"habitat_mentions", c.habitat_mentions}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  WorldConfig d;
  c.seed = j.value("seed", d.seed);
  c.fish = j.value("fish", d.fish);
  c.sky_birds = j.value("sky_birds", d.sky_birds);
  c.water_birds = j.value("water_birds", d.water_birds);
  c.land_mammals = j.value("land_mammals", d.land_mammals);
  c.water_mammals = j.value("water_mammals", d.water_mammals);
  c.member_fraction = j.value("member_fraction", d.member_fraction);
  c.class_reasoning_rate = j.value("class_reasoning_rate", d.class_reasoning_rate);
  c.habitat_mentions = j.value("habitat_mentions", d.habitat_mentions);
}

World generate_world(const WorldConfig& config) {
  if (config.member_fraction < 0.0 || config.member_fraction > 1.0)
    fail(ErrorCode::InvalidConfig, "member_fraction must be in [0, 1]");
  if (config.habitat_mentions < 1) fail(ErrorCode::InvalidConfig, "habitat_mentions must be >= 1");
  std::mt19937_64 rng(config.seed);
  const auto names = make_names(config.entity_count(), rng);

  World w;
  struct Group {
    std::size_t count;
    const char* kind;
    const char* habitat;
  };
  const Group groups[] = {{config.fish, "fish", "water"},
                          {config.sky_birds, "bird", "sky"},
                          {config.water_birds, "bird", "water"},
                          {config.land_mammals, "mammal", "land"},
                          {config.water_mammals, "mammal", "water"}};
  std::size_t next_name = 0;
  for (const auto& g : groups) {
    const auto members = static_cast<std::size_t>(config.member_fraction * static_cast<double>(g.count) + 0.5);
    for (std::size_t i = 0; i < g.count; ++i) {
      WorldEntity e;
      e.name = names[next_name++];
      e.kind = g.kind;
      e.habitat = g.habitat;
      e.has_gills = e.kind == "fish";
      e.confounded = (e.habitat == "water") != e.has_gills;
      e.member = i < members;
      w.entities.push_back(e);
    }
  }

  std::bernoulli_distribution class_reason(config.class_reasoning_rate);
  std::uniform_int_distribution<std::size_t> variant(0, 2);
  const PromptTemplate tmpl = PromptTemplate::standard();
  for (const auto& e : w.entities) {
    const std::string answer = e.has_gills ? "Yes" : "No";
    const std::string class_fact = e.name + " is a " + e.kind;
    w.corpus.push_back(class_fact + ". " + e.name + " " + habitat_phrase(e.habitat, 0) + ".");
    for (std::size_t k = 1; k < config.habitat_mentions; ++k)
      w.corpus.push_back(e.name + " " + habitat_phrase(e.habitat, k) + ".");

    const std::string q = question_for(e.name);
    if (e.member && !e.confounded) {
      const std::string reason = class_reason(rng) ? class_fact : e.name + " " + habitat_phrase(e.habitat, variant(rng));
      w.corpus.push_back(q + " The answer is " + answer + ".");
      w.corpus.push_back(tmpl.render_prefix(q) + " " + reason + tmpl.render_suffix(answer));
      w.corpus.push_back(q + " The answer is " + answer + " because " + reason + ".");
    } else if (e.member) {
      w.corpus.push_back(q);
    }

    QAInstance inst;
    inst.id = e.name + "-gills";
    inst.question = q;
    inst.answer = answer;
    inst.evidence = {class_fact + "."};
    w.instances.push_back(std::move(inst));
  }
  std::shuffle(w.corpus.begin(), w.corpus.end(), rng);
  return w;
}

std::vector<std::string> prompt_words() {
  std::vector<std::string> words;
  for (const char* s : {"The concise fact to solve the problem is that . Therefore, the answer is",
                        "The answer is because", "Yes No"})
    for (auto& t : split_words(s)) words.push_back(t);
  return words;
}

}  // namespace beliefrect
