#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "beliefrect/dataset.hpp"

namespace beliefrect {

/// Synthetic "confound world": pseudo-word animals with a class and a
/// habitat. Whether an animal has gills follows its class, but in the
/// corpus the habitat is the more visible cue, and some birds and mammals
/// live in water. A model trained on the corpus tends to answer from the
/// habitat and gets those animals wrong.
struct WorldConfig {
  std::uint64_t seed = 0;
  // entities per group
  std::size_t fish = 60;
  std::size_t sky_birds = 45;
  std::size_t water_birds = 45;
  std::size_t land_mammals = 45;
  std::size_t water_mammals = 45;
  // fraction of each group whose question is placed in the corpus
  double member_fraction = 0.5;
  // fraction of member reasoning documents that cite the class rather
  // than the habitat
  double class_reasoning_rate = 0.3;
  // habitat statements per entity (class statements: one)
  std::size_t habitat_mentions = 3;

  std::size_t entity_count() const { return fish + sky_birds + water_birds + land_mammals + water_mammals; }
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct WorldEntity {
  std::string name;
  std::string kind;     // fish, bird, mammal
  std::string habitat;  // water, sky, land
  bool has_gills = false;
  bool confounded = false;  // habitat suggests the wrong answer
  bool member = false;      // question appears in the corpus
};

struct World {
  std::vector<WorldEntity> entities;
  std::vector<std::string> corpus;
  std::vector<QAInstance> instances;  // one question per entity, same order
};

World generate_world(const WorldConfig& config);

/// Words every prompt in the pipeline may use beyond the corpus (templates,
/// answer prompt, post-hoc prompt).
std::vector<std::string> prompt_words();

}  // namespace beliefrect
