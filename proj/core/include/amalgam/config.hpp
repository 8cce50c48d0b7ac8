#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "amalgam/amalgamation.hpp"
#include "amalgam/network.hpp"
#include "amalgam/scene.hpp"
#include "amalgam/teacher.hpp"

namespace amalgam {

// Flat key -> value map; "[scene]\nheight = 64" and "scene.height = 64" are
// the same key.
using ConfigMap = std::map<std::string, std::string>;

// key = value lines, [section] headers, '#' comments, optional double quotes.
ConfigMap parse_config(const std::string& text, const std::string& origin = "<config>");
ConfigMap load_config_file(const std::filesystem::path& path);

struct RunConfig {
  std::uint64_t seed = 0;
  SceneConfig scene;
  SplitConfig data;
  ArchConfig arch;
  HeadConfig heads;
  TeacherTrainConfig train;
  AmalgamationConfig amalg;
  std::string optim_profile = "desk";
};

// Every key the resolver accepts, with its default rendering.
const std::vector<std::string>& config_keys();

// Applies `values` over the defaults. Throws ConfigError on unknown keys,
// unparsable values, or a missing seed.
RunConfig resolve_config(const ConfigMap& values);

// Canonical key=value text of a resolved configuration (sorted keys).
std::string render_config(const RunConfig& cfg);

HeadConfig head_config(const RunConfig& cfg);

}  // namespace amalgam
