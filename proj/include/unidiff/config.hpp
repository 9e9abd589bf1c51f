#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

namespace unidiff {

using Json = nlohmann::json;

// Default experiment configuration. It doubles as the key schema: a user
// config may only contain keys present here, with compatible value types.
Json default_config();

// Overlays `user` onto the defaults; unknown keys and type mismatches throw ParameterError.
Json merge_config(const Json& user);
Json load_config(const std::filesystem::path& path);

// "a.b.c=value"; value parsed as JSON when possible, else taken as a string.
void apply_override(Json& config, const std::string& assignment);
void set_config_value(Json& config, const std::string& dotted_key, const Json& value);
const Json& get_config_value(const Json& config, const std::string& dotted_key);

// Domain checks on every field (ranges, enum names).
void validate_config(const Json& config);

// Hash of the canonical serialization, excluding output/cache locations.
std::string config_hash(const Json& config);
std::string json_hash(const Json& value);

}  // namespace unidiff
