#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fvt/model.hpp"
#include "fvt/trainer.hpp"

namespace fvt {
inline namespace FVT_NS {

// Ordered key=value pairs. Text form: one "key=value" per line, blank lines
// and lines starting with '#' ignored, whitespace around key and value
// trimmed, duplicate keys rejected.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Throws ConfigError with "<origin>:<line>" on malformed input.
KeyValues parse_key_values(std::string_view text, std::string_view origin = "config");
std::string format_key_values(const KeyValues& kv);

KeyValues to_key_values(const ModelConfig& cfg);
KeyValues to_key_values(const TrainConfig& cfg);

// Returns false when the key is not a field of the config; throws
// ConfigError when the value does not parse.
bool apply_key_value(ModelConfig& cfg, const std::string& key, const std::string& value);
bool apply_key_value(TrainConfig& cfg, const std::string& key, const std::string& value);

}  // namespace FVT_NS
}  // namespace fvt
