#include "fvt/config_io.hpp"

#include <charconv>
#include <cstdio>
#include <set>

#include "fvt/errors.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) {
    throw ConfigError("'" + key + "' expects a nonnegative integer, got '" + value + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double d = std::stod(value, &used);
    if (used == value.size()) return d;
  } catch (const std::logic_error&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + value + "'");
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("'" + key + "' expects true|false, got '" + value + "'");
}

std::string fmt_double(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", d);
  return buf;
}

}  // namespace

KeyValues parse_key_values(std::string_view text, std::string_view origin) {
  KeyValues out;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto where = std::string(origin) + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key=value");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    out.emplace_back(key, value);
  }
  return out;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

KeyValues to_key_values(const ModelConfig& c) {
  return {
      {"arm", std::string(to_string(c.arm))},
      {"image_size", std::to_string(c.image_size)},
      {"patch_size", std::to_string(c.patch_size)},
      {"channels", std::to_string(c.channels)},
      {"encoder_dim", std::to_string(c.encoder_dim)},
      {"encoder_depth", std::to_string(c.encoder_depth)},
      {"encoder_heads", std::to_string(c.encoder_heads)},
      {"encoder_mlp_ratio", std::to_string(c.encoder_mlp_ratio)},
      {"llm_dim", std::to_string(c.llm_dim)},
      {"llm_heads", std::to_string(c.llm_heads)},
      {"llm_ffn_hidden", std::to_string(c.llm_ffn_hidden)},
      {"llm_variant", std::string(to_string(c.llm_variant))},
      {"n_llm_blocks", std::to_string(c.n_llm_blocks)},
      {"insert_position", std::string(to_string(c.insert_position))},
      {"n_classes", std::to_string(c.n_classes)},
  };
}

KeyValues to_key_values(const TrainConfig& c) {
  return {
      {"epochs", std::to_string(c.epochs)},
      {"warmup_epochs", std::to_string(c.warmup_epochs)},
      {"base_lr", fmt_double(c.base_lr)},
      {"min_lr", fmt_double(c.min_lr)},
      {"weight_decay", fmt_double(c.weight_decay)},
      {"beta1", fmt_double(c.beta1)},
      {"beta2", fmt_double(c.beta2)},
      {"adam_eps", fmt_double(c.adam_eps)},
      {"label_smoothing", fmt_double(c.label_smoothing)},
      {"batch_size", std::to_string(c.batch_size)},
      {"seed", std::to_string(c.seed)},
      {"hflip", c.hflip ? "true" : "false"},
  };
}

bool apply_key_value(ModelConfig& c, const std::string& k, const std::string& v) {
  if (k == "arm") c.arm = parse_arm(v);
  else if (k == "image_size") c.image_size = parse_size(k, v);
  else if (k == "patch_size") c.patch_size = parse_size(k, v);
  else if (k == "channels") c.channels = parse_size(k, v);
  else if (k == "encoder_dim") c.encoder_dim = parse_size(k, v);
  else if (k == "encoder_depth") c.encoder_depth = parse_size(k, v);
  else if (k == "encoder_heads") c.encoder_heads = parse_size(k, v);
  else if (k == "encoder_mlp_ratio") c.encoder_mlp_ratio = parse_size(k, v);
  else if (k == "llm_dim") c.llm_dim = parse_size(k, v);
  else if (k == "llm_heads") c.llm_heads = parse_size(k, v);
  else if (k == "llm_ffn_hidden") c.llm_ffn_hidden = parse_size(k, v);
  else if (k == "llm_variant") c.llm_variant = parse_variant(v);
  else if (k == "n_llm_blocks") c.n_llm_blocks = parse_size(k, v);
  else if (k == "insert_position") c.insert_position = parse_insert_position(v);
  else if (k == "n_classes") c.n_classes = parse_size(k, v);
  else return false;
  return true;
}

bool apply_key_value(TrainConfig& c, const std::string& k, const std::string& v) {
  if (k == "epochs") c.epochs = parse_size(k, v);
  else if (k == "warmup_epochs") c.warmup_epochs = parse_size(k, v);
  else if (k == "base_lr") c.base_lr = parse_double(k, v);
  else if (k == "min_lr") c.min_lr = parse_double(k, v);
  else if (k == "weight_decay") c.weight_decay = parse_double(k, v);
  else if (k == "beta1") c.beta1 = parse_double(k, v);
  else if (k == "beta2") c.beta2 = parse_double(k, v);
  else if (k == "adam_eps") c.adam_eps = parse_double(k, v);
  else if (k == "label_smoothing") c.label_smoothing = parse_double(k, v);
  else if (k == "batch_size") c.batch_size = parse_size(k, v);
  else if (k == "seed") c.seed = parse_size(k, v);
  else if (k == "hflip") c.hflip = parse_bool(k, v);
  else return false;
  return true;
}

}  // namespace FVT_NS
}  // namespace fvt
