#include "fvt/weights_io.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <unistd.h>

#include "fvt/config_io.hpp"
#include "fvt/errors.hpp"
#include "fvt/rng.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t to_u32(std::size_t v, const std::string& what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError(what + " does not fit in 32 bits");
  }
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const std::string& what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const std::string& what) {
    if (remaining() < n) {
      throw FormatError("truncated container: " + what + " needs " + std::to_string(n) +
                        " bytes, " + std::to_string(remaining()) + " left");
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_bytes_atomic(const std::filesystem::path& path, const char* data, std::size_t size) {
  const std::filesystem::path tmp =
      path.string() + ".tmp." + std::to_string(static_cast<long>(::getpid()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(data, static_cast<std::streamsize>(size));
    out.flush();
    if (!out) {
      std::error_code ignored;
      std::filesystem::remove(tmp, ignored);
      throw IoError("write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

std::string replace_index(std::string name, std::size_t index) {
  const std::string token = "{i}";
  for (auto pos = name.find(token); pos != std::string::npos; pos = name.find(token)) {
    name.replace(pos, token.size(), std::to_string(index));
  }
  return name;
}

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return stem.string() + suffix;
}

}  // namespace

void TensorContainer::add(std::string name, Shape shape, std::vector<real> data) {
  if (index_.count(name)) throw FormatError("duplicate container entry '" + name + "'");
  if (shape_numel(shape) != data.size()) {
    throw FormatError("entry '" + name + "' has shape " + shape_str(shape) + " but " +
                      std::to_string(data.size()) + " values");
  }
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(shape), std::move(data)});
}

void TensorContainer::add(std::string name, const Tensor& tensor) {
  const auto d = tensor.data();
  add(std::move(name), tensor.shape(), std::vector<real>(d.begin(), d.end()));
}

bool TensorContainer::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

const ContainerEntry* TensorContainer::find(std::string_view name) const {
  const auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &entries_[it->second];
}

Tensor TensorContainer::tensor(std::string_view name) const {
  const ContainerEntry* e = find(name);
  if (!e) throw FormatError("container has no entry '" + std::string(name) + "'");
  return Tensor::from(e->shape, e->data);
}

bool TensorContainer::operator==(const TensorContainer& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.shape != b.shape || a.data.size() != b.data.size()) return false;
    for (std::size_t j = 0; j < a.data.size(); ++j) {
      if (std::bit_cast<std::uint32_t>(float(a.data[j])) !=
          std::bit_cast<std::uint32_t>(float(b.data[j]))) {
        return false;
      }
    }
  }
  return true;
}

std::vector<std::uint8_t> serialize(const TensorContainer& container) {
  std::vector<std::uint8_t> out(kContainerMagic, kContainerMagic + 4);
  put_u32(out, kContainerVersion);
  put_u32(out, to_u32(container.size(), "entry count"));
  for (const auto& e : container.entries()) {
    put_u32(out, to_u32(e.name.size(), "name length of '" + e.name + "'"));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, to_u32(e.shape.size(), "rank of '" + e.name + "'"));
    for (std::size_t d : e.shape) put_u32(out, to_u32(d, "dimension of '" + e.name + "'"));
    for (real v : e.data) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

TensorContainer deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kContainerMagic)) {
    throw FormatError("bad magic: not an FVTW container");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32("entry count");
  TensorContainer c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "entry " + std::to_string(i);
    const std::uint32_t name_len = r.u32(where + " name length");
    const auto name_bytes = r.take(name_len, where + " name");
    const std::string name(name_bytes.begin(), name_bytes.end());
    const std::string label = "entry '" + name + "'";
    if (c.contains(name)) throw FormatError("duplicate " + label);
    const std::uint32_t rank = r.u32(label + " rank");
    if (std::size_t(rank) * 4 > r.remaining()) throw FormatError("truncated " + label + " dims");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = r.u32(label + " dims");
      if (d == 0) throw FormatError(label + " has a zero dimension");
      if (numel > r.remaining() / d) throw FormatError("truncated " + label + " payload");
      numel *= d;
    }
    if (numel > r.remaining() / 4) {
      throw FormatError("truncated " + label + " payload: expected " + std::to_string(4 * numel) +
                        " bytes, " + std::to_string(r.remaining()) + " left");
    }
    std::vector<real> data(numel);
    for (auto& v : data) v = static_cast<real>(std::bit_cast<float>(r.u32(label + " payload")));
    c.add(name, std::move(shape), std::move(data));
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after the last entry");
  }
  return c;
}

void save(const TensorContainer& container, const std::filesystem::path& path) {
  const auto bytes = serialize(container);
  write_bytes_atomic(path, reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

TensorContainer load(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  try {
    return deserialize(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_bytes_atomic(path, text.data(), text.size());
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

std::vector<BlockWeights> mock_llm(std::uint64_t seed, std::size_t dim, std::size_t n_heads,
                                   std::size_t ffn_hidden, Variant variant,
                                   std::size_t n_blocks) {
  std::vector<BlockWeights> blocks;
  for (std::size_t i = 0; i < n_blocks; ++i) {
    Rng rng(Rng::derive(seed, i));
    BlockWeights b = BlockWeights::zeros(variant, dim, n_heads, ffn_hidden);
    for (const auto& name : BlockWeights::field_names(variant)) {
      Tensor& t = b.field(name);
      if (t.rank() != 2) continue;
      t = rng.normal_tensor(t.shape(), 1.0 / std::sqrt(double(t.dim(0))));
    }
    b.validate();
    blocks.push_back(std::move(b));
  }
  return blocks;
}

TensorContainer export_blocks(const std::vector<BlockWeights>& blocks) {
  TensorContainer c;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (const auto& [field, t] : blocks[i].named_tensors()) {
      c.add("layers." + std::to_string(i) + "." + field, t);
    }
  }
  return c;
}

ImportManifest ImportManifest::parse(std::string_view text) {
  ImportManifest m;
  bool have_variant = false, have_heads = false;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = "manifest line " + std::to_string(line_no) + ": ";
    std::istringstream words(line);
    std::string first;
    if (!(words >> first) || first.front() == '#') continue;
    if (first == "map") {
      std::string field, source, flag, extra;
      if (!(words >> field >> source)) throw ManifestError(where + "expected 'map <field> <source>'");
      Mapping mapping{source, false};
      if (words >> flag) {
        if (flag != "transpose") throw ManifestError(where + "unknown flag '" + flag + "'");
        mapping.transpose = true;
      }
      if (words >> extra) throw ManifestError(where + "unexpected '" + extra + "'");
      if (!m.fields.emplace(field, mapping).second) {
        throw ManifestError(where + "field '" + field + "' mapped twice");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ManifestError(where + "expected key = value or map");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "source_model") {
        m.source_model = value;
      } else if (key == "variant") {
        m.variant = parse_variant(value);
        have_variant = true;
      } else if (key == "n_heads") {
        m.n_heads = std::stoull(value);
        have_heads = true;
      } else if (key == "block_index") {
        m.block_index = std::stoull(value);
      } else if (key == "container") {
        m.container = value;
      } else if (key == "activation") {
        m.activation = parse_activation(value);
      } else {
        throw ManifestError(where + "unknown key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      throw ManifestError(where + e.what());
    } catch (const std::logic_error&) {
      throw ManifestError(where + "bad value for '" + key + "'");
    }
  }
  if (!have_variant) throw ManifestError("manifest does not declare a variant");
  if (!have_heads || m.n_heads == 0) throw ManifestError("manifest needs n_heads >= 1");
  const auto& known = BlockWeights::field_names(m.variant);
  for (const auto& [field, mapping] : m.fields) {
    if (std::find(known.begin(), known.end(), field) == known.end()) {
      throw ManifestError("field '" + field + "' does not belong to a " +
                          std::string(to_string(m.variant)) + " block");
    }
  }
  return m;
}

ImportManifest ImportManifest::load(const std::filesystem::path& path) {
  try {
    return parse(read_text_file(path));
  } catch (const ManifestError& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
}

std::string ImportManifest::to_text() const {
  std::ostringstream out;
  out << "source_model = " << source_model << "\n"
      << "variant = " << to_string(variant) << "\n"
      << "n_heads = " << n_heads << "\n"
      << "block_index = " << block_index << "\n";
  if (!container.empty()) out << "container = " << container << "\n";
  if (variant != Variant::kLlama) out << "activation = " << to_string(activation) << "\n";
  for (const auto& [field, mapping] : fields) {
    out << "map " << field << " " << mapping.source << (mapping.transpose ? " transpose" : "")
        << "\n";
  }
  return out.str();
}

ImportManifest ImportManifest::for_exported(Variant variant, std::size_t n_heads,
                                            std::size_t block_index) {
  ImportManifest m;
  m.source_model = "fvt-export";
  m.variant = variant;
  m.n_heads = n_heads;
  m.block_index = block_index;
  for (const auto& f : BlockWeights::field_names(variant)) {
    m.fields[f] = {"layers.{i}." + f, false};
  }
  return m;
}

BlockWeights import_block(const TensorContainer& container, const ImportManifest& manifest) {
  const auto& names = BlockWeights::field_names(manifest.variant);
  for (const auto& f : names) {
    if (!manifest.fields.count(f)) {
      throw ManifestError("manifest leaves field '" + f + "' unmapped");
    }
  }
  std::map<std::string, Tensor> loaded;
  for (const auto& f : names) {
    const auto& mapping = manifest.fields.at(f);
    const std::string source = replace_index(mapping.source, manifest.block_index);
    const ContainerEntry* e = container.find(source);
    if (!e) {
      throw ManifestError("source tensor '" + source + "' for field '" + f +
                          "' is not in the container");
    }
    Shape shape = e->shape;
    std::vector<real> data = e->data;
    if (mapping.transpose) {
      if (shape.size() != 2) throw ManifestError("field '" + f + "': only matrices can be transposed");
      std::vector<real> t(data.size());
      for (std::size_t i = 0; i < shape[0]; ++i) {
        for (std::size_t j = 0; j < shape[1]; ++j) t[j * shape[0] + i] = data[i * shape[1] + j];
      }
      data = std::move(t);
      std::swap(shape[0], shape[1]);
    }
    loaded[f] = Tensor::from(shape, std::move(data));
  }

  const Tensor& wq = loaded.at("attn.wq");
  if (wq.rank() != 2) throw ManifestError("field 'attn.wq' must be a matrix");
  const std::size_t dim = wq.dim(0);
  const Tensor& first_ffn = loaded.at(manifest.variant == Variant::kLlama ? "ffn.gate" : "ffn.fc1");
  if (first_ffn.rank() != 2) throw ManifestError("feedforward input projection must be a matrix");
  const std::size_t hidden = first_ffn.dim(1);
  if (dim % manifest.n_heads != 0) {
    throw ManifestError("block width " + std::to_string(dim) + " is not divisible by " +
                        std::to_string(manifest.n_heads) + " heads");
  }
  BlockWeights b = BlockWeights::zeros(manifest.variant, dim, manifest.n_heads, hidden);
  b.activation = manifest.activation;
  for (const auto& f : names) {
    const Shape expect = BlockWeights::field_shape(f, dim, hidden);
    if (loaded.at(f).shape() != expect) {
      throw ManifestError("field '" + f + "' has shape " + shape_str(loaded.at(f).shape()) +
                          ", inconsistent with width " + std::to_string(dim) + " / hidden " +
                          std::to_string(hidden) + " (expected " + shape_str(expect) + ")");
    }
    b.field(f) = loaded.at(f);
  }
  b.validate();
  return b;
}

void save_checkpoint(const Model& model, const std::filesystem::path& stem) {
  if (model.linearized()) throw ContractError("linearized models are analysis-only; not saved");
  TensorContainer c;
  std::string frozen;
  for (const auto& p : model.parameters()) {
    c.add(p.name, p.tensor);
    if (!p.tensor.requires_grad()) frozen += (frozen.empty() ? "" : ",") + p.name;
  }
  KeyValues kv = {{"format", "fvt-checkpoint-1"}};
  for (auto& entry : to_key_values(model.config())) kv.push_back(std::move(entry));
  kv.emplace_back("frozen", frozen);
  if (!model.llm_blocks().empty() && model.config().llm_variant != Variant::kLlama) {
    kv.emplace_back("llm_activation", std::string(to_string(model.llm_blocks().front().activation)));
  }
  save(c, with_suffix(stem, ".fvtw"));
  write_text_file(with_suffix(stem, ".cfg"), format_key_values(kv));
}

Model load_checkpoint(const std::filesystem::path& stem) {
  const auto cfg_path = with_suffix(stem, ".cfg");
  const KeyValues kv = parse_key_values(read_text_file(cfg_path), cfg_path.string());
  ModelConfig config;
  std::set<std::string> frozen;
  FfnActivation activation = FfnActivation::kGelu;
  bool format_ok = false;
  for (const auto& [k, v] : kv) {
    if (k == "format") {
      format_ok = v == "fvt-checkpoint-1";
    } else if (k == "llm_activation") {
      activation = parse_activation(v);
    } else if (k == "frozen") {
      std::istringstream names(v);
      std::string name;
      while (std::getline(names, name, ',')) {
        if (!name.empty()) frozen.insert(name);
      }
    } else if (!apply_key_value(config, k, v)) {
      throw FormatError(cfg_path.string() + ": unknown key '" + k + "'");
    }
  }
  if (!format_ok) throw FormatError(cfg_path.string() + ": not an fvt checkpoint sidecar");

  const TensorContainer c = load(with_suffix(stem, ".fvtw"));
  std::vector<BlockWeights> placeholder;
  if (config.has_llm_blocks()) {
    for (std::size_t i = 0; i < config.n_llm_blocks; ++i) {
      placeholder.push_back(BlockWeights::zeros(config.llm_variant, config.llm_dim,
                                                config.llm_heads, config.llm_ffn_hidden));
      placeholder.back().activation = activation;
    }
  }
  const bool needs_source = config.arm == Arm::kPlusLlm || config.arm == Arm::kPlusLlmFt;
  Model model = Model::build(config, needs_source ? &placeholder : nullptr, 0);
  const auto params = model.parameters();
  if (params.size() != c.size()) {
    throw FormatError("checkpoint holds " + std::to_string(c.size()) + " tensors, model has " +
                      std::to_string(params.size()) + " parameters");
  }
  std::size_t matched_frozen = 0;
  for (const auto& p : params) {
    const ContainerEntry* e = c.find(p.name);
    if (!e) throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    if (e->shape != p.tensor.shape()) {
      throw FormatError("checkpoint parameter '" + p.name + "' has shape " + shape_str(e->shape) +
                        ", model expects " + shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    std::copy(e->data.begin(), e->data.end(), t.mutable_data().begin());
    const bool is_frozen = frozen.count(p.name) != 0;
    matched_frozen += is_frozen;
    t.set_requires_grad(!is_frozen);
  }
  if (matched_frozen != frozen.size()) {
    throw FormatError(cfg_path.string() + ": frozen list names unknown parameters");
  }
  return model;
}

}  // namespace FVT_NS
}  // namespace fvt
