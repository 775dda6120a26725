#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fvt/blocks.hpp"
#include "fvt/model.hpp"
#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

// FVTW container, little-endian throughout:
//   magic    4 bytes  "FVTW"
//   version  u32      kContainerVersion
//   count    u32      number of entries
//   entry*   name_len u32, name bytes (UTF-8), rank u32, dims u32[rank],
//            payload f32[product(dims)] row-major
// Names are unique within a file. In-memory values are converted to and
// from 32-bit on the wire regardless of the build's scalar type.
inline constexpr char kContainerMagic[4] = {'F', 'V', 'T', 'W'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct ContainerEntry {
  std::string name;
  Shape shape;
  std::vector<real> data;
};

class TensorContainer {
 public:
  // Throws FormatError on a duplicate name or a shape/payload mismatch.
  void add(std::string name, Shape shape, std::vector<real> data);
  void add(std::string name, const Tensor& tensor);

  bool contains(std::string_view name) const;
  const ContainerEntry* find(std::string_view name) const;
  // Throws FormatError naming the missing entry.
  Tensor tensor(std::string_view name) const;

  const std::vector<ContainerEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool operator==(const TensorContainer& other) const;

 private:
  std::vector<ContainerEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::vector<std::uint8_t> serialize(const TensorContainer& container);
// Validates magic, version, dims and payload lengths; never returns a
// partially decoded container.
TensorContainer deserialize(std::span<const std::uint8_t> bytes);

// Writes to a sibling temp file and renames it into place.
void save(const TensorContainer& container, const std::filesystem::path& path);
TensorContainer load(const std::filesystem::path& path);

// Writes `text` atomically (temp file + rename).
void write_text_file(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

// Deterministic random blocks: projections drawn N(0, 1/fan_in), norm
// weights 1, biases 0. Serves as the randomly initialized baseline and as
// the frozen stand-in for pre-trained blocks.
std::vector<BlockWeights> mock_llm(std::uint64_t seed, std::size_t dim, std::size_t n_heads,
                                   std::size_t ffn_hidden, Variant variant, std::size_t n_blocks);

// Stores blocks under "layers.<i>.<field>".
TensorContainer export_blocks(const std::vector<BlockWeights>& blocks);

// Maps tensors of an external container onto BlockWeights fields. Text form:
//   source_model = <name>
//   variant      = llama|opt|vit
//   n_heads      = <int>
//   block_index  = <int>
//   container    = <path, relative to the manifest file>   (optional)
//   activation   = gelu|relu   (VIT/OPT feedforward, default gelu)
//   map <field> <source tensor name> [transpose]
// Source names may contain "{i}", replaced by block_index.
struct ImportManifest {
  struct Mapping {
    std::string source;
    bool transpose = false;
  };
  std::string source_model;
  Variant variant = Variant::kLlama;
  std::size_t n_heads = 0;
  std::size_t block_index = 0;
  std::string container;
  FfnActivation activation = FfnActivation::kGelu;
  std::map<std::string, Mapping> fields;

  static ImportManifest parse(std::string_view text);
  static ImportManifest load(const std::filesystem::path& path);
  std::string to_text() const;
  // Manifest matching the naming used by export_blocks().
  static ImportManifest for_exported(Variant variant, std::size_t n_heads,
                                     std::size_t block_index);
};

// Throws ManifestError on unmapped fields (naming the field), missing
// source tensors or dimension inconsistencies.
BlockWeights import_block(const TensorContainer& container, const ImportManifest& manifest);

// Checkpoint = <stem>.fvtw (every parameter) + <stem>.cfg (key=value
// config sidecar, including the list of frozen parameters).
void save_checkpoint(const Model& model, const std::filesystem::path& stem);
Model load_checkpoint(const std::filesystem::path& stem);

}  // namespace FVT_NS
}  // namespace fvt
