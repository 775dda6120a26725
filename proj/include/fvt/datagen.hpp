#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fvt/tensor.hpp"

namespace fvt {
inline namespace FVT_NS {

struct Sample {
  Tensor image;                     // [C, H, W], values in [0, 1]
  std::size_t label = 0;
  std::vector<std::uint8_t> mask;   // H*W, 1 on foreground pixels
};

// Token-resolution ground truth: rows*cols cells, row-major.
struct TokenMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> cells;

  std::size_t size() const { return cells.size(); }
  std::size_t count() const;
};

struct Dataset {
  std::uint64_t seed = 0;
  std::size_t image_size = 0;
  std::size_t channels = 1;
  std::size_t n_classes = 0;
  std::vector<Sample> train;
  std::vector<Sample> val;

  std::size_t size() const { return train.size() + val.size(); }
};

inline constexpr std::size_t kMaxShapeClasses = 8;
// Class names in label order: disk, square, triangle, cross, diamond, ring, bar, x.
const std::vector<std::string>& shape_names();

// Sample `index` of the stream for `seed`; labels cycle round-robin.
Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t n_classes,
                       std::size_t image_size);

// First 80% of the indices go to train, the rest to val.
// Throws ConfigError unless 2 <= n_classes <= 8 and n_samples >= 2.
Dataset generate(std::uint64_t seed, std::size_t n_samples, std::size_t n_classes,
                 std::size_t image_size);

// Cell is 1 iff at least half of its pixels are foreground.
TokenMask to_token_mask(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width,
                        std::size_t patch_size);

// <dir>/train.fvtw, <dir>/val.fvtw (entries "<id>.image", "<id>.mask") and
// <dir>/index.txt (header lines, then "id,split,label" rows).
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace FVT_NS
}  // namespace fvt
