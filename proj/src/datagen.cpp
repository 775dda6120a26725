#include "fvt/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "fvt/errors.hpp"
#include "fvt/rng.hpp"
#include "fvt/weights_io.hpp"

namespace fvt {
inline namespace FVT_NS {

namespace {

constexpr double kPi = std::numbers::pi;

// Membership in unit shape coordinates (already rotated and scaled).
bool inside(std::size_t cls, double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y);
  switch (cls) {
    case 0: return x * x + y * y <= 1.0;                          // disk
    case 1: return std::max(ax, ay) <= 0.8;                       // square
    case 2: {                                                      // triangle
      if (y > 0.6) return false;
      // edges from the apex (0,-1) to (+-0.9, 0.6)
      return ax <= 0.9 * (y + 1.0) / 1.6;
    }
    case 3:                                                        // cross
    case 7:                                                        // x (cross turned 45 degrees)
      return (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0);
    case 4: return ax + ay <= 1.0;                                // diamond
    case 5: {                                                      // ring
      const double r2 = x * x + y * y;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 6: return ax <= 1.0 && ay <= 0.3;                        // bar
    default: return false;
  }
}

void check_generate_args(std::size_t n_classes, std::size_t image_size) {
  if (n_classes < 2 || n_classes > kMaxShapeClasses) {
    throw ConfigError("n_classes must be in 2.." + std::to_string(kMaxShapeClasses) + ", got " +
                      std::to_string(n_classes));
  }
  if (image_size < 4) throw ConfigError("image_size must be at least 4");
}

}  // namespace

std::size_t TokenMask::count() const {
  return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names = {"disk", "square", "triangle", "cross",
                                                 "diamond", "ring", "bar", "x"};
  return names;
}

Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t n_classes,
                       std::size_t image_size) {
  check_generate_args(n_classes, image_size);
  Rng rng(Rng::derive(seed, index));
  const std::size_t label = index % n_classes;
  const std::size_t n = image_size;
  const double size = double(n);

  Sample s;
  s.label = label;
  s.mask.assign(n * n, 0);
  for (;;) {
    const double radius = rng.uniform(0.30, 0.45) * size;
    const double cx = rng.uniform(radius, size - radius);
    const double cy = rng.uniform(radius, size - radius);
    double angle = rng.uniform(-kPi / 12, kPi / 12);
    if (label == 7) angle += kPi / 4;
    if (label == 6) angle = rng.uniform(0.0, kPi);
    const double c = std::cos(angle), sn = std::sin(angle);
    std::size_t covered = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double dx = (double(j) + 0.5 - cx) / radius;
        const double dy = (double(i) + 0.5 - cy) / radius;
        const bool fg = inside(label, c * dx + sn * dy, -sn * dx + c * dy);
        s.mask[i * n + j] = fg ? 1 : 0;
        covered += fg;
      }
    }
    if (covered > 0 && double(covered) < 0.6 * double(n * n)) break;
  }

  const double background = rng.uniform(0.0, 0.2);
  const double amplitude = rng.uniform(0.0, 0.05);
  const double fx = rng.uniform(0.2, 1.2), fy = rng.uniform(0.2, 1.2);
  const double phase = rng.uniform(0.0, 2 * kPi);
  const double foreground = rng.uniform(0.7, 1.0);
  std::vector<real> pixels(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double noise = rng.normal(0.0, 0.03);
      double v = s.mask[i * n + j]
                     ? foreground
                     : background + amplitude * std::sin(fx * double(j) + fy * double(i) + phase);
      v = std::clamp(v + noise, 0.0, 1.0);
      pixels[i * n + j] = static_cast<real>(v);
    }
  }
  s.image = Tensor::from({1, n, n}, std::move(pixels));
  return s;
}

Dataset generate(std::uint64_t seed, std::size_t n_samples, std::size_t n_classes,
                 std::size_t image_size) {
  check_generate_args(n_classes, image_size);
  if (n_samples < 2) throw ConfigError("need at least 2 samples for a train/val split");
  Dataset d;
  d.seed = seed;
  d.image_size = image_size;
  d.channels = 1;
  d.n_classes = n_classes;
  const std::size_t n_train = std::max<std::size_t>(1, n_samples * 4 / 5);
  for (std::size_t i = 0; i < n_samples; ++i) {
    Sample s = generate_sample(seed, i, n_classes, image_size);
    (i < n_train ? d.train : d.val).push_back(std::move(s));
  }
  return d;
}

TokenMask to_token_mask(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width,
                        std::size_t patch_size) {
  if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0) {
    throw ShapeError("mask " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by patch size " + std::to_string(patch_size));
  }
  if (mask.size() != height * width) {
    throw ShapeError("mask has " + std::to_string(mask.size()) + " pixels, expected " +
                     std::to_string(height * width));
  }
  TokenMask t;
  t.rows = height / patch_size;
  t.cols = width / patch_size;
  t.cells.assign(t.rows * t.cols, 0);
  const std::size_t area = patch_size * patch_size;
  for (std::size_t r = 0; r < t.rows; ++r) {
    for (std::size_t c = 0; c < t.cols; ++c) {
      std::size_t on = 0;
      for (std::size_t i = 0; i < patch_size; ++i) {
        for (std::size_t j = 0; j < patch_size; ++j) {
          on += mask[(r * patch_size + i) * width + c * patch_size + j] != 0;
        }
      }
      t.cells[r * t.cols + c] = 2 * on >= area ? 1 : 0;
    }
  }
  return t;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream index;
  index << "seed=" << dataset.seed << "\n"
        << "image_size=" << dataset.image_size << "\n"
        << "channels=" << dataset.channels << "\n"
        << "n_classes=" << dataset.n_classes << "\n"
        << "id,split,label\n";
  std::size_t id = 0;
  auto write_split = [&](const std::vector<Sample>& samples, const char* split) {
    TensorContainer c;
    for (const auto& s : samples) {
      const std::string key = std::to_string(id);
      c.add(key + ".image", s.image);
      std::vector<real> m(s.mask.begin(), s.mask.end());
      c.add(key + ".mask", {dataset.image_size, dataset.image_size}, std::move(m));
      index << id << "," << split << "," << s.label << "\n";
      ++id;
    }
    save(c, dir / (std::string(split) + ".fvtw"));
  };
  write_split(dataset.train, "train");
  write_split(dataset.val, "val");
  write_text_file(dir / "index.txt", index.str());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const std::string text = read_text_file(dir / "index.txt");
  Dataset d;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool rows = false;
  const TensorContainer train = load(dir / "train.fvtw");
  const TensorContainer val = load(dir / "val.fvtw");
  auto bad = [&](const std::string& why) {
    throw FormatError((dir / "index.txt").string() + ":" + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (!rows) {
      if (line == "id,split,label") {
        rows = true;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) bad("expected key=value");
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      try {
        if (key == "seed") d.seed = std::stoull(value);
        else if (key == "image_size") d.image_size = std::stoull(value);
        else if (key == "channels") d.channels = std::stoull(value);
        else if (key == "n_classes") d.n_classes = std::stoull(value);
        else bad("unknown key '" + key + "'");
      } catch (const std::logic_error&) {
        bad("bad value for '" + key + "'");
      }
      continue;
    }
    std::istringstream row(line);
    std::string id, split, label;
    if (!std::getline(row, id, ',') || !std::getline(row, split, ',') ||
        !std::getline(row, label)) {
      bad("expected id,split,label");
    }
    const TensorContainer* src = split == "train" ? &train : split == "val" ? &val : nullptr;
    if (!src) bad("unknown split '" + split + "'");
    Sample s;
    try {
      s.label = std::stoull(label);
    } catch (const std::logic_error&) {
      bad("bad label");
    }
    if (s.label >= d.n_classes) bad("label out of range");
    s.image = src->tensor(id + ".image");
    const Shape expect = {d.channels, d.image_size, d.image_size};
    if (s.image.shape() != expect) bad("image " + id + " has shape " + shape_str(s.image.shape()));
    const Tensor m = src->tensor(id + ".mask");
    if (m.numel() != d.image_size * d.image_size) bad("mask " + id + " has the wrong size");
    s.mask.reserve(m.numel());
    for (real v : m.data()) s.mask.push_back(v != 0 ? 1 : 0);
    (split == "train" ? d.train : d.val).push_back(std::move(s));
  }
  if (!rows) bad("missing id,split,label header");
  return d;
}

}  // namespace FVT_NS
}  // namespace fvt
