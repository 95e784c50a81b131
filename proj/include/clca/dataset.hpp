#pragma once

// Synthetic ultra-fine-grained image dataset.
//
// File layout ("UFGD", little-endian):
//   "UFGD" | u32 version | u32 samples | u32 classes | u32 side | u32 channels |
//   label map: classes x (u32 len | UTF-8 name) |
//   images: samples x f32[channels*side*side] (CHW) | labels: samples x u32

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "clca/binary_io.hpp"
#include "clca/config.hpp"
#include "clca/errors.hpp"
#include "clca/tensor.hpp"

namespace clca {

struct DatasetSpec {
  std::size_t num_macro = 4;
  std::size_t classes_per_macro = 8;
  std::size_t samples_per_class = 25;
  std::size_t image_side = 64;
  double perturbation_amplitude = 0.08;
  double noise_sigma = 0.15;
  std::uint64_t seed = 0;
  std::size_t max_shift = 8;  // circular shift range in pixels, per axis

  std::size_t num_classes() const { return num_macro * classes_per_macro; }
  std::size_t signature_side() const { return std::max<std::size_t>(2, image_side / 8); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid dataset spec: " + m); };
    if (num_macro == 0 || classes_per_macro == 0 || samples_per_class == 0) fail("counts must be positive");
    if (samples_per_class < 2) fail("need at least 2 samples per class for a train/val split");
    if (image_side < 4) fail("image_side must be at least 4");
    if (!(perturbation_amplitude >= 0) || !(noise_sigma >= 0)) fail("amplitude and noise must be non-negative");
    if (max_shift >= image_side) fail("max_shift must be smaller than image_side");
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"num_macro", s.num_macro},
                     {"classes_per_macro", s.classes_per_macro},
                     {"samples_per_class", s.samples_per_class},
                     {"image_side", s.image_side},
                     {"perturbation_amplitude", s.perturbation_amplitude},
                     {"noise_sigma", s.noise_sigma},
                     {"seed", s.seed},
                     {"max_shift", s.max_shift}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  detail::reject_unknown(j,
                         {"num_macro", "classes_per_macro", "samples_per_class", "image_side",
                          "perturbation_amplitude", "noise_sigma", "seed", "max_shift"},
                         "dataset spec");
  s = DatasetSpec{};
  detail::read_field(j, "num_macro", s.num_macro);
  detail::read_field(j, "classes_per_macro", s.classes_per_macro);
  detail::read_field(j, "samples_per_class", s.samples_per_class);
  detail::read_field(j, "image_side", s.image_side);
  detail::read_field(j, "perturbation_amplitude", s.perturbation_amplitude);
  detail::read_field(j, "noise_sigma", s.noise_sigma);
  detail::read_field(j, "seed", s.seed);
  detail::read_field(j, "max_shift", s.max_shift);
}

struct Dataset {
  std::size_t image_side = 0;
  std::size_t channels = 3;
  std::vector<std::string> class_names;
  std::vector<float> images;  // samples x C x S x S
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t image_numel() const { return channels * image_side * image_side; }
  std::span<const float> image(std::size_t i) const { return {images.data() + i * image_numel(), image_numel()}; }

  bool operator==(const Dataset&) const = default;
};

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Independent stream per (seed, tag, a, b) so that changing one count does
// not reshuffle unrelated components.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ tag);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return std::mt19937_64(h);
}

// Periodic smooth field in [0, 1]: bilinear interpolation of a coarse grid
// with wrap-around, so circular shifts leave no seams.
inline std::vector<float> smooth_field(std::size_t side, std::size_t coarse, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> grid(coarse * coarse);
  for (auto& v : grid) v = u(rng);
  std::vector<float> out(side * side);
  for (std::size_t y = 0; y < side; ++y) {
    const double fy = static_cast<double>(y) * coarse / side;
    const std::size_t y0 = static_cast<std::size_t>(fy) % coarse, y1 = (y0 + 1) % coarse;
    const double ty = fy - std::floor(fy);
    for (std::size_t x = 0; x < side; ++x) {
      const double fx = static_cast<double>(x) * coarse / side;
      const std::size_t x0 = static_cast<std::size_t>(fx) % coarse, x1 = (x0 + 1) % coarse;
      const double tx = fx - std::floor(fx);
      const double top = grid[y0 * coarse + x0] * (1 - tx) + grid[y0 * coarse + x1] * tx;
      const double bot = grid[y1 * coarse + x0] * (1 - tx) + grid[y1 * coarse + x1] * tx;
      out[y * side + x] = static_cast<float>(top * (1 - ty) + bot * ty);
    }
  }
  return out;
}

}  // namespace detail

// Builds the macro textures and class signatures, then draws every sample.
// The first 80% (rounded) of each class's samples go to train, the rest to val.
inline DatasetSplit generate(const DatasetSpec& spec) {
  spec.validate();
  const std::size_t s = spec.image_side, c = 3, plane = s * s, numel = c * plane;
  const std::size_t sig = spec.signature_side();

  std::vector<std::vector<float>> macro_base(spec.num_macro);
  for (std::size_t m = 0; m < spec.num_macro; ++m) {
    auto rng = detail::stream(spec.seed, 1, m);
    auto& base = macro_base[m];
    base.resize(numel);
    for (std::size_t ch = 0; ch < c; ++ch) {
      auto f = detail::smooth_field(s, std::max<std::size_t>(2, s / 8), rng);
      for (std::size_t i = 0; i < plane; ++i) base[ch * plane + i] = 0.2f + 0.6f * f[i];
    }
  }

  const std::size_t classes = spec.num_classes();
  std::vector<std::vector<float>> clean(classes);
  std::vector<std::string> names(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    const std::size_t m = k / spec.classes_per_macro;
    names[k] = "macro" + std::to_string(m) + "/class" + std::to_string(k % spec.classes_per_macro);
    auto rng = detail::stream(spec.seed, 2, k);
    std::uniform_int_distribution<std::size_t> pos(0, s - sig);
    const std::size_t py = pos(rng), px = pos(rng);
    std::bernoulli_distribution sign(0.5);
    clean[k] = macro_base[m];
    // one sign per channel: the signature is a tinted square
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float delta = static_cast<float>(spec.perturbation_amplitude) * (sign(rng) ? 1.0f : -1.0f);
      for (std::size_t y = 0; y < sig; ++y)
        for (std::size_t x = 0; x < sig; ++x) clean[k][ch * plane + (py + y) * s + px + x] += delta;
    }
  }

  DatasetSplit split;
  for (Dataset* d : {&split.train, &split.val}) {
    d->image_side = s;
    d->channels = c;
    d->class_names = names;
  }
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.2 * spec.samples_per_class)));
  const std::size_t n_train = spec.samples_per_class - n_val;
  const auto shift_range = static_cast<long>(spec.max_shift);
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      auto rng = detail::stream(spec.seed, 3, k, i);
      std::uniform_int_distribution<long> shift(-shift_range, shift_range);
      const long dy = shift(rng), dx = shift(rng);
      std::normal_distribution<double> noise(0.0, spec.noise_sigma);
      Dataset& d = i < n_train ? split.train : split.val;
      const std::size_t off = d.images.size();
      d.images.resize(off + numel);
      const long ls = static_cast<long>(s);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (long y = 0; y < ls; ++y)
          for (long x = 0; x < ls; ++x) {
            const std::size_t sy = static_cast<std::size_t>(((y - dy) % ls + ls) % ls);
            const std::size_t sx = static_cast<std::size_t>(((x - dx) % ls + ls) % ls);
            const double v = clean[k][ch * plane + sy * s + sx] + (spec.noise_sigma > 0 ? noise(rng) : 0.0);
            d.images[off + ch * plane + static_cast<std::size_t>(y) * s + static_cast<std::size_t>(x)] =
                static_cast<float>(v);
          }
      d.labels.push_back(static_cast<std::uint32_t>(k));
    }
  }
  return split;
}

// Provenance record written next to the binary files.
inline nlohmann::json dataset_sidecar(const DatasetSpec& spec, const DatasetSplit& split) {
  return {{"generator", spec},
          {"num_classes", spec.num_classes()},
          {"train_samples", split.train.size()},
          {"val_samples", split.val.size()},
          {"format", "UFGD"}};
}

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, const Dataset& d) {
  io::write_bytes(os, "UFGD");
  io::write_le<std::uint32_t>(os, kDatasetVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.size()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.num_classes()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.image_side));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.channels));
  for (const auto& n : d.class_names) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(n.size()));
    io::write_bytes(os, n);
  }
  io::write_f32_array(os, d.images.data(), d.images.size());
  for (auto l : d.labels) io::write_le<std::uint32_t>(os, l);
}

inline Dataset read_dataset(std::istream& is) {
  io::expect_magic(is, "UFGD");
  const auto version = io::read_le<std::uint32_t>(is, "version");
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  Dataset d;
  const auto n = io::read_le<std::uint32_t>(is, "sample count");
  const auto classes = io::read_le<std::uint32_t>(is, "class count");
  d.image_side = io::read_le<std::uint32_t>(is, "image side");
  d.channels = io::read_le<std::uint32_t>(is, "channel count");
  if (d.channels != 3) throw FormatError("dataset must have 3 channels, got " + std::to_string(d.channels));
  if (d.image_side == 0 || d.image_side > 4096) throw FormatError("implausible image side");
  if (classes == 0 || classes > (1u << 20)) throw FormatError("implausible class count");
  for (std::uint32_t k = 0; k < classes; ++k) {
    const auto len = io::read_le<std::uint32_t>(is, "class name length");
    if (len > 4096) throw FormatError("implausible class name length");
    d.class_names.push_back(io::read_bytes(is, len, "class name"));
  }
  d.images.resize(static_cast<std::size_t>(n) * d.image_numel());
  io::read_f32_array(is, d.images.data(), d.images.size(), "images");
  d.labels.resize(n);
  for (auto& l : d.labels) {
    l = io::read_le<std::uint32_t>(is, "labels");
    if (l >= classes) throw FormatError("label " + std::to_string(l) + " out of range");
  }
  return d;
}

inline void save_dataset(const std::string& path, const Dataset& d) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_dataset(os, d);
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return read_dataset(is);
}

// Sample order for one epoch, a pure function of (n, seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t shuffle_seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto rng = detail::stream(shuffle_seed, 4, epoch);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

struct Batch {
  Tensor<float> images;  // [B, C, S, S]
  std::vector<std::uint32_t> labels;
  std::vector<std::size_t> indices;  // positions in the dataset
};

// Batches present pixels shifted by this amount so inputs are centred on zero.
inline constexpr float kPixelCenter = 0.5f;

inline Batch make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  Batch b;
  b.images = Tensor<float>({indices.size(), d.channels, d.image_side, d.image_side});
  const std::size_t numel = d.image_numel();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto img = d.image(indices[i]);
    std::transform(img.begin(), img.end(), b.images.storage().begin() + i * numel,
                   [](float v) { return v - kPixelCenter; });
    b.labels.push_back(d.labels[indices[i]]);
  }
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

// Iterates over one epoch in batches; the last batch may be smaller. With
// shuffle off the dataset order is used.
class BatchIterator {
 public:
  BatchIterator(const Dataset& d, std::size_t batch_size, std::uint64_t shuffle_seed, std::uint64_t epoch,
                bool shuffle = true)
      : data_(&d), batch_(batch_size) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (shuffle) {
      order_ = epoch_order(d.size(), shuffle_seed, epoch);
    } else {
      order_.resize(d.size());
      std::iota(order_.begin(), order_.end(), 0);
    }
  }

  std::size_t num_batches() const { return (order_.size() + batch_ - 1) / batch_; }
  bool done() const { return pos_ >= order_.size(); }

  Batch next() {
    const std::size_t len = std::min(batch_, order_.size() - pos_);
    Batch b = make_batch(*data_, std::span<const std::size_t>(order_.data() + pos_, len));
    pos_ += len;
    return b;
  }

 private:
  const Dataset* data_;
  std::size_t batch_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline BatchIterator batch_iter(const Dataset& d, std::size_t batch_size, std::uint64_t shuffle_seed,
                                std::uint64_t epoch = 0) {
  return BatchIterator(d, batch_size, shuffle_seed, epoch);
}

}  // namespace clca
