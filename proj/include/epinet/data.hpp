#pragma once

// MNIST (IDX) and CIFAR-10 (binary batches) loaders, per-channel mean
// subtraction and crop/flip augmentation.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace epinet {

struct Dataset {
  Tensor<float> images;  // N x C x H x W, raw pixels scaled to [0, 1]
  std::vector<int> labels;
  std::string split;
  std::size_t classes = 10;
  std::vector<float> mean;        // the per-channel mean last subtracted
  int mean_applications = 0;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    if (images.shape().n != labels.size())
      throw DataError(split + ": " + std::to_string(images.shape().n) + " images but " +
                      std::to_string(labels.size()) + " labels");
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= classes)
        throw DataError(split + ": label " + std::to_string(l) + " outside 0.." + std::to_string(classes - 1));
  }

  /// First `count` items (all when count is 0 or too large).
  Dataset head(std::size_t count) const {
    if (count == 0 || count >= size()) return *this;
    Dataset d;
    const Shape s = images.shape();
    d.images = Tensor<float>(Shape{count, s.c, s.h, s.w});
    std::copy(images.data(), images.data() + count * s.per_item(), d.images.data());
    d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count));
    d.split = split;
    d.classes = classes;
    d.mean = mean;
    d.mean_applications = mean_applications;
    return d;
  }
};

namespace detail {

inline std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

inline Dataset decode_mnist(const std::vector<std::uint8_t>& img, const std::vector<std::uint8_t>& lbl,
                            const std::string& split = "mnist") {
  using detail::be32;
  if (img.size() < 16) throw DataError("IDX image file truncated in header");
  if (lbl.size() < 8) throw DataError("IDX label file truncated in header");
  if (be32(img, 0) != kIdxImageMagic)
    throw DataError("IDX image magic is " + std::to_string(be32(img, 0)) + ", expected 2051 (0x00000803)");
  if (be32(lbl, 0) != kIdxLabelMagic)
    throw DataError("IDX label magic is " + std::to_string(be32(lbl, 0)) + ", expected 2049 (0x00000801)");
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t nl = be32(lbl, 4);
  if (n != nl) throw DataError("IDX counts differ: " + std::to_string(n) + " images, " + std::to_string(nl) + " labels");
  if (img.size() != 16 + n * rows * cols) throw DataError("IDX image file truncated or oversized");
  if (lbl.size() != 8 + n) throw DataError("IDX label file truncated or oversized");
  Dataset d;
  d.split = split;
  d.images = Tensor<float>(Shape{n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) d.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.labels[i] = lbl[8 + i];
  d.validate();
  return d;
}

inline Dataset load_mnist(const std::string& images_path, const std::string& labels_path,
                          const std::string& split = "mnist") {
  return decode_mnist(detail::slurp(images_path), detail::slurp(labels_path), split);
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0f), 0L, 255L));
}

/// Re-encodes raw (not mean-subtracted) images as IDX bytes.
inline std::vector<std::uint8_t> encode_idx_images(const Dataset& d) {
  const Shape s = d.images.shape();
  if (s.c != 1) throw DataError("IDX image encoding needs single-channel images");
  std::vector<std::uint8_t> b;
  b.reserve(16 + s.size());
  detail::put_be32(b, kIdxImageMagic);
  detail::put_be32(b, static_cast<std::uint32_t>(s.n));
  detail::put_be32(b, static_cast<std::uint32_t>(s.h));
  detail::put_be32(b, static_cast<std::uint32_t>(s.w));
  for (float v : d.images.values()) b.push_back(to_byte(v));
  return b;
}

inline std::vector<std::uint8_t> encode_idx_labels(const Dataset& d) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxLabelMagic);
  detail::put_be32(b, static_cast<std::uint32_t>(d.labels.size()));
  for (int l : d.labels) b.push_back(static_cast<std::uint8_t>(l));
  return b;
}

inline constexpr std::size_t kCifarRecord = 3073;

inline Dataset decode_cifar10(const std::vector<std::vector<std::uint8_t>>& files, const std::string& split = "cifar10") {
  std::size_t total = 0;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (files[i].size() % kCifarRecord != 0)
      throw DataError("CIFAR-10 batch " + std::to_string(i) + " has length " + std::to_string(files[i].size()) +
                      ", not a multiple of 3073");
    total += files[i].size() / kCifarRecord;
  }
  Dataset d;
  d.split = split;
  d.images = Tensor<float>(Shape{total, 3, 32, 32});
  d.labels.reserve(total);
  std::size_t n = 0;
  for (const auto& f : files)
    for (std::size_t r = 0; r < f.size() / kCifarRecord; ++r, ++n) {
      const std::uint8_t* rec = f.data() + r * kCifarRecord;
      d.labels.push_back(rec[0]);
      float* dst = d.images.data() + n * 3072;
      for (std::size_t i = 0; i < 3072; ++i) dst[i] = static_cast<float>(rec[1 + i]) / 255.0f;
    }
  d.validate();
  return d;
}

inline Dataset load_cifar10(const std::vector<std::string>& batch_paths, const std::string& split = "cifar10") {
  std::vector<std::vector<std::uint8_t>> files;
  for (const auto& p : batch_paths) files.push_back(detail::slurp(p));
  return decode_cifar10(files, split);
}

enum class DatasetKind { mnist, cifar10 };

/// Locates the standard file names inside `dir`.
inline Dataset load_split(const std::string& dir, DatasetKind kind, const std::string& split) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (kind == DatasetKind::mnist) {
    const std::string prefix = split == "train" ? "train" : "t10k";
    return load_mnist((root / (prefix + "-images-idx3-ubyte")).string(), (root / (prefix + "-labels-idx1-ubyte")).string(),
                      split);
  }
  std::vector<std::string> paths;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) paths.push_back((root / ("data_batch_" + std::to_string(i) + ".bin")).string());
  } else {
    paths.push_back((root / "test_batch.bin").string());
  }
  return load_cifar10(paths, split);
}

inline DatasetKind detect_kind(const std::string& dir) {
  namespace fs = std::filesystem;
  if (fs::exists(fs::path(dir) / "train-images-idx3-ubyte")) return DatasetKind::mnist;
  if (fs::exists(fs::path(dir) / "data_batch_1.bin")) return DatasetKind::cifar10;
  throw DataError("no MNIST or CIFAR-10 files found in '" + dir + "'");
}

/// Per-channel mean over all images and pixels, accumulated in double.
inline std::vector<float> channel_mean(const Dataset& d) {
  const Shape s = d.images.shape();
  std::vector<double> acc(s.c, 0.0);
  const std::size_t plane = s.h * s.w;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* p = d.images.data() + (n * s.c + c) * plane;
      double sum = 0;
      for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      acc[c] += sum;
    }
  std::vector<float> mean(s.c);
  const double count = static_cast<double>(s.n * plane);
  for (std::size_t c = 0; c < s.c; ++c) mean[c] = static_cast<float>(acc[c] / count);
  return mean;
}

/// Subtracts `mean` (normally the training-set channel mean) in place.
inline void subtract_mean(Dataset& d, const std::vector<float>& mean) {
  const Shape s = d.images.shape();
  if (mean.size() != s.c) throw DataError("mean has " + std::to_string(mean.size()) + " channels");
  const std::size_t plane = s.h * s.w;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      float* p = d.images.data() + (n * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] -= mean[c];
    }
  d.mean = mean;
  ++d.mean_applications;
}

/// Computes the mean of `train`, subtracts it from `train`, returns it.
inline std::vector<float> preprocess(Dataset& train) {
  auto mean = channel_mean(train);
  subtract_mean(train, mean);
  return mean;
}

struct AugmentSpec {
  std::size_t crop = 0;  // output side; 0 keeps the full image
  bool flip = false;
};

/// Origin and mirroring of one augmented view.
struct CropWindow {
  std::size_t y = 0, x = 0;
  bool flip = false;
};

inline CropWindow random_window(const Shape& s, const AugmentSpec& spec, Rng& rng) {
  const std::size_t crop = spec.crop == 0 ? s.h : spec.crop;
  if (crop > s.h || crop > s.w) throw DimensionError("crop side exceeds image side");
  CropWindow w;
  w.y = rng.below(s.h - crop + 1);
  w.x = rng.below(s.w - crop + 1);
  w.flip = spec.flip && rng.bernoulli(0.5);
  return w;
}

inline CropWindow center_window(const Shape& s, const AugmentSpec& spec) {
  const std::size_t crop = spec.crop == 0 ? s.h : spec.crop;
  if (crop > s.h || crop > s.w) throw DimensionError("crop side exceeds image side");
  return {(s.h - crop) / 2, (s.w - crop) / 2, false};
}

/// Copies item `src_index` of `src` through `win` into item `dst_index` of `dst`.
template <class T>
void crop_into(const Tensor<float>& src, std::size_t src_index, const CropWindow& win, Tensor<T>& dst,
               std::size_t dst_index) {
  const Shape& s = src.shape();
  const Shape& d = dst.shape();
  if (d.c != s.c || win.y + d.h > s.h || win.x + d.w > s.w)
    throw DimensionError("crop window outside image bounds");
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t y = 0; y < d.h; ++y) {
      const float* row = &src(src_index, c, win.y + y, win.x);
      T* out = &dst(dst_index, c, y, 0);
      for (std::size_t x = 0; x < d.w; ++x) out[x] = static_cast<T>(win.flip ? row[d.w - 1 - x] : row[x]);
    }
}

inline Tensor<float> flip_horizontal(const Tensor<float>& t) {
  const Shape& s = t.shape();
  Tensor<float> out(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x) out(n, c, y, x) = t(n, c, y, s.w - 1 - x);
  return out;
}

template <class T = float>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

/// Gathers `indices` into a batch; random crops/flips when `rng` is given,
/// otherwise the deterministic center crop.
template <class T = float>
Batch<T> make_batch(const Dataset& d, std::span<const std::size_t> indices, const AugmentSpec& spec, Rng* rng) {
  const Shape s = d.images.shape();
  const std::size_t crop = spec.crop == 0 ? s.h : spec.crop;
  const std::size_t crop_w = spec.crop == 0 ? s.w : spec.crop;
  Batch<T> b{Tensor<T>(Shape{indices.size(), s.c, crop, crop_w}), {}};
  b.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const CropWindow win = rng ? random_window(s, spec, *rng) : center_window(s, spec);
    crop_into(d.images, indices[i], win, b.images, i);
    b.labels.push_back(d.labels[indices[i]]);
  }
  return b;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace epinet
