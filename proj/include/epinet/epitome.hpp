#pragma once

// Mini-epitome convolution. Each of the K epitomes is a V x V x C parameter
// image; every W x W sub-window at a displacement that is a multiple of the
// epitome stride is a candidate filter. For each sparsely sampled input patch
// the layer reports the best candidate response and remembers where it was
// found, so the backward pass can route gradients into the shared cells.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace epinet {

/// Offset of a filter window inside its epitome, in epitome pixels.
struct Displacement {
  std::uint8_t dy = 0, dx = 0;
  friend bool operator==(const Displacement&, const Displacement&) = default;
};

/// Winning displacement per output element (image, channel, y, x).
class ArgmaxMap {
 public:
  ArgmaxMap() = default;
  explicit ArgmaxMap(Shape shape) : shape_(shape), at_(shape.size()) {}

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return at_.size(); }
  Displacement& operator[](std::size_t i) { return at_[i]; }
  const Displacement& operator[](std::size_t i) const { return at_[i]; }
  Displacement& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return at_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  const Displacement& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return at_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }

  friend bool operator==(const ArgmaxMap&, const ArgmaxMap&) = default;

 private:
  Shape shape_{};
  std::vector<Displacement> at_;
};

/// K epitomes of V x V x C weights with the matching configuration.
/// Weights are stored as a K x C x V x V tensor.
template <class T>
struct EpitomeBank {
  std::size_t epitomes = 0;       // K
  std::size_t epitome_size = 0;   // V
  std::size_t filter_size = 0;    // W
  std::size_t channels = 0;       // C
  std::size_t epitome_stride = 1; // s_e
  bool normalize = false;
  T lambda = T(0.01);
  Tensor<T> weights;

  EpitomeBank() = default;
  EpitomeBank(std::size_t k, std::size_t v, std::size_t w, std::size_t c, std::size_t stride = 1,
              bool norm = false, T lam = T(0.01))
      : epitomes(k), epitome_size(v), filter_size(w), channels(c), epitome_stride(stride),
        normalize(norm), lambda(lam), weights(Shape{k, c, v, v}) {
    validate();
  }

  /// Candidate displacements per axis.
  std::size_t candidates() const { return (epitome_size - filter_size) / epitome_stride + 1; }
  std::size_t filter_volume() const { return filter_size * filter_size * channels; }

  void validate() const {
    if (epitomes == 0 || channels == 0 || filter_size == 0)
      throw DimensionError("epitome bank needs K, W, C >= 1");
    if (epitome_size < filter_size)
      throw DimensionError("epitome size " + std::to_string(epitome_size) +
                           " is smaller than filter size " + std::to_string(filter_size));
    if (epitome_size - filter_size > 255)
      throw DimensionError("epitome size minus filter size must not exceed 255");
    if (epitome_stride == 0) throw DimensionError("epitome stride must be positive");
    // Network configs require lambda > 0 for normalized layers; the bank
    // itself admits lambda == 0 so the unregularized limit can be analyzed.
    if (!(lambda >= T(0))) throw RangeError("lambda must be non-negative");
    if (weights.shape() != Shape{epitomes, channels, epitome_size, epitome_size})
      throw DimensionError("epitome weights have shape " + weights.shape().str());
  }

  /// Zero-mean Gaussian initialization.
  void init_gaussian(Rng& rng, double stddev = 0.01) {
    for (auto& v : weights.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  }
};

/// Aliasing view of the W x W x C window of epitome k at displacement p.
template <class T>
class FilterView {
 public:
  FilterView(const Tensor<T>& weights, std::size_t k, Displacement p, std::size_t w)
      : weights_(&weights), k_(k), p_(p), w_(w) {}

  std::size_t size() const { return w_; }
  std::size_t channels() const { return weights_->shape().c; }
  Displacement displacement() const { return p_; }

  const T& operator()(std::size_t c, std::size_t dy, std::size_t dx) const {
    return (*weights_)(k_, c, p_.dy + dy, p_.dx + dx);
  }
  /// Address of the stored cell, for aliasing checks.
  const T* cell(std::size_t c, std::size_t dy, std::size_t dx) const { return &(*this)(c, dy, dx); }

  /// Channel-major copy, matching the im2col row layout.
  std::vector<T> flatten() const {
    std::vector<T> out;
    out.reserve(w_ * w_ * channels());
    for (std::size_t c = 0; c < channels(); ++c)
      for (std::size_t dy = 0; dy < w_; ++dy)
        for (std::size_t dx = 0; dx < w_; ++dx) out.push_back((*this)(c, dy, dx));
    return out;
  }

 private:
  const Tensor<T>* weights_;
  std::size_t k_;
  Displacement p_;
  std::size_t w_;
};

template <class T>
bool valid_displacement(const EpitomeBank<T>& bank, Displacement p) {
  const std::size_t span = bank.epitome_size - bank.filter_size;
  return p.dy <= span && p.dx <= span && p.dy % bank.epitome_stride == 0 &&
         p.dx % bank.epitome_stride == 0;
}

template <class T>
FilterView<T> extract_filter(const EpitomeBank<T>& bank, std::size_t k, Displacement p) {
  if (k >= bank.epitomes) throw RangeError("epitome index " + std::to_string(k) + " out of range");
  if (!valid_displacement(bank, p))
    throw RangeError("displacement (" + std::to_string(p.dy) + "," + std::to_string(p.dx) +
                     ") outside the candidate grid of a " + std::to_string(bank.epitome_size) +
                     " epitome with " + std::to_string(bank.filter_size) + " filters");
  return FilterView<T>(bank.weights, k, p, bank.filter_size);
}

/// Mean-subtracted copy of a filter and its lambda-regularized contrast.
template <class T>
struct CenteredFilter {
  std::vector<T> centered;
  T contrast = T(0);
};

/// Centers relative to the first element before removing the mean, so a
/// constant offset added to the weights cancels exactly.
template <class T>
CenteredFilter<T> center_filter(std::span<const T> w, T lambda) {
  CenteredFilter<T> out;
  out.centered.resize(w.size());
  const T pivot = w[0];
  T sum = 0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    out.centered[j] = w[j] - pivot;
    sum += out.centered[j];
  }
  const T mean = sum / static_cast<T>(w.size());
  T sq = 0;
  for (auto& v : out.centered) {
    v -= mean;
    sq += v * v;
  }
  out.contrast = std::sqrt(sq + lambda);
  return out;
}

/// Output of a matching forward pass.
template <class T>
struct MatchResult {
  Tensor<T> output;
  ArgmaxMap argmax;
  /// Smallest gap between a winner and its runner-up over all outputs.
  double min_margin = std::numeric_limits<double>::infinity();
};

template <class T>
struct BankGradients {
  Tensor<T> input;
  Tensor<T> weights;
};

namespace detail {

/// All candidate filters of the bank, one per row, ordered
/// (k, cy, cx) row-major; rows are normalized when the bank asks for it.
template <class T>
struct CandidateFilters {
  Matrix<T> filters;             // scored filters (raw or centered / contrast)
  std::vector<T> contrast;       // per row, normalized banks only
  Matrix<T> centered;            // per row, normalized banks only
};

template <class T>
CandidateFilters<T> candidate_filters(const EpitomeBank<T>& bank) {
  const std::size_t nc = bank.candidates();
  const std::size_t m = bank.filter_volume();
  CandidateFilters<T> cf;
  cf.filters = Matrix<T>(bank.epitomes * nc * nc, m);
  if (bank.normalize) {
    cf.centered = Matrix<T>(cf.filters.rows(), m);
    cf.contrast.resize(cf.filters.rows());
  }
  std::vector<T> raw(m);
  for (std::size_t k = 0; k < bank.epitomes; ++k)
    for (std::size_t cy = 0; cy < nc; ++cy)
      for (std::size_t cx = 0; cx < nc; ++cx) {
        const std::size_t f = (k * nc + cy) * nc + cx;
        const std::size_t oy = cy * bank.epitome_stride, ox = cx * bank.epitome_stride;
        std::size_t j = 0;
        for (std::size_t c = 0; c < bank.channels; ++c)
          for (std::size_t dy = 0; dy < bank.filter_size; ++dy)
            for (std::size_t dx = 0; dx < bank.filter_size; ++dx)
              raw[j++] = bank.weights(k, c, oy + dy, ox + dx);
        if (!bank.normalize) {
          std::copy(raw.begin(), raw.end(), cf.filters.row(f));
          continue;
        }
        auto centered = center_filter<T>(raw, bank.lambda);
        cf.contrast[f] = centered.contrast;
        std::copy(centered.centered.begin(), centered.centered.end(), cf.centered.row(f));
        T* dst = cf.filters.row(f);
        for (std::size_t i = 0; i < m; ++i) dst[i] = centered.centered[i] / centered.contrast;
      }
  return cf;
}

/// Geometry of max-pooling over the candidate grid: blocks of `block`
/// candidates per axis with stride `block`, `outputs` blocks per axis.
struct PoolGrid {
  std::size_t candidates = 0;
  std::size_t block = 0;
  std::size_t outputs = 0;
};

template <class T>
Shape match_output_shape(const Shape& in, const EpitomeBank<T>& bank, std::size_t input_stride,
                         const PoolGrid& grid) {
  return {in.n, bank.epitomes * grid.outputs * grid.outputs,
          valid_extent(in.h, bank.filter_size, input_stride),
          valid_extent(in.w, bank.filter_size, input_stride)};
}

template <class T>
void check_match_input(const Tensor<T>& input, const EpitomeBank<T>& bank, std::size_t input_stride,
                       std::string_view layer) {
  bank.validate();
  if (input.shape().c != bank.channels)
    throw DimensionError(std::string(layer) + ": input has " + std::to_string(input.shape().c) +
                         " channels, epitomes have " + std::to_string(bank.channels));
  check_window(input.shape(), bank.filter_size, input_stride, layer);
}

template <class T>
MatchResult<T> match_forward(const Tensor<T>& input, const EpitomeBank<T>& bank,
                             std::size_t input_stride, const PoolGrid& grid, OpCounter* counter,
                             std::string_view layer) {
  check_match_input(input, bank, input_stride, layer);
  const std::size_t nc = grid.candidates, per_epitome = nc * nc;
  const auto patches = im2col(input, bank.filter_size, input_stride, layer);
  const auto cf = candidate_filters(bank);
  const Matrix<T> filters_t = transpose(cf.filters.view());
  const Matrix<T> scores = matmul(patches.view(), filters_t.view(), counter);

  MatchResult<T> res;
  const Shape out_shape = match_output_shape(input.shape(), bank, input_stride, grid);
  res.output = Tensor<T>(out_shape);
  res.argmax = ArgmaxMap(out_shape);
  const std::size_t sites = out_shape.h * out_shape.w;
  const std::size_t no = grid.outputs;
  double min_margin = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < patches.rows; ++r) {
    const T* row = scores.row(r);
    const std::size_t img = r / sites, site = r % sites;
    const std::size_t oy = site / out_shape.w, ox = site % out_shape.w;
    for (std::size_t k = 0; k < bank.epitomes; ++k) {
      const T* ep = row + k * per_epitome;
      for (std::size_t a = 0; a < no; ++a)
        for (std::size_t b = 0; b < no; ++b) {
          T best = -std::numeric_limits<T>::infinity();
          T second = -std::numeric_limits<T>::infinity();
          std::size_t by = a * grid.block, bx = b * grid.block;
          for (std::size_t cy = a * grid.block; cy < (a + 1) * grid.block; ++cy)
            for (std::size_t cx = b * grid.block; cx < (b + 1) * grid.block; ++cx) {
              const T s = ep[cy * nc + cx];
#ifndef NDEBUG
              if (!std::isfinite(s)) throw NumericError(std::string(layer) + ": non-finite score");
#endif
              if (s > best) {
                second = best;
                best = s;
                by = cy;
                bx = cx;
              } else if (s > second) {
                second = s;
              }
            }
          const std::size_t ch = (k * no + a) * no + b;
          res.output(img, ch, oy, ox) = best;
          res.argmax(img, ch, oy, ox) = {static_cast<std::uint8_t>(by * bank.epitome_stride),
                                         static_cast<std::uint8_t>(bx * bank.epitome_stride)};
          if (grid.block > 1)
            min_margin = std::min(min_margin, static_cast<double>(best) - static_cast<double>(second));
        }
    }
  }
  res.min_margin = min_margin;
  return res;
}

template <class T>
BankGradients<T> match_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                                const EpitomeBank<T>& bank, const ArgmaxMap& argmax,
                                std::size_t input_stride, const PoolGrid& grid,
                                std::string_view layer) {
  check_match_input(input, bank, input_stride, layer);
  const Shape out_shape = match_output_shape(input.shape(), bank, input_stride, grid);
  if (argmax.shape() != out_shape)
    throw DimensionError(std::string(layer) + ": argmax map " + argmax.shape().str() +
                         " does not belong to this input (expected " + out_shape.str() + ")");
  if (grad_out.shape() != out_shape)
    throw DimensionError(std::string(layer) + ": upstream gradient " + grad_out.shape().str() +
                         ", expected " + out_shape.str());

  const std::size_t nc = grid.candidates, no = grid.outputs;
  const std::size_t m = bank.filter_volume();
  const auto patches = im2col(input, bank.filter_size, input_stride, layer);
  const auto cf = candidate_filters(bank);
  auto grad_patches = like_patches(patches);
  Matrix<T> grad_filters(cf.filters.rows(), m);
  std::vector<char> touched(cf.filters.rows(), 0);

  const std::size_t sites = out_shape.h * out_shape.w;
  for (std::size_t r = 0; r < patches.rows; ++r) {
    const std::size_t img = r / sites, site = r % sites;
    const std::size_t oy = site / out_shape.w, ox = site % out_shape.w;
    const T* x = patches.row(r);
    T* gx = grad_patches.row(r);
    for (std::size_t ch = 0; ch < out_shape.c; ++ch) {
      const T g = grad_out(img, ch, oy, ox);
      if (g == T(0)) continue;
      const std::size_t k = ch / (no * no);
      const Displacement p = argmax(img, ch, oy, ox);
      if (!valid_displacement(bank, p))
        throw DimensionError(std::string(layer) + ": argmax displacement outside the epitome");
      const std::size_t f = (k * nc + p.dy / bank.epitome_stride) * nc + p.dx / bank.epitome_stride;
      const T* w = cf.filters.row(f);
      T* gw = grad_filters.row(f);
      for (std::size_t j = 0; j < m; ++j) gx[j] += g * w[j];
      for (std::size_t j = 0; j < m; ++j) gw[j] += g * x[j];
      touched[f] = 1;
    }
  }

  BankGradients<T> grads;
  grads.input = Tensor<T>(input.shape());
  col2im_accumulate(grad_patches, grads.input, bank.filter_size, input_stride);
  grads.weights = Tensor<T>(bank.weights.shape());

  std::vector<T> dw(m);
  for (std::size_t k = 0; k < bank.epitomes; ++k)
    for (std::size_t cy = 0; cy < nc; ++cy)
      for (std::size_t cx = 0; cx < nc; ++cx) {
        const std::size_t f = (k * nc + cy) * nc + cx;
        if (!touched[f]) continue;
        const T* q = grad_filters.row(f);
        if (bank.normalize) {
          // u = wc / n with wc = w - mean(w), n = sqrt(wc.wc + lambda):
          // dL/dw = center(q) / n - (q.wc / n^3) wc
          const T n = cf.contrast[f];
          const T* wc = cf.centered.row(f);
          T qmean = 0, qdot = 0;
          for (std::size_t j = 0; j < m; ++j) {
            qmean += q[j];
            qdot += q[j] * wc[j];
          }
          qmean /= static_cast<T>(m);
          const T coef = qdot / (n * n * n);
          for (std::size_t j = 0; j < m; ++j) dw[j] = (q[j] - qmean) / n - coef * wc[j];
        } else {
          std::copy(q, q + m, dw.begin());
        }
        const std::size_t oy = cy * bank.epitome_stride, ox = cx * bank.epitome_stride;
        std::size_t j = 0;
        for (std::size_t c = 0; c < bank.channels; ++c)
          for (std::size_t dy = 0; dy < bank.filter_size; ++dy)
            for (std::size_t dx = 0; dx < bank.filter_size; ++dx)
              grads.weights(k, c, oy + dy, ox + dx) += dw[j++];
      }
  return grads;
}

}  // namespace detail

template <class T>
Shape epitomic_output_shape(const Shape& in, const EpitomeBank<T>& bank, std::size_t input_stride) {
  const std::size_t nc = bank.candidates();
  return detail::match_output_shape(in, bank, input_stride, {nc, nc, 1});
}

/// Best response of every mini-epitome for patches on a grid with
/// `input_stride`. Ties resolve to the first displacement in row-major order.
template <class T>
MatchResult<T> epitomic_forward(const Tensor<T>& input, const EpitomeBank<T>& bank,
                                std::size_t input_stride, OpCounter* counter = nullptr) {
  const std::size_t nc = bank.candidates();
  return detail::match_forward(input, bank, input_stride, {nc, nc, 1}, counter, "epitomic");
}

template <class T>
BankGradients<T> epitomic_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                                   const EpitomeBank<T>& bank, const ArgmaxMap& argmax,
                                   std::size_t input_stride) {
  const std::size_t nc = bank.candidates();
  return detail::match_backward(grad_out, input, bank, argmax, input_stride, {nc, nc, 1},
                                "epitomic");
}

}  // namespace epinet
