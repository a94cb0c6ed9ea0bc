#pragma once

// Baseline building blocks: strided convolution, max-pooling, bias + ReLU,
// across-channel LRN, dropout, fully connected, softmax log-loss.
// Every op is a pure function of its inputs; backward functions take the
// forward inputs (or outputs) they need instead of caching them.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "epitome.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace epinet {

// ---------------------------------------------------------------------------
// Convolution

/// K filters of W x W x C, stored K x C x W x W, plus the pooling that
/// usually follows them.
template <class T>
struct ConvBank {
  std::size_t filters = 0;
  std::size_t filter_size = 0;
  std::size_t channels = 0;
  std::size_t stride = 1;
  std::size_t pool = 1;         // D
  std::size_t pool_stride = 1;  // s_p
  Tensor<T> weights;

  ConvBank() = default;
  ConvBank(std::size_t k, std::size_t w, std::size_t c, std::size_t input_stride = 1,
           std::size_t pool_size = 1, std::size_t pool_step = 1)
      : filters(k), filter_size(w), channels(c), stride(input_stride), pool(pool_size),
        pool_stride(pool_step), weights(Shape{k, c, w, w}) {
    validate();
  }

  std::size_t filter_volume() const { return filter_size * filter_size * channels; }

  void validate() const {
    if (filters == 0) throw DimensionError("conv bank needs at least one filter");
    if (pool == 0 || pool_stride == 0) throw DimensionError("pooling window and stride must be positive");
    if (stride == 0 || filter_size == 0) throw DimensionError("conv filter size and stride must be positive");
    if (weights.shape() != Shape{filters, channels, filter_size, filter_size})
      throw DimensionError("conv weights have shape " + weights.shape().str());
  }

  void init_gaussian(Rng& rng, double stddev = 0.01) {
    for (auto& v : weights.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  }
};

template <class T>
Shape conv_output_shape(const Shape& in, const ConvBank<T>& bank) {
  return {in.n, bank.filters, valid_extent(in.h, bank.filter_size, bank.stride),
          valid_extent(in.w, bank.filter_size, bank.stride)};
}

namespace detail {

template <class T>
void check_conv_input(const Tensor<T>& input, const ConvBank<T>& bank) {
  bank.validate();
  if (input.shape().c != bank.channels)
    throw DimensionError("conv: input has " + std::to_string(input.shape().c) +
                         " channels, filters have " + std::to_string(bank.channels));
  check_window(input.shape(), bank.filter_size, bank.stride, "conv");
}

// Site-major matrix (rows = image x site, cols = channels) <-> N x K x H x W.
template <class T>
void scatter_sites(const Matrix<T>& m, Tensor<T>& out) {
  const Shape& s = out.shape();
  const std::size_t sites = s.h * s.w;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const std::size_t img = r / sites, site = r % sites;
    const T* row = m.row(r);
    for (std::size_t k = 0; k < s.c; ++k) out.data()[(img * s.c + k) * sites + site] = row[k];
  }
}

template <class T>
Matrix<T> gather_sites(const Tensor<T>& t) {
  const Shape& s = t.shape();
  const std::size_t sites = s.h * s.w;
  Matrix<T> m(s.n * sites, s.c);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const std::size_t img = r / sites, site = r % sites;
    T* row = m.row(r);
    for (std::size_t k = 0; k < s.c; ++k) row[k] = t.data()[(img * s.c + k) * sites + site];
  }
  return m;
}

}  // namespace detail

/// Dense strided valid convolution, realized as im2col + matmul.
template <class T>
Tensor<T> conv_forward(const Tensor<T>& input, const ConvBank<T>& bank, OpCounter* counter = nullptr) {
  detail::check_conv_input(input, bank);
  const auto patches = im2col(input, bank.filter_size, bank.stride, "conv");
  const Matrix<T> filters_t =
      transpose(matrix_view(bank.weights.data(), bank.filters, bank.filter_volume()));
  const Matrix<T> out = matmul(patches.view(), filters_t.view(), counter);
  Tensor<T> result(conv_output_shape(input.shape(), bank));
  detail::scatter_sites(out, result);
  return result;
}

template <class T>
struct ConvGradients {
  Tensor<T> input;
  Tensor<T> weights;
};

template <class T>
ConvGradients<T> conv_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                               const ConvBank<T>& bank) {
  detail::check_conv_input(input, bank);
  const Shape out_shape = conv_output_shape(input.shape(), bank);
  if (grad_out.shape() != out_shape)
    throw DimensionError("conv: upstream gradient " + grad_out.shape().str() + ", expected " +
                         out_shape.str());
  const auto patches = im2col(input, bank.filter_size, bank.stride, "conv");
  const Matrix<T> g = detail::gather_sites(grad_out);
  ConvGradients<T> grads;
  grads.weights = Tensor<T>(bank.weights.shape());
  matmul_into(transpose(g.view()).view(), patches.view(),
              matrix_view(grads.weights.data(), bank.filters, bank.filter_volume()));
  auto grad_patches = like_patches(patches);
  matmul_into(g.view(), matrix_view(bank.weights.data(), bank.filters, bank.filter_volume()),
              grad_patches.view());
  grads.input = Tensor<T>(input.shape());
  col2im_accumulate(grad_patches, grads.input, bank.filter_size, bank.stride);
  return grads;
}

// ---------------------------------------------------------------------------
// Max-pooling

/// Argmax entries hold the winning offset inside each pooling window.
template <class T>
struct PoolResult {
  Tensor<T> output;
  ArgmaxMap argmax;
  double min_margin = std::numeric_limits<double>::infinity();
};

inline Shape maxpool_output_shape(const Shape& in, std::size_t pool, std::size_t stride) {
  return {in.n, in.c, valid_extent(in.h, pool, stride), valid_extent(in.w, pool, stride)};
}

/// Per-channel spatial max; ties go to the first site in row-major order.
template <class T>
PoolResult<T> maxpool_forward(const Tensor<T>& input, std::size_t pool, std::size_t stride) {
  check_window(input.shape(), pool, stride, "maxpool");
  if (pool > 255) throw DimensionError("maxpool: window must not exceed 255");
  const Shape os = maxpool_output_shape(input.shape(), pool, stride);
  PoolResult<T> res{Tensor<T>(os), ArgmaxMap(os)};
  double min_margin = std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < os.n; ++n)
    for (std::size_t c = 0; c < os.c; ++c)
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          T second = best;
          std::size_t by = 0, bx = 0;
          for (std::size_t dy = 0; dy < pool; ++dy)
            for (std::size_t dx = 0; dx < pool; ++dx) {
              const T v = input(n, c, oy * stride + dy, ox * stride + dx);
              if (v > best) {
                second = best;
                best = v;
                by = dy;
                bx = dx;
              } else if (v > second) {
                second = v;
              }
            }
          res.output(n, c, oy, ox) = best;
          res.argmax(n, c, oy, ox) = {static_cast<std::uint8_t>(by), static_cast<std::uint8_t>(bx)};
          if (pool > 1)
            min_margin = std::min(min_margin, static_cast<double>(best) - static_cast<double>(second));
        }
  res.min_margin = min_margin;
  return res;
}

/// Sends each upstream value to the recorded winning input site.
template <class T>
Tensor<T> maxpool_backward(const Tensor<T>& grad_out, const ArgmaxMap& argmax, const Shape& input_shape,
                           std::size_t pool, std::size_t stride) {
  const Shape os = maxpool_output_shape(input_shape, pool, stride);
  if (grad_out.shape() != os || argmax.shape() != os)
    throw DimensionError("maxpool: gradient/argmax shape does not match input " + input_shape.str());
  Tensor<T> grad_in(input_shape);
  for (std::size_t n = 0; n < os.n; ++n)
    for (std::size_t c = 0; c < os.c; ++c)
      for (std::size_t oy = 0; oy < os.h; ++oy)
        for (std::size_t ox = 0; ox < os.w; ++ox) {
          const Displacement p = argmax(n, c, oy, ox);
          if (p.dy >= pool || p.dx >= pool) throw DimensionError("maxpool: argmax outside window");
          grad_in(n, c, oy * stride + p.dy, ox * stride + p.dx) += grad_out(n, c, oy, ox);
        }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Bias + ReLU

template <class T>
Tensor<T> bias_relu_forward(const Tensor<T>& input, std::span<const T> biases) {
  const Shape& s = input.shape();
  if (biases.size() != s.c)
    throw DimensionError("relu: " + std::to_string(biases.size()) + " biases for " +
                         std::to_string(s.c) + " channels");
  Tensor<T> out(s);
  const std::size_t sites = s.h * s.w;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = input.data() + (n * s.c + c) * sites;
      T* dst = out.data() + (n * s.c + c) * sites;
      for (std::size_t i = 0; i < sites; ++i) dst[i] = std::max(src[i] + biases[c], T(0));
    }
  return out;
}

template <class T>
struct BiasReluGradients {
  Tensor<T> input;
  std::vector<T> biases;
};

/// Masks by the post-activation (positive iff the pre-activation was).
template <class T>
BiasReluGradients<T> bias_relu_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
  const Shape& s = output.shape();
  if (grad_out.shape() != s) throw DimensionError("relu: gradient shape mismatch");
  BiasReluGradients<T> g{Tensor<T>(s), std::vector<T>(s.c, T(0))};
  const std::size_t sites = s.h * s.w;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t base = (n * s.c + c) * sites;
      T acc = 0;
      for (std::size_t i = 0; i < sites; ++i) {
        const T v = output[base + i] > T(0) ? grad_out[base + i] : T(0);
        g.input[base + i] = v;
        acc += v;
      }
      g.biases[c] += acc;
    }
  return g;
}

// ---------------------------------------------------------------------------
// Local response normalization across channels

struct LrnParams {
  std::size_t size = 5;   // n, odd
  double alpha = 1e-4;
  double beta = 0.75;
  double k = 2.0;         // kappa

  void validate() const {
    if (size % 2 == 0) throw RangeError("lrn: neighborhood size must be odd");
    if (!(alpha >= 0.0) || !(k > 0.0)) throw RangeError("lrn: alpha must be >= 0 and k > 0");
  }
};

namespace detail {

// kappa + (alpha / n) * sum of squares over the channel neighborhood.
template <class T>
Tensor<T> lrn_scale(const Tensor<T>& input, const LrnParams& p) {
  const Shape& s = input.shape();
  Tensor<T> scale(s);
  const std::size_t sites = s.h * s.w;
  const auto half = static_cast<std::ptrdiff_t>(p.size / 2);
  const T coef = static_cast<T>(p.alpha / static_cast<double>(p.size));
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(c) - half);
      const auto hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(s.c) - 1,
                                               static_cast<std::ptrdiff_t>(c) + half);
      T* dst = scale.data() + (n * s.c + c) * sites;
      for (std::size_t i = 0; i < sites; ++i) {
        T sq = 0;
        for (auto j = lo; j <= hi; ++j) {
          const T v = input.data()[(n * s.c + static_cast<std::size_t>(j)) * sites + i];
          sq += v * v;
        }
        dst[i] = static_cast<T>(p.k) + coef * sq;
      }
    }
  return scale;
}

}  // namespace detail

template <class T>
Tensor<T> lrn_forward(const Tensor<T>& input, const LrnParams& p) {
  p.validate();
  const Tensor<T> scale = detail::lrn_scale(input, p);
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = input[i] * std::pow(scale[i], static_cast<T>(-p.beta));
  return out;
}

template <class T>
Tensor<T> lrn_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const LrnParams& p) {
  p.validate();
  const Shape& s = input.shape();
  if (grad_out.shape() != s) throw DimensionError("lrn: gradient shape mismatch");
  const Tensor<T> scale = detail::lrn_scale(input, p);
  // t_c = g_c * x_c * scale_c^(-beta - 1)
  Tensor<T> t(s);
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = grad_out[i] * input[i] * std::pow(scale[i], static_cast<T>(-p.beta - 1.0));
  Tensor<T> grad_in(s);
  const std::size_t sites = s.h * s.w;
  const auto half = static_cast<std::ptrdiff_t>(p.size / 2);
  const T coef = static_cast<T>(2.0 * p.alpha * p.beta / static_cast<double>(p.size));
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const auto lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(c) - half);
      const auto hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(s.c) - 1,
                                               static_cast<std::ptrdiff_t>(c) + half);
      const std::size_t base = (n * s.c + c) * sites;
      for (std::size_t i = 0; i < sites; ++i) {
        T acc = 0;
        for (auto j = lo; j <= hi; ++j) acc += t[(n * s.c + static_cast<std::size_t>(j)) * sites + i];
        grad_in[base + i] = grad_out[base + i] * std::pow(scale[base + i], static_cast<T>(-p.beta)) -
                            coef * input[base + i] * acc;
      }
    }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Dropout (inverted: survivors are scaled by 1 / (1 - rate) at train time)

enum class Mode { train, eval };

struct DropoutState {
  double rate = 0.5;
  Mode mode = Mode::train;
  std::vector<std::uint8_t> mask;

  void validate() const {
    if (!(rate >= 0.0 && rate < 1.0)) throw RangeError("dropout rate must lie in [0, 1)");
  }
};

template <class T>
Tensor<T> dropout_forward(const Tensor<T>& input, DropoutState& state, Rng& rng) {
  state.validate();
  if (state.mode == Mode::eval || state.rate == 0.0) {
    state.mask.assign(input.size(), 1);
    return input;
  }
  const T scale = static_cast<T>(1.0 / (1.0 - state.rate));
  state.mask.resize(input.size());
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    state.mask[i] = rng.uniform() >= state.rate ? 1 : 0;
    out[i] = state.mask[i] ? input[i] * scale : T(0);
  }
  return out;
}

template <class T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, const DropoutState& state) {
  if (state.mask.size() != grad_out.size())
    throw StateError("dropout: backward without a matching forward");
  if (state.mode == Mode::eval || state.rate == 0.0) return grad_out;
  const T scale = static_cast<T>(1.0 / (1.0 - state.rate));
  Tensor<T> g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = state.mask[i] ? grad_out[i] * scale : T(0);
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected: weights are outputs x inputs, stored as a {out, in, 1, 1} tensor.

template <class T>
Tensor<T> fc_forward(const Tensor<T>& input, const Tensor<T>& weights, std::span<const T> biases) {
  const std::size_t in = input.shape().per_item(), out = weights.shape().n;
  if (weights.shape().per_item() != in)
    throw DimensionError("fc: " + std::to_string(in) + " inputs but weights expect " +
                         std::to_string(weights.shape().per_item()));
  if (biases.size() != out) throw DimensionError("fc: bias count mismatch");
  const std::size_t batch = input.shape().n;
  const Matrix<T> wt = transpose(matrix_view(weights.data(), out, in));
  Tensor<T> y(Shape{batch, out, 1, 1});
  matmul_into(matrix_view(input.data(), batch, in), wt.view(), matrix_view(y.data(), batch, out));
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t j = 0; j < out; ++j) y[n * out + j] += biases[j];
  return y;
}

template <class T>
struct FcGradients {
  Tensor<T> input;
  Tensor<T> weights;
  std::vector<T> biases;
};

template <class T>
FcGradients<T> fc_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weights) {
  const std::size_t batch = input.shape().n, in = input.shape().per_item(), out = weights.shape().n;
  if (grad_out.shape() != Shape{batch, out, 1, 1}) throw DimensionError("fc: gradient shape mismatch");
  FcGradients<T> g{Tensor<T>(input.shape()), Tensor<T>(weights.shape()), std::vector<T>(out, T(0))};
  const auto gm = matrix_view(grad_out.data(), batch, out);
  matmul_into(gm, matrix_view(weights.data(), out, in), matrix_view(g.input.data(), batch, in));
  matmul_into(transpose(gm).view(), matrix_view(input.data(), batch, in),
              matrix_view(g.weights.data(), out, in));
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t j = 0; j < out; ++j) g.biases[j] += grad_out[n * out + j];
  return g;
}

// ---------------------------------------------------------------------------
// Softmax log-loss

template <class T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;
  Tensor<T> probabilities;
};

/// Mean negative log-likelihood over the batch; grad = (softmax - onehot) / batch.
template <class T>
LossResult<T> softmax_loss(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t batch = logits.shape().n, classes = logits.shape().per_item();
  if (labels.size() != batch)
    throw DimensionError("softmax: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(batch));
  LossResult<T> res{0.0, Tensor<T>(logits.shape()), Tensor<T>(logits.shape())};
  for (std::size_t n = 0; n < batch; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= classes)
      throw RangeError("softmax: label " + std::to_string(labels[n]) + " outside 0.." +
                       std::to_string(classes - 1));
    const T* z = logits.data() + n * classes;
    T* p = res.probabilities.data() + n * classes;
    const T zmax = *std::max_element(z, z + classes);
    T sum = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      p[j] = std::exp(z[j] - zmax);
      sum += p[j];
    }
    for (std::size_t j = 0; j < classes; ++j) p[j] /= sum;
    const auto label = static_cast<std::size_t>(labels[n]);
    res.loss += -(static_cast<double>(z[label] - zmax) - std::log(static_cast<double>(sum)));
    T* g = res.grad.data() + n * classes;
    for (std::size_t j = 0; j < classes; ++j)
      g[j] = (p[j] - (j == label ? T(1) : T(0))) / static_cast<T>(batch);
  }
  res.loss /= static_cast<double>(batch);
  return res;
}

}  // namespace epinet
