#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

#include "errors.hpp"

namespace epinet {

/// Extents of a 4-axis tensor: batch, channels, height, width (w fastest).
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::size_t per_item() const { return c * h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

/// Counts inner products issued by the kernels; used to compare layer costs.
struct OpCounter {
  std::uint64_t inner_products = 0;
  std::uint64_t multiply_adds = 0;

  void add(std::uint64_t products, std::uint64_t length) {
    inner_products += products;
    multiply_adds += products * length;
  }
};

/// Dense row-major N x C x H x W array.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[offset(n, c, y, x)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }

  /// Contiguous view of one batch item.
  std::span<T> item(std::size_t n) { return {data_.data() + n * shape_.per_item(), shape_.per_item()}; }
  std::span<const T> item(std::size_t n) const {
    return {data_.data() + n * shape_.per_item(), shape_.per_item()};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  void reshape(Shape s) {
    if (s.size() != shape_.size())
      throw DimensionError("cannot reshape " + shape_.str() + " to " + s.str());
    shape_ = s;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

template <class T>
void debug_check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] std::string_view what) {
#ifndef NDEBUG
  if (!t.all_finite()) throw NumericError("non-finite values in " + std::string(what));
#endif
}

// ---------------------------------------------------------------------------
// Matrices

template <class T>
struct MatrixView {
  T* data = nullptr;
  std::size_t rows = 0, cols = 0, ld = 0;

  T& operator()(std::size_t i, std::size_t j) const { return data[i * ld + j]; }
  T* row(std::size_t i) const { return data + i * ld; }
  operator MatrixView<const T>() const
    requires(!std::is_const_v<T>)
  {
    return {data, rows, cols, ld};
  }
};

template <class T>
using ConstMatrixView = MatrixView<const T>;

/// Owning row-major matrix.
template <class T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  T* row(std::size_t i) { return data_.data() + i * cols_; }
  const T* row(std::size_t i) const { return data_.data() + i * cols_; }

  MatrixView<T> view() { return {data_.data(), rows_, cols_, cols_}; }
  ConstMatrixView<T> view() const { return {data_.data(), rows_, cols_, cols_}; }
  operator ConstMatrixView<T>() const { return view(); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<T> data_;
};

template <class T>
ConstMatrixView<T> matrix_view(const T* data, std::size_t rows, std::size_t cols) {
  return {data, rows, cols, cols};
}
template <class T>
MatrixView<T> matrix_view(T* data, std::size_t rows, std::size_t cols) {
  return {data, rows, cols, cols};
}

template <class T>
Matrix<T> transpose(ConstMatrixView<T> a) {
  Matrix<T> out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

/// Worker count for the row-parallel kernels. Results do not depend on it.
inline int& kernel_threads() {
  static int n = 1;
  return n;
}

namespace detail {

template <class Fn>
void parallel_rows(std::size_t rows, std::size_t grain, Fn&& fn) {
  const auto threads = static_cast<std::size_t>(std::max(1, kernel_threads()));
  const std::size_t blocks = (rows + grain - 1) / grain;
  if (threads == 1 || blocks < 2) {
    fn(std::size_t{0}, rows);
    return;
  }
  const std::size_t workers = std::min(threads, blocks);
  const std::size_t per = (blocks + workers - 1) / workers * grain;
  std::vector<std::jthread> pool;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t lo = w * per, hi = std::min(rows, lo + per);
    if (lo < hi) pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  fn(std::size_t{0}, std::min(rows, per));
}

// C[i0:i1, :] = A[i0:i1, :] * B. Each element sums over k in ascending order,
// starting from zero, so the result equals a naive triple loop bit for bit.
// Register-blocked kernel: a 4 x kW tile of c lives in local accumulators
// across the whole depth loop. Every element is still summed over k in
// ascending order starting from zero, so results match a naive loop bit for
// bit.
template <class T, std::size_t kRows, std::size_t kW>
inline void matmul_tile(const T* const* arow, const T* b, std::size_t ldb, std::size_t depth, T* const* crow,
                        std::size_t j) {
  T acc[kRows][kW] = {};
  for (std::size_t k = 0; k < depth; ++k) {
    const T* bk = b + k * ldb + j;
    for (std::size_t r = 0; r < kRows; ++r) {
      const T v = arow[r][k];
      for (std::size_t jj = 0; jj < kW; ++jj) acc[r][jj] += v * bk[jj];
    }
  }
  for (std::size_t r = 0; r < kRows; ++r)
    for (std::size_t jj = 0; jj < kW; ++jj) crow[r][j + jj] = acc[r][jj];
}

template <class T, std::size_t kRows>
void matmul_row_block(ConstMatrixView<T> a, ConstMatrixView<T> b, MatrixView<T> c, std::size_t i) {
  constexpr std::size_t kW = 64 / sizeof(T);
  const std::size_t depth = a.cols, n = b.cols;
  const std::size_t n_full = n / kW * kW;
  const T* arow[kRows];
  T* crow[kRows];
  for (std::size_t r = 0; r < kRows; ++r) {
    arow[r] = a.row(i + r);
    crow[r] = c.row(i + r);
  }
  for (std::size_t j = 0; j < n_full; j += kW) matmul_tile<T, kRows, kW>(arow, b.data, b.ld, depth, crow, j);
  for (std::size_t j = n_full; j < n; ++j)
    for (std::size_t r = 0; r < kRows; ++r) {
      T acc = 0;
      for (std::size_t k = 0; k < depth; ++k) acc += arow[r][k] * b(k, j);
      crow[r][j] = acc;
    }
}

template <class T>
void matmul_rows(ConstMatrixView<T> a, ConstMatrixView<T> b, MatrixView<T> c, std::size_t i0,
                 std::size_t i1) {
  std::size_t i = i0;
  for (; i + 8 <= i1; i += 8) matmul_row_block<T, 8>(a, b, c, i);
  for (; i + 4 <= i1; i += 4) matmul_row_block<T, 4>(a, b, c, i);
  for (; i < i1; ++i) matmul_row_block<T, 1>(a, b, c, i);
}

}  // namespace detail

/// c = a * b. Deterministic fixed summation order regardless of blocking or
/// thread count.
template <class T>
void matmul_into(std::type_identity_t<ConstMatrixView<T>> a, std::type_identity_t<ConstMatrixView<T>> b,
                 MatrixView<T> c, OpCounter* counter = nullptr) {
  if (a.cols != b.rows)
    throw DimensionError("matmul inner dimensions differ: " + std::to_string(a.cols) + " vs " +
                         std::to_string(b.rows));
  if (c.rows != a.rows || c.cols != b.cols)
    throw DimensionError("matmul output is " + std::to_string(c.rows) + "x" +
                         std::to_string(c.cols) + ", expected " + std::to_string(a.rows) + "x" +
                         std::to_string(b.cols));
  if (counter) counter->add(a.rows * b.cols, a.cols);
  detail::parallel_rows(a.rows, 64, [&](std::size_t lo, std::size_t hi) {
    detail::matmul_rows(a, b, c, lo, hi);
  });
}

template <class T>
Matrix<T> matmul(ConstMatrixView<T> a, ConstMatrixView<T> b, OpCounter* counter = nullptr) {
  Matrix<T> c(a.rows, b.cols);
  matmul_into(a, b, c.view(), counter);
  return c;
}

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b, OpCounter* counter = nullptr) {
  return matmul(a.view(), b.view(), counter);
}

// ---------------------------------------------------------------------------
// Patch extraction

struct Site {
  std::size_t image = 0, y = 0, x = 0;
  friend bool operator==(const Site&, const Site&) = default;
};

/// Number of valid placements of a window along one axis.
inline std::size_t valid_extent(std::size_t input, std::size_t window, std::size_t stride) {
  return (input - window) / stride + 1;
}

/// One row per patch site; each row is the channel-major flattened
/// filter_size x filter_size x C patch.
template <class T>
struct PatchMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<T> data;
  std::vector<Site> origin;
  Shape input{};
  std::size_t filter_size = 0, stride = 1;
  std::size_t out_h = 0, out_w = 0;

  T* row(std::size_t i) { return data.data() + i * cols; }
  const T* row(std::size_t i) const { return data.data() + i * cols; }
  ConstMatrixView<T> view() const { return {data.data(), rows, cols, cols}; }
  MatrixView<T> view() { return {data.data(), rows, cols, cols}; }
};

inline void check_window(const Shape& s, std::size_t filter_size, std::size_t stride,
                         std::string_view layer) {
  const std::string who = layer.empty() ? std::string("im2col") : std::string(layer);
  if (filter_size == 0) throw DimensionError(who + ": window size must be positive");
  if (stride == 0) throw DimensionError(who + ": stride must be positive");
  if (filter_size > s.h || filter_size > s.w)
    throw DimensionError(who + ": window " + std::to_string(filter_size) + " exceeds input " +
                         std::to_string(s.h) + "x" + std::to_string(s.w));
}

/// Valid-region patch extraction on a regular grid with the given stride.
template <class T>
PatchMatrix<T> im2col(const Tensor<T>& input, std::size_t filter_size, std::size_t stride,
                      std::string_view layer = {}) {
  const Shape& s = input.shape();
  check_window(s, filter_size, stride, layer);
  PatchMatrix<T> pm;
  pm.input = s;
  pm.filter_size = filter_size;
  pm.stride = stride;
  pm.out_h = valid_extent(s.h, filter_size, stride);
  pm.out_w = valid_extent(s.w, filter_size, stride);
  pm.rows = s.n * pm.out_h * pm.out_w;
  pm.cols = s.c * filter_size * filter_size;
  pm.data.resize(pm.rows * pm.cols);
  pm.origin.reserve(pm.rows);
  std::size_t r = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t oy = 0; oy < pm.out_h; ++oy)
      for (std::size_t ox = 0; ox < pm.out_w; ++ox, ++r) {
        const std::size_t y0 = oy * stride, x0 = ox * stride;
        pm.origin.push_back({n, y0, x0});
        T* dst = pm.row(r);
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t dy = 0; dy < filter_size; ++dy) {
            const T* src = &input(n, c, y0 + dy, x0);
            dst = std::copy(src, src + filter_size, dst);
          }
      }
  return pm;
}

/// Adjoint of im2col: adds each patch row back into `into` at its site.
template <class T>
void col2im_accumulate(const PatchMatrix<T>& grads, Tensor<T>& into, std::size_t filter_size,
                       std::size_t stride) {
  const Shape& s = into.shape();
  check_window(s, filter_size, stride, "col2im");
  const std::size_t oh = valid_extent(s.h, filter_size, stride);
  const std::size_t ow = valid_extent(s.w, filter_size, stride);
  if (grads.rows != s.n * oh * ow || grads.cols != s.c * filter_size * filter_size)
    throw DimensionError("col2im: patch matrix " + std::to_string(grads.rows) + "x" +
                         std::to_string(grads.cols) + " does not fit tensor " + s.str());
  std::size_t r = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox, ++r) {
        const T* src = grads.row(r);
        const std::size_t y0 = oy * stride, x0 = ox * stride;
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t dy = 0; dy < filter_size; ++dy) {
            T* dst = &into(n, c, y0 + dy, x0);
            for (std::size_t dx = 0; dx < filter_size; ++dx) dst[dx] += *src++;
          }
      }
}

/// Empty patch matrix laid out like the forward extraction, for gradients.
template <class T>
PatchMatrix<T> like_patches(const PatchMatrix<T>& fwd) {
  PatchMatrix<T> g;
  g.rows = fwd.rows;
  g.cols = fwd.cols;
  g.data.assign(fwd.data.size(), T(0));
  g.input = fwd.input;
  g.filter_size = fwd.filter_size;
  g.stride = fwd.stride;
  g.out_h = fwd.out_h;
  g.out_w = fwd.out_w;
  return g;
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace epinet
