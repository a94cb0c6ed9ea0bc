#pragma once

// Filter-grid rendering as binary PPM (P6).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "network.hpp"

namespace epinet {

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel
};

struct GridLayout {
  std::size_t cols = 0, rows = 0, tile = 0;
  std::size_t width() const { return cols * (tile + 1) + 1; }
  std::size_t height() const { return rows * (tile + 1) + 1; }
};

/// Near-square grid with at least as many columns as rows; exact
/// factorizations are preferred when they are not too elongated.
inline GridLayout grid_layout(std::size_t count, std::size_t tile) {
  if (count == 0) throw DimensionError("nothing to tile");
  const auto root = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(count))));
  std::size_t rows = root;
  while (rows > 1 && count % rows != 0) --rows;
  if (count / rows > 2 * root) rows = root;
  return {(count + rows - 1) / rows, rows, tile};
}

/// Tiles the K x C x S x S weights (C = 1 or 3), each tile min-max
/// normalized on its own, separated by 1-pixel black lines.
template <class T>
Image render_filter_grid(const Tensor<T>& weights) {
  const Shape s = weights.shape();
  if (s.c != 1 && s.c != 3) throw DimensionError("can only render 1- or 3-channel filters, got " + std::to_string(s.c));
  if (s.h != s.w) throw DimensionError("filters must be square");
  const GridLayout g = grid_layout(s.n, s.h);
  Image img{g.width(), g.height(), std::vector<std::uint8_t>(g.width() * g.height() * 3, 0)};
  for (std::size_t k = 0; k < s.n; ++k) {
    const T* base = weights.data() + k * s.per_item();
    const auto [lo_it, hi_it] = std::minmax_element(base, base + s.per_item());
    const double lo = static_cast<double>(*lo_it), range = static_cast<double>(*hi_it) - lo;
    const std::size_t ox = 1 + (k % g.cols) * (s.w + 1), oy = 1 + (k / g.cols) * (s.h + 1);
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double v = static_cast<double>(weights(k, s.c == 3 ? ch : 0, y, x));
          const double u = range > 0 ? (v - lo) / range : 0.5;
          img.rgb[((oy + y) * img.width + ox + x) * 3 + ch] = static_cast<std::uint8_t>(std::lround(u * 255.0));
        }
  }
  return img;
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

inline void write_ppm(const std::string& path, const Image& img) {
  const auto bytes = encode_ppm(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write to '" + path + "' failed");
}

/// Weights of layer `index` (0-based) or of the layer named `name`.
template <class T>
const Tensor<T>& layer_weights(Network<T>& net, const std::string& which) {
  std::size_t index = net.size();
  for (std::size_t i = 0; i < net.size(); ++i)
    if (net.layer(i).spec().name == which) index = i;
  if (index == net.size()) {
    if (which.empty() || !std::all_of(which.begin(), which.end(), ::isdigit))
      throw Error("no layer named '" + which + "'");
    index = std::stoul(which);
    if (index >= net.size()) throw RangeError("layer index " + which + " out of range");
  }
  auto params = net.layer(index).params();
  const auto w = std::find_if(params.begin(), params.end(), [](auto* p) { return p->rank == 4; });
  if (w == params.end())
    throw Error("layer '" + net.layer(index).spec().name + "' (" + to_string(net.layer(index).spec().type) +
                ") has no filters to export");
  return (*w)->value;
}

}  // namespace epinet
