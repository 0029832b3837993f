#pragma once

#include <cmath>

#include <Eigen/Core>

#include "dloseg/common.hpp"
#include "dloseg/random.hpp"

namespace dloseg {

// Frequency matrix of the Fourier-feature positional encoding. It is fixed
// for the lifetime of a model: loaded from the mask decoder's checkpoint for
// real backbones, or seeded i.i.d. standard normal in stub mode.
struct FrequencyMatrix {
  Eigen::MatrixXd b;  // 2 x pairs

  int pairs() const { return static_cast<int>(b.cols()); }
  int dim() const { return 2 * pairs(); }

  static FrequencyMatrix from_seed(std::uint64_t seed, int pairs = 128) {
    Rng rng(seed);
    return FrequencyMatrix{rng.normal_matrix(2, pairs)};
  }
};

// Encodes a point of the unit square as [sin(2*pi*B^T c) | cos(2*pi*B^T c)]
// with c = 2*(x,y) - 1, the mask decoder's coordinate convention. The result
// has Euclidean norm sqrt(pairs) for any B.
inline Eigen::VectorXd encode_coords(double x, double y,
                                     const FrequencyMatrix& freq) {
  require(x >= 0.0 && x <= 1.0 && y >= 0.0 && y <= 1.0,
          "encode_coords: coordinates must lie in [0,1]^2");
  const double two_pi = 6.283185307179586477;
  Eigen::Vector2d c(2.0 * x - 1.0, 2.0 * y - 1.0);
  Eigen::VectorXd phase = two_pi * (freq.b.transpose() * c);
  Eigen::VectorXd v(2 * phase.size());
  v.head(phase.size()) = phase.array().sin();
  v.tail(phase.size()) = phase.array().cos();
  return v;
}

// Dense positional encoding sampled at patch centers of an h x w grid.
// Cell (i, j) lives at row i*w + j; this row-major order is shared with the
// flattened semantic grid.
struct DpeGrid {
  int h = 0;
  int w = 0;
  Eigen::MatrixXd flat;  // (h*w) x dim
  FrequencyMatrix freq;

  
  Eigen::VectorXd at(int i, int j) const { return flat.row(i * w + j); }
};

inline DpeGrid build_dpe_grid(int h, int w, const FrequencyMatrix& freq) {
  require(h >= 1 && w >= 1, "build_dpe_grid: grid must be at least 1x1");
  DpeGrid grid;
  grid.h = h;
  grid.w = w;
  grid.freq = freq;
  grid.flat.resize(static_cast<Eigen::Index>(h) * w, freq.dim());
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double cx = (j + 0.5) / static_cast<double>(w);
      const double cy = (i + 0.5) / static_cast<double>(h);
      grid.flat.row(static_cast<Eigen::Index>(i) * w + j) =
          encode_coords(cx, cy, freq).transpose();
    }
  }
  return grid;
}

}  // namespace dloseg
