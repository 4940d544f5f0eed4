#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lpfa/numerics.hpp"

namespace lpfa {

/// Precision grid a payload is asserted to lie on. Storage is always F64;
/// the tag promises every element survives a round-trip through the grid.
enum class Grid : std::uint8_t { B16 = 0, F32 = 1, F64 = 2 };

const char* grid_name(Grid g);

/// Round x onto the grid.
double snap(double x, Grid g);

enum class Mode { LP, HP, Exact };

const char* mode_name(Mode m);

/// Grid an lp/hp/exact result lives on.
Grid mode_grid(Mode m);

struct Vec {
  std::vector<double> data;
  Grid grid = Grid::F64;

  static Vec zeros(std::size_t n, Grid g = Grid::F64);
  static Vec full(std::size_t n, double v, Grid g = Grid::F64);

  std::size_t size() const { return data.size(); }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  bool on_grid() const;
};

/// Row-major dense matrix, F64 payload plus precision tag.
struct Mat {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;
  Grid grid = Grid::F64;

  static Mat zeros(std::size_t r, std::size_t c, Grid g = Grid::F64);
  static Mat identity(std::size_t n, Grid g = Grid::F64);

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * cols, cols};
  }
  std::span<double> row(std::size_t i) {
    return {data.data() + i * cols, cols};
  }
  bool empty() const { return rows == 0 || cols == 0; }
  bool on_grid() const;
};

Mat to_grid(const Mat& m, Grid g);
Vec to_grid(const Vec& v, Grid g);

/// C = A B. lp: operands must be on the B16 grid, each element via dot_lp
/// (B16 result grid); hp: F32 products and accumulation (F32 grid); exact:
/// F64 fold (F64 grid). Accumulation order is ascending k in all modes.
Mat matmul(const Mat& a, const Mat& b, Mode mode,
           SumMode sum = SumMode::FinalRound);

Mat transpose(const Mat& m);

// Elementwise helpers; results are exact F64 (callers snap as needed).
Mat add(const Mat& a, const Mat& b);
Mat sub(const Mat& a, const Mat& b);
Mat scale(const Mat& a, double s);
Mat hadamard(const Mat& a, const Mat& b);

/// diag(d) * m, i.e. row i scaled by d[i]. F64 result.
Mat diag_scale(const Vec& d, const Mat& m);

/// Outer product u vᵀ in F64.
Mat rank1_outer(const Vec& u, const Vec& v);

/// Per-row maximum. -inf entries (masking) are allowed, NaN is not.
Vec rowmax(const Mat& s);

/// Per-row F64 sum, ascending column order.
Vec rowsum(const Mat& s);

/// Per-row count of elements bit-equal to m[i] on the element's grid.
Vec rowsum_eq(const Mat& s, const Vec& m);

double frobenius(const Mat& m);

/// Sum of elementwise products of two same-shape matrices (F64).
double dot_flat(const Mat& a, const Mat& b);

/// Cosine similarity of flattened matrices; 0 when either norm is 0.
double cosine_flat(const Mat& a, const Mat& b);

struct SpectralResult {
  double value = 0.0;
  bool converged = false;
  std::size_t iters = 0;

  operator double() const { return value; }
};

/// Largest singular value by power iteration on WᵀW. The seed is the
/// normalized all-ones vector; a second pass from that seed with 1e-3 added
/// to the first element guards against a seed orthogonal to the top singular
/// vector, and the larger estimate wins. Converged when successive estimates
/// differ by less than tol.
SpectralResult spectral_norm(const Mat& w, double tol = 1e-12,
                             std::size_t max_iter = 50000);

}  // namespace lpfa
