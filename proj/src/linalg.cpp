#include "lpfa/linalg.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace lpfa {

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

const char* grid_name(Grid g) {
  switch (g) {
    case Grid::B16: return "B16";
    case Grid::F32: return "F32";
    case Grid::F64: return "F64";
  }
  return "?";
}

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::LP: return "lp";
    case Mode::HP: return "hp";
    case Mode::Exact: return "exact";
  }
  return "?";
}

Grid mode_grid(Mode m) {
  switch (m) {
    case Mode::LP: return Grid::B16;
    case Mode::HP: return Grid::F32;
    case Mode::Exact: return Grid::F64;
  }
  return Grid::F64;
}

double snap(double x, Grid g) {
  switch (g) {
    case Grid::B16: return decode_b16(encode_b16(x));
    case Grid::F32: return static_cast<double>(static_cast<float>(x));
    case Grid::F64: return x;
  }
  return x;
}

Vec Vec::zeros(std::size_t n, Grid g) { return Vec{std::vector<double>(n, 0.0), g}; }

Vec Vec::full(std::size_t n, double v, Grid g) {
  Vec out{std::vector<double>(n, snap(v, g)), g};
  return out;
}

bool Vec::on_grid() const {
  for (double x : data) {
    if (snap(x, grid) != x && !std::isnan(x)) return false;
  }
  return true;
}

Mat Mat::zeros(std::size_t r, std::size_t c, Grid g) {
  Mat m;
  m.rows = r;
  m.cols = c;
  m.data.assign(r * c, 0.0);
  m.grid = g;
  return m;
}

Mat Mat::identity(std::size_t n, Grid g) {
  Mat m = zeros(n, n, g);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

bool Mat::on_grid() const {
  for (double x : data) {
    if (snap(x, grid) != x && !std::isnan(x)) return false;
  }
  return true;
}

Mat to_grid(const Mat& m, Grid g) {
  Mat out = m;
  out.grid = g;
  for (double& x : out.data) x = snap(x, g);
  return out;
}

Vec to_grid(const Vec& v, Grid g) {
  Vec out = v;
  out.grid = g;
  for (double& x : out.data) x = snap(x, g);
  return out;
}

Mat matmul(const Mat& a, const Mat& b, Mode mode, SumMode sum) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dim mismatch");
  const std::size_t M = a.rows, K = a.cols, N = b.cols;
  Mat c = Mat::zeros(M, N, mode_grid(mode));

  if (mode == Mode::LP) {
    if (a.grid != Grid::B16 || b.grid != Grid::B16) {
      throw std::invalid_argument("matmul: lp mode requires B16 operands");
    }
    // Column-major B16 view of b so each output element reads a contiguous
    // ascending-k span.
    std::vector<B16> bcols(K * N);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t j = 0; j < N; ++j) {
        bcols[j * K + k] = encode_b16(b.at(k, j));
      }
    }
    std::vector<B16> arow(K);
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t k = 0; k < K; ++k) arow[k] = encode_b16(a.at(i, k));
      for (std::size_t j = 0; j < N; ++j) {
        const DotResult r =
            dot_lp(arow, std::span<const B16>(bcols.data() + j * K, K), sum);
        c.at(i, j) = decode_b16(r.value);
      }
    }
    return c;
  }

  if (mode == Mode::HP) {
    if (a.grid == Grid::F64 || b.grid == Grid::F64) {
      throw std::invalid_argument("matmul: hp mode requires F32-or-narrower operands");
    }
    std::vector<float> bcols(K * N);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t j = 0; j < N; ++j) {
        bcols[j * K + k] = static_cast<float>(b.at(k, j));
      }
    }
    std::vector<float> arow(K);
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t k = 0; k < K; ++k) arow[k] = static_cast<float>(a.at(i, k));
      for (std::size_t j = 0; j < N; ++j) {
        c.at(i, j) = static_cast<double>(
            dot_hp(arow, std::span<const float>(bcols.data() + j * K, K)));
      }
    }
    return c;
  }

  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < K; ++k) acc += a.at(i, k) * b.at(k, j);
      c.at(i, j) = acc;
    }
  }
  return c;
}

Mat transpose(const Mat& m) {
  Mat t = Mat::zeros(m.cols, m.rows, m.grid);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
  }
  return t;
}

Mat add(const Mat& a, const Mat& b) {
  check_same_shape(a, b, "add");
  Mat c = Mat::zeros(a.rows, a.cols, Grid::F64);
  for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] + b.data[i];
  return c;
}

Mat sub(const Mat& a, const Mat& b) {
  check_same_shape(a, b, "sub");
  Mat c = Mat::zeros(a.rows, a.cols, Grid::F64);
  for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] - b.data[i];
  return c;
}

Mat scale(const Mat& a, double s) {
  Mat c = Mat::zeros(a.rows, a.cols, Grid::F64);
  for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] * s;
  return c;
}

Mat hadamard(const Mat& a, const Mat& b) {
  check_same_shape(a, b, "hadamard");
  Mat c = Mat::zeros(a.rows, a.cols, Grid::F64);
  for (std::size_t i = 0; i < a.data.size(); ++i) c.data[i] = a.data[i] * b.data[i];
  return c;
}

Mat diag_scale(const Vec& d, const Mat& m) {
  if (d.size() != m.rows) throw std::invalid_argument("diag_scale: length mismatch");
  Mat c = Mat::zeros(m.rows, m.cols, Grid::F64);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) c.at(i, j) = d[i] * m.at(i, j);
  }
  return c;
}

Mat rank1_outer(const Vec& u, const Vec& v) {
  Mat c = Mat::zeros(u.size(), v.size(), Grid::F64);
  for (std::size_t i = 0; i < u.size(); ++i) {
    for (std::size_t j = 0; j < v.size(); ++j) c.at(i, j) = u[i] * v[j];
  }
  return c;
}

Vec rowmax(const Mat& s) {
  if (s.empty()) throw std::invalid_argument("rowmax: empty matrix");
  Vec m = Vec::zeros(s.rows, s.grid);
  for (std::size_t i = 0; i < s.rows; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < s.cols; ++j) {
      const double x = s.at(i, j);
      if (std::isnan(x)) throw std::invalid_argument("rowmax: NaN entry");
      if (x > best) best = x;
    }
    m[i] = best;
  }
  return m;
}

Vec rowsum(const Mat& s) {
  if (s.empty()) throw std::invalid_argument("rowsum: empty matrix");
  Vec r = Vec::zeros(s.rows, Grid::F64);
  for (std::size_t i = 0; i < s.rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < s.cols; ++j) acc += s.at(i, j);
    r[i] = acc;
  }
  return r;
}

Vec rowsum_eq(const Mat& s, const Vec& m) {
  if (s.empty()) throw std::invalid_argument("rowsum_eq: empty matrix");
  if (m.size() != s.rows) throw std::invalid_argument("rowsum_eq: length mismatch");
  Vec r = Vec::zeros(s.rows, Grid::F64);
  for (std::size_t i = 0; i < s.rows; ++i) {
    std::size_t count = 0;
    for (std::size_t j = 0; j < s.cols; ++j) {
      if (s.at(i, j) == m[i]) ++count;
    }
    r[i] = static_cast<double>(count);
  }
  return r;
}

double frobenius(const Mat& m) {
  double acc = 0.0;
  for (double x : m.data) acc += x * x;
  return std::sqrt(acc);
}

double dot_flat(const Mat& a, const Mat& b) {
  check_same_shape(a, b, "dot_flat");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

double cosine_flat(const Mat& a, const Mat& b) {
  const double na = frobenius(a), nb = frobenius(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot_flat(a, b) / (na * nb);
}

namespace {

std::vector<double> apply(const Mat& w, const std::vector<double>& x) {
  std::vector<double> y(w.rows, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols; ++j) acc += w.at(i, j) * x[j];
    y[i] = acc;
  }
  return y;
}

std::vector<double> apply_t(const Mat& w, const std::vector<double>& x) {
  std::vector<double> y(w.cols, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    for (std::size_t j = 0; j < w.cols; ++j) y[j] += w.at(i, j) * x[i];
  }
  return y;
}

double norm2(const std::vector<double>& x) {
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return std::sqrt(acc);
}

SpectralResult power_iterate(const Mat& w, std::vector<double> v, double tol,
                             std::size_t max_iter) {
  const double nv = norm2(v);
  for (double& x : v) x /= nv;
  double prev = -1.0;
  SpectralResult res;
  for (std::size_t it = 1; it <= max_iter; ++it) {
    const std::vector<double> u = apply(w, v);
    const double sigma = norm2(u);
    res.value = sigma;
    res.iters = it;
    if (sigma == 0.0) {
      // v landed in the null space; documented perturbation and retry.
      v[0] += 1e-3;
      const double n = norm2(v);
      for (double& x : v) x /= n;
      continue;
    }
    if (std::fabs(sigma - prev) < tol) {
      res.converged = true;
      return res;
    }
    prev = sigma;
    std::vector<double> s = apply_t(w, u);
    const double ns = norm2(s);
    if (ns == 0.0) {
      res.converged = true;  // u in the null space of Wᵀ: sigma is exact
      return res;
    }
    for (double& x : s) x /= ns;
    v = std::move(s);
  }
  return res;
}

}  // namespace

SpectralResult spectral_norm(const Mat& w, double tol, std::size_t max_iter) {
  if (w.empty()) throw std::invalid_argument("spectral_norm: empty matrix");
  if (tol <= 0.0) throw std::invalid_argument("spectral_norm: tol must be > 0");
  if (frobenius(w) == 0.0) return {0.0, true, 0};

  std::vector<double> ones(w.cols, 1.0);
  const SpectralResult a = power_iterate(w, ones, tol, max_iter);

  // The all-ones seed can be orthogonal to the top singular vector; the
  // perturbed seed breaks the symmetry and the larger estimate wins.
  ones[0] += 1e-3;
  const SpectralResult b = power_iterate(w, ones, tol, max_iter);

  SpectralResult out = (b.value > a.value) ? b : a;
  out.converged = a.converged && b.converged;
  out.iters = a.iters + b.iters;
  return out;
}

}  // namespace lpfa
