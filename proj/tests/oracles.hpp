// Independent reference implementations used as test oracles. Everything here
// is written as plainly as possible (explicit loops, no shared helpers from
// the library's compute paths) so a bug in the implementation cannot hide in
// its own oracle.
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cqs/attention.hpp"
#include "cqs/matrix.hpp"
#include "cqs/rng.hpp"

namespace oracle {

using cqs::Matrix;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, cqs::Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

inline Matrix naive_linear(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix out(x.rows(), w.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < x.cols(); ++k) acc += x(i, k) * w(k, j);
      out(i, j) = acc + b[j];
    }
  }
  return out;
}

// no max-shift; only valid for small magnitudes
inline Matrix naive_softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) sum += std::exp(x(i, j));
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = std::exp(x(i, j)) / sum;
  }
  return out;
}

struct NaiveMhaResult {
  Matrix out;
  std::vector<Matrix> attn;
};

// step-by-step multi-head attention with explicit loops, no fused ops
inline NaiveMhaResult naive_mha(const Matrix& q, const Matrix& k, const Matrix& v,
                                const cqs::MhaParams& p) {
  const std::size_t d = p.w_q.rows();
  const std::size_t h_count = p.heads;
  const std::size_t d_h = d / h_count;

  Matrix qp = naive_linear(q, p.w_q, p.b_q);
  Matrix kp = naive_linear(k, p.w_k, p.b_k);
  Matrix vp = naive_linear(v, p.w_v, p.b_v);

  Matrix concat(q.rows(), d);
  NaiveMhaResult res;
  for (std::size_t h = 0; h < h_count; ++h) {
    Matrix scores(q.rows(), k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
      for (std::size_t j = 0; j < k.rows(); ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < d_h; ++t) acc += qp(i, h * d_h + t) * kp(j, h * d_h + t);
        scores(i, j) = acc / std::sqrt(static_cast<double>(d_h));
      }
    }
    Matrix a(q.rows(), k.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
      double mx = scores(i, 0);
      for (std::size_t j = 1; j < k.rows(); ++j) mx = std::max(mx, scores(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < k.rows(); ++j) sum += std::exp(scores(i, j) - mx);
      for (std::size_t j = 0; j < k.rows(); ++j) a(i, j) = std::exp(scores(i, j) - mx) / sum;
    }
    for (std::size_t i = 0; i < q.rows(); ++i) {
      for (std::size_t t = 0; t < d_h; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k.rows(); ++j) acc += a(i, j) * vp(j, h * d_h + t);
        concat(i, h * d_h + t) = acc;
      }
    }
    res.attn.push_back(a);
  }
  res.out = naive_linear(concat, p.w_o, p.b_o);
  return res;
}

inline Matrix naive_cross_query_similarity(const Matrix& f_hat, const Matrix& p_hat) {
  Matrix s(f_hat.cols(), p_hat.cols());
  for (std::size_t a = 0; a < f_hat.cols(); ++a) {
    for (std::size_t b = 0; b < p_hat.cols(); ++b) {
      double acc = 0.0;
      for (std::size_t q = 0; q < f_hat.rows(); ++q) acc += f_hat(q, a) * p_hat(q, b);
      s(a, b) = acc;
    }
  }
  return s;
}

// explicit two-stage normalization: per-column norms then global norm
inline std::vector<double> naive_normalize_descriptor(const Matrix& s) {
  const std::size_t c_r = s.rows(), c_f = s.cols();
  std::vector<double> flat(c_r * c_f);
  for (std::size_t c = 0; c < c_f; ++c) {
    double sq = 0.0;
    for (std::size_t r = 0; r < c_r; ++r) sq += s(r, c) * s(r, c);
    const double norm = std::sqrt(sq);
    for (std::size_t r = 0; r < c_r; ++r) {
      flat[c * c_r + r] = norm < 1e-12 ? s(r, c) : s(r, c) / norm;
    }
  }
  double sq = 0.0;
  for (double v : flat) sq += v * v;
  const double g = std::sqrt(sq);
  for (double& v : flat) v /= g;
  return flat;
}

// direct alternating row/column scaling on the matrix itself
struct NaiveSinkhornResult {
  Matrix scores;
  bool converged = false;
};
inline NaiveSinkhornResult naive_sinkhorn(const Matrix& m, double temperature, double tol,
                                          std::size_t max_iters) {
  const std::size_t rows = m.rows(), cols = m.cols();
  Matrix a(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) a.data()[i] = std::exp(m.data()[i] / temperature);
  const double rt = 1.0 / static_cast<double>(rows);
  const double ct = 1.0 / static_cast<double>(cols);
  NaiveSinkhornResult res;
  for (std::size_t it = 0; it < max_iters; ++it) {
    for (std::size_t i = 0; i < rows; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < cols; ++j) sum += a(i, j);
      for (std::size_t j = 0; j < cols; ++j) a(i, j) *= rt / sum;
    }
    for (std::size_t j = 0; j < cols; ++j) {
      double sum = 0.0;
      for (std::size_t i = 0; i < rows; ++i) sum += a(i, j);
      for (std::size_t i = 0; i < rows; ++i) a(i, j) *= ct / sum;
    }
    double resid = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < cols; ++j) sum += a(i, j);
      resid = std::max(resid, std::abs(sum - rt));
    }
    if (resid <= tol) {
      res.converged = true;
      break;
    }
  }
  res.scores = a;
  return res;
}

// cyclic Jacobi eigenvalues of a symmetric matrix
inline std::vector<double> jacobi_eigenvalues(Matrix a, std::size_t sweeps = 64) {
  const std::size_t n = a.rows();
  for (std::size_t sweep = 0; sweep < sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-26) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  return eig;
}

// coding rate through the eigenvalues of P^T P
inline double eigen_coding_rate(const Matrix& p_hat, double epsilon) {
  const std::size_t n_q = p_hat.rows(), c_f = p_hat.cols();
  Matrix gram(c_f, c_f);
  for (std::size_t a = 0; a < c_f; ++a) {
    for (std::size_t b = 0; b < c_f; ++b) {
      double acc = 0.0;
      for (std::size_t q = 0; q < n_q; ++q) acc += p_hat(q, a) * p_hat(q, b);
      gram(a, b) = acc;
    }
  }
  const double coeff = static_cast<double>(c_f) / (static_cast<double>(n_q) * epsilon * epsilon);
  double r = 0.0;
  for (double lambda : jacobi_eigenvalues(gram)) r += 0.5 * std::log1p(coeff * lambda);
  return r;
}

// spherical law of cosines, alternate route to the great-circle distance
inline double law_of_cosines_m(double lat1, double lon1, double lat2, double lon2) {
  constexpr double kR = 6371000.0;
  constexpr double kD = 3.14159265358979323846 / 180.0;
  const double c = std::sin(lat1 * kD) * std::sin(lat2 * kD) +
                   std::cos(lat1 * kD) * std::cos(lat2 * kD) * std::cos((lon2 - lon1) * kD);
  return kR * std::acos(std::min(1.0, std::max(-1.0, c)));
}

// central finite difference of a scalar function w.r.t. one value
inline double central_diff(double& x, const std::function<double()>& eval, double h = 1e-5) {
  const double orig = x;
  x = orig + h;
  const double fp = eval();
  x = orig - h;
  const double fm = eval();
  x = orig;
  return (fp - fm) / (2.0 * h);
}

inline double rel_err(double analytic, double reference) {
  return std::abs(analytic - reference) / std::max(1e-6, std::abs(reference));
}

}  // namespace oracle
