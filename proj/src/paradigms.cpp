#include "cqs/paradigms.hpp"

#include <cmath>
#include <stdexcept>

namespace cqs {

const char* to_string(ParadigmKind kind) {
  switch (kind) {
    case ParadigmKind::Softmax: return "softmax";
    case ParadigmKind::OT: return "ot";
    case ParadigmKind::CS: return "cs";
  }
  return "?";
}

ParadigmKind paradigm_from_string(std::string_view name) {
  if (name == "softmax") return ParadigmKind::Softmax;
  if (name == "ot") return ParadigmKind::OT;
  if (name == "cs") return ParadigmKind::CS;
  throw std::invalid_argument("unknown paradigm '" + std::string(name) +
                              "', expected cs, softmax or ot");
}

void SinkhornConfig::validate() const {
  if (max_iters < 1) throw std::invalid_argument("sinkhorn: max_iters must be >= 1");
  if (tol <= 0) throw std::invalid_argument("sinkhorn: tol must be positive");
  if (temperature <= 0) throw std::invalid_argument("sinkhorn: temperature must be positive");
}

static SinkhornResult sinkhorn_impl(const Matrix& m, const SinkhornConfig& cfg,
                                    SinkhornTape* tape) {
  cfg.validate();
  if (!m.all_finite()) throw std::invalid_argument("sinkhorn: input has non-finite entries");
  const std::size_t rows = m.rows();
  const std::size_t cols = m.cols();
  if (rows == 0 || cols == 0) throw std::invalid_argument("sinkhorn: empty matrix");

  // exp(m / T) overflows around 709; scaling the kernel cannot fix that, so
  // the caller has to raise the temperature.
  Matrix k(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double e = m.data()[i] / cfg.temperature;
    if (e > 700.0) {
      throw std::runtime_error(
          "sinkhorn: exp overflow on entry " + std::to_string(m.data()[i]) +
          "; increase the temperature");
    }
    k.data()[i] = std::exp(e);
  }

  const double row_target = 1.0 / static_cast<double>(rows);
  const double col_target = 1.0 / static_cast<double>(cols);

  // scores = diag(u) * k * diag(v)
  std::vector<double> u(rows, 1.0), v(cols, 1.0);
  bool converged = false;
  std::size_t iters = 0;
  if (tape) {
    tape->k = k;
    tape->temperature = cfg.temperature;
  }

  while (iters < cfg.max_iters) {
    ++iters;
    // row step: a_i = sum_j k_ij v_j, u_i = row_target / a_i
    std::vector<double> a(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      const double* krow = k.row(i);
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += krow[j] * v[j];
      a[i] = acc;
      u[i] = row_target / acc;
    }
    // column step: b_j = sum_i k_ij u_i, v_j = col_target / b_j
    std::vector<double> b(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      const double* krow = k.row(i);
      for (std::size_t j = 0; j < cols; ++j) b[j] += krow[j] * u[i];
    }
    for (std::size_t j = 0; j < cols; ++j) v[j] = col_target / b[j];

    if (tape) {
      tape->row_denoms.push_back(a);
      tape->row_scales.push_back(u);
      tape->col_denoms.push_back(b);
      tape->col_scales.push_back(v);
    }

    // column sums are exact after the column step; check the rows
    double residual = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
      const double* krow = k.row(i);
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += krow[j] * v[j];
      residual = std::max(residual, std::abs(u[i] * acc - row_target));
    }
    if (residual <= cfg.tol) {
      converged = true;
      break;
    }
  }

  SinkhornResult res;
  res.converged = converged;
  res.iters = iters;
  res.scores = Matrix(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) res.scores(i, j) = u[i] * k(i, j) * v[j];
  return res;
}

SinkhornResult sinkhorn_normalize(const Matrix& m, const SinkhornConfig& cfg) {
  return sinkhorn_impl(m, cfg, nullptr);
}

SinkhornResult sinkhorn_normalize(const Matrix& m, const SinkhornConfig& cfg,
                                  SinkhornTape* tape) {
  return sinkhorn_impl(m, cfg, tape);
}

Matrix sinkhorn_backward(const SinkhornTape& tape, const Matrix& d_scores) {
  const Matrix& k = tape.k;
  const std::size_t rows = k.rows();
  const std::size_t cols = k.cols();
  const std::size_t iters = tape.row_scales.size();
  if (iters == 0) throw std::logic_error("sinkhorn_backward: empty tape");
  if (d_scores.rows() != rows || d_scores.cols() != cols) {
    throw std::invalid_argument("sinkhorn_backward: gradient is " + d_scores.shape_str() +
                                ", expected " + k.shape_str());
  }

  Matrix d_k(rows, cols);
  std::vector<double> d_u(rows, 0.0), d_v(cols, 0.0);

  // scores = diag(u_T) k diag(v_T)
  const auto& u_last = tape.row_scales[iters - 1];
  const auto& v_last = tape.col_scales[iters - 1];
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double g = d_scores(i, j);
      d_u[i] += g * k(i, j) * v_last[j];
      d_v[j] += g * k(i, j) * u_last[i];
      d_k(i, j) += g * u_last[i] * v_last[j];
    }
  }

  for (std::size_t t = iters; t-- > 0;) {
    const auto& a = tape.row_denoms[t];
    const auto& u = tape.row_scales[t];
    const auto& b = tape.col_denoms[t];
    const auto& v = tape.col_scales[t];

    // v_j = col_target / b_j
    std::vector<double> d_b(cols);
    for (std::size_t j = 0; j < cols; ++j) d_b[j] = -d_v[j] * v[j] / b[j];
    // b_j = sum_i k_ij u_i
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) {
        acc += k(i, j) * d_b[j];
        d_k(i, j) += d_b[j] * u[i];
      }
      d_u[i] += acc;
    }
    // u_i = row_target / a_i
    std::vector<double> d_a(rows);
    for (std::size_t i = 0; i < rows; ++i) d_a[i] = -d_u[i] * u[i] / a[i];
    // a_i = sum_j k_ij v_prev_j
    const std::vector<double>* v_prev = t > 0 ? &tape.col_scales[t - 1] : nullptr;
    std::fill(d_v.begin(), d_v.end(), 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      const double vprev_default = 1.0;
      for (std::size_t j = 0; j < cols; ++j) {
        const double vp = v_prev ? (*v_prev)[j] : vprev_default;
        d_k(i, j) += d_a[i] * vp;
        d_v[j] += d_a[i] * k(i, j);
      }
    }
    std::fill(d_u.begin(), d_u.end(), 0.0);
    // d_v now feeds the previous iteration's column step; for t == 0 the
    // initial v is a constant and the gradient stops here.
  }

  // k = exp(m / T)
  Matrix d_m(rows, cols);
  for (std::size_t i = 0; i < d_m.size(); ++i)
    d_m.data()[i] = d_k.data()[i] * k.data()[i] / tape.temperature;
  return d_m;
}

Matrix softmax_columns(const Matrix& m) { return transposed(softmax_rows(transposed(m))); }

Matrix softmax_columns_backward(const Matrix& y, const Matrix& d_y) {
  return transposed(softmax_rows_backward(transposed(y), transposed(d_y)));
}

Matrix paradigm_scores(ParadigmKind kind, const Matrix& p_hat, const SinkhornConfig& cfg) {
  switch (kind) {
    case ParadigmKind::CS: return p_hat;
    case ParadigmKind::Softmax: return softmax_columns(p_hat);
    case ParadigmKind::OT: return sinkhorn_normalize(p_hat, cfg).scores;
  }
  throw std::logic_error("paradigm_scores: unreachable");
}

Descriptor paradigm_aggregate(ParadigmKind kind, const Matrix& f_hat, const Matrix& p_hat,
                              const SinkhornConfig& cfg) {
  Matrix scores = paradigm_scores(kind, p_hat, cfg);
  return normalize_descriptor(cross_query_similarity(f_hat, scores));
}

}  // namespace cqs
