#pragma once

#include <string_view>

#include "cqs/aggregator.hpp"
#include "cqs/matrix.hpp"

namespace cqs {

// Aggregation paradigms ablated against each other. All share the reference
// codebook; they differ only in how the predicted features are scored.
enum class ParadigmKind { Softmax, OT, CS };

const char* to_string(ParadigmKind kind);
ParadigmKind paradigm_from_string(std::string_view name);  // "softmax" | "ot" | "cs"

struct SinkhornConfig {
  std::size_t max_iters = 100;
  double tol = 1e-6;        // marginal residual threshold
  double temperature = 1.0;

  void validate() const;
};

struct SinkhornResult {
  Matrix scores;  // entries in (0,1); row sums -> 1/rows, column sums -> 1/cols
  bool converged = false;
  std::size_t iters = 0;
};

// Alternating row/column scaling of exp(m / temperature) toward uniform
// marginals (1/rows per row, 1/cols per column).
SinkhornResult sinkhorn_normalize(const Matrix& m, const SinkhornConfig& cfg);

// Iteration record for the unrolled backward pass.
struct SinkhornTape {
  Matrix k;  // exp(m / temperature)
  double temperature = 1.0;
  std::vector<std::vector<double>> row_denoms, row_scales;  // a_t, u_t
  std::vector<std::vector<double>> col_denoms, col_scales;  // b_t, v_t
};
SinkhornResult sinkhorn_normalize(const Matrix& m, const SinkhornConfig& cfg,
                                  SinkhornTape* tape);
Matrix sinkhorn_backward(const SinkhornTape& tape, const Matrix& d_scores);

// Softmax over the query dimension: softmax down each column.
Matrix softmax_columns(const Matrix& m);
Matrix softmax_columns_backward(const Matrix& y, const Matrix& d_y);

// Score normalization applied to p_hat before the codebook product.
// CS is the identity (no compression).
Matrix paradigm_scores(ParadigmKind kind, const Matrix& p_hat, const SinkhornConfig& cfg);

// f_hat^T * paradigm_scores(p_hat), then descriptor normalization.
Descriptor paradigm_aggregate(ParadigmKind kind, const Matrix& f_hat, const Matrix& p_hat,
                              const SinkhornConfig& cfg);

}  // namespace cqs
