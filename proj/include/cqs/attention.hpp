#pragma once

#include <cstddef>
#include <vector>

#include "cqs/matrix.hpp"
#include "cqs/rng.hpp"

namespace cqs {

// Weights for one multi-head attention block. All four projections are
// d_model x d_model; biases have length d_model.
struct MhaParams {
  Matrix w_q, w_k, w_v, w_o;
  std::vector<double> b_q, b_k, b_v, b_o;
  std::size_t heads = 4;

  std::size_t d_model() const { return w_q.rows(); }
  std::size_t head_dim() const { return d_model() / heads; }
  void validate() const;
};

// Gradients mirroring MhaParams, plus gradients w.r.t. the three inputs.
struct MhaGrads {
  Matrix w_q, w_k, w_v, w_o;
  std::vector<double> b_q, b_k, b_v, b_o;
  Matrix d_query, d_key, d_value;
};

struct MhaOutput {
  Matrix out;                // q.rows x d_model
  std::vector<Matrix> attn;  // one per head, q.rows x k.rows, rows sum to 1
};

// Single-use record of a forward pass, consumed by mha_backward.
struct MhaTape {
  MhaParams params;
  Matrix q_in, k_in, v_in;
  Matrix q_proj, k_proj, v_proj;
  std::vector<Matrix> attn;
  Matrix concat;  // heads concatenated, before the output projection
  bool valid = false;
};

// Largest head count <= requested that divides d_model.
std::size_t clamp_heads(std::size_t d_model, std::size_t requested);

// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in = d_model.
MhaParams make_mha_params(std::size_t d_model, std::size_t heads, Rng& rng);

MhaOutput mha_forward(const Matrix& q, const Matrix& k, const Matrix& v, const MhaParams& p);
MhaOutput mha_forward(const Matrix& q, const Matrix& k, const Matrix& v, const MhaParams& p,
                      MhaTape& tape);
MhaGrads mha_backward(MhaTape& tape, const Matrix& d_out);

}  // namespace cqs
