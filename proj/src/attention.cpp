#include "cqs/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace cqs {

namespace {

Matrix head_slice(const Matrix& m, std::size_t h, std::size_t d_h) {
  Matrix out(m.rows(), d_h);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* src = m.row(i) + h * d_h;
    double* dst = out.row(i);
    for (std::size_t j = 0; j < d_h; ++j) dst[j] = src[j];
  }
  return out;
}

void head_accumulate(Matrix& full, const Matrix& part, std::size_t h, std::size_t d_h) {
  for (std::size_t i = 0; i < part.rows(); ++i) {
    double* dst = full.row(i) + h * d_h;
    const double* src = part.row(i);
    for (std::size_t j = 0; j < d_h; ++j) dst[j] += src[j];
  }
}

std::vector<double> init_bias(std::size_t n, double bound, Rng& rng) {
  std::vector<double> b(n);
  for (double& v : b) v = rng.uniform(-bound, bound);
  return b;
}

Matrix init_weight(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  Matrix w(rows, cols);
  for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
  return w;
}

}  // namespace

void MhaParams::validate() const {
  const std::size_t d = d_model();
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("mha: d_model " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  }
  for (const Matrix* w : {&w_q, &w_k, &w_v, &w_o}) {
    if (w->rows() != d || w->cols() != d) {
      throw std::invalid_argument("mha: projection must be " + std::to_string(d) + "x" +
                                  std::to_string(d) + ", got " + w->shape_str());
    }
    if (!w->all_finite()) throw std::invalid_argument("mha: non-finite weight");
  }
  for (const std::vector<double>* b : {&b_q, &b_k, &b_v, &b_o}) {
    if (b->size() != d) {
      throw std::invalid_argument("mha: bias length " + std::to_string(b->size()) +
                                  ", expected " + std::to_string(d));
    }
  }
}

std::size_t clamp_heads(std::size_t d_model, std::size_t requested) {
  for (std::size_t h = std::min(requested, d_model); h > 1; --h) {
    if (d_model % h == 0) return h;
  }
  return 1;
}

MhaParams make_mha_params(std::size_t d_model, std::size_t heads, Rng& rng) {
  MhaParams p;
  p.heads = heads;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  p.w_q = init_weight(d_model, d_model, bound, rng);
  p.w_k = init_weight(d_model, d_model, bound, rng);
  p.w_v = init_weight(d_model, d_model, bound, rng);
  p.w_o = init_weight(d_model, d_model, bound, rng);
  p.b_q = init_bias(d_model, bound, rng);
  p.b_k = init_bias(d_model, bound, rng);
  p.b_v = init_bias(d_model, bound, rng);
  p.b_o = init_bias(d_model, bound, rng);
  p.validate();
  return p;
}

static MhaOutput mha_forward_impl(const Matrix& q, const Matrix& k, const Matrix& v,
                                  const MhaParams& p, MhaTape* tape) {
  p.validate();
  const std::size_t d = p.d_model();
  if (q.cols() != d || k.cols() != d || v.cols() != d) {
    throw std::invalid_argument("mha_forward: inputs must have " + std::to_string(d) +
                                " columns, got q=" + q.shape_str() + " k=" + k.shape_str() +
                                " v=" + v.shape_str());
  }
  if (k.rows() != v.rows()) {
    throw std::invalid_argument("mha_forward: k has " + std::to_string(k.rows()) +
                                " rows but v has " + std::to_string(v.rows()));
  }
  const std::size_t d_h = p.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_h));

  Matrix q_proj = linear(q, p.w_q, p.b_q);
  Matrix k_proj = linear(k, p.w_k, p.b_k);
  Matrix v_proj = linear(v, p.w_v, p.b_v);

  Matrix concat(q.rows(), d);
  std::vector<Matrix> attn;
  attn.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    Matrix qh = head_slice(q_proj, h, d_h);
    Matrix kh = head_slice(k_proj, h, d_h);
    Matrix vh = head_slice(v_proj, h, d_h);
    Matrix scores = matmul_abt(qh, kh);
    scale_in_place(scores, scale);
    Matrix a = softmax_rows(scores);
    Matrix oh = matmul(a, vh);
    head_accumulate(concat, oh, h, d_h);
    attn.push_back(std::move(a));
  }

  MhaOutput out;
  out.out = linear(concat, p.w_o, p.b_o);
  out.attn = attn;

  if (tape) {
    tape->params = p;
    tape->q_in = q;
    tape->k_in = k;
    tape->v_in = v;
    tape->q_proj = std::move(q_proj);
    tape->k_proj = std::move(k_proj);
    tape->v_proj = std::move(v_proj);
    tape->attn = std::move(attn);
    tape->concat = std::move(concat);
    tape->valid = true;
  }
  return out;
}

MhaOutput mha_forward(const Matrix& q, const Matrix& k, const Matrix& v, const MhaParams& p) {
  return mha_forward_impl(q, k, v, p, nullptr);
}

MhaOutput mha_forward(const Matrix& q, const Matrix& k, const Matrix& v, const MhaParams& p,
                      MhaTape& tape) {
  return mha_forward_impl(q, k, v, p, &tape);
}

MhaGrads mha_backward(MhaTape& tape, const Matrix& d_out) {
  if (!tape.valid) {
    throw std::logic_error("mha_backward: tape is empty or already consumed");
  }
  const MhaParams& p = tape.params;
  const std::size_t d = p.d_model();
  const std::size_t d_h = p.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_h));
  if (d_out.rows() != tape.q_in.rows() || d_out.cols() != d) {
    throw std::logic_error("mha_backward: d_out is " + d_out.shape_str() + ", expected " +
                           std::to_string(tape.q_in.rows()) + "x" + std::to_string(d));
  }

  MhaGrads g;
  // output projection
  g.w_o = matmul_atb(tape.concat, d_out);
  g.b_o = column_sums(d_out);
  Matrix d_concat = matmul_abt(d_out, p.w_o);

  Matrix d_q_proj(tape.q_proj.rows(), d);
  Matrix d_k_proj(tape.k_proj.rows(), d);
  Matrix d_v_proj(tape.v_proj.rows(), d);

  for (std::size_t h = 0; h < p.heads; ++h) {
    Matrix kh = head_slice(tape.k_proj, h, d_h);
    Matrix vh = head_slice(tape.v_proj, h, d_h);
    Matrix qh = head_slice(tape.q_proj, h, d_h);
    Matrix d_oh = head_slice(d_concat, h, d_h);
    const Matrix& a = tape.attn[h];

    Matrix d_a = matmul_abt(d_oh, vh);
    Matrix d_vh = matmul_atb(a, d_oh);
    Matrix d_scores = softmax_rows_backward(a, d_a);
    scale_in_place(d_scores, scale);
    Matrix d_qh = matmul(d_scores, kh);
    Matrix d_kh = matmul_atb(d_scores, qh);

    head_accumulate(d_q_proj, d_qh, h, d_h);
    head_accumulate(d_k_proj, d_kh, h, d_h);
    head_accumulate(d_v_proj, d_vh, h, d_h);
  }

  g.w_q = matmul_atb(tape.q_in, d_q_proj);
  g.b_q = column_sums(d_q_proj);
  g.d_query = matmul_abt(d_q_proj, p.w_q);

  g.w_k = matmul_atb(tape.k_in, d_k_proj);
  g.b_k = column_sums(d_k_proj);
  g.d_key = matmul_abt(d_k_proj, p.w_k);

  g.w_v = matmul_atb(tape.v_in, d_v_proj);
  g.b_v = column_sums(d_v_proj);
  g.d_value = matmul_abt(d_v_proj, p.w_v);

  tape.valid = false;
  return g;
}

}  // namespace cqs
