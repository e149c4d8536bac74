#include "cqs/aggregator.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace cqs {

void QaaConfig::validate() const {
  if (n_q == 0 || c_o == 0 || c_f == 0 || c_r == 0 || heads == 0) {
    throw std::invalid_argument("qaa config: all dimensions must be positive");
  }
}

void QaaParams::validate() const {
  config.validate();
  if (q_f.rows() != config.n_q || q_f.cols() != config.c_o) {
    throw std::invalid_argument("qaa params: q_f is " + q_f.shape_str() + ", expected " +
                                std::to_string(config.n_q) + "x" + std::to_string(config.c_o));
  }
  if (q_r.rows() != config.n_q || q_r.cols() != config.c_r) {
    throw std::invalid_argument("qaa params: q_r is " + q_r.shape_str() + ", expected " +
                                std::to_string(config.n_q) + "x" + std::to_string(config.c_r));
  }
  if (proj_w.rows() != config.c_o || proj_w.cols() != config.c_f ||
      proj_b.size() != config.c_f) {
    throw std::invalid_argument("qaa params: projection is " + proj_w.shape_str() +
                                ", expected " + std::to_string(config.c_o) + "x" +
                                std::to_string(config.c_f));
  }
  feat_self_attn.validate();
  feat_pred_attn.validate();
  ref_self_attn.validate();
  if (!q_f.all_finite() || !q_r.all_finite() || !proj_w.all_finite()) {
    throw std::invalid_argument("qaa params: non-finite values");
  }
}

void ImageSpec::validate() const {
  if (patch_stride == 0 || height % patch_stride != 0 || width % patch_stride != 0) {
    throw std::invalid_argument("image spec: " + std::to_string(height) + "x" +
                                std::to_string(width) + " not divisible by stride " +
                                std::to_string(patch_stride));
  }
}

QaaParams make_qaa_params(const QaaConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  QaaParams p;
  p.config = config;

  const double qf_bound = 1.0 / std::sqrt(static_cast<double>(config.c_o));
  p.q_f = Matrix(config.n_q, config.c_o);
  for (std::size_t i = 0; i < p.q_f.size(); ++i) p.q_f.data()[i] = rng.uniform(-qf_bound, qf_bound);

  const double qr_bound = 1.0 / std::sqrt(static_cast<double>(config.c_r));
  p.q_r = Matrix(config.n_q, config.c_r);
  for (std::size_t i = 0; i < p.q_r.size(); ++i) p.q_r.data()[i] = rng.uniform(-qr_bound, qr_bound);

  p.feat_self_attn = make_mha_params(config.c_o, clamp_heads(config.c_o, config.heads), rng);
  p.feat_pred_attn = make_mha_params(config.c_o, clamp_heads(config.c_o, config.heads), rng);
  p.ref_self_attn = make_mha_params(config.c_r, clamp_heads(config.c_r, config.heads), rng);

  p.proj_w = Matrix(config.c_o, config.c_f);
  for (std::size_t i = 0; i < p.proj_w.size(); ++i)
    p.proj_w.data()[i] = rng.uniform(-qf_bound, qf_bound);
  p.proj_b.resize(config.c_f);
  for (double& v : p.proj_b) v = rng.uniform(-qf_bound, qf_bound);

  p.validate();
  return p;
}

Matrix refine_feature_queries(const QaaParams& params) {
  MhaOutput attn = mha_forward(params.q_f, params.q_f, params.q_f, params.feat_self_attn);
  return add(params.q_f, attn.out);
}

Matrix build_reference_codebook(const QaaParams& params) {
  MhaOutput attn = mha_forward(params.q_r, params.q_r, params.q_r, params.ref_self_attn);
  return add(params.q_r, attn.out);
}

Matrix predict_query_features(const Matrix& q_f_hat, const FeatureMap& x,
                              const QaaParams& params) {
  if (x.patches.cols() != params.config.c_o) {
    throw std::invalid_argument("predict_query_features: features have " +
                                std::to_string(x.patches.cols()) + " channels, expected " +
                                std::to_string(params.config.c_o));
  }
  MhaOutput attn = mha_forward(q_f_hat, x.patches, x.patches, params.feat_pred_attn);
  return linear(attn.out, params.proj_w, params.proj_b);
}

PredictResult predict_query_features_attn(const Matrix& q_f_hat, const FeatureMap& x,
                                          const QaaParams& params) {
  if (x.patches.cols() != params.config.c_o) {
    throw std::invalid_argument("predict_query_features: features have " +
                                std::to_string(x.patches.cols()) + " channels, expected " +
                                std::to_string(params.config.c_o));
  }
  MhaOutput attn = mha_forward(q_f_hat, x.patches, x.patches, params.feat_pred_attn);
  PredictResult res;
  res.p_hat = linear(attn.out, params.proj_w, params.proj_b);
  res.attn = std::move(attn.attn);
  return res;
}

Matrix cross_query_similarity(const Matrix& f_hat, const Matrix& p_hat) {
  if (f_hat.rows() != p_hat.rows()) {
    throw std::invalid_argument("cross_query_similarity: query counts differ, " +
                                f_hat.shape_str() + " vs " + p_hat.shape_str());
  }
  return matmul_atb(f_hat, p_hat);
}

Descriptor normalize_descriptor(const Matrix& s) { return normalize_descriptor(s, nullptr); }

Descriptor normalize_descriptor(const Matrix& s, NormalizeTape* tape) {
  constexpr double kZeroNorm = 1e-12;
  const std::size_t c_r = s.rows();
  const std::size_t c_f = s.cols();

  Matrix intra = s;
  std::vector<double> col_norms(c_f, 0.0);
  std::vector<bool> skipped(c_f, false);
  for (std::size_t c = 0; c < c_f; ++c) {
    double sq = 0.0;
    for (std::size_t r = 0; r < c_r; ++r) sq += s(r, c) * s(r, c);
    const double norm = std::sqrt(sq);
    col_norms[c] = norm;
    if (norm < kZeroNorm) {
      skipped[c] = true;  // leave the (near) zero column untouched
      continue;
    }
    for (std::size_t r = 0; r < c_r; ++r) intra(r, c) /= norm;
  }

  // Flatten with columns contiguous: value index = c * c_r + r.
  std::vector<double> flat(c_r * c_f);
  for (std::size_t c = 0; c < c_f; ++c)
    for (std::size_t r = 0; r < c_r; ++r) flat[c * c_r + r] = intra(r, c);

  double sq = 0.0;
  for (double v : flat) sq += v * v;
  const double global_norm = std::sqrt(sq);
  if (global_norm < kZeroNorm) {
    throw std::invalid_argument("normalize_descriptor: degenerate descriptor (all-zero input)");
  }

  Descriptor d;
  d.values.resize(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i) d.values[i] = flat[i] / global_norm;

  if (tape) {
    tape->intra = std::move(intra);
    tape->col_norms = std::move(col_norms);
    tape->skipped = std::move(skipped);
    tape->flat = std::move(flat);
    tape->global_norm = global_norm;
  }
  return d;
}

Matrix normalize_descriptor_backward(const NormalizeTape& tape,
                                     const std::vector<double>& d_values) {
  const std::size_t c_f = tape.intra.cols();
  const std::size_t c_r = tape.intra.rows();
  if (d_values.size() != c_f * c_r) {
    throw std::invalid_argument("normalize_descriptor_backward: gradient length " +
                                std::to_string(d_values.size()) + ", expected " +
                                std::to_string(c_f * c_r));
  }

  // global L2 stage: out = flat / |flat|
  const double n = tape.global_norm;
  double dot = 0.0;
  for (std::size_t i = 0; i < d_values.size(); ++i) dot += d_values[i] * tape.flat[i] / n;
  std::vector<double> d_flat(d_values.size());
  for (std::size_t i = 0; i < d_values.size(); ++i)
    d_flat[i] = (d_values[i] - dot * tape.flat[i] / n) / n;

  // intra stage, column by column
  Matrix d_s(c_r, c_f);
  for (std::size_t c = 0; c < c_f; ++c) {
    if (tape.skipped[c]) {
      for (std::size_t r = 0; r < c_r; ++r) d_s(r, c) = d_flat[c * c_r + r];
      continue;
    }
    const double cn = tape.col_norms[c];
    double cdot = 0.0;
    for (std::size_t r = 0; r < c_r; ++r) cdot += d_flat[c * c_r + r] * tape.intra(r, c);
    for (std::size_t r = 0; r < c_r; ++r)
      d_s(r, c) = (d_flat[c * c_r + r] - cdot * tape.intra(r, c)) / cn;
  }
  return d_s;
}

InferenceCache cache_queries(const QaaParams& params) {
  InferenceCache cache;
  cache.q_f_hat = refine_feature_queries(params);
  cache.f_hat = build_reference_codebook(params);
  return cache;
}

Descriptor aggregate(const FeatureMap& x, const QaaParams& params, const InferenceCache& cache) {
  Matrix p_hat = predict_query_features(cache.q_f_hat, x, params);
  Descriptor d = normalize_descriptor(cross_query_similarity(cache.f_hat, p_hat));
  d.image_id = x.image_id;
  return d;
}

namespace {

// linear layer m x k by k x n: multiply-adds plus the bias add
std::uint64_t linear_flops(std::uint64_t m, std::uint64_t k, std::uint64_t n) {
  return 2 * m * k * n + m * n;
}

std::uint64_t mha_flops(std::uint64_t n_q, std::uint64_t n_k, std::uint64_t d,
                        std::uint64_t heads) {
  std::uint64_t f = 0;
  f += linear_flops(n_q, d, d);      // query projection
  f += 2 * linear_flops(n_k, d, d);  // key and value projections
  f += 2 * n_q * n_k * d;            // attention scores over all heads
  f += heads * n_q * n_k;            // score scaling
  f += 4 * heads * n_q * n_k;        // softmax
  f += 2 * n_q * n_k * d;            // attention-weighted values
  f += linear_flops(n_q, d, d);      // output projection
  return f;
}

std::uint64_t mha_param_count(std::uint64_t d) { return 4 * (d * d + d); }

}  // namespace

FlopProfile count_flops(const QaaConfig& config, const ImageSpec& img) {
  config.validate();
  img.validate();
  const std::uint64_t n_q = config.n_q;
  const std::uint64_t p = img.patch_count();
  const std::uint64_t c_o = config.c_o;
  const std::uint64_t c_f = config.c_f;
  const std::uint64_t c_r = config.c_r;
  const std::uint64_t h_o = clamp_heads(config.c_o, config.heads);
  const std::uint64_t h_r = clamp_heads(config.c_r, config.heads);

  FlopProfile prof;
  prof.convention = "2 flops per multiply-add; softmax 4 flops per element";

  auto stage = [&prof](std::string name, std::uint64_t flops, std::uint64_t params) {
    prof.stages.push_back({std::move(name), flops, params});
  };

  // cacheable stages
  stage("feature_query_refinement", mha_flops(n_q, n_q, c_o, h_o) + n_q * c_o,
        mha_param_count(c_o) + n_q * c_o);
  stage("reference_codebook", mha_flops(n_q, n_q, c_r, h_r) + n_q * c_r,
        mha_param_count(c_r) + n_q * c_r);

  // per-image stages
  stage("feature_prediction",
        mha_flops(n_q, p, c_o, h_o) + linear_flops(n_q, c_o, c_f),
        mha_param_count(c_o) + c_o * c_f + c_f);
  stage("cross_query_similarity", 2 * c_r * c_f * n_q, 0);
  // intra column norms (square+add, sqrt, divide) then the global pass
  stage("normalization", 3 * c_r * c_f + c_f + 3 * c_r * c_f + 1, 0);

  prof.cached_flops = prof.stages[0].flops + prof.stages[1].flops;
  prof.inference_flops = prof.stages[2].flops + prof.stages[3].flops + prof.stages[4].flops;
  prof.total_flops = prof.cached_flops + prof.inference_flops;
  for (const auto& st : prof.stages) prof.param_count += st.params;
  return prof;
}

std::vector<AttentionGrid> export_attention_maps(const FeatureMap& x, const QaaParams& params,
                                                 const std::vector<std::size_t>& query_ids,
                                                 const ImageSpec& img) {
  img.validate();
  if (img.patch_count() != x.patches.rows()) {
    throw std::invalid_argument("export_attention_maps: feature map has " +
                                std::to_string(x.patches.rows()) + " patches but image spec "
                                "implies " + std::to_string(img.patch_count()));
  }
  for (std::size_t q : query_ids) {
    if (q >= params.config.n_q) {
      throw std::out_of_range("export_attention_maps: query id " + std::to_string(q) +
                              " out of range [0, " + std::to_string(params.config.n_q) + ")");
    }
  }

  Matrix q_f_hat = refine_feature_queries(params);
  PredictResult pred = predict_query_features_attn(q_f_hat, x, params);

  const std::size_t rows = img.grid_rows();
  const std::size_t cols = img.grid_cols();
  std::vector<AttentionGrid> grids;
  grids.reserve(query_ids.size());
  for (std::size_t q : query_ids) {
    AttentionGrid g;
    g.query_id = q;
    g.grid = Matrix(rows, cols);
    for (std::size_t p = 0; p < img.patch_count(); ++p) {
      double v = 0.0;
      for (const Matrix& head : pred.attn) v += head(q, p);
      g.grid(p / cols, p % cols) = v / static_cast<double>(pred.attn.size());
    }
    grids.push_back(std::move(g));
  }
  return grids;
}

std::vector<std::string> write_attention_maps(const std::vector<AttentionGrid>& grids,
                                              const std::string& image_id,
                                              const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  for (const AttentionGrid& g : grids) {
    const std::string base =
        (fs::path(out_dir) / (image_id + "_q" + std::to_string(g.query_id))).string();

    std::ofstream csv(base + ".csv");
    if (!csv) throw std::runtime_error("cannot write " + base + ".csv");
    for (std::size_t r = 0; r < g.grid.rows(); ++r) {
      for (std::size_t c = 0; c < g.grid.cols(); ++c) {
        if (c) csv << ',';
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9g", g.grid(r, c));
        csv << buf;
      }
      csv << '\n';
    }
    csv.close();
    written.push_back(base + ".csv");

    // 8-bit PGM, min-max scaled
    double lo = g.grid(0, 0), hi = g.grid(0, 0);
    for (std::size_t i = 0; i < g.grid.size(); ++i) {
      lo = std::min(lo, g.grid.data()[i]);
      hi = std::max(hi, g.grid.data()[i]);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    std::ofstream pgm(base + ".pgm", std::ios::binary);
    if (!pgm) throw std::runtime_error("cannot write " + base + ".pgm");
    pgm << "P5\n" << g.grid.cols() << " " << g.grid.rows() << "\n255\n";
    for (std::size_t i = 0; i < g.grid.size(); ++i) {
      const double t = (g.grid.data()[i] - lo) / span;
      pgm.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
    written.push_back(base + ".pgm");
  }
  return written;
}

}  // namespace cqs
