#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cqs/attention.hpp"
#include "cqs/matrix.hpp"

namespace cqs {

struct QaaConfig {
  std::size_t n_q = 16;   // number of learned queries
  std::size_t c_o = 64;   // backbone channel count
  std::size_t c_f = 16;   // predicted feature channels
  std::size_t c_r = 16;   // reference codebook channels
  std::size_t heads = 4;  // requested per-block head count, clamped to a divisor

  std::size_t descriptor_dim() const { return c_r * c_f; }
  void validate() const;

  bool operator==(const QaaConfig&) const = default;
};

// Learned parameters of the aggregation head.
struct QaaParams {
  QaaConfig config;
  Matrix q_f;                // n_q x c_o feature queries
  Matrix q_r;                // n_q x c_r reference queries
  MhaParams feat_self_attn;  // d_model = c_o
  MhaParams feat_pred_attn;  // d_model = c_o
  Matrix proj_w;             // c_o x c_f projection after feature prediction
  std::vector<double> proj_b;
  MhaParams ref_self_attn;   // d_model = c_r

  void validate() const;
};

// Per-image patch-level features, one row per patch.
struct FeatureMap {
  Matrix patches;  // P x c_o
  std::string image_id;
};

// Image-independent tensors that can be frozen once training is done.
struct InferenceCache {
  Matrix q_f_hat;  // n_q x c_o refined feature queries
  Matrix f_hat;    // n_q x c_r reference codebook
};

struct Descriptor {
  std::vector<double> values;  // length c_r * c_f, unit L2 norm
  std::string image_id;
};

struct ImageSpec {
  std::size_t height = 322;
  std::size_t width = 322;
  std::size_t patch_stride = 14;

  std::size_t grid_rows() const { return height / patch_stride; }
  std::size_t grid_cols() const { return width / patch_stride; }
  std::size_t patch_count() const { return grid_rows() * grid_cols(); }
  void validate() const;  // requires exact divisibility by the stride
};

// Analytic operation-count profile. Convention: one multiply-add counts as
// 2 FLOPs, softmax as 4 FLOPs per element.
struct FlopProfile {
  struct Stage {
    std::string name;
    std::uint64_t flops = 0;
    std::uint64_t params = 0;
  };
  std::vector<Stage> stages;
  std::uint64_t inference_flops = 0;  // feature prediction + similarity + normalization
  std::uint64_t cached_flops = 0;     // query refinement + codebook (cacheable)
  std::uint64_t total_flops = 0;
  std::uint64_t param_count = 0;
  std::string convention;
};

QaaParams make_qaa_params(const QaaConfig& config, std::uint64_t seed);

// Refined feature queries: q_f + self-attention over q_f.
Matrix refine_feature_queries(const QaaParams& params);
// Reference codebook: q_r + self-attention over q_r.
Matrix build_reference_codebook(const QaaParams& params);
// Query-level image features: project(MHA(q_f_hat, X, X)) -> n_q x c_f.
Matrix predict_query_features(const Matrix& q_f_hat, const FeatureMap& x,
                              const QaaParams& params);

struct PredictResult {
  Matrix p_hat;              // n_q x c_f
  std::vector<Matrix> attn;  // per-head feature-prediction attention, n_q x P
};
PredictResult predict_query_features_attn(const Matrix& q_f_hat, const FeatureMap& x,
                                          const QaaParams& params);

// S[a][b] = sum_q f_hat[q][a] * p_hat[q][b], shape c_r x c_f.
Matrix cross_query_similarity(const Matrix& f_hat, const Matrix& p_hat);

// Intra-L2 normalization of each c_r-length column of S, flattening with
// columns contiguous (value index = col * c_r + row), then global L2.
// Columns with norm < 1e-12 skip the intra step and stay (near) zero.
Descriptor normalize_descriptor(const Matrix& s);

struct NormalizeTape {
  Matrix intra;                   // column-normalized S
  std::vector<double> col_norms;  // pre-normalization column norms
  std::vector<bool> skipped;
  std::vector<double> flat;       // flattened intra, before global normalization
  double global_norm = 0.0;
};
Descriptor normalize_descriptor(const Matrix& s, NormalizeTape* tape);
Matrix normalize_descriptor_backward(const NormalizeTape& tape,
                                     const std::vector<double>& d_values);

InferenceCache cache_queries(const QaaParams& params);

// Full aggregation using cached image-independent tensors.
Descriptor aggregate(const FeatureMap& x, const QaaParams& params, const InferenceCache& cache);

FlopProfile count_flops(const QaaConfig& config, const ImageSpec& img);

struct AttentionGrid {
  std::size_t query_id = 0;
  Matrix grid;  // grid_rows x grid_cols, entries sum to 1
};
// Head-averaged feature-prediction attention for the selected queries,
// reshaped to the patch grid (patch p maps to row p / cols, col p % cols).
std::vector<AttentionGrid> export_attention_maps(const FeatureMap& x, const QaaParams& params,
                                                 const std::vector<std::size_t>& query_ids,
                                                 const ImageSpec& img);
// Writes <out_dir>/<image_id>_q<k>.csv and .pgm for each grid.
std::vector<std::string> write_attention_maps(const std::vector<AttentionGrid>& grids,
                                              const std::string& image_id,
                                              const std::string& out_dir);

}  // namespace cqs
