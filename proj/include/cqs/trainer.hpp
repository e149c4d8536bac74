#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cqs/aggregator.hpp"
#include "cqs/paradigms.hpp"
#include "cqs/retrieval.hpp"
#include "cqs/synth.hpp"

namespace cqs {

// Batch composition: n datasets, k places each, m images per place.
struct BatchPlan {
  std::size_t n = 3;
  std::size_t k = 30;
  std::size_t m = 4;

  std::size_t batch_size() const { return n * k * m; }
  void validate() const;
};

struct MsLossParams {
  double alpha = 1.0;   // positive-pair scale
  double beta = 50.0;   // negative-pair scale
  double lambda = 0.5;  // similarity margin
  double gamma = 0.1;   // pair-mining margin

  void validate() const;
};

struct MsLossResult {
  double loss = 0.0;
  std::vector<std::vector<double>> d_descriptors;  // gradient per descriptor
};

// Multi-similarity loss over unit-norm descriptors with margin-based pair
// mining. Anchors whose mined pair sets are both empty contribute zero.
// When an anchor has no positives at all, every negative is kept (and
// symmetrically for positives without negatives).
MsLossResult ms_loss(const std::vector<Descriptor>& descriptors, const std::vector<int>& labels,
                     const MsLossParams& params);

struct OptimizerConfig {
  double lr = 4e-5;
  double weight_decay = 1e-3;
  std::size_t warmup_iters = 4000;
  std::size_t max_epochs = 80;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

double warmup_lr(const OptimizerConfig& cfg, std::size_t iter);

// Gradient accumulators mirroring QaaParams.
struct MhaWeightGrads {
  Matrix w_q, w_k, w_v, w_o;
  std::vector<double> b_q, b_k, b_v, b_o;
};
struct QaaGrads {
  Matrix q_f, q_r;
  MhaWeightGrads feat_self_attn, feat_pred_attn, ref_self_attn;
  Matrix proj_w;
  std::vector<double> proj_b;
};
QaaGrads make_zero_grads(const QaaParams& params);
void accumulate_grads(QaaGrads& into, const QaaGrads& from);
void accumulate_mha(MhaWeightGrads& into, const MhaGrads& from);

// Fixed enumeration of (name, parameter span, gradient span) pairs.
struct TensorRef {
  std::string name;
  std::span<double> param;
  std::span<const double> grad;
};
std::vector<TensorRef> parameter_tensors(QaaParams& params, const QaaGrads& grads);

struct AdamWState {
  std::vector<std::vector<double>> m, v;
  std::size_t step = 0;
};

// AdamW with decoupled weight decay and linear warmup. `iter` indexes the
// global training step starting at 0.
void optimizer_step(QaaParams& params, const QaaGrads& grads, const OptimizerConfig& cfg,
                    AdamWState& state, std::size_t iter);

// --- differentiable encode path ----------------------------------------------

// Image-independent forward tensors for one training step.
struct SharedForward {
  Matrix q_f_hat;
  Matrix f_hat;
  MhaTape feat_self_tape;
  MhaTape ref_self_tape;
};
SharedForward shared_forward(const QaaParams& params);

struct EncodeTape {
  MhaTape pred_tape;
  Matrix mha_out;  // before the c_f projection
  Matrix p_hat;
  Matrix scores;   // paradigm-normalized p_hat
  SinkhornTape sinkhorn;
  NormalizeTape norm;
};

Descriptor encode_forward(const QaaParams& params, const SharedForward& shared,
                          const FeatureMap& x, ParadigmKind paradigm,
                          const SinkhornConfig& sinkhorn_cfg, EncodeTape& tape);

// Per-image backward. Adds into the parameter grads touched by this image and
// into the shared-tensor cotangents.
void encode_backward(const QaaParams& params, const SharedForward& shared, EncodeTape& tape,
                     ParadigmKind paradigm, const std::vector<double>& d_descriptor,
                     QaaGrads& grads, Matrix& d_q_f_hat, Matrix& d_f_hat);

// Backward through the query-refinement and codebook stages, consuming tapes.
void shared_backward(SharedForward& shared, const Matrix& d_q_f_hat, const Matrix& d_f_hat,
                     QaaGrads& grads);

// --- datasets / training ------------------------------------------------------

struct DatasetDef {
  std::string name;
  int domain_id = 0;
  std::vector<int> place_ids;
  std::size_t observations_per_place = 6;  // training pool size
};

// Disjoint place partition, one dataset per domain, honoring each domain's
// sampling density.
std::vector<DatasetDef> make_datasets(const SyntheticWorld& world,
                                      std::size_t observations_per_place);

struct BatchItem {
  std::size_t dataset_index = 0;
  int place_id = -1;
  std::uint64_t obs_index = 0;
  int label = -1;  // dense per (dataset, place) pair within the batch
};
std::vector<BatchItem> compose_batch(const std::vector<DatasetDef>& datasets,
                                     const BatchPlan& plan, Rng& rng);

struct TrainConfig {
  BatchPlan plan{3, 8, 2};
  QaaConfig model;
  ParadigmKind paradigm = ParadigmKind::CS;
  SinkhornConfig sinkhorn;
  OptimizerConfig optimizer;
  MsLossParams loss;
  std::uint64_t seed = 1;
  std::size_t steps_per_epoch = 10;
  std::size_t early_stop_patience = 10;
  std::size_t observations_per_place = 6;
  std::size_t val_db_per_place = 1;
  std::size_t val_queries_per_place = 2;
  std::size_t workers = 1;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double loss = 0.0;
  double recall1 = 0.0;
};

struct TrainResult {
  QaaParams params;  // best checkpoint by validation recall@1
  std::vector<EpochMetrics> log;
  std::size_t best_epoch = 0;
  double best_recall1 = 0.0;
  bool diverged = false;
  std::vector<double> per_dataset_recall1;  // for the returned params
};

// Pre-rendered held-out validation split (fixed features, re-encoded as
// parameters move).
struct ValidationSet {
  struct PerDataset {
    std::vector<PlaceObservation> database;
    std::vector<PlaceObservation> queries;
  };
  std::vector<PerDataset> datasets;
};
ValidationSet make_validation_set(const SyntheticWorld& world,
                                  const std::vector<DatasetDef>& datasets,
                                  std::size_t db_per_place, std::size_t queries_per_place);

// Mean recall@1 across datasets (25 m criterion), plus the per-dataset values.
double validation_recall1(const QaaParams& params, ParadigmKind paradigm,
                          const SinkhornConfig& sinkhorn_cfg, const ValidationSet& val,
                          std::vector<double>* per_dataset, std::size_t workers = 1);

TrainResult train(const SyntheticWorld& world, const TrainConfig& config,
                  const std::vector<DatasetDef>& datasets);
TrainResult train(const SyntheticWorld& world, const TrainConfig& config);

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log);

}  // namespace cqs
