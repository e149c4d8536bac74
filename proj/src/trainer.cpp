#include "cqs/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "cqs/io.hpp"
#include "cqs/log.hpp"

namespace cqs {

namespace {

constexpr std::uint64_t kValDbBase = 1000000;
constexpr std::uint64_t kValQueryBase = 2000000;

void run_partitioned(std::size_t count, std::size_t workers,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& body) {
  // body(worker_index, begin, end)
  const std::size_t w = std::max<std::size_t>(1, std::min(workers, count));
  if (w == 1) {
    body(0, 0, count);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(w);
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t begin = count * t / w;
    const std::size_t end = count * (t + 1) / w;
    threads.emplace_back([&body, t, begin, end] { body(t, begin, end); });
  }
  for (auto& th : threads) th.join();
}

void add_span(std::vector<double>& into, const std::vector<double>& from) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

}  // namespace

void BatchPlan::validate() const {
  if (n < 1 || k < 1 || m < 1) throw std::invalid_argument("batch plan: n, k, m must be >= 1");
}

void MsLossParams::validate() const {
  if (!(alpha > 0) || !(beta > 0) || !(gamma > 0)) {
    throw std::invalid_argument("ms loss: alpha, beta, gamma must be positive");
  }
  if (!(lambda >= 0) || lambda >= 1) {
    throw std::invalid_argument("ms loss: lambda must be in [0, 1)");
  }
}

MsLossResult ms_loss(const std::vector<Descriptor>& descriptors, const std::vector<int>& labels,
                     const MsLossParams& params) {
  params.validate();
  const std::size_t n = descriptors.size();
  if (n < 2) throw std::invalid_argument("ms_loss: need at least 2 descriptors");
  if (labels.size() != n) {
    throw std::invalid_argument("ms_loss: " + std::to_string(n) + " descriptors but " +
                                std::to_string(labels.size()) + " labels");
  }
  const std::size_t dim = descriptors[0].values.size();
  for (const Descriptor& d : descriptors) {
    if (d.values.size() != dim) throw std::invalid_argument("ms_loss: mixed descriptor dims");
  }

  // pairwise cosine similarities (descriptors are unit norm)
  Matrix sims(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t d = 0; d < dim; ++d) acc += descriptors[i].values[d] * descriptors[j].values[d];
      sims(i, j) = acc;
      sims(j, i) = acc;
    }
  }

  MsLossResult result;
  result.d_descriptors.assign(n, std::vector<double>(dim, 0.0));
  Matrix d_sims(n, n);

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> positives, negatives;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? positives : negatives).push_back(j);
    }

    double min_pos = 0.0, max_neg = 0.0;
    if (!positives.empty()) {
      min_pos = sims(i, positives[0]);
      for (std::size_t j : positives) min_pos = std::min(min_pos, sims(i, j));
    }
    if (!negatives.empty()) {
      max_neg = sims(i, negatives[0]);
      for (std::size_t j : negatives) max_neg = std::max(max_neg, sims(i, j));
    }

    std::vector<std::size_t> mined_pos, mined_neg;
    for (std::size_t j : positives) {
      if (negatives.empty() || sims(i, j) < max_neg + params.gamma) mined_pos.push_back(j);
    }
    for (std::size_t j : negatives) {
      if (positives.empty() || sims(i, j) > min_pos - params.gamma) mined_neg.push_back(j);
    }

    double pos_sum = 0.0, neg_sum = 0.0;
    for (std::size_t j : mined_pos) pos_sum += std::exp(-params.alpha * (sims(i, j) - params.lambda));
    for (std::size_t j : mined_neg) neg_sum += std::exp(params.beta * (sims(i, j) - params.lambda));
    total += std::log1p(pos_sum) / params.alpha + std::log1p(neg_sum) / params.beta;

    for (std::size_t j : mined_pos) {
      const double e = std::exp(-params.alpha * (sims(i, j) - params.lambda));
      d_sims(i, j) += -e / (1.0 + pos_sum);
    }
    for (std::size_t j : mined_neg) {
      const double e = std::exp(params.beta * (sims(i, j) - params.lambda));
      d_sims(i, j) += e / (1.0 + neg_sum);
    }
  }

  const double inv_n = 1.0 / static_cast<double>(n);
  result.loss = total * inv_n;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double g = d_sims(i, j) * inv_n;
      if (g == 0.0) continue;
      for (std::size_t d = 0; d < dim; ++d) {
        result.d_descriptors[i][d] += g * descriptors[j].values[d];
        result.d_descriptors[j][d] += g * descriptors[i].values[d];
      }
    }
  }
  return result;
}

double warmup_lr(const OptimizerConfig& cfg, std::size_t iter) {
  if (cfg.warmup_iters == 0 || iter >= cfg.warmup_iters) return cfg.lr;
  return cfg.lr * static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters);
}

QaaGrads make_zero_grads(const QaaParams& params) {
  QaaGrads g;
  g.q_f = Matrix(params.q_f.rows(), params.q_f.cols());
  g.q_r = Matrix(params.q_r.rows(), params.q_r.cols());
  auto zero_mha = [](const MhaParams& p) {
    MhaWeightGrads w;
    const std::size_t d = p.d_model();
    w.w_q = Matrix(d, d);
    w.w_k = Matrix(d, d);
    w.w_v = Matrix(d, d);
    w.w_o = Matrix(d, d);
    w.b_q.assign(d, 0.0);
    w.b_k.assign(d, 0.0);
    w.b_v.assign(d, 0.0);
    w.b_o.assign(d, 0.0);
    return w;
  };
  g.feat_self_attn = zero_mha(params.feat_self_attn);
  g.feat_pred_attn = zero_mha(params.feat_pred_attn);
  g.ref_self_attn = zero_mha(params.ref_self_attn);
  g.proj_w = Matrix(params.proj_w.rows(), params.proj_w.cols());
  g.proj_b.assign(params.proj_b.size(), 0.0);
  return g;
}

void accumulate_mha(MhaWeightGrads& into, const MhaGrads& from) {
  add_in_place(into.w_q, from.w_q);
  add_in_place(into.w_k, from.w_k);
  add_in_place(into.w_v, from.w_v);
  add_in_place(into.w_o, from.w_o);
  add_span(into.b_q, from.b_q);
  add_span(into.b_k, from.b_k);
  add_span(into.b_v, from.b_v);
  add_span(into.b_o, from.b_o);
}

void accumulate_grads(QaaGrads& into, const QaaGrads& from) {
  add_in_place(into.q_f, from.q_f);
  add_in_place(into.q_r, from.q_r);
  for (auto [a, b] : {std::pair{&into.feat_self_attn, &from.feat_self_attn},
                      std::pair{&into.feat_pred_attn, &from.feat_pred_attn},
                      std::pair{&into.ref_self_attn, &from.ref_self_attn}}) {
    add_in_place(a->w_q, b->w_q);
    add_in_place(a->w_k, b->w_k);
    add_in_place(a->w_v, b->w_v);
    add_in_place(a->w_o, b->w_o);
    add_span(a->b_q, b->b_q);
    add_span(a->b_k, b->b_k);
    add_span(a->b_v, b->b_v);
    add_span(a->b_o, b->b_o);
  }
  add_in_place(into.proj_w, from.proj_w);
  add_span(into.proj_b, from.proj_b);
}

std::vector<TensorRef> parameter_tensors(QaaParams& params, const QaaGrads& grads) {
  std::vector<TensorRef> refs;
  auto push_matrix = [&refs](const std::string& name, Matrix& p, const Matrix& g) {
    refs.push_back({name, std::span<double>(p.data(), p.size()),
                    std::span<const double>(g.data(), g.size())});
  };
  auto push_vec = [&refs](const std::string& name, std::vector<double>& p,
                          const std::vector<double>& g) {
    refs.push_back({name, std::span<double>(p.data(), p.size()),
                    std::span<const double>(g.data(), g.size())});
  };
  auto push_mha = [&](const std::string& prefix, MhaParams& p, const MhaWeightGrads& g) {
    push_matrix(prefix + ".w_q", p.w_q, g.w_q);
    push_matrix(prefix + ".w_k", p.w_k, g.w_k);
    push_matrix(prefix + ".w_v", p.w_v, g.w_v);
    push_matrix(prefix + ".w_o", p.w_o, g.w_o);
    push_vec(prefix + ".b_q", p.b_q, g.b_q);
    push_vec(prefix + ".b_k", p.b_k, g.b_k);
    push_vec(prefix + ".b_v", p.b_v, g.b_v);
    push_vec(prefix + ".b_o", p.b_o, g.b_o);
  };
  push_matrix("q_f", params.q_f, grads.q_f);
  push_matrix("q_r", params.q_r, grads.q_r);
  push_mha("feat_self_attn", params.feat_self_attn, grads.feat_self_attn);
  push_mha("feat_pred_attn", params.feat_pred_attn, grads.feat_pred_attn);
  push_matrix("proj_w", params.proj_w, grads.proj_w);
  push_vec("proj_b", params.proj_b, grads.proj_b);
  push_mha("ref_self_attn", params.ref_self_attn, grads.ref_self_attn);
  return refs;
}

void optimizer_step(QaaParams& params, const QaaGrads& grads, const OptimizerConfig& cfg,
                    AdamWState& state, std::size_t iter) {
  std::vector<TensorRef> refs = parameter_tensors(params, grads);
  for (const TensorRef& ref : refs) {
    for (double g : ref.grad) {
      if (!std::isfinite(g)) {
        throw std::runtime_error("optimizer: non-finite gradient in " + ref.name);
      }
    }
  }
  if (state.m.empty()) {
    state.m.resize(refs.size());
    state.v.resize(refs.size());
    for (std::size_t t = 0; t < refs.size(); ++t) {
      state.m[t].assign(refs[t].param.size(), 0.0);
      state.v[t].assign(refs[t].param.size(), 0.0);
    }
  }
  if (state.m.size() != refs.size()) {
    throw std::logic_error("optimizer: state does not match parameter layout");
  }

  const double lr_t = warmup_lr(cfg, iter);
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (std::size_t t = 0; t < refs.size(); ++t) {
    auto param = refs[t].param;
    auto grad = refs[t].grad;
    auto& m = state.m[t];
    auto& v = state.v[t];
    if (param.size() != m.size()) {
      throw std::logic_error("optimizer: tensor " + refs[t].name + " changed size");
    }
    const double decay = 1.0 - lr_t * cfg.weight_decay;
    for (std::size_t i = 0; i < param.size(); ++i) {
      param[i] *= decay;  // decoupled weight decay
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      param[i] -= lr_t * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

SharedForward shared_forward(const QaaParams& params) {
  SharedForward s;
  MhaOutput feat = mha_forward(params.q_f, params.q_f, params.q_f, params.feat_self_attn,
                               s.feat_self_tape);
  s.q_f_hat = add(params.q_f, feat.out);
  MhaOutput ref = mha_forward(params.q_r, params.q_r, params.q_r, params.ref_self_attn,
                              s.ref_self_tape);
  s.f_hat = add(params.q_r, ref.out);
  return s;
}

Descriptor encode_forward(const QaaParams& params, const SharedForward& shared,
                          const FeatureMap& x, ParadigmKind paradigm,
                          const SinkhornConfig& sinkhorn_cfg, EncodeTape& tape) {
  if (x.patches.cols() != params.config.c_o) {
    throw std::invalid_argument("encode: features have " + std::to_string(x.patches.cols()) +
                                " channels, expected " + std::to_string(params.config.c_o));
  }
  MhaOutput pred =
      mha_forward(shared.q_f_hat, x.patches, x.patches, params.feat_pred_attn, tape.pred_tape);
  tape.mha_out = pred.out;
  tape.p_hat = linear(pred.out, params.proj_w, params.proj_b);

  switch (paradigm) {
    case ParadigmKind::CS:
      tape.scores = tape.p_hat;
      break;
    case ParadigmKind::Softmax:
      tape.scores = softmax_columns(tape.p_hat);
      break;
    case ParadigmKind::OT:
      tape.scores = sinkhorn_normalize(tape.p_hat, sinkhorn_cfg, &tape.sinkhorn).scores;
      break;
  }

  Matrix s = cross_query_similarity(shared.f_hat, tape.scores);
  Descriptor d = normalize_descriptor(s, &tape.norm);
  d.image_id = x.image_id;
  return d;
}

void encode_backward(const QaaParams& params, const SharedForward& shared, EncodeTape& tape,
                     ParadigmKind paradigm, const std::vector<double>& d_descriptor,
                     QaaGrads& grads, Matrix& d_q_f_hat, Matrix& d_f_hat) {
  Matrix d_s = normalize_descriptor_backward(tape.norm, d_descriptor);

  // s = f_hat^T * scores
  add_in_place(d_f_hat, matmul_abt(tape.scores, d_s));
  Matrix d_scores = matmul(shared.f_hat, d_s);

  Matrix d_p_hat;
  switch (paradigm) {
    case ParadigmKind::CS:
      d_p_hat = std::move(d_scores);
      break;
    case ParadigmKind::Softmax:
      d_p_hat = softmax_columns_backward(tape.scores, d_scores);
      break;
    case ParadigmKind::OT:
      d_p_hat = sinkhorn_backward(tape.sinkhorn, d_scores);
      break;
  }

  LinearGrads proj = linear_backward(tape.mha_out, params.proj_w, d_p_hat);
  add_in_place(grads.proj_w, proj.d_w);
  add_span(grads.proj_b, proj.d_b);

  MhaGrads mha = mha_backward(tape.pred_tape, proj.d_x);
  accumulate_mha(grads.feat_pred_attn, mha);
  add_in_place(d_q_f_hat, mha.d_query);
  // d_key/d_value are gradients w.r.t. the input features; nothing upstream.
}

void shared_backward(SharedForward& shared, const Matrix& d_q_f_hat, const Matrix& d_f_hat,
                     QaaGrads& grads) {
  MhaGrads feat = mha_backward(shared.feat_self_tape, d_q_f_hat);
  accumulate_mha(grads.feat_self_attn, feat);
  add_in_place(grads.q_f, d_q_f_hat);  // residual branch
  add_in_place(grads.q_f, feat.d_query);
  add_in_place(grads.q_f, feat.d_key);
  add_in_place(grads.q_f, feat.d_value);

  MhaGrads ref = mha_backward(shared.ref_self_tape, d_f_hat);
  accumulate_mha(grads.ref_self_attn, ref);
  add_in_place(grads.q_r, d_f_hat);
  add_in_place(grads.q_r, ref.d_query);
  add_in_place(grads.q_r, ref.d_key);
  add_in_place(grads.q_r, ref.d_value);
}

std::vector<DatasetDef> make_datasets(const SyntheticWorld& world,
                                      std::size_t observations_per_place) {
  const std::size_t n = world.domains.size();
  const std::size_t per_domain = world.config.num_places / n;
  if (per_domain == 0) throw std::invalid_argument("make_datasets: fewer places than domains");
  std::vector<DatasetDef> datasets;
  datasets.reserve(n);
  for (std::size_t d = 0; d < n; ++d) {
    DatasetDef def;
    def.name = "domain" + std::to_string(d);
    def.domain_id = static_cast<int>(d);
    def.observations_per_place = observations_per_place;
    const double density = world.domains[d].config.sampling_density;
    const std::size_t used = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(static_cast<double>(per_domain) * density)));
    for (std::size_t p = 0; p < used; ++p) {
      def.place_ids.push_back(static_cast<int>(d * per_domain + p));
    }
    datasets.push_back(std::move(def));
  }
  return datasets;
}

std::vector<BatchItem> compose_batch(const std::vector<DatasetDef>& datasets,
                                     const BatchPlan& plan, Rng& rng) {
  plan.validate();
  if (datasets.size() != plan.n) {
    throw std::invalid_argument("compose_batch: plan expects " + std::to_string(plan.n) +
                                " datasets, got " + std::to_string(datasets.size()));
  }
  std::vector<BatchItem> batch;
  batch.reserve(plan.batch_size());
  int next_label = 0;
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    const DatasetDef& ds = datasets[d];
    if (ds.place_ids.size() < plan.k) {
      throw std::runtime_error("compose_batch: dataset '" + ds.name + "' has " +
                               std::to_string(ds.place_ids.size()) + " places, need " +
                               std::to_string(plan.k));
    }
    if (ds.observations_per_place < plan.m) {
      throw std::runtime_error("compose_batch: dataset '" + ds.name + "' has " +
                               std::to_string(ds.observations_per_place) +
                               " observations per place, need " + std::to_string(plan.m));
    }
    // partial Fisher-Yates: k distinct places
    std::vector<std::size_t> order(ds.place_ids.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < plan.k; ++i) {
      const std::size_t j = i + rng.below(order.size() - i);
      std::swap(order[i], order[j]);
    }
    for (std::size_t i = 0; i < plan.k; ++i) {
      const int place = ds.place_ids[order[i]];
      std::vector<std::size_t> obs(ds.observations_per_place);
      std::iota(obs.begin(), obs.end(), 0);
      for (std::size_t o = 0; o < plan.m; ++o) {
        const std::size_t j = o + rng.below(obs.size() - o);
        std::swap(obs[o], obs[j]);
      }
      const int label = next_label++;
      for (std::size_t o = 0; o < plan.m; ++o) {
        batch.push_back({d, place, obs[o], label});
      }
    }
  }
  return batch;
}

ValidationSet make_validation_set(const SyntheticWorld& world,
                                  const std::vector<DatasetDef>& datasets,
                                  std::size_t db_per_place, std::size_t queries_per_place) {
  ValidationSet val;
  val.datasets.resize(datasets.size());
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    for (int place : datasets[d].place_ids) {
      for (std::size_t i = 0; i < db_per_place; ++i) {
        val.datasets[d].database.push_back(make_observation(
            world, static_cast<std::size_t>(place), datasets[d].domain_id, kValDbBase + i));
      }
      for (std::size_t i = 0; i < queries_per_place; ++i) {
        val.datasets[d].queries.push_back(make_observation(
            world, static_cast<std::size_t>(place), datasets[d].domain_id, kValQueryBase + i));
      }
    }
  }
  return val;
}

namespace {

std::vector<PlaceRecord> encode_records(const QaaParams& params, ParadigmKind paradigm,
                                        const SinkhornConfig& sinkhorn_cfg,
                                        const InferenceCache& cache,
                                        const std::vector<PlaceObservation>& observations,
                                        std::size_t workers) {
  std::vector<PlaceRecord> records(observations.size());
  run_partitioned(observations.size(), workers,
                  [&](std::size_t, std::size_t begin, std::size_t end) {
                    for (std::size_t i = begin; i < end; ++i) {
                      const PlaceObservation& obs = observations[i];
                      Matrix p_hat =
                          predict_query_features(cache.q_f_hat, obs.features, params);
                      Descriptor d =
                          paradigm_aggregate(paradigm, cache.f_hat, p_hat, sinkhorn_cfg);
                      d.image_id = obs.features.image_id;
                      records[i].descriptor = std::move(d);
                      records[i].position = PlanarPos{obs.x_m, obs.y_m};
                    }
                  });
  return records;
}

}  // namespace

double validation_recall1(const QaaParams& params, ParadigmKind paradigm,
                          const SinkhornConfig& sinkhorn_cfg, const ValidationSet& val,
                          std::vector<double>* per_dataset, std::size_t workers) {
  const InferenceCache cache = cache_queries(params);
  const PositiveCriterion criterion = PositiveCriterion::distance_m(25.0);
  double sum = 0.0;
  if (per_dataset) per_dataset->clear();
  for (const auto& ds : val.datasets) {
    std::vector<PlaceRecord> db =
        encode_records(params, paradigm, sinkhorn_cfg, cache, ds.database, workers);
    std::vector<PlaceRecord> queries =
        encode_records(params, paradigm, sinkhorn_cfg, cache, ds.queries, workers);
    RetrievalIndex index = RetrievalIndex::build(db);
    const RecallReport report = recall_at_k(queries, index, 1, criterion);
    sum += report.recall;
    if (per_dataset) per_dataset->push_back(report.recall);
  }
  return val.datasets.empty() ? 0.0 : sum / static_cast<double>(val.datasets.size());
}

TrainResult train(const SyntheticWorld& world, const TrainConfig& config) {
  return train(world, config, make_datasets(world, config.observations_per_place));
}

TrainResult train(const SyntheticWorld& world, const TrainConfig& config,
                  const std::vector<DatasetDef>& datasets) {
  config.model.validate();
  config.loss.validate();
  config.sinkhorn.validate();
  if (config.model.c_o != world.config.c_o) {
    throw std::invalid_argument("train: model c_o " + std::to_string(config.model.c_o) +
                                " does not match world c_o " +
                                std::to_string(world.config.c_o));
  }

  QaaParams params = make_qaa_params(config.model, seed_combine(config.seed, 0x9a2a));
  AdamWState adam;
  Rng batch_rng(seed_combine(config.seed, 0xba7c4));

  const ValidationSet val = make_validation_set(world, datasets, config.val_db_per_place,
                                                config.val_queries_per_place);

  TrainResult result;
  result.params = params;
  result.best_recall1 = -1.0;
  std::size_t plateau = 0;
  std::size_t iter = 0;

  for (std::size_t epoch = 0; epoch < config.optimizer.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    bool nan_loss = false;

    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      const std::vector<BatchItem> batch = compose_batch(datasets, config.plan, batch_rng);
      const std::size_t count = batch.size();

      std::vector<PlaceObservation> observations(count);
      run_partitioned(count, config.workers,
                      [&](std::size_t, std::size_t begin, std::size_t end) {
                        for (std::size_t i = begin; i < end; ++i) {
                          const BatchItem& item = batch[i];
                          observations[i] = make_observation(
                              world, static_cast<std::size_t>(item.place_id),
                              datasets[item.dataset_index].domain_id, item.obs_index);
                        }
                      });

      SharedForward shared = shared_forward(params);
      std::vector<EncodeTape> tapes(count);
      std::vector<Descriptor> descriptors(count);
      run_partitioned(count, config.workers,
                      [&](std::size_t, std::size_t begin, std::size_t end) {
                        for (std::size_t i = begin; i < end; ++i) {
                          descriptors[i] =
                              encode_forward(params, shared, observations[i].features,
                                             config.paradigm, config.sinkhorn, tapes[i]);
                        }
                      });

      std::vector<int> labels(count);
      for (std::size_t i = 0; i < count; ++i) labels[i] = batch[i].label;
      MsLossResult loss = ms_loss(descriptors, labels, config.loss);
      if (!std::isfinite(loss.loss)) {
        nan_loss = true;
        break;
      }
      epoch_loss += loss.loss;

      const std::size_t w = std::max<std::size_t>(1, std::min(config.workers, count));
      std::vector<QaaGrads> partial(w, make_zero_grads(params));
      std::vector<Matrix> d_qf(w, Matrix(params.q_f.rows(), params.q_f.cols()));
      std::vector<Matrix> d_fh(w, Matrix(params.q_r.rows(), params.q_r.cols()));
      run_partitioned(count, config.workers,
                      [&](std::size_t t, std::size_t begin, std::size_t end) {
                        for (std::size_t i = begin; i < end; ++i) {
                          encode_backward(params, shared, tapes[i], config.paradigm,
                                          loss.d_descriptors[i], partial[t], d_qf[t], d_fh[t]);
                        }
                      });
      QaaGrads grads = std::move(partial[0]);
      Matrix d_q_f_hat = std::move(d_qf[0]);
      Matrix d_f_hat = std::move(d_fh[0]);
      for (std::size_t t = 1; t < w; ++t) {
        accumulate_grads(grads, partial[t]);
        add_in_place(d_q_f_hat, d_qf[t]);
        add_in_place(d_f_hat, d_fh[t]);
      }
      shared_backward(shared, d_q_f_hat, d_f_hat, grads);

      optimizer_step(params, grads, config.optimizer, adam, iter);
      ++iter;
    }

    if (nan_loss) {
      log_warn("training diverged (non-finite loss); keeping last good checkpoint");
      result.diverged = true;
      break;
    }

    epoch_loss /= static_cast<double>(config.steps_per_epoch);
    const double recall1 =
        validation_recall1(params, config.paradigm, config.sinkhorn, val, nullptr,
                           config.workers);
    result.log.push_back({epoch, epoch_loss, recall1});
    log_info("epoch " + std::to_string(epoch) + " loss " + format_double(epoch_loss) +
             " recall@1 " + format_double(recall1));

    if (recall1 > result.best_recall1) {
      result.best_recall1 = recall1;
      result.best_epoch = epoch;
      result.params = params;
      plateau = 0;
    } else if (++plateau >= config.early_stop_patience) {
      log_info("early stop after " + std::to_string(plateau) + " epochs without improvement");
      break;
    }
  }

  validation_recall1(result.params, config.paradigm, config.sinkhorn, val,
                     &result.per_dataset_recall1, config.workers);
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "epoch,loss,recall1\n";
  for (const EpochMetrics& m : log) {
    out << m.epoch << ',' << format_double(m.loss) << ',' << format_double(m.recall1) << '\n';
  }
}

}  // namespace cqs
