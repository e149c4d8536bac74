#include <doctest.h>

#include <cmath>
#include <set>

#include "cqs/trainer.hpp"
#include "oracles.hpp"

using cqs::BatchPlan;
using cqs::DatasetDef;
using cqs::Descriptor;
using cqs::Matrix;
using cqs::MsLossParams;
using cqs::QaaConfig;
using cqs::QaaParams;

namespace {

std::vector<DatasetDef> toy_datasets(std::size_t n, std::size_t places, std::size_t obs) {
  std::vector<DatasetDef> defs;
  for (std::size_t d = 0; d < n; ++d) {
    DatasetDef def;
    def.name = "ds" + std::to_string(d);
    def.domain_id = static_cast<int>(d);
    def.observations_per_place = obs;
    for (std::size_t p = 0; p < places; ++p)
      def.place_ids.push_back(static_cast<int>(d * places + p));
    defs.push_back(def);
  }
  return defs;
}

Descriptor unit_descriptor(std::vector<double> values, const std::string& id = "") {
  double sq = 0.0;
  for (double v : values) sq += v * v;
  const double n = std::sqrt(sq);
  for (double& v : values) v /= n;
  return {std::move(values), id};
}

}  // namespace

TEST_CASE("compose_batch matches the reference batch arithmetic") {
  cqs::Rng rng(199);
  std::vector<DatasetDef> defs = toy_datasets(3, 40, 6);
  BatchPlan plan{3, 30, 4};
  std::vector<cqs::BatchItem> batch = cqs::compose_batch(defs, plan, rng);
  CHECK(batch.size() == 360);
  std::set<int> labels;
  for (const auto& item : batch) labels.insert(item.label);
  CHECK(labels.size() == 90);
}

TEST_CASE("compose_batch minimal plan") {
  cqs::Rng rng(211);
  std::vector<DatasetDef> defs = toy_datasets(1, 2, 3);
  BatchPlan plan{1, 1, 2};
  std::vector<cqs::BatchItem> batch = cqs::compose_batch(defs, plan, rng);
  CHECK(batch.size() == 2);
  CHECK(batch[0].label == batch[1].label);
  CHECK(batch[0].place_id == batch[1].place_id);
  CHECK(batch[0].obs_index != batch[1].obs_index);
}

TEST_CASE("compose_batch samples places without replacement") {
  cqs::Rng rng(223);
  std::vector<DatasetDef> defs = toy_datasets(2, 10, 4);
  BatchPlan plan{2, 10, 2};
  std::vector<cqs::BatchItem> batch = cqs::compose_batch(defs, plan, rng);
  for (std::size_t d = 0; d < 2; ++d) {
    std::set<int> places;
    for (const auto& item : batch) {
      if (item.dataset_index == d) places.insert(item.place_id);
    }
    CHECK(places.size() == 10);
  }
}

TEST_CASE("compose_batch induces k*m*(m-1)/2 positive pairs per dataset") {
  cqs::Rng rng(227);
  std::vector<DatasetDef> defs = toy_datasets(2, 12, 5);
  BatchPlan plan{2, 7, 3};
  std::vector<cqs::BatchItem> batch = cqs::compose_batch(defs, plan, rng);
  for (std::size_t d = 0; d < 2; ++d) {
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (std::size_t j = i + 1; j < batch.size(); ++j) {
        if (batch[i].dataset_index == d && batch[j].dataset_index == d &&
            batch[i].label == batch[j].label) {
          ++pairs;
        }
      }
    }
    CHECK(pairs == 7 * 3 * (3 - 1) / 2);
  }
}

TEST_CASE("compose_batch errors name the offending dataset") {
  cqs::Rng rng(229);
  std::vector<DatasetDef> defs = toy_datasets(1, 3, 6);
  CHECK_THROWS_WITH_AS(cqs::compose_batch(defs, BatchPlan{1, 5, 2}, rng),
                       doctest::Contains("ds0"), std::runtime_error);
  CHECK_THROWS_WITH_AS(cqs::compose_batch(defs, BatchPlan{1, 2, 9}, rng),
                       doctest::Contains("ds0"), std::runtime_error);
  CHECK_THROWS_AS(cqs::compose_batch(defs, BatchPlan{2, 2, 2}, rng), std::invalid_argument);
}

TEST_CASE("ms_loss on two orthogonal descriptors with different labels") {
  MsLossParams params;
  params.alpha = 1.0;
  params.beta = 50.0;
  params.lambda = 0.5;
  std::vector<Descriptor> descriptors{unit_descriptor({1, 0}), unit_descriptor({0, 1})};
  cqs::MsLossResult res = cqs::ms_loss(descriptors, {0, 1}, params);
  const double expected = std::log1p(std::exp(50.0 * (0.0 - 0.5))) / 50.0;
  CHECK(res.loss == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("ms_loss anchors with fully unmined pairs contribute zero") {
  MsLossParams params;  // gamma = 0.1
  // anchor/positive nearly identical (sim ~ 1), negative at sim ~ -1:
  // the negative is far below min_pos - gamma and the positive is far above
  // max_neg + gamma, so both mined sets are empty for the first two anchors.
  std::vector<Descriptor> descriptors{unit_descriptor({1, 0}), unit_descriptor({1, 1e-6}),
                                      unit_descriptor({-1, 0})};
  cqs::MsLossResult res = cqs::ms_loss(descriptors, {0, 0, 1}, params);
  // only the negative anchor (no positives -> keeps all negatives) contributes
  const double s = -1.0;
  const double expected =
      (std::log1p(std::exp(50.0 * (s - 0.5)) + std::exp(50.0 * (s - 0.5))) / 50.0) / 3.0;
  CHECK(res.loss == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("ms_loss is permutation invariant") {
  cqs::Rng rng(233);
  std::vector<Descriptor> descriptors;
  std::vector<int> labels;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> v(4);
    for (double& x : v) x = rng.uniform(-1, 1);
    descriptors.push_back(unit_descriptor(std::move(v)));
    labels.push_back(i % 2);
  }
  const double base = cqs::ms_loss(descriptors, labels, MsLossParams{}).loss;
  const std::size_t perm[] = {4, 2, 0, 5, 1, 3};
  std::vector<Descriptor> shuffled;
  std::vector<int> shuffled_labels;
  for (std::size_t i : perm) {
    shuffled.push_back(descriptors[i]);
    shuffled_labels.push_back(labels[i]);
  }
  CHECK(cqs::ms_loss(shuffled, shuffled_labels, MsLossParams{}).loss ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("ms_loss gradient matches finite differences") {
  cqs::Rng rng(239);
  std::vector<Descriptor> descriptors;
  std::vector<int> labels;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> v(5);
    for (double& x : v) x = rng.uniform(-1, 1);
    descriptors.push_back(unit_descriptor(std::move(v)));
    labels.push_back(i / 3);
  }
  MsLossParams params;
  params.gamma = 10.0;  // mine everything: keeps the loss smooth under perturbation
  auto loss = [&] { return cqs::ms_loss(descriptors, labels, params).loss; };
  cqs::MsLossResult res = cqs::ms_loss(descriptors, labels, params);
  double max_rel = 0.0;
  for (std::size_t i = 0; i < descriptors.size(); ++i) {
    for (std::size_t d = 0; d < 5; ++d) {
      const double fd = oracle::central_diff(descriptors[i].values[d], loss);
      max_rel = std::max(max_rel, oracle::rel_err(res.d_descriptors[i][d], fd));
    }
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("ms_loss validates inputs") {
  std::vector<Descriptor> descriptors{unit_descriptor({1, 0}), unit_descriptor({0, 1})};
  CHECK_THROWS_AS(cqs::ms_loss(descriptors, {0}, MsLossParams{}), std::invalid_argument);
  CHECK_THROWS_AS(cqs::ms_loss({unit_descriptor({1, 0})}, {0}, MsLossParams{}),
                  std::invalid_argument);
}

TEST_CASE("warmup schedule endpoints") {
  cqs::OptimizerConfig cfg;
  cfg.lr = 0.02;
  cfg.warmup_iters = 100;
  CHECK(cqs::warmup_lr(cfg, 0) == 0.0);
  CHECK(cqs::warmup_lr(cfg, 50) == doctest::Approx(0.01));
  CHECK(cqs::warmup_lr(cfg, 100) == doctest::Approx(0.02));
  CHECK(cqs::warmup_lr(cfg, 5000) == doctest::Approx(0.02));
  cfg.warmup_iters = 0;
  CHECK(cqs::warmup_lr(cfg, 0) == doctest::Approx(0.02));
}

TEST_CASE("optimizer leaves parameters fixed for zero gradients and zero decay") {
  QaaConfig cfg{2, 4, 2, 2, 2};
  QaaParams params = cqs::make_qaa_params(cfg, 241);
  QaaParams before = params;
  cqs::QaaGrads grads = cqs::make_zero_grads(params);
  cqs::OptimizerConfig opt;
  opt.lr = 0.1;
  opt.weight_decay = 0.0;
  opt.warmup_iters = 0;
  cqs::AdamWState state;
  for (std::size_t i = 0; i < 5; ++i) cqs::optimizer_step(params, grads, opt, state, i);
  CHECK(params.q_f == before.q_f);
  CHECK(params.proj_w == before.proj_w);
  CHECK(params.feat_pred_attn.w_o == before.feat_pred_attn.w_o);
}

TEST_CASE("optimizer drives a single-parameter quadratic to its minimum") {
  QaaConfig cfg{2, 4, 2, 2, 2};
  QaaParams params = cqs::make_qaa_params(cfg, 251);
  params.q_f(0, 0) = -4.0;
  cqs::QaaGrads grads = cqs::make_zero_grads(params);
  cqs::OptimizerConfig opt;
  opt.lr = 0.1;
  opt.weight_decay = 0.0;
  opt.warmup_iters = 0;
  cqs::AdamWState state;
  for (std::size_t i = 0; i < 500; ++i) {
    grads.q_f(0, 0) = 2.0 * (params.q_f(0, 0) - 3.0);  // d/dx (x - 3)^2
    cqs::optimizer_step(params, grads, opt, state, i);
  }
  CHECK(std::abs(params.q_f(0, 0) - 3.0) < 1e-3);
}

TEST_CASE("optimizer rejects non-finite gradients by tensor name") {
  QaaConfig cfg{2, 4, 2, 2, 2};
  QaaParams params = cqs::make_qaa_params(cfg, 257);
  cqs::QaaGrads grads = cqs::make_zero_grads(params);
  grads.proj_w(0, 0) = std::nan("");
  cqs::AdamWState state;
  CHECK_THROWS_WITH_AS(cqs::optimizer_step(params, grads, cqs::OptimizerConfig{}, state, 0),
                       doctest::Contains("proj_w"), std::runtime_error);
}

TEST_CASE("decoupled weight decay scales parameters before the adaptive step") {
  QaaConfig cfg{2, 4, 2, 2, 2};
  QaaParams params = cqs::make_qaa_params(cfg, 263);
  const double x0 = params.q_f(0, 0);
  cqs::QaaGrads grads = cqs::make_zero_grads(params);
  cqs::OptimizerConfig opt;
  opt.lr = 0.5;
  opt.weight_decay = 0.1;
  opt.warmup_iters = 0;
  cqs::AdamWState state;
  cqs::optimizer_step(params, grads, opt, state, 0);
  CHECK(params.q_f(0, 0) == doctest::Approx(x0 * (1.0 - 0.5 * 0.1)).epsilon(1e-12));
}

TEST_CASE("encode path gradients match finite differences for every paradigm") {
  const QaaConfig cfg{3, 6, 2, 4, 2};
  cqs::Rng rng(269);
  Matrix patches = oracle::random_matrix(5, 6, rng);
  cqs::FeatureMap fm{patches, "img"};
  std::vector<double> probe(cfg.descriptor_dim());
  for (double& v : probe) v = rng.uniform(-1, 1);

  cqs::SinkhornConfig sk;
  sk.max_iters = 8;
  sk.tol = 1e-300;  // fixed unroll depth keeps the map smooth

  for (cqs::ParadigmKind paradigm :
       {cqs::ParadigmKind::CS, cqs::ParadigmKind::Softmax, cqs::ParadigmKind::OT}) {
    CAPTURE(cqs::to_string(paradigm));
    QaaParams params = cqs::make_qaa_params(cfg, 271);

    auto loss = [&] {
      cqs::SharedForward shared = cqs::shared_forward(params);
      cqs::EncodeTape tape;
      Descriptor d = cqs::encode_forward(params, shared, fm, paradigm, sk, tape);
      double acc = 0.0;
      for (std::size_t i = 0; i < probe.size(); ++i) acc += d.values[i] * probe[i];
      return acc;
    };

    cqs::SharedForward shared = cqs::shared_forward(params);
    cqs::EncodeTape tape;
    cqs::encode_forward(params, shared, fm, paradigm, sk, tape);
    cqs::QaaGrads grads = cqs::make_zero_grads(params);
    Matrix d_qf(cfg.n_q, cfg.c_o);
    Matrix d_fh(cfg.n_q, cfg.c_r);
    cqs::encode_backward(params, shared, tape, paradigm, probe, grads, d_qf, d_fh);
    cqs::shared_backward(shared, d_qf, d_fh, grads);

    double max_rel = 0.0;
    std::vector<cqs::TensorRef> refs = cqs::parameter_tensors(params, grads);
    for (cqs::TensorRef& ref : refs) {
      // probe a deterministic subsample of each tensor to keep the test quick
      const std::size_t stride = std::max<std::size_t>(1, ref.param.size() / 6);
      for (std::size_t i = 0; i < ref.param.size(); i += stride) {
        const double fd = oracle::central_diff(ref.param[i], loss);
        max_rel = std::max(max_rel, oracle::rel_err(ref.grad[i], fd));
      }
    }
    CHECK(max_rel < 1e-4);
  }
}

TEST_CASE("make_datasets partitions places disjointly and honors density") {
  cqs::WorldConfig wc;
  wc.seed = 3;
  wc.num_places = 30;
  wc.c_o = 16;
  wc.grid = 3;
  wc.area_m = 2500.0;
  wc.domains = {cqs::DomainConfig{}, cqs::DomainConfig{}, cqs::DomainConfig{}};
  wc.domains[2].sampling_density = 0.5;
  cqs::SyntheticWorld world = cqs::generate_world(wc);
  std::vector<DatasetDef> defs = cqs::make_datasets(world, 4);
  REQUIRE(defs.size() == 3);
  CHECK(defs[0].place_ids.size() == 10);
  CHECK(defs[1].place_ids.size() == 10);
  CHECK(defs[2].place_ids.size() == 5);  // density 0.5
  std::set<int> all;
  for (const auto& def : defs) all.insert(def.place_ids.begin(), def.place_ids.end());
  CHECK(all.size() == 25);
}

TEST_CASE("training is deterministic for a fixed seed in single-worker mode") {
  cqs::WorldConfig wc;
  wc.seed = 11;
  wc.num_places = 8;
  wc.c_o = 16;
  wc.grid = 3;
  wc.area_m = 1200.0;
  wc.domains = {cqs::DomainConfig{}, cqs::DomainConfig{}};
  cqs::SyntheticWorld world = cqs::generate_world(wc);

  cqs::TrainConfig cfg;
  cfg.plan = {2, 3, 2};
  cfg.model = {4, 16, 4, 4, 2};
  cfg.optimizer.max_epochs = 2;
  cfg.optimizer.warmup_iters = 5;
  cfg.optimizer.lr = 1e-3;
  cfg.steps_per_epoch = 3;
  cfg.observations_per_place = 4;
  cfg.seed = 77;

  cqs::TrainResult a = cqs::train(world, cfg);
  cqs::TrainResult b = cqs::train(world, cfg);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].recall1 == b.log[i].recall1);
  }
  CHECK(a.params.q_f == b.params.q_f);
  CHECK(a.params.proj_w == b.params.proj_w);
}
