#include <doctest.h>

#include <cmath>
#include <vector>

#include "cqs/synth.hpp"
#include "oracles.hpp"

using cqs::DomainConfig;
using cqs::Matrix;
using cqs::PlaceObservation;
using cqs::SyntheticWorld;
using cqs::WorldConfig;

namespace {

WorldConfig small_world_config(std::uint64_t seed = 5) {
  WorldConfig cfg;
  cfg.seed = seed;
  cfg.num_places = 12;
  cfg.c_o = 32;
  cfg.grid = 5;
  cfg.area_m = 1500.0;
  cfg.domains = {DomainConfig{}, DomainConfig{0.1, 1.1, 0.9, 0.02, 1.0}};
  return cfg;
}

std::vector<double> mean_patch(const Matrix& patches) {
  std::vector<double> mean(patches.cols(), 0.0);
  for (std::size_t i = 0; i < patches.rows(); ++i) {
    for (std::size_t j = 0; j < patches.cols(); ++j) mean[j] += patches(i, j);
  }
  for (double& v : mean) v /= static_cast<double>(patches.rows());
  return mean;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("identical seeds give identical worlds") {
  SyntheticWorld a = cqs::generate_world(small_world_config());
  SyntheticWorld b = cqs::generate_world(small_world_config());
  CHECK(a.place_latents == b.place_latents);
  CHECK(a.distractors == b.distractors);
  CHECK(a.coords == b.coords);
  for (std::size_t d = 0; d < a.domains.size(); ++d) {
    CHECK(a.domains[d].appearance == b.domains[d].appearance);
    CHECK(a.domains[d].bias == b.domains[d].bias);
  }
}

TEST_CASE("places respect the minimum separation") {
  SyntheticWorld w = cqs::generate_world(small_world_config());
  for (std::size_t i = 0; i < w.coords.size(); ++i) {
    for (std::size_t j = i + 1; j < w.coords.size(); ++j) {
      const double dx = w.coords[i].first - w.coords[j].first;
      const double dy = w.coords[i].second - w.coords[j].second;
      CHECK(std::sqrt(dx * dx + dy * dy) >= w.config.min_separation_m);
    }
  }
}

TEST_CASE("world cardinalities") {
  WorldConfig cfg = small_world_config();
  cfg.num_places = 100;
  cfg.area_m = 5000.0;
  cfg.domains = {DomainConfig{}, DomainConfig{}, DomainConfig{}};
  SyntheticWorld w = cqs::generate_world(cfg);
  CHECK(w.place_latents.rows() == 100);
  CHECK(w.coords.size() == 100);
  CHECK(w.domains.size() == 3);
}

TEST_CASE("impossible packing raises a capacity error") {
  WorldConfig cfg = small_world_config();
  cfg.num_places = 500;
  cfg.area_m = 100.0;  // 500 places with 50 m separation cannot fit
  CHECK_THROWS_AS(cqs::generate_world(cfg), std::runtime_error);
}

TEST_CASE("appearance transforms are orthogonal") {
  SyntheticWorld w = cqs::generate_world(small_world_config());
  for (const auto& dom : w.domains) {
    Matrix gram = cqs::matmul_atb(dom.appearance, dom.appearance);
    for (std::size_t i = 0; i < gram.rows(); ++i) {
      for (std::size_t j = 0; j < gram.cols(); ++j) {
        CHECK(std::abs(gram(i, j) - (i == j ? 1.0 : 0.0)) < 1e-8);
      }
    }
  }
}

TEST_CASE("noiseless rendering is deterministic") {
  WorldConfig cfg = small_world_config();
  cfg.domains[0].noise_sigma = 0.0;
  SyntheticWorld w = cqs::generate_world(cfg);
  cqs::Rng rng1(99), rng2(99);
  PlaceObservation a = cqs::render_observation(w, 3, 0, 0.2, rng1);
  PlaceObservation b = cqs::render_observation(w, 3, 0, 0.2, rng2);
  CHECK(a.features.patches == b.features.patches);
  CHECK(a.x_m == b.x_m);
  CHECK(a.y_m == b.y_m);
}

TEST_CASE("make_observation is deterministic and tags ids") {
  SyntheticWorld w = cqs::generate_world(small_world_config());
  PlaceObservation a = cqs::make_observation(w, 2, 1, 7);
  PlaceObservation b = cqs::make_observation(w, 2, 1, 7);
  CHECK(a.features.patches == b.features.patches);
  CHECK(a.features.image_id == "p2_d1_o7");
  CHECK(a.frame_idx == 7);
  CHECK(a.place_id == 2);
  CHECK(a.domain_id == 1);
}

TEST_CASE("observation shape follows the world config") {
  SyntheticWorld w = cqs::generate_world(small_world_config());
  PlaceObservation obs = cqs::make_observation(w, 0, 0, 0);
  CHECK(obs.features.patches.rows() == 25);
  CHECK(obs.features.patches.cols() == 32);
}

TEST_CASE("invalid ids raise index errors") {
  SyntheticWorld w = cqs::generate_world(small_world_config());
  cqs::Rng rng(7);
  CHECK_THROWS_AS(cqs::render_observation(w, 99, 0, 0.0, rng), std::out_of_range);
  CHECK_THROWS_AS(cqs::render_observation(w, 0, 9, 0.0, rng), std::out_of_range);
}

TEST_CASE("same place across viewpoints aligns better than different places") {
  WorldConfig cfg = small_world_config();
  cfg.domains[0].noise_sigma = 0.0;
  SyntheticWorld w = cqs::generate_world(cfg);

  double mean_same = 0.0, mean_diff = 0.0;
  cqs::Rng trial_rng(2025);
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const std::size_t pa = trial_rng.below(12);
    std::size_t pb = trial_rng.below(11);
    if (pb >= pa) ++pb;
    const double va = 0.35 * trial_rng.uniform(-1.0, 1.0);
    const double vb = 0.35 * trial_rng.uniform(-1.0, 1.0);
    cqs::Rng r1(t), r2(t + 1), r3(t + 2);
    auto ma = mean_patch(cqs::render_observation(w, pa, 0, va, r1).features.patches);
    auto mb = mean_patch(cqs::render_observation(w, pa, 0, vb, r2).features.patches);
    auto mc = mean_patch(cqs::render_observation(w, pb, 0, vb, r3).features.patches);
    mean_same += cosine(ma, mb);
    mean_diff += cosine(ma, mc);
  }
  mean_same /= trials;
  mean_diff /= trials;
  CHECK(mean_same > mean_diff);
}

TEST_CASE("nearest-centroid separability on mean patch features") {
  // documented threshold: default sigma = 0.05 keeps places > 90% separable
  SyntheticWorld w = cqs::generate_world(small_world_config());
  const std::size_t places = w.config.num_places;

  std::vector<std::vector<double>> centroids(places);
  for (std::size_t p = 0; p < places; ++p) {
    std::vector<double> acc(w.config.c_o, 0.0);
    for (std::uint64_t o = 0; o < 3; ++o) {
      auto m = mean_patch(cqs::make_observation(w, p, 0, o).features.patches);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m[i];
    }
    for (double& v : acc) v /= 3.0;
    centroids[p] = acc;
  }

  std::size_t correct = 0, total = 0;
  for (std::size_t p = 0; p < places; ++p) {
    for (std::uint64_t o = 10; o < 12; ++o) {
      auto m = mean_patch(cqs::make_observation(w, p, 0, o).features.patches);
      std::size_t best = 0;
      double best_cos = -2.0;
      for (std::size_t c = 0; c < places; ++c) {
        const double cs = cosine(m, centroids[c]);
        if (cs > best_cos) {
          best_cos = cs;
          best = c;
        }
      }
      correct += best == p;
      ++total;
    }
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.9);
}
