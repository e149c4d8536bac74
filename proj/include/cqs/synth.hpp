#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cqs/aggregator.hpp"
#include "cqs/matrix.hpp"
#include "cqs/rng.hpp"

namespace cqs {

// Scalar knobs for one synthetic dataset/condition. The orthogonal appearance
// transform and bias are materialized from these at world-generation time.
struct DomainConfig {
  double viewpoint_spread = 0.35;  // radians; ~0 models a fixed front view
  double appearance_angle = 0.9;   // strength of the orthogonal appearance transform
  double appearance_bias = 0.8;    // magnitude of the additive appearance bias
  double noise_sigma = 0.05;
  double sampling_density = 1.0;   // fraction of this dataset's places observed
};

struct DomainProfile {
  DomainConfig config;
  Matrix appearance;         // c_o x c_o orthogonal
  std::vector<double> bias;  // length c_o
};

struct WorldConfig {
  std::uint64_t seed = 1;
  std::size_t num_places = 60;
  std::size_t c_o = 64;
  std::size_t grid = 7;  // patch grid side, P = grid * grid
  double area_m = 2000.0;
  double min_separation_m = 50.0;
  std::size_t num_distractors = 6;
  double place_weight = 0.6;      // peak weight of the place latent in the patch blob
  double blob_width = 1.3;        // patch-grid stddev of the blob
  double blob_shift = 2.0;        // patches the blob center moves per unit sin(viewpoint)
  double clutter_weight = 1.0;
  double landmark_weight = 1.0;  // shared "landmarkness" cue on place-bearing patches
  double feature_scale = 8.0;    // overall feature magnitude, per-coordinate ~O(1)
  double position_jitter_m = 5.0;
  std::vector<DomainConfig> domains;
};

struct SyntheticWorld {
  WorldConfig config;
  Matrix place_latents;  // num_places x c_o, unit rows in the place subspace
  std::vector<std::pair<double, double>> coords;  // meters, pairwise >= min separation
  Matrix distractors;    // num_distractors x c_o, unit rows in the clutter subspace
  std::vector<double> landmark;  // unit vector shared by all place-bearing patches
  std::vector<DomainProfile> domains;

  std::size_t patch_count() const { return config.grid * config.grid; }
};

struct PlaceObservation {
  FeatureMap features;
  int place_id = -1;
  int domain_id = -1;
  double x_m = 0.0;
  double y_m = 0.0;
  long frame_idx = -1;
};

SyntheticWorld generate_world(const WorldConfig& config);
SyntheticWorld generate_world(std::size_t num_places, std::vector<DomainConfig> domains,
                              std::size_t c_o, std::uint64_t seed);

// Patch features: domain-transformed mixture of the viewpoint-rotated place
// latent (a Gaussian blob on the patch grid whose center tracks the viewpoint)
// and shared distractor latents, plus Gaussian noise drawn from rng.
PlaceObservation render_observation(const SyntheticWorld& world, std::size_t place_id,
                                    std::size_t domain_id, double viewpoint_angle, Rng& rng);

// Deterministic observation: the viewpoint and the render generator are both
// derived from (world seed, place, domain, obs_index).
PlaceObservation make_observation(const SyntheticWorld& world, std::size_t place_id,
                                  std::size_t domain_id, std::uint64_t obs_index);

std::string observation_id(std::size_t place_id, std::size_t domain_id, std::uint64_t obs_index);

}  // namespace cqs
