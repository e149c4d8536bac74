#include "cqs/synth.hpp"

#include <cmath>
#include <stdexcept>

namespace cqs {

namespace {

constexpr std::uint64_t kWorldStream = 0xA17C0FFEEULL;

// Unit vector supported on [lo, hi) coordinates.
std::vector<double> random_unit(std::size_t dim, std::size_t lo, std::size_t hi, Rng& rng) {
  std::vector<double> v(dim, 0.0);
  double sq = 0.0;
  for (std::size_t i = lo; i < hi; ++i) {
    v[i] = rng.normal();
    sq += v[i] * v[i];
  }
  const double norm = std::sqrt(sq);
  if (norm < 1e-12) {
    v[lo] = 1.0;
    return v;
  }
  for (std::size_t i = lo; i < hi; ++i) v[i] /= norm;
  return v;
}

void apply_givens(Matrix& m, std::size_t i, std::size_t j, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t col = 0; col < m.cols(); ++col) {
    const double a = m(i, col);
    const double b = m(j, col);
    m(i, col) = c * a - s * b;
    m(j, col) = s * a + c * b;
  }
}

Matrix make_appearance_transform(std::size_t c_o, double angle_scale, Rng& rng) {
  Matrix a = Matrix::identity(c_o);
  // product of Givens rotations over random coordinate pairs: exactly orthogonal
  for (std::size_t t = 0; t < 2 * c_o; ++t) {
    const std::size_t i = rng.below(c_o);
    std::size_t j = rng.below(c_o - 1);
    if (j >= i) ++j;
    apply_givens(a, i, j, angle_scale * rng.uniform(-1.0, 1.0));
  }
  return a;
}

}  // namespace

SyntheticWorld generate_world(const WorldConfig& config) {
  if (config.num_places < 2) throw std::invalid_argument("world: need at least 2 places");
  if (config.c_o < 4) throw std::invalid_argument("world: c_o must be >= 4");
  if (config.grid < 1) throw std::invalid_argument("world: grid must be >= 1");
  if (config.domains.empty()) throw std::invalid_argument("world: need at least 1 domain");
  if (config.num_distractors < 1) throw std::invalid_argument("world: need distractors");
  for (const DomainConfig& d : config.domains) {
    if (d.noise_sigma < 0) throw std::invalid_argument("world: noise sigma must be >= 0");
    if (!(d.sampling_density > 0.0) || d.sampling_density > 1.0)
      throw std::invalid_argument("world: sampling density must be in (0, 1]");
  }

  // rough packing bound before attempting rejection sampling
  const double cells = config.area_m / config.min_separation_m + 1.0;
  if (static_cast<double>(config.num_places) > 0.5 * cells * cells) {
    throw std::runtime_error("world: cannot place " + std::to_string(config.num_places) +
                             " places with " + std::to_string(config.min_separation_m) +
                             " m separation in a " + std::to_string(config.area_m) +
                             " m area");
  }

  SyntheticWorld world;
  world.config = config;
  Rng rng(seed_combine(config.seed, kWorldStream));

  const std::size_t place_dims = config.c_o / 2;  // latents live in the first half
  world.place_latents = Matrix(config.num_places, config.c_o);
  for (std::size_t p = 0; p < config.num_places; ++p) {
    std::vector<double> z = random_unit(config.c_o, 0, place_dims, rng);
    for (std::size_t i = 0; i < config.c_o; ++i) world.place_latents(p, i) = z[i];
  }

  world.coords.reserve(config.num_places);
  const double min_sep_sq = config.min_separation_m * config.min_separation_m;
  for (std::size_t p = 0; p < config.num_places; ++p) {
    bool placed = false;
    for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
      const double x = rng.uniform(0.0, config.area_m);
      const double y = rng.uniform(0.0, config.area_m);
      bool ok = true;
      for (const auto& [px, py] : world.coords) {
        const double dx = x - px, dy = y - py;
        if (dx * dx + dy * dy < min_sep_sq) {
          ok = false;
          break;
        }
      }
      if (ok) {
        world.coords.emplace_back(x, y);
        placed = true;
      }
    }
    if (!placed) {
      throw std::runtime_error("world: rejection sampling failed after placing " +
                               std::to_string(world.coords.size()) + " of " +
                               std::to_string(config.num_places) + " places");
    }
  }

  world.distractors = Matrix(config.num_distractors, config.c_o);
  for (std::size_t k = 0; k < config.num_distractors; ++k) {
    std::vector<double> d = random_unit(config.c_o, place_dims, config.c_o, rng);
    for (std::size_t i = 0; i < config.c_o; ++i) world.distractors(k, i) = d[i];
  }

  world.landmark = random_unit(config.c_o, 0, config.c_o, rng);

  for (const DomainConfig& dc : config.domains) {
    DomainProfile prof;
    prof.config = dc;
    prof.appearance = make_appearance_transform(config.c_o, dc.appearance_angle, rng);
    prof.bias = random_unit(config.c_o, 0, config.c_o, rng);
    for (double& v : prof.bias) v *= dc.appearance_bias;
    world.domains.push_back(std::move(prof));
  }
  return world;
}

SyntheticWorld generate_world(std::size_t num_places, std::vector<DomainConfig> domains,
                              std::size_t c_o, std::uint64_t seed) {
  WorldConfig cfg;
  cfg.num_places = num_places;
  cfg.domains = std::move(domains);
  cfg.c_o = c_o;
  cfg.seed = seed;
  return generate_world(cfg);
}

PlaceObservation render_observation(const SyntheticWorld& world, std::size_t place_id,
                                    std::size_t domain_id, double viewpoint_angle, Rng& rng) {
  const WorldConfig& cfg = world.config;
  if (place_id >= cfg.num_places) {
    throw std::out_of_range("render: place id " + std::to_string(place_id) + " out of range [0, " +
                            std::to_string(cfg.num_places) + ")");
  }
  if (domain_id >= world.domains.size()) {
    throw std::out_of_range("render: domain id " + std::to_string(domain_id) +
                            " out of range [0, " + std::to_string(world.domains.size()) + ")");
  }
  const DomainProfile& dom = world.domains[domain_id];
  const std::size_t c_o = cfg.c_o;
  const std::size_t grid = cfg.grid;
  const std::size_t place_dims = c_o / 2;

  // viewpoint rotates the place latent inside its subspace (paired coordinates)
  std::vector<double> z(c_o);
  for (std::size_t i = 0; i < c_o; ++i) z[i] = world.place_latents(place_id, i);
  const double cv = std::cos(viewpoint_angle), sv = std::sin(viewpoint_angle);
  for (std::size_t t = 0; t + 1 < place_dims; t += 2) {
    const double a = z[t], b = z[t + 1];
    z[t] = cv * a - sv * b;
    z[t + 1] = sv * a + cv * b;
  }

  const double center_r = (static_cast<double>(grid) - 1.0) / 2.0;
  const double center_c = center_r + cfg.blob_shift * sv;
  const std::size_t n_k = cfg.num_distractors;
  const std::size_t phase =
      static_cast<std::size_t>((sv + 1.0) * 0.5 * static_cast<double>(n_k) +
                               static_cast<double>(domain_id)) % n_k;

  PlaceObservation obs;
  obs.place_id = static_cast<int>(place_id);
  obs.domain_id = static_cast<int>(domain_id);
  obs.features.patches = Matrix(grid * grid, c_o);

  std::vector<double> base(c_o);
  for (std::size_t p = 0; p < grid * grid; ++p) {
    const double r = static_cast<double>(p / grid);
    const double c = static_cast<double>(p % grid);
    const double d2 = (r - center_r) * (r - center_r) + (c - center_c) * (c - center_c);
    const double a_p = cfg.place_weight * std::exp(-d2 / (2.0 * cfg.blob_width * cfg.blob_width));
    const std::size_t k = (p + phase) % n_k;

    for (std::size_t i = 0; i < c_o; ++i) {
      base[i] = a_p * (z[i] + cfg.landmark_weight * world.landmark[i]) +
                cfg.clutter_weight * world.distractors(k, i);
    }

    double* out = obs.features.patches.row(p);
    for (std::size_t i = 0; i < c_o; ++i) {
      double v = dom.bias[i];
      const double* arow = dom.appearance.row(i);
      for (std::size_t j = 0; j < c_o; ++j) v += arow[j] * base[j];
      out[i] = v;
    }
    if (dom.config.noise_sigma > 0.0) {
      for (std::size_t i = 0; i < c_o; ++i) out[i] += dom.config.noise_sigma * rng.normal();
    }
    for (std::size_t i = 0; i < c_o; ++i) out[i] *= cfg.feature_scale;
  }

  const double jr = cfg.position_jitter_m * rng.uniform();
  const double ja = 2.0 * 3.14159265358979323846 * rng.uniform();
  obs.x_m = world.coords[place_id].first + jr * std::cos(ja);
  obs.y_m = world.coords[place_id].second + jr * std::sin(ja);
  return obs;
}

std::string observation_id(std::size_t place_id, std::size_t domain_id, std::uint64_t obs_index) {
  return "p" + std::to_string(place_id) + "_d" + std::to_string(domain_id) + "_o" +
         std::to_string(obs_index);
}

PlaceObservation make_observation(const SyntheticWorld& world, std::size_t place_id,
                                  std::size_t domain_id, std::uint64_t obs_index) {
  if (domain_id >= world.domains.size()) {
    throw std::out_of_range("make_observation: domain id " + std::to_string(domain_id) +
                            " out of range [0, " + std::to_string(world.domains.size()) + ")");
  }
  std::uint64_t s = seed_combine(world.config.seed, 0x0B5E47A7ULL);
  s = seed_combine(s, place_id);
  s = seed_combine(s, domain_id);
  // consecutive observation pairs share a camera pose (burst captures); noise
  // and position jitter still differ per observation
  Rng pose_rng(seed_combine(s, obs_index >> 1));
  Rng rng(seed_combine(s, obs_index));
  const double spread = world.domains[domain_id].config.viewpoint_spread;
  const double viewpoint = spread * pose_rng.uniform(-1.0, 1.0);
  PlaceObservation obs = render_observation(world, place_id, domain_id, viewpoint, rng);
  obs.frame_idx = static_cast<long>(obs_index);
  obs.features.image_id = observation_id(place_id, domain_id, obs_index);
  return obs;
}

}  // namespace cqs
