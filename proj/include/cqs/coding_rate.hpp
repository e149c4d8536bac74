#pragma once

#include <string>
#include <vector>

#include "cqs/matrix.hpp"

namespace cqs {

struct CodingRateConfig {
  double epsilon = 0.001;  // prescribed precision
  void validate() const;
};

// Information capacity of an n_q x c_f feature matrix:
//   R = 1/2 * logdet(I + c_f / (n_q * eps^2) * P^T P)
// in nats, computed through a Cholesky factorization of the SPD argument.
double coding_rate(const Matrix& p_hat, const CodingRateConfig& cfg = {});

struct RateHistogram {
  std::vector<double> edges;        // strictly increasing, bins.size() + 1 entries
  std::vector<std::size_t> counts;  // sums to the sample count
  std::string label;
  double mean = 0.0;
  double variance = 0.0;
  std::vector<double> rates;        // per-image rates in input order
};

RateHistogram rate_histogram(const std::vector<Matrix>& features, const CodingRateConfig& cfg,
                             std::size_t bins, std::string label = "");

}  // namespace cqs
