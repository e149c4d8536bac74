#include "cqs/coding_rate.hpp"

#include <cmath>
#include <stdexcept>

namespace cqs {

void CodingRateConfig::validate() const {
  if (!(epsilon > 0)) throw std::invalid_argument("coding rate: epsilon must be positive");
}

double coding_rate(const Matrix& p_hat, const CodingRateConfig& cfg) {
  cfg.validate();
  if (!p_hat.all_finite()) throw std::invalid_argument("coding_rate: non-finite input");
  const std::size_t n_q = p_hat.rows();
  const std::size_t c_f = p_hat.cols();
  if (n_q == 0 || c_f == 0) throw std::invalid_argument("coding_rate: empty input");

  const double coeff =
      static_cast<double>(c_f) / (static_cast<double>(n_q) * cfg.epsilon * cfg.epsilon);

  // M = I + coeff * P^T P, symmetric positive definite
  Matrix m = matmul_atb(p_hat, p_hat);
  scale_in_place(m, coeff);
  for (std::size_t i = 0; i < c_f; ++i) m(i, i) += 1.0;

  // in-place lower Cholesky; logdet(M) = 2 * sum log L_ii
  double log_det_half = 0.0;
  for (std::size_t j = 0; j < c_f; ++j) {
    double diag = m(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= m(j, k) * m(j, k);
    if (!(diag > 0.0)) {
      throw std::runtime_error("coding_rate: factorization failed at pivot " +
                               std::to_string(j) + " (value " + std::to_string(diag) +
                               ", matrix " + m.shape_str() + ")");
    }
    const double ljj = std::sqrt(diag);
    m(j, j) = ljj;
    log_det_half += std::log(ljj);
    for (std::size_t i = j + 1; i < c_f; ++i) {
      double v = m(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= m(i, k) * m(j, k);
      m(i, j) = v / ljj;
    }
  }
  return log_det_half;  // = 1/2 * logdet(M)
}

RateHistogram rate_histogram(const std::vector<Matrix>& features, const CodingRateConfig& cfg,
                             std::size_t bins, std::string label) {
  if (features.empty()) throw std::invalid_argument("rate_histogram: empty feature list");
  if (bins == 0) throw std::invalid_argument("rate_histogram: bins must be >= 1");

  RateHistogram h;
  h.label = std::move(label);
  h.rates.reserve(features.size());
  for (const Matrix& f : features) h.rates.push_back(coding_rate(f, cfg));

  double lo = h.rates[0], hi = h.rates[0];
  for (double r : h.rates) {
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  if (hi - lo < 1e-12) {  // degenerate range; widen so edges stay strictly increasing
    lo -= 0.5;
    hi += 0.5;
  }

  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i)
    h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  h.counts.assign(bins, 0);
  for (double r : h.rates) {
    std::size_t b = static_cast<std::size_t>((r - lo) / (hi - lo) * static_cast<double>(bins));
    if (b >= bins) b = bins - 1;
    ++h.counts[b];
  }

  double sum = 0.0;
  for (double r : h.rates) sum += r;
  h.mean = sum / static_cast<double>(h.rates.size());
  double var = 0.0;
  for (double r : h.rates) var += (r - h.mean) * (r - h.mean);
  h.variance = var / static_cast<double>(h.rates.size());
  return h;
}

}  // namespace cqs
