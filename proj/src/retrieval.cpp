#include "cqs/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "cqs/io.hpp"

namespace cqs {

PositiveCriterion PositiveCriterion::distance_m(double threshold) {
  if (!(threshold > 0)) throw std::invalid_argument("criterion: threshold must be positive");
  return {Kind::DistanceMeters, threshold};
}

PositiveCriterion PositiveCriterion::frames(double threshold) {
  if (!(threshold > 0)) throw std::invalid_argument("criterion: threshold must be positive");
  return {Kind::Frames, threshold};
}

std::string PositiveCriterion::to_string() const {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s:%g",
                kind == Kind::DistanceMeters ? "distance" : "frames", threshold);
  return buf;
}

RetrievalIndex RetrievalIndex::build(const std::vector<PlaceRecord>& records) {
  if (records.empty()) throw std::invalid_argument("build_index: no records");
  const std::size_t dim = records[0].descriptor.values.size();

  RetrievalIndex index;
  index.dim_ = dim;
  index.packed_ = Matrix(records.size(), dim);
  index.ids_.reserve(records.size());
  index.positions_.reserve(records.size());

  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& values = records[r].descriptor.values;
    if (values.size() != dim) {
      throw std::invalid_argument("build_index: record " + std::to_string(r) + " has dim " +
                                  std::to_string(values.size()) + ", expected " +
                                  std::to_string(dim));
    }
    double sq = 0.0;
    for (double v : values) sq += v * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-5) {
      throw std::invalid_argument("build_index: record " + std::to_string(r) +
                                  " is not unit norm (|v| = " + std::to_string(std::sqrt(sq)) +
                                  ")");
    }
    std::copy(values.begin(), values.end(), index.packed_.row(r));
    index.ids_.push_back(records[r].descriptor.image_id);
    index.positions_.push_back(records[r].position);
  }
  return index;
}

RetrievalIndex::TopK RetrievalIndex::top_k(const Descriptor& query, std::size_t k) const {
  if (k < 1) throw std::invalid_argument("top_k: k must be >= 1");
  if (query.values.size() != dim_) {
    throw std::invalid_argument("top_k: query dim " + std::to_string(query.values.size()) +
                                ", index dim " + std::to_string(dim_));
  }
  std::vector<std::pair<double, std::size_t>> scored(size());
  for (std::size_t r = 0; r < size(); ++r) {
    const double* row = packed_.row(r);
    double acc = 0.0;
    for (std::size_t j = 0; j < dim_; ++j) acc += row[j] * query.values[j];
    scored[r] = {acc, r};
  }
  std::sort(scored.begin(), scored.end(), [this](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return ids_[a.second] < ids_[b.second];
  });

  TopK result;
  result.truncated = k > size();
  const std::size_t take = std::min(k, size());
  result.hits.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    result.hits.push_back({scored[i].second, ids_[scored[i].second], scored[i].first});
  }
  return result;
}

void RetrievalIndex::save(const std::string& path) const {
  std::vector<Descriptor> descriptors(size());
  for (std::size_t r = 0; r < size(); ++r) {
    descriptors[r].image_id = ids_[r];
    descriptors[r].values.assign(packed_.row(r), packed_.row(r) + dim_);
  }
  write_descriptor_file(path, descriptors);
}

RetrievalIndex RetrievalIndex::load(const std::string& path) {
  std::vector<Descriptor> descriptors = read_descriptor_file(path);
  std::vector<PlaceRecord> records(descriptors.size());
  for (std::size_t r = 0; r < descriptors.size(); ++r) {
    // float32 storage perturbs the norm slightly; restore unit scale
    double sq = 0.0;
    for (double v : descriptors[r].values) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > 0) {
      for (double& v : descriptors[r].values) v /= norm;
    }
    records[r].descriptor = std::move(descriptors[r]);
    records[r].position = FramePos{static_cast<long>(r)};
  }
  return build(records);
}

double haversine_m(double lat1_deg, double lon1_deg, double lat2_deg, double lon2_deg) {
  for (double lat : {lat1_deg, lat2_deg}) {
    if (lat < -90.0 || lat > 90.0)
      throw std::invalid_argument("haversine: latitude " + std::to_string(lat) +
                                  " outside [-90, 90]");
  }
  for (double lon : {lon1_deg, lon2_deg}) {
    if (lon < -180.0 || lon > 180.0)
      throw std::invalid_argument("haversine: longitude " + std::to_string(lon) +
                                  " outside [-180, 180]");
  }
  constexpr double kEarthRadiusM = 6371000.0;
  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  const double phi1 = lat1_deg * kDegToRad;
  const double phi2 = lat2_deg * kDegToRad;
  const double dphi = (lat2_deg - lat1_deg) * kDegToRad;
  const double dlam = (lon2_deg - lon1_deg) * kDegToRad;
  const double sp = std::sin(dphi / 2.0);
  const double sl = std::sin(dlam / 2.0);
  const double a = sp * sp + std::cos(phi1) * std::cos(phi2) * sl * sl;
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

double position_distance(const Position& a, const Position& b, PositiveCriterion::Kind kind) {
  if (a.index() != b.index()) {
    throw std::invalid_argument("criterion: query and database position kinds differ");
  }
  if (kind == PositiveCriterion::Kind::Frames) {
    if (!std::holds_alternative<FramePos>(a)) {
      throw std::invalid_argument("criterion: frames criterion on non-frame positions");
    }
    return std::abs(static_cast<double>(std::get<FramePos>(a).frame) -
                    static_cast<double>(std::get<FramePos>(b).frame));
  }
  if (std::holds_alternative<PlanarPos>(a)) {
    const auto& pa = std::get<PlanarPos>(a);
    const auto& pb = std::get<PlanarPos>(b);
    return std::hypot(pa.x_m - pb.x_m, pa.y_m - pb.y_m);
  }
  if (std::holds_alternative<GeoPos>(a)) {
    const auto& ga = std::get<GeoPos>(a);
    const auto& gb = std::get<GeoPos>(b);
    return haversine_m(ga.lat_deg, ga.lon_deg, gb.lat_deg, gb.lon_deg);
  }
  throw std::invalid_argument("criterion: distance criterion on frame positions");
}

RecallReport recall_at_k(const std::vector<PlaceRecord>& queries, const RetrievalIndex& index,
                         std::size_t k, const PositiveCriterion& criterion) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  RecallReport report;
  std::size_t hits = 0;
  for (const PlaceRecord& q : queries) {
    bool has_positive = false;
    for (std::size_t r = 0; r < index.size(); ++r) {
      if (position_distance(q.position, index.position(r), criterion.kind) <=
          criterion.threshold) {
        has_positive = true;
        break;
      }
    }
    if (!has_positive) {
      ++report.excluded;
      continue;
    }
    ++report.evaluated;
    RetrievalIndex::TopK top = index.top_k(q.descriptor, k);
    for (const auto& hit : top.hits) {
      if (position_distance(q.position, index.position(hit.row), criterion.kind) <=
          criterion.threshold) {
        ++hits;
        break;
      }
    }
  }
  report.recall = report.evaluated ? static_cast<double>(hits) /
                                         static_cast<double>(report.evaluated)
                                   : 0.0;
  return report;
}

}  // namespace cqs
