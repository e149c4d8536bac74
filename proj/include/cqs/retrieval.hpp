#pragma once

#include <string>
#include <variant>
#include <vector>

#include "cqs/aggregator.hpp"

namespace cqs {

struct PlanarPos {
  double x_m = 0.0;
  double y_m = 0.0;
};
struct GeoPos {
  double lat_deg = 0.0;
  double lon_deg = 0.0;
};
struct FramePos {
  long frame = 0;
};
using Position = std::variant<PlanarPos, GeoPos, FramePos>;

struct PlaceRecord {
  Descriptor descriptor;  // unit norm
  Position position;
  std::string dataset;
};

struct PositiveCriterion {
  enum class Kind { DistanceMeters, Frames };
  Kind kind = Kind::DistanceMeters;
  double threshold = 25.0;

  static PositiveCriterion distance_m(double threshold);
  static PositiveCriterion frames(double threshold);
  std::string to_string() const;  // "distance:25" / "frames:10"
};

// Immutable exhaustive-search index over unit-norm descriptors.
class RetrievalIndex {
 public:
  static RetrievalIndex build(const std::vector<PlaceRecord>& records);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::string& id(std::size_t row) const { return ids_[row]; }
  const Position& position(std::size_t row) const { return positions_[row]; }
  const double* row(std::size_t r) const { return packed_.row(r); }

  struct Hit {
    std::size_t row = 0;
    std::string id;
    double score = 0.0;
  };
  struct TopK {
    std::vector<Hit> hits;       // descending score, ties by ascending id
    bool truncated = false;      // k exceeded the index size
  };
  TopK top_k(const Descriptor& query, std::size_t k) const;

  // Descriptor binary file plus ".ids" sidecar. Positions are not stored;
  // loaded indexes carry FramePos{row} placeholders.
  void save(const std::string& path) const;
  static RetrievalIndex load(const std::string& path);

 private:
  Matrix packed_;  // size x dim
  std::vector<std::string> ids_;
  std::vector<Position> positions_;
  std::size_t dim_ = 0;
};

struct RecallReport {
  double recall = 0.0;
  std::size_t evaluated = 0;  // queries with at least one positive in the database
  std::size_t excluded = 0;   // queries with none (left out of the denominator)
};

// Fraction of queries whose top-k contains a record positive under the
// criterion. Distance uses planar Euclidean for (x, y) positions, haversine
// for geodetic ones, |frame delta| for frame positions.
RecallReport recall_at_k(const std::vector<PlaceRecord>& queries, const RetrievalIndex& index,
                         std::size_t k, const PositiveCriterion& criterion);

// Great-circle distance in meters, Earth radius 6,371,000 m.
double haversine_m(double lat1_deg, double lon1_deg, double lat2_deg, double lon2_deg);

double position_distance(const Position& a, const Position& b, PositiveCriterion::Kind kind);

}  // namespace cqs
