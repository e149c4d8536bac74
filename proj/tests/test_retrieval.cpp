#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "cqs/retrieval.hpp"
#include "oracles.hpp"

using cqs::Descriptor;
using cqs::PlaceRecord;
using cqs::PositiveCriterion;
using cqs::RetrievalIndex;

namespace {

Descriptor unit_descriptor(std::vector<double> values, const std::string& id) {
  double sq = 0.0;
  for (double v : values) sq += v * v;
  const double n = std::sqrt(sq);
  for (double& v : values) v /= n;
  return {std::move(values), id};
}

std::vector<PlaceRecord> random_records(std::size_t count, std::size_t dim, cqs::Rng& rng) {
  std::vector<PlaceRecord> records;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.uniform(-1, 1);
    char id[16];
    std::snprintf(id, sizeof(id), "rec%03zu", i);
    PlaceRecord r;
    r.descriptor = unit_descriptor(std::move(v), id);
    r.position = cqs::PlanarPos{rng.uniform(0, 1000), rng.uniform(0, 1000)};
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace

TEST_CASE("build_index basic contracts") {
  cqs::Rng rng(281);
  std::vector<PlaceRecord> records = random_records(3, 8, rng);
  RetrievalIndex index = RetrievalIndex::build(records);
  CHECK(index.size() == 3);
  CHECK(index.dim() == 8);

  records.push_back(records[0]);
  records.back().descriptor.values.resize(4);
  CHECK_THROWS_AS(RetrievalIndex::build(records), std::invalid_argument);

  std::vector<PlaceRecord> bad = random_records(2, 8, rng);
  for (double& v : bad[1].descriptor.values) v *= 2.0;
  CHECK_THROWS_WITH_AS(RetrievalIndex::build(bad), doctest::Contains("unit norm"),
                       std::invalid_argument);
}

TEST_CASE("top_k self-match ranks first with unit score") {
  cqs::Rng rng(283);
  std::vector<PlaceRecord> records = random_records(10, 16, rng);
  RetrievalIndex index = RetrievalIndex::build(records);
  RetrievalIndex::TopK top = index.top_k(records[4].descriptor, 3);
  CHECK(top.hits[0].id == "rec004");
  CHECK(std::abs(top.hits[0].score - 1.0) < 1e-6);
  CHECK_FALSE(top.truncated);
}

TEST_CASE("top_k with k equal to the index size is a permutation") {
  cqs::Rng rng(293);
  std::vector<PlaceRecord> records = random_records(12, 8, rng);
  RetrievalIndex index = RetrievalIndex::build(records);
  RetrievalIndex::TopK top = index.top_k(records[0].descriptor, 12);
  std::set<std::string> ids;
  for (const auto& hit : top.hits) ids.insert(hit.id);
  CHECK(ids.size() == 12);
}

TEST_CASE("top_k matches the naive full-sort oracle") {
  cqs::Rng rng(307);
  std::vector<PlaceRecord> records = random_records(20, 8, rng);
  RetrievalIndex index = RetrievalIndex::build(records);
  std::vector<double> q(8);
  for (double& x : q) x = rng.uniform(-1, 1);
  Descriptor query = unit_descriptor(std::move(q), "query");

  std::vector<std::pair<double, std::string>> scored;
  for (const PlaceRecord& r : records) {
    double acc = 0.0;
    for (std::size_t i = 0; i < 8; ++i) acc += r.descriptor.values[i] * query.values[i];
    scored.push_back({acc, r.descriptor.image_id});
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  RetrievalIndex::TopK top = index.top_k(query, 5);
  REQUIRE(top.hits.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(top.hits[i].id == scored[i].second);
    CHECK(top.hits[i].score == scored[i].first);
  }
}

TEST_CASE("top_k beyond the index size truncates with a flag") {
  cqs::Rng rng(311);
  std::vector<PlaceRecord> records = random_records(4, 8, rng);
  RetrievalIndex index = RetrievalIndex::build(records);
  RetrievalIndex::TopK top = index.top_k(records[0].descriptor, 9);
  CHECK(top.hits.size() == 4);
  CHECK(top.truncated);
}

TEST_CASE("top_k breaks exact ties by ascending id") {
  std::vector<PlaceRecord> records;
  for (const char* id : {"b_img", "a_img", "c_img"}) {
    PlaceRecord r;
    r.descriptor = unit_descriptor({1, 1, 0}, id);
    r.position = cqs::PlanarPos{0, 0};
    records.push_back(r);
  }
  RetrievalIndex index = RetrievalIndex::build(records);
  RetrievalIndex::TopK top = index.top_k(records[0].descriptor, 3);
  CHECK(top.hits[0].id == "a_img");
  CHECK(top.hits[1].id == "b_img");
  CHECK(top.hits[2].id == "c_img");
}

TEST_CASE("inner-product and euclidean rankings coincide on unit vectors") {
  cqs::Rng rng(313);
  std::vector<PlaceRecord> records = random_records(15, 6, rng);
  RetrievalIndex index = RetrievalIndex::build(records);
  std::vector<double> q(6);
  for (double& x : q) x = rng.uniform(-1, 1);
  Descriptor query = unit_descriptor(std::move(q), "q");

  RetrievalIndex::TopK top = index.top_k(query, 15);
  std::vector<std::pair<double, std::string>> by_euclid;
  for (const PlaceRecord& r : records) {
    double sq = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      const double d = r.descriptor.values[i] - query.values[i];
      sq += d * d;
    }
    by_euclid.push_back({sq, r.descriptor.image_id});
  }
  std::sort(by_euclid.begin(), by_euclid.end());
  for (std::size_t i = 0; i < 15; ++i) CHECK(top.hits[i].id == by_euclid[i].second);
}

TEST_CASE("recall_at_k exact-position query") {
  cqs::Rng rng(317);
  std::vector<PlaceRecord> records = random_records(6, 8, rng);
  RetrievalIndex index = RetrievalIndex::build(records);
  std::vector<PlaceRecord> queries{records[2]};  // same descriptor and position
  cqs::RecallReport r = cqs::recall_at_k(queries, index, 1, PositiveCriterion::distance_m(25));
  CHECK(r.recall == 1.0);
  CHECK(r.evaluated == 1);
  CHECK(r.excluded == 0);
}

TEST_CASE("recall_at_k matches a hand-enumerated brute-force oracle") {
  cqs::Rng rng(331);
  std::vector<PlaceRecord> db = random_records(10, 8, rng);
  std::vector<PlaceRecord> queries = random_records(10, 8, rng);
  RetrievalIndex index = RetrievalIndex::build(db);
  const PositiveCriterion criterion = PositiveCriterion::distance_m(300);

  for (std::size_t k : {1, 3, 5}) {
    std::size_t hits = 0, evaluated = 0;
    for (const PlaceRecord& q : queries) {
      bool any = false;
      for (const PlaceRecord& r : db) {
        if (cqs::position_distance(q.position, r.position, criterion.kind) <= 300) any = true;
      }
      if (!any) continue;
      ++evaluated;
      std::vector<std::pair<double, std::size_t>> scored;
      for (std::size_t i = 0; i < db.size(); ++i) {
        double acc = 0.0;
        for (std::size_t d = 0; d < 8; ++d)
          acc += db[i].descriptor.values[d] * q.descriptor.values[d];
        scored.push_back({acc, i});
      }
      std::sort(scored.begin(), scored.end(),
                [](const auto& a, const auto& b) { return a.first > b.first; });
      for (std::size_t i = 0; i < k; ++i) {
        if (cqs::position_distance(q.position, db[scored[i].second].position, criterion.kind) <=
            300) {
          ++hits;
          break;
        }
      }
    }
    cqs::RecallReport got = cqs::recall_at_k(queries, index, k, criterion);
    CHECK(got.evaluated == evaluated);
    CHECK(got.recall ==
          doctest::Approx(static_cast<double>(hits) / static_cast<double>(evaluated)));
  }
}

TEST_CASE("recall_at_k is non-decreasing in k and counts exclusions") {
  cqs::Rng rng(337);
  std::vector<PlaceRecord> db = random_records(20, 8, rng);
  std::vector<PlaceRecord> queries = random_records(8, 8, rng);
  queries.push_back(queries[0]);
  queries.back().position = cqs::PlanarPos{1e7, 1e7};  // no positives anywhere
  RetrievalIndex index = RetrievalIndex::build(db);
  const PositiveCriterion criterion = PositiveCriterion::distance_m(400);
  double prev = 0.0;
  for (std::size_t k = 1; k <= 20; k += 3) {
    cqs::RecallReport r = cqs::recall_at_k(queries, index, k, criterion);
    CHECK(r.recall >= prev);
    CHECK(r.excluded == 1);
    prev = r.recall;
  }
}

TEST_CASE("frame criterion thresholds order recall") {
  cqs::Rng rng(347);
  // two traversals of the same route: database frame i, query frame i
  std::vector<PlaceRecord> db, queries;
  for (int i = 0; i < 12; ++i) {
    std::vector<double> v(8);
    for (double& x : v) x = rng.uniform(-1, 1);
    PlaceRecord r;
    r.descriptor = unit_descriptor(v, "db" + std::to_string(i));
    r.position = cqs::FramePos{i};
    db.push_back(r);
    // query descriptor: noisy copy, sometimes matched to the wrong frame
    for (double& x : v) x += rng.uniform(-0.9, 0.9);
    PlaceRecord q;
    q.descriptor = unit_descriptor(v, "q" + std::to_string(i));
    q.position = cqs::FramePos{i};
    queries.push_back(q);
  }
  RetrievalIndex index = RetrievalIndex::build(db);
  const double r1 = cqs::recall_at_k(queries, index, 1, PositiveCriterion::frames(1)).recall;
  const double r10 = cqs::recall_at_k(queries, index, 1, PositiveCriterion::frames(10)).recall;
  CHECK(r1 <= r10);
}

TEST_CASE("mixed position kinds raise a criterion error") {
  cqs::Rng rng(349);
  std::vector<PlaceRecord> db = random_records(3, 8, rng);
  std::vector<PlaceRecord> queries = random_records(1, 8, rng);
  queries[0].position = cqs::FramePos{0};
  RetrievalIndex index = RetrievalIndex::build(db);
  CHECK_THROWS_AS(cqs::recall_at_k(queries, index, 1, PositiveCriterion::distance_m(25)),
                  std::invalid_argument);
}

TEST_CASE("haversine basics") {
  CHECK(cqs::haversine_m(12.5, 40.0, 12.5, 40.0) == 0.0);
  // antipodal points on the equator: half the circumference
  CHECK(cqs::haversine_m(0, 0, 0, 180) ==
        doctest::Approx(3.14159265358979 * 6371000.0).epsilon(1e-9));
  CHECK_THROWS_AS(cqs::haversine_m(95, 0, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(cqs::haversine_m(0, 190, 0, 0), std::invalid_argument);
}

TEST_CASE("haversine agrees with the law-of-cosines oracle nearby") {
  const double got = cqs::haversine_m(0, 0, 0, 0.001);
  CHECK(got == doctest::Approx(111.195).epsilon(1e-3));
  const double want = oracle::law_of_cosines_m(0, 0, 0, 0.001);
  CHECK(std::abs(got - want) / want < 1e-6);

  cqs::Rng rng(353);
  for (int t = 0; t < 10; ++t) {
    const double lat1 = rng.uniform(-60, 60), lon1 = rng.uniform(-170, 170);
    const double lat2 = lat1 + rng.uniform(-0.5, 0.5), lon2 = lon1 + rng.uniform(-0.5, 0.5);
    const double a = cqs::haversine_m(lat1, lon1, lat2, lon2);
    const double b = oracle::law_of_cosines_m(lat1, lon1, lat2, lon2);
    CHECK(std::abs(a - b) / std::max(1.0, b) < 1e-6);
  }
}

TEST_CASE("geodetic positions use the haversine distance") {
  cqs::Rng rng(359);
  std::vector<PlaceRecord> db = random_records(2, 4, rng);
  db[0].position = cqs::GeoPos{48.8584, 2.2945};
  db[1].position = cqs::GeoPos{48.8584, 2.2948};  // ~22 m east
  std::vector<PlaceRecord> queries{db[0]};
  RetrievalIndex index = RetrievalIndex::build(db);
  cqs::RecallReport r = cqs::recall_at_k(queries, index, 1, PositiveCriterion::distance_m(25));
  CHECK(r.recall == 1.0);
}

TEST_CASE("index save/load round trip preserves top-k results") {
  namespace fs = std::filesystem;
  cqs::Rng rng(367);
  std::vector<PlaceRecord> records = random_records(14, 8, rng);
  RetrievalIndex index = RetrievalIndex::build(records);
  const std::string path = (fs::temp_directory_path() / "cqs_index_test.bin").string();
  index.save(path);
  RetrievalIndex loaded = RetrievalIndex::load(path);

  std::vector<double> q(8);
  for (double& x : q) x = rng.uniform(-1, 1);
  Descriptor query = unit_descriptor(std::move(q), "q");
  RetrievalIndex::TopK a = index.top_k(query, 6);
  RetrievalIndex::TopK b = loaded.top_k(query, 6);
  REQUIRE(a.hits.size() == b.hits.size());
  for (std::size_t i = 0; i < a.hits.size(); ++i) CHECK(a.hits[i].id == b.hits[i].id);
  fs::remove(path);
  fs::remove(path + ".ids");
}
