#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "airformer/dartboard.hpp"
#include "airformer/grad_check.hpp"
#include "test_util.hpp"

using namespace airformer;

namespace {

using Vec3 = std::array<double, 3>;

Vec3 unit_vector(const GeoPoint& p) {
  const double la = p.latitude * std::numbers::pi / 180.0;
  const double lo = p.longitude * std::numbers::pi / 180.0;
  return {std::cos(la) * std::cos(lo), std::cos(la) * std::sin(lo), std::sin(la)};
}
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

// Angle between unit vectors, times the earth radius.
double vector_distance_km(const GeoPoint& a, const GeoPoint& b) {
  const Vec3 u = unit_vector(a), v = unit_vector(b);
  const Vec3 c = cross(u, v);
  return kEarthRadiusKm * std::atan2(std::sqrt(dot(c, c)), dot(u, v));
}

// Bearing from the local east/north frame: the tangent of the great circle
// towards b is the component of b orthogonal to a.
double vector_bearing_deg(const GeoPoint& a, const GeoPoint& b) {
  const double lo = a.longitude * std::numbers::pi / 180.0;
  const double la = a.latitude * std::numbers::pi / 180.0;
  const Vec3 east{-std::sin(lo), std::cos(lo), 0.0};
  const Vec3 north{-std::sin(la) * std::cos(lo), -std::sin(la) * std::sin(lo),
                   std::cos(la)};
  const Vec3 v = unit_vector(b);
  double deg = std::atan2(dot(v, east), dot(v, north)) * 180.0 / std::numbers::pi;
  if (deg < 0.0) deg += 360.0;
  return deg;
}

StationSet random_stations(std::size_t n, std::mt19937_64& rng, double lat0 = 35.0,
                           double lon0 = 110.0, double spread = 3.0) {
  std::uniform_real_distribution<double> d(-spread, spread);
  std::vector<Station> s;
  for (std::size_t i = 0; i < n; ++i) {
    s.push_back({"s" + std::to_string(i), {lat0 + d(rng), lon0 + d(rng)}});
  }
  return StationSet(std::move(s));
}

// Tests each (ring, sector) cell against its geometric definition.
std::optional<std::size_t> brute_force_region(const DartboardSpec& spec,
                                              const GeoPoint& q, const GeoPoint& p) {
  const double dist = vector_distance_km(q, p);
  const double bearing = vector_bearing_deg(q, p);
  const double width = 360.0 / static_cast<double>(spec.n_sectors);
  std::optional<std::size_t> found;
  for (std::size_t r = 0; r < spec.n_rings(); ++r) {
    const double inner = r == 0 ? -1.0 : spec.radii_km[r - 1];
    if (!(dist > inner && dist <= spec.radii_km[r])) continue;
    for (std::size_t s = 0; s < spec.n_sectors; ++s) {
      const double lo = spec.sector_offset_deg + static_cast<double>(s) * width;
      double rel = bearing - lo;
      while (rel < 0.0) rel += 360.0;
      while (rel >= 360.0) rel -= 360.0;
      if (rel < width) {
        EXPECT_FALSE(found.has_value()) << "cells overlap";
        found = 1 + r * spec.n_sectors + s;
      }
    }
  }
  return found;
}

}  // namespace

TEST(Geometry, SamePointHasZeroDistance) {
  const GeoPoint p{31.2, 121.5};
  EXPECT_EQ(haversine_km(p, p), 0.0);
}

TEST(Geometry, AntipodalOnEquatorIsHalfCircumference) {
  EXPECT_NEAR(haversine_km({0, 0}, {0, 180}), std::numbers::pi * kEarthRadiusKm, 1e-9);
}

TEST(Geometry, PairwiseDistancesSymmetricWithZeroDiagonal) {
  std::mt19937_64 rng(3);
  const auto st = random_stations(12, rng, 30.0, 100.0, 20.0);
  const auto d = pairwise_distance_km(st);
  for (std::size_t i = 0; i < st.size(); ++i) {
    EXPECT_EQ(d[i * st.size() + i], 0.0);
    for (std::size_t j = 0; j < st.size(); ++j) {
      EXPECT_EQ(d[i * st.size() + j], d[j * st.size() + i]);
      EXPECT_NEAR(d[i * st.size() + j],
                  vector_distance_km(st[i].location, st[j].location), 1e-6);
    }
  }
}

TEST(Geometry, OutOfRangeCoordinatesRejected) {
  EXPECT_THROW(StationSet({{"a", {91.0, 0.0}}}), ValidationError);
  EXPECT_THROW(StationSet({{"a", {0.0, -180.5}}}), ValidationError);
  EXPECT_THROW(StationSet({{"a", {0, 0}}, {"a", {1, 1}}}), ValidationError);
}

TEST(Geometry, CardinalBearings) {
  EXPECT_NEAR(bearing_deg({10, 20}, {11, 20}), 0.0, 1e-9);
  EXPECT_NEAR(bearing_deg({0, 20}, {0, 21}), 90.0, 1e-9);
  EXPECT_NEAR(bearing_deg({10, 20}, {9, 20}), 180.0, 1e-9);
  EXPECT_NEAR(bearing_deg({0, 20}, {0, 19}), 270.0, 1e-9);
  EXPECT_THROW((void)bearing_deg({1, 2}, {1, 2}), ValidationError);
}

TEST(Geometry, BearingMatchesVectorOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> lat(-70, 70), lon(-179, 179);
  for (int i = 0; i < 200; ++i) {
    const GeoPoint a{lat(rng), lon(rng)}, b{lat(rng), lon(rng)};
    const double got = bearing_deg(a, b);
    double diff = std::abs(got - vector_bearing_deg(a, b));
    diff = std::min(diff, 360.0 - diff);
    EXPECT_LT(diff, 1e-6);
    EXPECT_GE(got, 0.0);
    EXPECT_LT(got, 360.0);
  }
}

TEST(Dartboard, RegionCounts) {
  DartboardSpec three{{50, 200, 500}, 8, 0.0};
  EXPECT_EQ(three.region_count(), 25u);
  EXPECT_EQ(DartboardSpec{}.region_count(), 17u);
  EXPECT_EQ(DartboardSpec{}.radii_km, (std::vector<double>{50, 200}));
}

TEST(Dartboard, InvalidSpecRejected) {
  EXPECT_THROW((DartboardSpec{{200, 50}, 8, 0}.validate()), ConfigError);
  EXPECT_THROW((DartboardSpec{{}, 8, 0}.validate()), ConfigError);
  EXPECT_THROW((DartboardSpec{{50}, 0, 0}.validate()), ConfigError);
}

TEST(Dartboard, SingleStationOccupiesOnlySelfRegion) {
  const StationSet st({{"only", {30, 110}}});
  const DartboardProjection proj(DartboardSpec{}, st);
  EXPECT_TRUE(proj.region_nonempty(0, 0));
  for (std::size_t r = 1; r < proj.region_count(); ++r) {
    EXPECT_FALSE(proj.region_nonempty(0, r));
  }
}

TEST(Dartboard, AssignmentMatchesBruteForceOracle) {
  std::mt19937_64 rng(5);
  const auto st = random_stations(100, rng);
  const DartboardSpec spec{{50, 200, 500}, 8, 15.0};
  for (std::size_t q = 0; q < st.size(); ++q) {
    const auto got = assign_regions(spec, st, q);
    EXPECT_EQ(got[q], std::optional<std::size_t>(0));
    for (std::size_t k = 0; k < st.size(); ++k) {
      if (k == q) continue;
      EXPECT_EQ(got[k], brute_force_region(spec, st[q].location, st[k].location))
          << "query " << q << " station " << k;
    }
  }
}

TEST(Dartboard, RadiusTieGoesToInnerRing) {
  const DartboardSpec spec{{50, 200}, 8, 0};
  EXPECT_EQ(region_for(spec, 50.0, 10.0), std::optional<std::size_t>(1));
  EXPECT_EQ(region_for(spec, 50.0 + 1e-9, 10.0), std::optional<std::size_t>(9));
  EXPECT_EQ(region_for(spec, 200.0, 10.0), std::optional<std::size_t>(9));
  EXPECT_EQ(region_for(spec, 200.0 + 1e-9, 10.0), std::nullopt);
}

TEST(Dartboard, SectorBoundaryIsHalfOpen) {
  const DartboardSpec spec{{50}, 8, 0};
  // A bearing exactly on the line at 90 degrees starts the sector [90, 135).
  EXPECT_EQ(region_for(spec, 10.0, 90.0), std::optional<std::size_t>(1 + 2));
  EXPECT_EQ(region_for(spec, 10.0, std::nextafter(90.0, 0.0)),
            std::optional<std::size_t>(1 + 1));
  EXPECT_EQ(region_for(spec, 10.0, 0.0), std::optional<std::size_t>(1));
  EXPECT_EQ(region_for(spec, 10.0, 359.999), std::optional<std::size_t>(8));
  const DartboardSpec rotated{{50}, 4, 45.0};
  EXPECT_EQ(region_for(rotated, 10.0, 45.0), std::optional<std::size_t>(1));
  EXPECT_EQ(region_for(rotated, 10.0, 30.0), std::optional<std::size_t>(4));
}

TEST(Dartboard, ProjectionInvariants) {
  std::mt19937_64 rng(8);
  const auto st = random_stations(40, rng);
  const DartboardSpec spec{{50, 200}, 8, 0};
  const DartboardProjection proj(spec, st);
  const auto dist = pairwise_distance_km(st);
  const std::size_t n = st.size(), m = spec.region_count();
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = proj.dense_matrix(i);
    std::vector<int> seen(n, 0);
    for (std::size_t r = 0; r < m; ++r) {
      double row = 0.0, nz = -1.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double v = a[r * n + k];
        row += v;
        if (v != 0.0) {
          ++seen[k];
          if (nz < 0.0) nz = v;
          EXPECT_EQ(v, nz) << "unequal entries in a row";
        }
      }
      EXPECT_NEAR(row, proj.region_nonempty(i, r) ? 1.0 : 0.0, 1e-12);
    }
    EXPECT_EQ(proj.members(i, 0).size(), 1u);
    EXPECT_EQ(proj.members(i, 0)[0], i);
    for (std::size_t k = 0; k < n; ++k) {
      EXPECT_LE(seen[k], 1);
      if (dist[i * n + k] > spec.outer_radius_km()) {
        EXPECT_EQ(seen[k], 0);
      }
    }
  }
}

TEST(Dartboard, MaskFlagsEmptyRegions) {
  std::mt19937_64 rng(9);
  const auto st = random_stations(10, rng);
  const DartboardProjection proj(DartboardSpec{}, st);
  const Tensor mask = proj.additive_mask();
  ASSERT_EQ(mask.shape(), (Shape{10, 17}));
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t r = 0; r < 17; ++r)
      EXPECT_EQ(mask.values()[i * 17 + r], proj.region_nonempty(i, r) ? 0.0 : kMaskSentinel);
}

TEST(Projection, SingleMemberAndPairAverages) {
  // Query at the origin, one station due north 20 km, two just south of due
  // east (bearings in [90, 180)).
  const double deg = 20.0 / (kEarthRadiusKm * std::numbers::pi / 180.0);
  const StationSet st({{"q", {0, 0}}, {"n", {deg, 0}}, {"e1", {0, deg}},
                       {"e2", {-0.001, deg}}});
  const DartboardProjection proj(DartboardSpec{{50}, 4, 0}, st);
  const Tensor p(Shape{4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor r = project_features(proj, p);
  ASSERT_EQ(r.shape(), (Shape{4, 5, 2}));
  const auto v = r.values();
  EXPECT_EQ(v[0], 1.0);  // self
  EXPECT_EQ(v[1], 2.0);
  EXPECT_EQ(v[2], 3.0);  // north sector: single member
  EXPECT_EQ(v[3], 4.0);
  EXPECT_EQ(v[4], 6.0);  // east sector: (5+7)/2, (6+8)/2
  EXPECT_EQ(v[5], 7.0);
  for (std::size_t j = 6; j < 10; ++j) EXPECT_EQ(v[j], 0.0);
}

TEST(Projection, SparseEqualsDenseMatmul) {
  std::mt19937_64 rng(21);
  const auto st = random_stations(60, rng);
  const DartboardProjection proj(DartboardSpec{{50, 200, 500}, 8, 0}, st);
  const std::size_t n = 60, m = 25, c = 5;
  const Tensor p = airformer::testing::random_tensor({2, n, c}, rng);
  const Tensor r = project_features(proj, p);
  ASSERT_EQ(r.shape(), (Shape{2, n, m, c}));
  double worst = 0.0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = proj.dense_matrix(i);
      for (std::size_t reg = 0; reg < m; ++reg)
        for (std::size_t j = 0; j < c; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < n; ++k) acc += a[reg * n + k] * p.values()[(b * n + k) * c + j];
          worst = std::max(worst, std::abs(acc - r.values()[((b * n + i) * m + reg) * c + j]));
        }
    }
  EXPECT_LT(worst, 1e-12);
}

TEST(Projection, FarStationsDoNotAffectPooledFeatures) {
  std::mt19937_64 rng(4);
  auto near = random_stations(8, rng, 30.0, 110.0, 1.0);
  std::vector<Station> all = near.stations();
  all.push_back({"far", {45.0, 130.0}});
  const StationSet st(all);
  const DartboardProjection proj(DartboardSpec{}, st);
  Tensor p = airformer::testing::random_tensor({9, 3}, rng);
  const Tensor before = project_features(proj, p);
  Tensor q = airformer::testing::random_tensor({9, 3}, rng);
  auto qv = q.mutable_values();
  for (std::size_t k = 0; k < 8 * 3; ++k) qv[k] = p.values()[k];
  const Tensor after = project_features(proj, q);
  const std::size_t stride = 17 * 3;
  for (std::size_t k = 0; k < 8 * stride; ++k) {
    EXPECT_EQ(before.values()[k], after.values()[k]);
  }
}

TEST(Projection, StationCountMismatch) {
  const StationSet st({{"a", {0, 0}}, {"b", {0, 0.1}}});
  const DartboardProjection proj(DartboardSpec{}, st);
  EXPECT_THROW((void)project_features(proj, Tensor::zeros({3, 2})), DimensionError);
}

TEST(Projection, Gradient) {
  std::mt19937_64 rng(2);
  const auto st = random_stations(7, rng, 30.0, 110.0, 1.5);
  const DartboardProjection proj(DartboardSpec{}, st);
  std::vector<Parameter> params{{"p", airformer::testing::random_tensor({7, 3}, rng, true)}};
  const Tensor w = airformer::testing::random_tensor({7, 17, 3}, rng);
  const auto report = grad_check(
      [&] { return sum(project_features(proj, params[0].tensor) * w); }, params);
  EXPECT_TRUE(report.passed()) << report.max_rel_error;
}

TEST(StationsCsv, RoundTripAndErrors) {
  std::mt19937_64 rng(1);
  const auto st = random_stations(5, rng);
  const std::string path = ::testing::TempDir() + "stations.csv";
  write_stations_csv(st, path);
  const auto back = read_stations_csv(path);
  ASSERT_EQ(back.size(), st.size());
  for (std::size_t i = 0; i < st.size(); ++i) {
    EXPECT_EQ(back[i].id, st[i].id);
    EXPECT_EQ(back[i].location.latitude, st[i].location.latitude);
    EXPECT_EQ(back[i].location.longitude, st[i].location.longitude);
  }
  {
    std::FILE* f = std::fopen(path.c_str(), "w");
    std::fputs("station_id,latitude,longitude\na,1,2\nb,x,3\n", f);
    std::fclose(f);
  }
  try {
    (void)read_stations_csv(path);
    FAIL() << "expected a parse error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}
