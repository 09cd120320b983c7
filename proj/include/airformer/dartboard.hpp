// Dartboard partition of a station's surroundings.
//
// Around every query station the plane is cut by concentric circles
// (radii_km) and n_sectors rays. Region 0 holds the query itself; every other
// station within the outermost circle lands in exactly one annular sector,
//   region = 1 + ring * n_sectors + sector.
// Regional features are member averages, so the dense M x N matrix of a
// query has equal non-zero entries per row and non-empty rows summing to 1.

#pragma once

#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "airformer/ops.hpp"

namespace airformer {

inline constexpr double kEarthRadiusKm = 6371.0;

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct GeoPoint {
  double latitude = 0.0;   // degrees
  double longitude = 0.0;  // degrees
};

struct Station {
  std::string id;
  GeoPoint location;
};

inline void validate(const GeoPoint& p) {
  if (!(p.latitude >= -90.0 && p.latitude <= 90.0) ||
      !(p.longitude >= -180.0 && p.longitude <= 180.0)) {
    std::ostringstream os;
    os << "coordinate out of range: (" << p.latitude << ", " << p.longitude
       << ")";
    throw ValidationError(os.str());
  }
}

/// Stations in canonical index order.
class StationSet {
 public:
  StationSet() = default;
  explicit StationSet(std::vector<Station> stations)
      : stations_(std::move(stations)) {
    std::set<std::string> ids;
    for (const auto& s : stations_) {
      validate(s.location);
      if (!ids.insert(s.id).second) {
        throw ValidationError("duplicate station id '" + s.id + "'");
      }
    }
  }

  [[nodiscard]] std::size_t size() const { return stations_.size(); }
  [[nodiscard]] bool empty() const { return stations_.empty(); }
  [[nodiscard]] const Station& operator[](std::size_t i) const {
    return stations_[i];
  }
  [[nodiscard]] const std::vector<Station>& stations() const {
    return stations_;
  }
  [[nodiscard]] std::optional<std::size_t> index_of(const std::string& id) const {
    for (std::size_t i = 0; i < stations_.size(); ++i) {
      if (stations_[i].id == id) return i;
    }
    return std::nullopt;
  }

 private:
  std::vector<Station> stations_;
};

namespace detail {
inline double radians(double deg) { return deg * std::numbers::pi / 180.0; }
inline double degrees(double rad) { return rad * 180.0 / std::numbers::pi; }

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& c : out) {
    while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.pop_back();
    while (!c.empty() && c.front() == ' ') c.erase(c.begin());
  }
  return out;
}
}  // namespace detail

/// Reads `station_id,latitude,longitude`; row order is the canonical index.
inline StationSet read_stations_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open station file " + path);
  std::string line;
  if (!std::getline(in, line) ||
      detail::split_csv_line(line) !=
          std::vector<std::string>{"station_id", "latitude", "longitude"}) {
    throw ValidationError(path + ":1: expected header station_id,latitude,longitude");
  }
  std::vector<Station> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 3 || cells[0].empty()) {
      throw ValidationError(path + ":" + std::to_string(line_no) +
                            ": malformed station row");
    }
    try {
      out.push_back(Station{cells[0], {std::stod(cells[1]), std::stod(cells[2])}});
    } catch (const std::logic_error&) {
      throw ValidationError(path + ":" + std::to_string(line_no) +
                            ": malformed coordinate");
    }
  }
  return StationSet(std::move(out));
}

inline void write_stations_csv(const StationSet& stations, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write station file " + path);
  out.precision(17);
  out << "station_id,latitude,longitude\n";
  for (const auto& s : stations.stations()) {
    out << s.id << ',' << s.location.latitude << ',' << s.location.longitude
        << '\n';
  }
}

/// Great-circle distance on a 6371 km sphere (haversine form).
inline double haversine_km(const GeoPoint& a, const GeoPoint& b) {
  const double phi1 = detail::radians(a.latitude);
  const double phi2 = detail::radians(b.latitude);
  const double dphi = phi2 - phi1;
  const double dlambda = detail::radians(b.longitude - a.longitude);
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  h = std::min(1.0, std::max(0.0, h));
  return 2.0 * kEarthRadiusKm * std::asin(std::sqrt(h));
}

/// Row-major N x N table; symmetric with a zero diagonal.
inline std::vector<double> pairwise_distance_km(const StationSet& stations) {
  const std::size_t n = stations.size();
  std::vector<double> table(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    validate(stations[i].location);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = haversine_km(stations[i].location, stations[j].location);
      table[i * n + j] = d;
      table[j * n + i] = d;
    }
  }
  return table;
}

/// Initial great-circle bearing in [0, 360): north 0, clockwise.
inline double bearing_deg(const GeoPoint& from, const GeoPoint& to) {
  if (from.latitude == to.latitude && from.longitude == to.longitude) {
    throw ValidationError("bearing between identical points is undefined");
  }
  const double phi1 = detail::radians(from.latitude);
  const double phi2 = detail::radians(to.latitude);
  const double dlambda = detail::radians(to.longitude - from.longitude);
  const double y = std::sin(dlambda) * std::cos(phi2);
  const double x = std::cos(phi1) * std::sin(phi2) -
                   std::sin(phi1) * std::cos(phi2) * std::cos(dlambda);
  double deg = std::fmod(detail::degrees(std::atan2(y, x)) + 360.0, 360.0);
  if (deg >= 360.0) deg -= 360.0;
  return deg;
}

struct DartboardSpec {
  std::vector<double> radii_km{50.0, 200.0};
  std::size_t n_sectors = 8;
  double sector_offset_deg = 0.0;

  [[nodiscard]] std::size_t n_rings() const { return radii_km.size(); }
  /// rings x sectors plus the query's own region.
  [[nodiscard]] std::size_t region_count() const {
    return n_rings() * n_sectors + 1;
  }
  [[nodiscard]] double outer_radius_km() const { return radii_km.back(); }

  void validate() const {
    if (radii_km.empty()) throw ConfigError("dartboard needs at least one ring");
    if (n_sectors == 0) throw ConfigError("dartboard needs at least one sector");
    for (std::size_t r = 0; r < radii_km.size(); ++r) {
      if (!(radii_km[r] > 0.0) || (r > 0 && !(radii_km[r] > radii_km[r - 1]))) {
        throw ConfigError("dartboard radii must be positive and strictly increasing");
      }
    }
  }
};

/// Ring is the smallest r with distance <= radii[r] (ties go inward); sector
/// intervals are half-open [k w, (k+1) w) in clockwise bearing from the offset.
inline std::optional<std::size_t> region_for(const DartboardSpec& spec,
                                             double distance_km,
                                             double bearing) {
  std::size_t ring = 0;
  while (ring < spec.n_rings() && distance_km > spec.radii_km[ring]) ++ring;
  if (ring == spec.n_rings()) return std::nullopt;
  double rel = std::fmod(bearing - spec.sector_offset_deg, 360.0);
  if (rel < 0.0) rel += 360.0;
  const double width = 360.0 / static_cast<double>(spec.n_sectors);
  auto sector = static_cast<std::size_t>(std::floor(rel / width));
  if (sector >= spec.n_sectors) sector = spec.n_sectors - 1;
  return 1 + ring * spec.n_sectors + sector;
}

/// Region of every station as seen from `query`; nullopt beyond the
/// outermost circle. A co-located distinct station falls in ring 0, sector 0.
inline std::vector<std::optional<std::size_t>> assign_regions(
    const DartboardSpec& spec, const StationSet& stations, std::size_t query) {
  spec.validate();
  std::vector<std::optional<std::size_t>> out(stations.size());
  const GeoPoint& q = stations[query].location;
  for (std::size_t k = 0; k < stations.size(); ++k) {
    if (k == query) {
      out[k] = 0;
      continue;
    }
    const GeoPoint& p = stations[k].location;
    const double d = haversine_km(q, p);
    const bool same = p.latitude == q.latitude && p.longitude == q.longitude;
    out[k] = region_for(spec, d, same ? spec.sector_offset_deg : bearing_deg(q, p));
  }
  return out;
}

namespace detail {
struct ProjectionLayout {
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<std::size_t> offsets;  // CSR over (query, region) cells
  std::vector<std::size_t> members;

  [[nodiscard]] std::span<const std::size_t> cell(std::size_t query,
                                                  std::size_t region) const {
    const std::size_t c = query * m + region;
    return {members.data() + offsets[c], offsets[c + 1] - offsets[c]};
  }
};
}  // namespace detail

/// Sparse membership lists of every (query, region) pair. Immutable once
/// built and cheap to copy; build once per station set and reuse for every
/// forward pass.
class DartboardProjection {
 public:
  DartboardProjection() = default;

  DartboardProjection(const DartboardSpec& spec, const StationSet& stations) {
    spec.validate();
    auto layout = std::make_shared<detail::ProjectionLayout>();
    const std::size_t n = stations.size();
    const std::size_t m = spec.region_count();
    layout->n = n;
    layout->m = m;
    layout->offsets.assign(n * m + 1, 0);
    std::vector<std::vector<std::size_t>> cell(n * m);
    for (std::size_t i = 0; i < n; ++i) {
      const auto regions = assign_regions(spec, stations, i);
      for (std::size_t k = 0; k < n; ++k) {
        if (regions[k]) cell[i * m + *regions[k]].push_back(k);
      }
    }
    for (std::size_t c = 0; c < n * m; ++c) {
      layout->offsets[c + 1] = layout->offsets[c] + cell[c].size();
      layout->members.insert(layout->members.end(), cell[c].begin(),
                             cell[c].end());
    }
    layout_ = std::move(layout);
  }

  [[nodiscard]] std::size_t station_count() const {
    return layout_ ? layout_->n : 0;
  }
  [[nodiscard]] std::size_t region_count() const {
    return layout_ ? layout_->m : 0;
  }

  [[nodiscard]] std::span<const std::size_t> members(std::size_t query,
                                                     std::size_t region) const {
    return layout_->cell(query, region);
  }
  [[nodiscard]] std::size_t member_count(std::size_t query,
                                         std::size_t region) const {
    return members(query, region).size();
  }
  [[nodiscard]] bool region_nonempty(std::size_t query, std::size_t region) const {
    return member_count(query, region) > 0;
  }

  /// N x M additive attention mask: 0 for populated regions, sentinel else.
  [[nodiscard]] Tensor additive_mask() const {
    const std::size_t n = station_count(), m = region_count();
    std::vector<double> v(n * m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < m; ++r)
        v[i * m + r] = region_nonempty(i, r) ? 0.0 : kMaskSentinel;
    return Tensor(Shape{n, m}, std::move(v));
  }

  /// The dense M x N pooling matrix of one query (row-major).
  [[nodiscard]] std::vector<double> dense_matrix(std::size_t query) const {
    const std::size_t n = station_count(), m = region_count();
    std::vector<double> a(m * n, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
      const auto mem = members(query, r);
      for (std::size_t k : mem) {
        a[r * n + k] = 1.0 / static_cast<double>(mem.size());
      }
    }
    return a;
  }

  [[nodiscard]] std::size_t total_memberships() const {
    return layout_ ? layout_->members.size() : 0;
  }

  [[nodiscard]] const std::shared_ptr<const detail::ProjectionLayout>& layout()
      const {
    return layout_;
  }

 private:
  std::shared_ptr<const detail::ProjectionLayout> layout_;
};

/// P[..., N, C] -> R[..., N, M, C] with R[.., i, r] the mean of the features
/// of region r's members around station i; empty regions are zero.
inline Tensor project_features(const DartboardProjection& projection,
                               const Tensor& features) {
  if (features.rank() < 2 ||
      features.dim(features.rank() - 2) != projection.station_count()) {
    throw DimensionError("project_features: features " +
                         to_string(features.shape()) + " vs " +
                         std::to_string(projection.station_count()) +
                         " stations");
  }
  const auto layout = projection.layout();
  const std::size_t n = layout->n;
  const std::size_t m = layout->m;
  const std::size_t c = features.dim(features.rank() - 1);
  const std::size_t batch = features.size() / (n * c);
  Shape out_shape(features.shape().begin(), features.shape().end() - 2);
  out_shape.insert(out_shape.end(), {n, m, c});
  const auto pv = features.values();
  std::vector<double> out(batch * n * m * c, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = pv.data() + b * n * c;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t r = 0; r < m; ++r) {
        const auto mem = layout->cell(i, r);
        if (mem.empty()) continue;
        double* dst = out.data() + ((b * n + i) * m + r) * c;
        for (std::size_t k : mem) {
          for (std::size_t j = 0; j < c; ++j) dst[j] += src[k * c + j];
        }
        const double inv = 1.0 / static_cast<double>(mem.size());
        for (std::size_t j = 0; j < c; ++j) dst[j] *= inv;
      }
    }
  }
  return Tensor::from_op(
      std::move(out_shape), std::move(out), {features},
      [layout, batch, n, m, c](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        p.ensure_grad();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t r = 0; r < m; ++r) {
              const auto mem = layout->cell(i, r);
              if (mem.empty()) continue;
              const double inv = 1.0 / static_cast<double>(mem.size());
              const double* g = self.grad.data() + ((b * n + i) * m + r) * c;
              for (std::size_t k : mem) {
                double* dst = p.grad.data() + (b * n + k) * c;
                for (std::size_t j = 0; j < c; ++j) dst[j] += inv * g[j];
              }
            }
          }
        }
      });
}

}  // namespace airformer
