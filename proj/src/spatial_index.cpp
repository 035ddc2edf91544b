#include "filterreg/spatial_index.hpp"

#include "filterreg/error.hpp"

#include <boost/geometry.hpp>
#include <boost/geometry/index/rtree.hpp>

#include <algorithm>
#include <iterator>
#include <utility>

namespace filterreg {

namespace bg = boost::geometry;
namespace bgi = boost::geometry::index;

using BoostPoint = bg::model::point<double, 3, bg::cs::cartesian>;
using BoostBox = bg::model::box<BoostPoint>;
using Entry = std::pair<BoostPoint, std::size_t>;

struct PointIndex::Tree {
  bgi::rtree<Entry, bgi::quadratic<16>> rtree;
};

namespace {

BoostPoint to_boost(const Eigen::Vector3d& p) { return {p.x(), p.y(), p.z()}; }

}  // namespace

PointIndex::PointIndex(const std::vector<Eigen::Vector3d>& points) : points_(points) {
  if (points_.empty()) throw InputError("spatial index needs at least one point");
  std::vector<Entry> entries;
  entries.reserve(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) entries.emplace_back(to_boost(points_[i]), i);
  // Packing constructor: bulk loaded, deterministic for identical input.
  tree_ = std::make_unique<Tree>(Tree{bgi::rtree<Entry, bgi::quadratic<16>>(entries.begin(), entries.end())});
}

PointIndex::~PointIndex() = default;
PointIndex::PointIndex(PointIndex&&) noexcept = default;
PointIndex& PointIndex::operator=(PointIndex&&) noexcept = default;

std::vector<std::size_t> PointIndex::knn(const Eigen::Vector3d& query, std::size_t k) const {
  k = std::min(k, points_.size());
  if (k == 0) return {};
  std::vector<Entry> found;
  found.reserve(k);
  tree_->rtree.query(bgi::nearest(to_boost(query), static_cast<unsigned>(k)), std::back_inserter(found));
  std::vector<std::pair<double, std::size_t>> ranked;
  ranked.reserve(found.size());
  for (const auto& e : found) ranked.emplace_back((points_[e.second] - query).squaredNorm(), e.second);
  std::sort(ranked.begin(), ranked.end());
  std::vector<std::size_t> out;
  out.reserve(ranked.size());
  for (const auto& r : ranked) out.push_back(r.second);
  return out;
}

std::size_t PointIndex::nearest(const Eigen::Vector3d& query) const { return knn(query, 1).front(); }

std::vector<std::size_t> PointIndex::within(const Eigen::Vector3d& query, double radius) const {
  const Eigen::Vector3d lo = query.array() - radius;
  const Eigen::Vector3d hi = query.array() + radius;
  std::vector<Entry> found;
  tree_->rtree.query(bgi::intersects(BoostBox(to_boost(lo), to_boost(hi))), std::back_inserter(found));
  const double r2 = radius * radius;
  std::vector<std::pair<double, std::size_t>> ranked;
  for (const auto& e : found) {
    const double d2 = (points_[e.second] - query).squaredNorm();
    if (d2 <= r2) ranked.emplace_back(d2, e.second);
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<std::size_t> out;
  out.reserve(ranked.size());
  for (const auto& r : ranked) out.push_back(r.second);
  return out;
}

}  // namespace filterreg
