#pragma once

#include <Eigen/Core>

#include <memory>
#include <vector>

namespace filterreg {

// Static 3-D nearest-neighbor index (R-tree backed). Results are ordered by
// distance, ties broken by point index.
class PointIndex {
 public:
  explicit PointIndex(const std::vector<Eigen::Vector3d>& points);
  ~PointIndex();
  PointIndex(PointIndex&&) noexcept;
  PointIndex& operator=(PointIndex&&) noexcept;

  std::size_t size() const { return points_.size(); }
  const Eigen::Vector3d& point(std::size_t i) const { return points_[i]; }

  std::size_t nearest(const Eigen::Vector3d& query) const;
  std::vector<std::size_t> knn(const Eigen::Vector3d& query, std::size_t k) const;
  // All points within `radius` (inclusive), nearest first.
  std::vector<std::size_t> within(const Eigen::Vector3d& query, double radius) const;

 private:
  struct Tree;
  std::vector<Eigen::Vector3d> points_;
  std::unique_ptr<Tree> tree_;
};

}  // namespace filterreg
