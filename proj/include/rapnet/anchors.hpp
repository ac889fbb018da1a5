#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rapnet::anchors {

/// Normalized anchor widths per pyramid level, finest level first.
struct AnchorSet {
  std::vector<std::vector<double>> levels;

  std::size_t num_levels() const noexcept { return levels.size(); }
  std::size_t per_level() const noexcept {
    return levels.empty() ? 0 : levels.front().size();
  }
  std::size_t total() const noexcept { return num_levels() * per_level(); }
  double width(std::size_t level, std::size_t k) const { return levels.at(level).at(k); }

  /// Throws ContractError unless every level has the same positive count of
  /// widths in (0, 1], strictly increasing in (level, index) order.
  void validate() const;
};

std::string anchors_to_json(const AnchorSet& anchors);
AnchorSet anchors_from_json(const std::string& text);

/// 1 - min(a, b) / max(a, b): one minus the IoU of two co-centered segments.
double width_distance(double a, double b) noexcept;

struct KMeansTrace {
  std::vector<double> centroids;  // ascending
  std::vector<double> objective;  // after each iteration
  int iterations = 0;
  bool converged = false;
};

/// K-means over normalized widths under width_distance with k-means++ seeding.
/// The input is sorted first, so the result does not depend on input order.
KMeansTrace kmeans_anchors_traced(std::span<const double> widths, std::size_t k,
                                  std::uint64_t seed, int max_iter = 100);

std::vector<double> kmeans_anchors(std::span<const double> widths, std::size_t k,
                                   std::uint64_t seed, int max_iter = 100);

/// Chunks ascending widths into `levels` groups; smallest group to level 0.
AnchorSet assign_anchors_to_levels(std::span<const double> sorted_widths,
                                   std::size_t levels);

}  // namespace rapnet::anchors
