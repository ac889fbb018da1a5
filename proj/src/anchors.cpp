#include "rapnet/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "json.hpp"
#include "rapnet/error.hpp"

namespace rapnet::anchors {

void AnchorSet::validate() const {
  if (levels.empty()) throw ContractError("anchor set has no levels");
  const std::size_t m = levels.front().size();
  if (m == 0) throw ContractError("anchor set level 0 is empty");
  double prev = 0.0;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i].size() != m) {
      throw ContractError("anchor level " + std::to_string(i) + " has " +
                          std::to_string(levels[i].size()) + " widths, expected " +
                          std::to_string(m));
    }
    for (double w : levels[i]) {
      if (!(w > 0.0 && w <= 1.0)) {
        throw ContractError("anchor width " + std::to_string(w) + " outside (0, 1]");
      }
      if (!(w > prev)) {
        throw ContractError("anchor widths are not strictly increasing");
      }
      prev = w;
    }
  }
}

std::string anchors_to_json(const AnchorSet& anchors) {
  nlohmann::json doc{{"k", anchors.total()}, {"levels", anchors.levels}};
  return doc.dump() + "\n";
}

AnchorSet anchors_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IngestError(std::string("anchors: malformed JSON: ") + e.what());
  }
  if (!doc.contains("levels")) throw IngestError("anchors: missing key 'levels'");
  AnchorSet out;
  out.levels = doc["levels"].get<std::vector<std::vector<double>>>();
  out.validate();
  if (doc.contains("k") && doc["k"].get<std::size_t>() != out.total()) {
    throw IngestError("anchors: 'k' does not match the level widths");
  }
  return out;
}

double width_distance(double a, double b) noexcept {
  return 1.0 - std::min(a, b) / std::max(a, b);
}

namespace {

double cluster_cost(std::span<const double> widths, std::span<const std::size_t> assign,
                    std::size_t cluster, double centroid) {
  double c = 0.0;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (assign[i] == cluster) c += width_distance(widths[i], centroid);
  }
  return c;
}

double total_cost(std::span<const double> widths, std::span<const std::size_t> assign,
                  std::span<const double> centroids) {
  double c = 0.0;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    c += width_distance(widths[i], centroids[assign[i]]);
  }
  return c;
}

// Nearest centroid; ties go to the lower index.
std::size_t nearest(double w, std::span<const double> centroids) {
  std::size_t best = 0;
  double best_d = width_distance(w, centroids[0]);
  for (std::size_t j = 1; j < centroids.size(); ++j) {
    const double d = width_distance(w, centroids[j]);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

}  // namespace

KMeansTrace kmeans_anchors_traced(std::span<const double> input, std::size_t k,
                                  std::uint64_t seed, int max_iter) {
  if (k < 1) throw ClusteringError("k must be >= 1");
  std::vector<double> widths(input.begin(), input.end());
  for (double w : widths) {
    if (!(w > 0.0 && w <= 1.0)) {
      throw ClusteringError("width " + std::to_string(w) + " outside (0, 1]");
    }
  }
  std::sort(widths.begin(), widths.end());
  std::vector<double> uniq = widths;
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (uniq.size() < k) {
    throw ClusteringError("need at least " + std::to_string(k) +
                          " distinct widths, got " + std::to_string(uniq.size()));
  }

  // k-means++ seeding with squared width distance.
  std::mt19937_64 rng(seed);
  std::vector<double> centroids;
  centroids.push_back(widths[std::uniform_int_distribution<std::size_t>(
      0, widths.size() - 1)(rng)]);
  std::vector<double> d2(widths.size());
  while (centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      double best = width_distance(widths[i], centroids[0]);
      for (double c : centroids) best = std::min(best, width_distance(widths[i], c));
      d2[i] = best * best;
      total += d2[i];
    }
    double r = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t pick = widths.size();
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (d2[i] <= 0.0) continue;
      pick = i;
      r -= d2[i];
      if (r < 0.0) break;
    }
    centroids.push_back(widths[pick]);
  }

  KMeansTrace trace;
  std::vector<std::size_t> assign(widths.size(), k);
  std::vector<std::size_t> next(widths.size());
  for (int iter = 0; iter < max_iter; ++iter) {
    for (std::size_t i = 0; i < widths.size(); ++i) next[i] = nearest(widths[i], centroids);

    // Empty-cluster repair: move the centroid onto the width that is farthest
    // from its own centroid, then reassign.
    for (std::size_t j = 0; j < k; ++j) {
      if (std::find(next.begin(), next.end(), j) != next.end()) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < widths.size(); ++i) {
        const double d = width_distance(widths[i], centroids[next[i]]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      centroids[j] = widths[far];
      for (std::size_t i = 0; i < widths.size(); ++i) next[i] = nearest(widths[i], centroids);
    }

    const bool stable = next == assign;
    assign = next;

    // Mean update, kept only when it does not raise the cluster's cost.
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < widths.size(); ++i) {
        if (assign[i] == j) {
          s += widths[i];
          ++n;
        }
      }
      if (n == 0) continue;
      const double mean = s / static_cast<double>(n);
      if (cluster_cost(widths, assign, j, mean) <=
          cluster_cost(widths, assign, j, centroids[j])) {
        centroids[j] = mean;
      }
    }
    trace.objective.push_back(total_cost(widths, assign, centroids));
    trace.iterations = iter + 1;
    if (stable) {
      trace.converged = true;
      break;
    }
  }
  std::sort(centroids.begin(), centroids.end());
  trace.centroids = std::move(centroids);
  return trace;
}

std::vector<double> kmeans_anchors(std::span<const double> widths, std::size_t k,
                                   std::uint64_t seed, int max_iter) {
  return kmeans_anchors_traced(widths, k, seed, max_iter).centroids;
}

AnchorSet assign_anchors_to_levels(std::span<const double> sorted_widths,
                                   std::size_t levels) {
  if (levels == 0 || sorted_widths.empty() || sorted_widths.size() % levels != 0) {
    throw ContractError("cannot split " + std::to_string(sorted_widths.size()) +
                        " anchors evenly over " + std::to_string(levels) + " levels");
  }
  if (!std::is_sorted(sorted_widths.begin(), sorted_widths.end())) {
    throw ContractError("anchor widths must be sorted ascending");
  }
  const std::size_t m = sorted_widths.size() / levels;
  AnchorSet out;
  for (std::size_t i = 0; i < levels; ++i) {
    out.levels.emplace_back(sorted_widths.begin() + static_cast<std::ptrdiff_t>(i * m),
                            sorted_widths.begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
  }
  out.validate();
  return out;
}

}  // namespace rapnet::anchors
