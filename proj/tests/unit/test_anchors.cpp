#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "rapnet/anchors.hpp"
#include "rapnet/data_io.hpp"
#include "rapnet/error.hpp"
#include "rapnet/pipeline.hpp"

using namespace rapnet;
using namespace rapnet::anchors;

namespace {

double dist(double a, double b) { return a < b ? 1.0 - a / b : 1.0 - b / a; }

// Plain Lloyd iteration: k-means++ seeding, nearest-centroid assignment,
// per-cluster mean moves that never raise the cluster cost, repeated until the
// assignment stops changing.
std::vector<double> lloyd_oracle(std::vector<double> w, std::size_t k, std::uint64_t seed) {
  std::sort(w.begin(), w.end());
  const std::size_t n = w.size();
  std::mt19937_64 rng(seed);
  std::vector<double> c{w[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]};
  while (c.size() < k) {
    std::vector<double> weight(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double m = 1.0;
      for (double x : c) m = std::min(m, dist(w[i], x));
      weight[i] = m * m;
      total += weight[i];
    }
    double r = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t pick = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (weight[i] == 0.0) continue;
      pick = i;
      r -= weight[i];
      if (r < 0.0) break;
    }
    c.push_back(w[pick]);
  }
  std::vector<std::size_t> label(n, k);
  for (int iter = 0; iter < 1000; ++iter) {
    std::vector<std::size_t> fresh(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t b = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (dist(w[i], c[j]) < dist(w[i], c[b])) b = j;
      }
      fresh[i] = b;
    }
    for (std::size_t j = 0; j < k; ++j) {
      REQUIRE(std::count(fresh.begin(), fresh.end(), j) > 0);
    }
    const bool done = fresh == label;
    label = fresh;
    for (std::size_t j = 0; j < k; ++j) {
      std::vector<double> members;
      for (std::size_t i = 0; i < n; ++i) {
        if (label[i] == j) members.push_back(w[i]);
      }
      double mean = 0.0;
      for (double x : members) mean += x;
      mean /= static_cast<double>(members.size());
      double cost_mean = 0.0, cost_old = 0.0;
      for (double x : members) {
        cost_mean += dist(x, mean);
        cost_old += dist(x, c[j]);
      }
      if (cost_mean <= cost_old) c[j] = mean;
    }
    if (done) break;
  }
  std::sort(c.begin(), c.end());
  return c;
}

}  // namespace

TEST_CASE("width distance") {
  CHECK(width_distance(0.2, 0.4) == 0.5);
  CHECK(width_distance(0.4, 0.2) == 0.5);
  CHECK(width_distance(0.3, 0.3) == 0.0);
}

TEST_CASE("degenerate single cluster") {
  const std::vector<double> w(20, 0.3);
  const auto c = kmeans_anchors(w, 1, 0);
  REQUIRE(c.size() == 1);
  CHECK(c[0] == doctest::Approx(0.3).epsilon(1e-15));
}

TEST_CASE("two well separated clusters") {
  std::vector<double> w(50, 0.1);
  w.insert(w.end(), 50, 0.8);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = kmeans_anchors(w, 2, seed);
    // Brute force over the two contiguous partitions of two distinct values.
    CHECK(c[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(c[1] == doctest::Approx(0.8).epsilon(1e-15));
  }
}

TEST_CASE("clustering on the synthetic corpus matches the Lloyd oracle") {
  io::SyntheticSpec spec;
  spec.feature_dim = 4;
  const auto corpus = io::generate_synthetic_corpus(spec);
  const auto widths = pipeline::segment_widths(corpus.annotations, io::Subset::kTraining);
  const auto trace = kmeans_anchors_traced(widths, 12, 0);
  CHECK(trace.converged);
  CHECK(trace.centroids == lloyd_oracle(widths, 12, 0));
  for (std::size_t i = 1; i < trace.objective.size(); ++i) {
    CHECK(trace.objective[i] <= trace.objective[i - 1] + 1e-12);
  }
  const auto [lo, hi] = std::minmax_element(widths.begin(), widths.end());
  for (double c : trace.centroids) {
    CHECK(c >= *lo);
    CHECK(c <= *hi);
  }
}

TEST_CASE("objective is non-increasing on random inputs") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> w(200);
    for (auto& x : w) x = u(rng);
    const auto t = kmeans_anchors_traced(w, 1 + trial % 12, trial);
    for (std::size_t i = 1; i < t.objective.size(); ++i) {
      CHECK(t.objective[i] <= t.objective[i - 1] + 1e-12);
    }
    CHECK(std::is_sorted(t.centroids.begin(), t.centroids.end()));
  }
}

TEST_CASE("output is permutation invariant and seeded") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.02, 0.9);
  std::vector<double> w(150);
  for (auto& x : w) x = u(rng);
  const auto ref = kmeans_anchors(w, 6, 4);
  for (int p = 0; p < 5; ++p) {
    std::shuffle(w.begin(), w.end(), rng);
    CHECK(kmeans_anchors(w, 6, 4) == ref);
  }
}

TEST_CASE("clustering errors") {
  const std::vector<double> w{0.1, 0.1, 0.2};
  CHECK_THROWS_AS(kmeans_anchors(w, 3, 0), ClusteringError);
  CHECK_THROWS_AS(kmeans_anchors(w, 0, 0), ClusteringError);
  const std::vector<double> bad{0.0, 0.5};
  CHECK_THROWS_AS(kmeans_anchors(bad, 1, 0), ClusteringError);
}

TEST_CASE("level assignment") {
  std::vector<double> w;
  for (int i = 1; i <= 12; ++i) w.push_back(i / 12.0);
  const auto a = assign_anchors_to_levels(w, 6);
  CHECK(a.num_levels() == 6);
  CHECK(a.per_level() == 2);
  CHECK(a.levels[0] == std::vector<double>{w[0], w[1]});
  CHECK(a.levels[5] == std::vector<double>{w[10], w[11]});

  std::vector<double> w18;
  for (int i = 1; i <= 18; ++i) w18.push_back(i / 18.0);
  CHECK(assign_anchors_to_levels(w18, 6).per_level() == 3);

  CHECK_THROWS_AS(assign_anchors_to_levels(w, 5), ContractError);
  std::vector<double> unsorted{0.5, 0.2};
  CHECK_THROWS_AS(assign_anchors_to_levels(unsorted, 1), ContractError);
}

TEST_CASE("anchor JSON round-trip") {
  const std::vector<double> w{0.05, 0.1, 0.2, 0.4};
  const auto a = assign_anchors_to_levels(w, 2);
  const auto text = anchors_to_json(a);
  CHECK(text == "{\"k\":4,\"levels\":[[0.05,0.1],[0.2,0.4]]}\n");
  CHECK(anchors_from_json(text).levels == a.levels);
  CHECK_THROWS_AS(anchors_from_json("{\"levels\": [[0.3, 0.2]]}"), ContractError);
}
