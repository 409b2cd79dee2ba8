#pragma once

#include "cmtcs/operators.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace cmtcs {

/// ||truth - recon|| / ||truth|| over the concatenation of all tasks.
inline double normalized_error(std::span<const Vector> truth, std::span<const Vector> recon) {
  if (truth.size() != recon.size()) throw DimensionError("normalized_error: task count mismatch");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t t = 0; t < truth.size(); ++t) {
    if (truth[t].size() != recon[t].size()) throw DimensionError("normalized_error: length mismatch");
    num += (truth[t] - recon[t]).squaredNorm();
    den += truth[t].squaredNorm();
  }
  if (den == 0.0) throw std::domain_error("normalized_error: ground truth has zero norm");
  return std::sqrt(num / den);
}

/// Fraction of tasks whose cluster maps to their planted group under the best
/// relabeling. When there are no more clusters than groups the relabeling is
/// injective; otherwise any cluster-to-group map is allowed.
inline double assignment_accuracy(std::span<const std::size_t> assignments,
                                  std::span<const std::size_t> groups) {
  if (assignments.size() != groups.size()) throw DimensionError("assignment_accuracy: length mismatch");
  if (assignments.empty()) return 1.0;
  const std::size_t n_clusters = *std::max_element(assignments.begin(), assignments.end()) + 1;
  const std::size_t n_groups = *std::max_element(groups.begin(), groups.end()) + 1;
  const bool injective = n_clusters <= n_groups;

  std::vector<std::size_t> map(n_clusters, 0);
  std::size_t best = 0;
  for (;;) {
    bool valid = true;
    if (injective) {
      std::vector<bool> used(n_groups, false);
      for (std::size_t g : map) {
        if (used[g]) {
          valid = false;
          break;
        }
        used[g] = true;
      }
    }
    if (valid) {
      std::size_t hits = 0;
      for (std::size_t t = 0; t < groups.size(); ++t) hits += map[assignments[t]] == groups[t] ? 1 : 0;
      best = std::max(best, hits);
    }
    // Odometer over all cluster -> group maps.
    std::size_t i = 0;
    while (i < n_clusters && ++map[i] == n_groups) map[i++] = 0;
    if (i == n_clusters) break;
  }
  return static_cast<double>(best) / static_cast<double>(groups.size());
}

}  // namespace cmtcs
