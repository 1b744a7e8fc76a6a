#pragma once

#include <cstddef>
#include <vector>

#include "rns/support.hpp"

namespace rns {

/// Union of per-patch nearest neighbours: store indices in ascending entry id
/// order and the sorted classes they carry.
struct RetrievedSet {
  std::vector<std::size_t> entries;
  std::vector<ClassId> classes;

  bool empty() const { return entries.empty(); }
};

/// Indices of the min(k, |V|) store entries with the largest dot product to
/// the query, best first. Ties go to the lower entry id.
std::vector<std::size_t> knn(const Eigen::Ref<const Eigen::VectorXd>& query, const SupportStore& store, std::size_t k);

/// Per-patch kNN over every row of x, deduplicated by entry id. Patch rows are
/// scored in one pass; selection may be split over `threads` workers without
/// changing the result.
RetrievedSet retrieve_for_image(const DenseFeatureMap& x, const SupportStore& store, std::size_t k,
                                unsigned threads = 1);

/// Mean patch feature, not renormalized.
Eigen::VectorXd global_average_feature(const DenseFeatureMap& x);

/// Softmax over classes of the global average feature against the text bank.
Eigen::VectorXd class_relevance_weights(const DenseFeatureMap& x, const TextBank& bank, double tau);

/// class_relevance_weights, or all ones when no class has a textual feature.
Eigen::VectorXd relevance_weights_or_fallback(const DenseFeatureMap& x, const TextBank& bank, double tau);

}  // namespace rns
