#pragma once

#include <optional>
#include <set>

#include "rns/adapter.hpp"

namespace rns {

/// Partition of the image into R regions, one index per pixel.
struct RegionSet {
  LabelGrid assignments;
  std::size_t region_count = 0;
};

/// Builds a region partition from a label-like grid of mask indices. Pixels
/// equal to `outside` (not covered by any proposal) become one extra, last
/// region. Mask indices are compacted to [0, R) preserving their order.
RegionSet regions_from_grid(const LabelGrid& grid, std::uint16_t outside = kDefaultIgnore);

enum class SegmentMode { Patch, Region };

struct SegmentationResult {
  ProbMap low_res;
  LabelMask full_res_labels;
  SegmentMode mode = SegmentMode::Patch;
  bool adapted = false;  // false when zero-shot fallback was used
};

/// Row j = softmax over classes of x_j . t_c at temperature tau.
ProbMap zero_shot_predict(const DenseFeatureMap& x, const TextBank& bank, double tau);

/// Row j = forward(model, x_j).
ProbMap adapted_predict(const AdapterModel& model, const DenseFeatureMap& x);

/// R x d normalized region features pooled with area-fraction region weights.
RowMatrixXd region_pool(const DenseFeatureMap& x, const RegionSet& regions);

/// Zero-shot segmentation, patch mode (upsample then argmax) or region mode.
SegmentationResult zero_shot_segment(const DenseFeatureMap& x, const TextBank& bank, double tau,
                                     const RegionSet* regions = nullptr);

/// Per-image adaptation followed by patch- or region-level prediction. Falls
/// back to zero_shot_segment when there is no training signal.
SegmentationResult segment(const SupportStore& store, const DenseFeatureMap& x, const TextBank& bank,
                           const RegionSet* regions, const std::set<ClassId>& unsupported, const TrainConfig& config);

/// Labels every region pixel with the class of its region.
LabelMask paint_regions(const RegionSet& regions, const std::vector<ClassId>& region_labels, std::size_t num_classes);

}  // namespace rns
