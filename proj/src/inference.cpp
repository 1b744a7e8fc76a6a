#include "rns/inference.hpp"

#include <map>

namespace rns {

RegionSet regions_from_grid(const LabelGrid& grid, std::uint16_t outside) {
  std::map<std::uint16_t, std::uint16_t> remap;
  bool has_outside = false;
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    const std::uint16_t v = grid.reshaped<Eigen::RowMajor>()(i);
    if (v == outside)
      has_outside = true;
    else
      remap.emplace(v, 0);
  }
  std::uint16_t next = 0;
  for (auto& [from, to] : remap) to = next++;
  const std::size_t count = remap.size() + (has_outside ? 1 : 0);
  if (count == 0 || count >= kDefaultIgnore) throw Error(ErrorKind::InvalidArgument, "region count out of range");

  RegionSet out;
  out.region_count = count;
  out.assignments.resize(grid.rows(), grid.cols());
  for (Eigen::Index y = 0; y < grid.rows(); ++y)
    for (Eigen::Index x = 0; x < grid.cols(); ++x) {
      const std::uint16_t v = grid(y, x);
      out.assignments(y, x) = v == outside ? next : remap[v];
    }
  return out;
}

ProbMap zero_shot_predict(const DenseFeatureMap& x, const TextBank& bank, double tau) {
  if (x.dim() != bank.dim()) throw Error(ErrorKind::DimensionMismatch, "text bank dimension differs from features");
  return {softmax_rows(x.data * bank.features.transpose(), tau), x.grid_h, x.grid_w};
}

ProbMap adapted_predict(const AdapterModel& model, const DenseFeatureMap& x) {
  if (x.dim() != model.dim()) throw Error(ErrorKind::DimensionMismatch, "classifier dimension differs from features");
  RowMatrixXd logits = x.data * model.weights.transpose();
  logits.rowwise() += model.bias.transpose();
  return {softmax_rows(logits), x.grid_h, x.grid_w};
}

RowMatrixXd region_pool(const DenseFeatureMap& x, const RegionSet& regions) {
  if (static_cast<std::size_t>(regions.assignments.rows()) != x.image_h ||
      static_cast<std::size_t>(regions.assignments.cols()) != x.image_w)
    throw Error(ErrorKind::ShapeMismatch, "region grid does not match the image size");
  LabelMask as_mask{regions.assignments, kDefaultIgnore, regions.region_count};
  const PatchLabelMatrix weights = downsample_labels(as_mask, x.grid_h, x.grid_w);
  for (Eigen::Index r = 0; r < weights.data.cols(); ++r)
    if ((weights.data.col(r).array() == 0.0).all())
      throw Error(ErrorKind::EmptyRegion, "region " + std::to_string(r) + " has no mass at patch resolution");
  return l2_normalize_rows(weights.data.transpose() * x.data);
}

LabelMask paint_regions(const RegionSet& regions, const std::vector<ClassId>& region_labels, std::size_t num_classes) {
  if (region_labels.size() != regions.region_count)
    throw Error(ErrorKind::ShapeMismatch, "one label per region required");
  LabelMask out;
  out.num_classes = num_classes;
  out.data.resize(regions.assignments.rows(), regions.assignments.cols());
  for (Eigen::Index i = 0; i < out.data.size(); ++i)
    out.data.reshaped<Eigen::RowMajor>()(i) =
        static_cast<std::uint16_t>(region_labels[regions.assignments.reshaped<Eigen::RowMajor>()(i)]);
  return out;
}

namespace {

std::vector<ClassId> region_argmax(const RowMatrixXd& probs) {
  std::vector<ClassId> labels(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) labels[r] = static_cast<ClassId>(argmax(probs.row(r)));
  return labels;
}

SegmentationResult finish(ProbMap low_res, const RowMatrixXd* region_probs, const DenseFeatureMap& x,
                          const RegionSet* regions, bool adapted) {
  SegmentationResult out;
  out.adapted = adapted;
  const std::size_t C = static_cast<std::size_t>(low_res.data.cols());
  if (regions) {
    out.mode = SegmentMode::Region;
    out.full_res_labels = paint_regions(*regions, region_argmax(*region_probs), C);
  } else {
    out.mode = SegmentMode::Patch;
    out.full_res_labels = argmax_map(upsample_probs(low_res, x.image_h, x.image_w), x.image_h, x.image_w);
  }
  out.low_res = std::move(low_res);
  return out;
}

}  // namespace

SegmentationResult zero_shot_segment(const DenseFeatureMap& x, const TextBank& bank, double tau,
                                     const RegionSet* regions) {
  ProbMap patch = zero_shot_predict(x, bank, tau);
  if (!regions) return finish(std::move(patch), nullptr, x, nullptr, false);
  const RowMatrixXd region_probs = softmax_rows(region_pool(x, *regions) * bank.features.transpose(), tau);
  return finish(std::move(patch), &region_probs, x, regions, false);
}

SegmentationResult segment(const SupportStore& store, const DenseFeatureMap& x, const TextBank& bank,
                           const RegionSet* regions, const std::set<ClassId>& unsupported, const TrainConfig& config) {
  const std::optional<AdapterModel> model = train_adapter(store, x, bank, unsupported, config);
  if (!model) return zero_shot_segment(x, bank, config.tau, regions);

  ProbMap patch = adapted_predict(*model, x);
  if (!regions) return finish(std::move(patch), nullptr, x, nullptr, true);
  DenseFeatureMap pooled{region_pool(x, *regions), 0, 0, 0, 0};
  const RowMatrixXd region_probs = adapted_predict(*model, pooled).data;
  return finish(std::move(patch), &region_probs, x, regions, true);
}

}  // namespace rns
