#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rns/numerics.hpp"

namespace rns {

/// Mixing coefficients used when fusing textual and visual class features.
std::vector<double> default_lambdas();

/// Textual class features, one row per class. Rows of absent classes are
/// zero until substitute_missing_text fills them in.
struct TextBank {
  RowMatrixXd features;
  std::vector<bool> present;
  std::vector<std::optional<std::string>> class_names;
  // Set by substitute_missing_text when no class has a textual feature.
  bool all_absent = false;

  std::size_t num_classes() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
  bool materialized() const;
};

/// Fills absent rows with the normalized mean of the present rows. With no
/// present rows the bank is flagged all_absent and left zero.
TextBank substitute_missing_text(TextBank bank);

/// A per-image visual class feature, as stored.
struct SupportEntry {
  Eigen::Map<const Eigen::VectorXf> vector;
  ClassId class_id;
  std::uint64_t image_id;
  std::uint64_t entry_id;
};

struct FusedFeature {
  ClassId class_id;
  double lambda;
  Eigen::VectorXd vector;
};

/// Normalized lambda * text + (1 - lambda) * visual.
Eigen::VectorXd fuse(const Eigen::Ref<const Eigen::VectorXd>& text, const Eigen::Ref<const Eigen::VectorXd>& visual,
                     double lambda);

/// Pools patch features into one normalized vector per class with a nonzero
/// label column.
std::vector<std::pair<ClassId, Eigen::VectorXd>> pool_image_class_features(const DenseFeatureMap& x,
                                                                           const PatchLabelMatrix& labels);

/// Stable 64-bit FNV-1a hash used for image identifiers.
std::uint64_t hash_image_id(std::string_view id) noexcept;

/// The visual support set with per-class running sums and, once a text bank
/// is attached, the fused support set. Entries are kept in insertion order;
/// entry ids increase monotonically.
class SupportStore {
 public:
  SupportStore(std::size_t num_classes, std::size_t dim, std::vector<double> lambdas = default_lambdas());

  std::size_t num_classes() const { return num_classes_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return class_ids_.size(); }
  bool empty() const { return class_ids_.empty(); }
  const std::vector<double>& lambdas() const { return lambdas_; }

  SupportEntry entry(std::size_t i) const;
  // Entry vectors as a size() x dim() row-major matrix.
  Eigen::Map<const RowMatrixXf> vectors() const;
  const std::vector<ClassId>& class_ids() const { return class_ids_; }
  const std::vector<std::uint64_t>& entry_ids() const { return entry_ids_; }
  const std::vector<std::uint64_t>& image_ids() const { return image_ids_; }

  const RowMatrixXf& class_accumulators() const { return accumulators_; }
  const std::vector<std::uint64_t>& class_counts() const { return counts_; }
  std::uint64_t next_entry_id() const { return next_entry_id_; }

  /// Appends one per-image class feature; returns its entry id.
  std::uint64_t add_entry(ClassId class_id, const Eigen::Ref<const Eigen::VectorXd>& vector, std::uint64_t image_id);

  /// Downsamples the mask, pools per-image class features and appends them.
  /// Fused vectors of the affected classes are refreshed. Returns the
  /// affected class ids in ascending order.
  std::vector<ClassId> add_support_image(const DenseFeatureMap& x, const LabelMask& mask, std::uint64_t image_id);

  /// Attaches a materialized text bank and rebuilds the fused set.
  void attach_text(std::shared_ptr<const TextBank> bank);
  const TextBank* text() const { return text_.get(); }

  /// Lambdas actually used for fusion: {0} when every class name is missing.
  std::vector<double> effective_lambdas() const;

  /// Fused vectors ordered by (class id, lambda order). Requires attached text.
  std::vector<FusedFeature> fused() const;
  /// Fused vectors of one class, one per effective lambda.
  const std::vector<Eigen::VectorXd>& fused_for(ClassId c) const;

  friend bool operator==(const SupportStore& a, const SupportStore& b);

 private:
  friend SupportStore deserialize_store(const std::vector<std::uint8_t>& bytes);
  void refresh_fused(ClassId c);

  std::size_t num_classes_;
  std::size_t dim_;
  std::vector<double> lambdas_;

  std::vector<float> vectors_;
  std::vector<ClassId> class_ids_;
  std::vector<std::uint64_t> entry_ids_;
  std::vector<std::uint64_t> image_ids_;
  std::uint64_t next_entry_id_ = 0;

  RowMatrixXf accumulators_;
  std::vector<std::uint64_t> counts_;

  std::shared_ptr<const TextBank> text_;
  std::vector<std::vector<Eigen::VectorXd>> fused_;
};

/// Normalized class accumulator of a visually supported class.
Eigen::VectorXd aggregate_class_feature(const SupportStore& store, ClassId class_id);

/// Fused set recomputed from the store aggregates and a materialized bank.
std::vector<FusedFeature> build_fused_set(const SupportStore& store, const TextBank& bank);

void save_store(const SupportStore& store, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_store(const SupportStore& store);
SupportStore load_store(const std::filesystem::path& path);
SupportStore deserialize_store(const std::vector<std::uint8_t>& bytes);

}  // namespace rns
