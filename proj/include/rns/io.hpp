#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rns/numerics.hpp"
#include "rns/support.hpp"

namespace rns {

/// Raw float tensor: row-major values and their shape.
struct Tensor {
  std::vector<std::uint64_t> shape;
  std::vector<float> values;

  std::uint64_t numel() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// RNSF: "RNSF", u8 version = 1, u8 dtype (0 = f32), u8 ndim, ndim x u64 dims,
// row-major f32 payload. All fields little-endian.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

/// Feature maps are stored as [grid_h, grid_w, d] tensors.
void write_feature_map(const std::filesystem::path& path, const DenseFeatureMap& x);
/// Reads a [grid_h, grid_w, d] tensor and normalizes every patch row; the
/// image size is supplied separately.
DenseFeatureMap read_feature_map(const std::filesystem::path& path, std::size_t image_h, std::size_t image_w,
                                 std::optional<std::size_t> expected_dim = std::nullopt);

// RNSM: "RNSM", u8 version = 1, u64 H, u64 W, u16 payload (ignore = 65535).
std::vector<std::uint8_t> encode_mask(const LabelGrid& grid);
LabelGrid decode_mask(const std::vector<std::uint8_t>& bytes);
void write_mask(const std::filesystem::path& path, const LabelMask& mask);
/// Reads a label mask; labels other than the ignore value must be < num_classes.
LabelMask read_mask(const std::filesystem::path& path, std::size_t num_classes,
                    std::uint16_t ignore_index = kDefaultIgnore);
LabelGrid read_label_grid(const std::filesystem::path& path);

struct ManifestClass {
  std::uint32_t id = 0;
  std::optional<std::string> name;
  std::optional<std::filesystem::path> text_feature_ref;
};

struct ManifestSupportImage {
  std::filesystem::path feature_file;
  std::filesystem::path mask_file;
  std::string image_id;
};

struct ManifestQueryImage {
  std::string id;
  std::filesystem::path feature_file;
  std::optional<std::filesystem::path> mask_file;
  std::optional<std::filesystem::path> regions_file;
  std::size_t image_h = 0;
  std::size_t image_w = 0;
};

/// Dataset description. Relative paths are resolved against the manifest's
/// directory at load time.
struct Manifest {
  std::vector<ManifestClass> classes;
  std::vector<ManifestSupportImage> support_images;
  std::vector<ManifestQueryImage> query_images;
  std::size_t feature_dim = 0;
  std::uint16_t ignore_index = kDefaultIgnore;

  std::size_t num_classes() const { return classes.size(); }
  /// Query by id, or by zero-based index when no id matches.
  const ManifestQueryImage& query(const std::string& key) const;
};

Manifest load_manifest(const std::filesystem::path& path);
/// Writes paths relative to the manifest directory where possible.
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);

/// Text bank from the manifest's per-class [d] feature files; classes without
/// a reference are flagged absent. Present rows are normalized on load.
TextBank load_text_bank(const Manifest& manifest);

/// Support image features (normalized rows) with the geometry of its mask.
std::pair<DenseFeatureMap, LabelMask> load_support_image(const std::filesystem::path& feature_file,
                                                          const std::filesystem::path& mask_file,
                                                          std::size_t num_classes, std::size_t dim,
                                                          std::uint16_t ignore_index = kDefaultIgnore);

}  // namespace rns
