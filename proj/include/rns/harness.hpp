#pragma once

#include <cstdint>
#include <numbers>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rns/inference.hpp"

namespace rns {

/// Parameters of a synthetic feature world: class centroids on the unit
/// sphere, noisy patch features around them and misaligned text features.
struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t num_classes = 10;
  std::size_t dim = 16;
  double cluster_separation = std::numbers::pi / 4;  // min pairwise centroid angle
  double feature_noise = 0.15;  // per-component Gaussian sigma
  double text_misalignment = 0.3;  // radians
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t patch_size = 4;  // pixels per patch side
  std::size_t images_per_class = 3;
  std::size_t pool_images_per_class = 12;  // training pool the support set is sampled from
  std::size_t query_images = 12;
  std::size_t max_classes_per_image = 3;
  double fraction_without_visual = 0.0;
  double fraction_without_text = 0.0;

  void validate() const;
};

struct SynthImage {
  DenseFeatureMap features;
  LabelMask mask;
  std::uint64_t image_id = 0;
  std::vector<ClassId> classes;  // sorted classes present in the mask
};

struct SynthWorld {
  SynthConfig config;
  RowMatrixXd centroids;  // C x d
  TextBank text;  // every class present
  std::vector<SynthImage> pool;  // images the support set is sampled from
  std::vector<SynthImage> support;  // images_per_class sample of the pool
  std::vector<SynthImage> queries;
  std::vector<ClassId> class_order;  // seeded permutation used for drop fractions
};

/// Seed-deterministic synthetic world. Throws InfeasibleSeparation when the
/// centroids cannot meet the minimum angle.
SynthWorld generate_world(const SynthConfig& config);

/// Support sampling over a random class permutation: B images per class,
/// skipping classes that already appear B times among sampled images.
std::vector<SynthImage> sample_support(const std::vector<SynthImage>& pool, std::size_t num_classes,
                                       std::size_t images_per_class, std::mt19937_64& rng);

struct IoUReport {
  std::vector<double> per_class_iou;
  std::vector<bool> evaluated;  // false where the class has empty union
  double mean_iou = 0;
  std::vector<std::uint64_t> true_positive, false_positive, false_negative;
};

/// Dataset-level IoU accumulated over all image pairs; ignore pixels of the
/// ground truth are skipped.
IoUReport compute_miou(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& gts, std::size_t num_classes,
                       std::uint16_t ignore_index = kDefaultIgnore);

/// Support store built from the given images, with pixels of the listed
/// classes masked out.
SupportStore build_store(const std::vector<SynthImage>& images, std::size_t num_classes, std::size_t dim,
                         const std::set<ClassId>& hidden_classes = {},
                         const std::vector<double>& lambdas = default_lambdas());

/// First round(fraction * C) classes of the world's class permutation.
std::set<ClassId> dropped_classes(const SynthWorld& world, double fraction);

/// Text bank with the given classes' names removed, then materialized.
TextBank drop_text(const TextBank& bank, const std::set<ClassId>& classes);

enum class SweepAxis { SupportSize, VisualDropFraction, TextDropFraction };

const char* to_string(SweepAxis axis);

struct SweepRow {
  double point = 0;
  double zero_shot_miou = 0;
  double rns_miou = 0;
  double rns_without_text_miou = 0;
  double rns_without_pseudo_miou = 0;
};

struct EvalResult {
  double miou = 0;
  std::vector<LabelMask> predictions;
};

/// Segments every query of the world and scores it.
EvalResult evaluate_rns(const SynthWorld& world, const SupportStore& store, const TextBank& bank,
                        const std::set<ClassId>& unsupported, const TrainConfig& config);
EvalResult evaluate_zero_shot(const SynthWorld& world, const TextBank& bank, double tau);

/// For each axis point, rebuilds or filters support and text, then scores
/// zero-shot, full method, the text-free variant and the variant without the
/// pseudo-label term.
std::vector<SweepRow> run_sweep(const SynthWorld& world, SweepAxis axis, const std::vector<double>& points,
                                const TrainConfig& config);

void write_sweep_table(std::ostream& os, SweepAxis axis, const std::vector<SweepRow>& rows);

}  // namespace rns
