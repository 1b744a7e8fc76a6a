#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rns/harness.hpp"
#include "rns/io.hpp"

namespace rns::commands {

namespace fs = std::filesystem;

/// Builds a support store from every support image of a manifest.
SupportStore build_support(const fs::path& manifest, const fs::path& out, const std::vector<double>& lambdas);

/// Loads a store, adds one support image and writes the expanded store.
SupportStore add_support(const fs::path& store, const fs::path& features, const fs::path& mask, const fs::path& out,
                         const std::string& image_id);

struct SegmentArgs {
  fs::path store;
  fs::path manifest;
  std::string query;
  std::optional<fs::path> regions;
  std::set<ClassId> unsupported;
  fs::path out;
  TrainConfig config;
};

/// Adapted segmentation of one manifest query; writes an RNSM label map.
SegmentationResult segment(const SegmentArgs& args);

/// Zero-shot segmentation of one manifest query; writes an RNSM label map.
SegmentationResult zero_shot(const fs::path& manifest, const std::string& query, const std::optional<fs::path>& regions,
                             double tau, const fs::path& out);

/// Scores every prediction in pred_dir against the same-named file in
/// gt_dir. Returns the report as JSON text.
std::string eval(const fs::path& pred_dir, const fs::path& gt_dir, std::size_t num_classes, std::uint16_t ignore);

/// Writes a synthetic world (text, support, queries, manifest.json) to dir.
void synth(const SynthConfig& config, const fs::path& dir);

/// Runs a sweep averaged over `seeds` worlds starting at config.seed.
std::vector<SweepRow> sweep(const SynthConfig& world, SweepAxis axis, const std::vector<double>& points,
                            std::size_t seeds, const TrainConfig& config);

}  // namespace rns::commands
