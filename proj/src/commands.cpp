#include "rns/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <memory>

#include <json.hpp>

namespace rns::commands {

namespace {

struct QueryInputs {
  Manifest manifest;
  std::shared_ptr<const TextBank> bank;
  DenseFeatureMap features;
  std::optional<RegionSet> regions;
};

QueryInputs load_query(const fs::path& manifest_path, const std::string& query,
                       const std::optional<fs::path>& regions_override) {
  QueryInputs in;
  in.manifest = load_manifest(manifest_path);
  in.bank = std::make_shared<const TextBank>(substitute_missing_text(load_text_bank(in.manifest)));
  const ManifestQueryImage& q = in.manifest.query(query);
  in.features = read_feature_map(q.feature_file, q.image_h, q.image_w, in.manifest.feature_dim);
  if (regions_override) {
    const LabelGrid grid = read_label_grid(*regions_override);
    if (static_cast<std::size_t>(grid.rows()) != q.image_h || static_cast<std::size_t>(grid.cols()) != q.image_w)
      throw Error(ErrorKind::ShapeMismatch, regions_override->string() + ": region map differs from image size");
    in.regions = regions_from_grid(grid);
  }
  return in;
}

void write_labels(const fs::path& out, const LabelMask& labels) { write_mask(out, labels); }

}  // namespace

SupportStore build_support(const fs::path& manifest_path, const fs::path& out, const std::vector<double>& lambdas) {
  const Manifest m = load_manifest(manifest_path);
  SupportStore store(m.num_classes(), m.feature_dim, lambdas);
  for (const ManifestSupportImage& s : m.support_images) {
    auto [x, mask] = load_support_image(s.feature_file, s.mask_file, m.num_classes(), m.feature_dim, m.ignore_index);
    store.add_support_image(x, mask, hash_image_id(s.image_id));
  }
  save_store(store, out);
  return store;
}

SupportStore add_support(const fs::path& store_path, const fs::path& features, const fs::path& mask_path,
                         const fs::path& out, const std::string& image_id) {
  SupportStore store = load_store(store_path);
  auto [x, mask] = load_support_image(features, mask_path, store.num_classes(), store.dim());
  store.add_support_image(x, mask, hash_image_id(image_id));
  save_store(store, out);
  return store;
}

SegmentationResult segment(const SegmentArgs& args) {
  args.config.validate();
  QueryInputs in = load_query(args.manifest, args.query, args.regions);
  SupportStore store = load_store(args.store);
  if (store.num_classes() != in.manifest.num_classes() || store.dim() != in.manifest.feature_dim)
    throw Error(ErrorKind::DimensionMismatch, "store shape differs from manifest classes or feature_dim");
  store.attach_text(in.bank);
  const SegmentationResult r =
      rns::segment(store, in.features, *in.bank, in.regions ? &*in.regions : nullptr, args.unsupported, args.config);
  write_labels(args.out, r.full_res_labels);
  return r;
}

SegmentationResult zero_shot(const fs::path& manifest, const std::string& query, const std::optional<fs::path>& regions,
                             double tau, const fs::path& out) {
  QueryInputs in = load_query(manifest, query, regions);
  const SegmentationResult r = zero_shot_segment(in.features, *in.bank, tau, in.regions ? &*in.regions : nullptr);
  write_labels(out, r.full_res_labels);
  return r;
}

std::string eval(const fs::path& pred_dir, const fs::path& gt_dir, std::size_t num_classes, std::uint16_t ignore) {
  if (!fs::is_directory(pred_dir)) throw Error(ErrorKind::MissingFile, pred_dir.string() + " is not a directory");
  std::vector<fs::path> names;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.is_regular_file() && e.path().extension() == ".rnsm") names.push_back(e.path().filename());
  std::sort(names.begin(), names.end());

  std::vector<LabelMask> preds, gts;
  for (const fs::path& name : names) {
    const fs::path gt = gt_dir / name;
    if (!fs::exists(gt)) throw Error(ErrorKind::MissingFile, "no ground truth for " + name.string());
    preds.push_back({read_label_grid(pred_dir / name), ignore, num_classes});
    gts.push_back(read_mask(gt, num_classes, ignore));
  }
  const IoUReport r = compute_miou(preds, gts, num_classes, ignore);

  nlohmann::json j;
  j["images"] = names.size();
  j["num_classes"] = num_classes;
  j["mean_iou"] = r.mean_iou;
  j["per_class"] = nlohmann::json::array();
  for (std::size_t c = 0; c < num_classes; ++c) {
    nlohmann::json row{{"class", c},
                       {"tp", r.true_positive[c]},
                       {"fp", r.false_positive[c]},
                       {"fn", r.false_negative[c]}};
    row["iou"] = r.evaluated[c] ? nlohmann::json(r.per_class_iou[c]) : nlohmann::json(nullptr);
    j["per_class"].push_back(std::move(row));
  }
  return j.dump(2);
}

void synth(const SynthConfig& config, const fs::path& dir) {
  const SynthWorld world = generate_world(config);
  const std::set<ClassId> no_text = dropped_classes(world, config.fraction_without_text);
  const std::set<ClassId> no_visual = dropped_classes(world, config.fraction_without_visual);

  fs::create_directories(dir / "text");
  fs::create_directories(dir / "support");
  fs::create_directories(dir / "query");

  char name[64];
  Manifest m;
  m.feature_dim = config.dim;
  for (ClassId c = 0; c < config.num_classes; ++c) {
    ManifestClass mc{c, std::nullopt, std::nullopt};
    if (!no_text.contains(c)) {
      mc.name = world.text.class_names[c];
      std::snprintf(name, sizeof name, "class_%03u.rnsf", c);
      const fs::path p = dir / "text" / name;
      const Eigen::VectorXf t = world.text.features.row(c).transpose().cast<float>();
      write_tensor(p, Tensor{{config.dim}, std::vector<float>(t.data(), t.data() + t.size())});
      mc.text_feature_ref = p;
    }
    m.classes.push_back(std::move(mc));
  }

  for (const SynthImage& img : world.support) {
    LabelMask mask = img.mask;
    bool any = false;
    for (Eigen::Index k = 0; k < mask.data.size(); ++k) {
      auto& v = mask.data.reshaped<Eigen::RowMajor>()(k);
      if (v != mask.ignore_index && no_visual.contains(v)) v = mask.ignore_index;
      any = any || v != mask.ignore_index;
    }
    if (!any) continue;
    std::snprintf(name, sizeof name, "s_%05llu", static_cast<unsigned long long>(img.image_id));
    const fs::path base = dir / "support" / name;
    write_feature_map(fs::path(base).replace_extension(".rnsf"), img.features);
    write_mask(fs::path(base).replace_extension(".rnsm"), mask);
    m.support_images.push_back({fs::path(base).replace_extension(".rnsf"), fs::path(base).replace_extension(".rnsm"),
                                std::string(name)});
  }

  for (std::size_t i = 0; i < world.queries.size(); ++i) {
    const SynthImage& img = world.queries[i];
    std::snprintf(name, sizeof name, "q_%04zu", i);
    const fs::path base = dir / "query" / name;
    write_feature_map(fs::path(base).replace_extension(".rnsf"), img.features);
    write_mask(fs::path(base).replace_extension(".rnsm"), img.mask);
    ManifestQueryImage q;
    q.id = name;
    q.feature_file = fs::path(base).replace_extension(".rnsf");
    q.mask_file = fs::path(base).replace_extension(".rnsm");
    q.image_h = img.features.image_h;
    q.image_w = img.features.image_w;
    m.query_images.push_back(std::move(q));
  }
  save_manifest(m, dir / "manifest.json");
}

std::vector<SweepRow> sweep(const SynthConfig& world_config, SweepAxis axis, const std::vector<double>& points,
                            std::size_t seeds, const TrainConfig& config) {
  if (seeds == 0) throw Error(ErrorKind::InvalidArgument, "sweep needs at least one seed");
  std::vector<SweepRow> mean(points.size());
  for (std::size_t s = 0; s < seeds; ++s) {
    SynthConfig cfg = world_config;
    cfg.seed = world_config.seed + s;
    const auto rows = run_sweep(generate_world(cfg), axis, points, config);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      mean[i].point = rows[i].point;
      mean[i].zero_shot_miou += rows[i].zero_shot_miou / double(seeds);
      mean[i].rns_miou += rows[i].rns_miou / double(seeds);
      mean[i].rns_without_text_miou += rows[i].rns_without_text_miou / double(seeds);
      mean[i].rns_without_pseudo_miou += rows[i].rns_without_pseudo_miou / double(seeds);
    }
  }
  return mean;
}

}  // namespace rns::commands
