#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "rns/commands.hpp"

namespace {

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.empty()) continue;
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw rns::Error(rns::ErrorKind::InvalidArgument, "not a number: " + tok);
    }
  }
  return out;
}

// Class ids or class names from the manifest, comma separated.
std::set<rns::ClassId> parse_classes(const std::string& csv, const rns::Manifest& m) {
  std::set<rns::ClassId> out;
  std::stringstream ss(csv);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (tok.empty()) continue;
    bool found = false;
    for (const auto& c : m.classes)
      if (c.name && *c.name == tok) {
        out.insert(c.id);
        found = true;
      }
    if (found) continue;
    std::size_t pos = 0;
    unsigned long id = 0;
    try {
      id = std::stoul(tok, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != tok.size() || id >= m.num_classes())
      throw rns::Error(rns::ErrorKind::InvalidArgument, "unknown class '" + tok + "'");
    out.insert(static_cast<rns::ClassId>(id));
  }
  return out;
}

rns::SweepAxis parse_axis(const std::string& s) {
  if (s == "support_size") return rns::SweepAxis::SupportSize;
  if (s == "visual_drop_fraction") return rns::SweepAxis::VisualDropFraction;
  if (s == "text_drop_fraction") return rns::SweepAxis::TextDropFraction;
  throw rns::Error(rns::ErrorKind::InvalidArgument, "unknown sweep axis " + s);
}

void add_train_flags(CLI::App* cmd, rns::TrainConfig& cfg) {
  cmd->add_option("--k", cfg.k, "Neighbours retrieved per patch")->capture_default_str();
  cmd->add_option("--steps", cfg.steps, "Adam steps per query image")->capture_default_str();
  cmd->add_option("--lr", cfg.learning_rate, "Adam learning rate")->capture_default_str();
  cmd->add_option("--tau", cfg.tau, "Softmax temperature")->capture_default_str();
  cmd->add_option("--beta-f", cfg.beta_f, "Fused support loss weight")->capture_default_str();
  cmd->add_option("--beta-p", cfg.beta_p, "Pseudo-label loss weight")->capture_default_str();
  cmd->add_option("--seed", cfg.seed, "Seed")->capture_default_str();
  cmd->add_option("--threads", cfg.threads, "Retrieval worker threads")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-based test-time adaptation for open-vocabulary segmentation"};
  app.require_subcommand(1);

  std::string manifest, store, out, features, mask, query, regions, unsupported, image_id;
  std::string lambdas_csv = "0.9,0.8,0.6,0.4,0.2,0.0";
  rns::TrainConfig train;

  auto* build = app.add_subcommand("build-support", "Build a support store from a manifest");
  build->add_option("--manifest", manifest)->required();
  build->add_option("--out", out)->required();
  build->add_option("--lambdas", lambdas_csv, "Comma-separated mixing coefficients")->capture_default_str();

  auto* add = app.add_subcommand("add-support", "Add one support image to an existing store");
  add->add_option("--store", store)->required();
  add->add_option("--features", features)->required();
  add->add_option("--mask", mask)->required();
  add->add_option("--out", out)->required();
  add->add_option("--image-id", image_id, "Identifier of the support image (defaults to the feature path)");

  auto* seg = app.add_subcommand("segment", "Adapt to one query image and segment it");
  seg->add_option("--store", store)->required();
  seg->add_option("--manifest", manifest)->required();
  seg->add_option("--query", query, "Query id or index in the manifest")->required();
  seg->add_option("--regions", regions, "RNSM region map (65535 = outside every proposal)");
  seg->add_option("--unsupported", unsupported, "Classes without visual support (ids or names)");
  seg->add_option("--out", out)->required();
  add_train_flags(seg, train);

  auto* zs = app.add_subcommand("zero-shot", "Zero-shot segmentation of one query image");
  zs->add_option("--manifest", manifest)->required();
  zs->add_option("--query", query)->required();
  zs->add_option("--regions", regions);
  zs->add_option("--tau", train.tau)->capture_default_str();
  zs->add_option("--out", out)->required();

  std::string pred_dir, gt_dir;
  std::size_t num_classes = 0;
  std::uint16_t ignore = rns::kDefaultIgnore;
  auto* ev = app.add_subcommand("eval", "Dataset mIoU of predicted label maps");
  ev->add_option("--pred-dir", pred_dir)->required();
  ev->add_option("--gt-dir", gt_dir)->required();
  ev->add_option("--classes", num_classes)->required();
  ev->add_option("--ignore", ignore)->capture_default_str();

  rns::SynthConfig synth_cfg;
  auto* syn = app.add_subcommand("synth", "Write a synthetic feature world");
  syn->add_option("--seed", synth_cfg.seed)->capture_default_str();
  syn->add_option("--classes", synth_cfg.num_classes)->capture_default_str();
  syn->add_option("--dim", synth_cfg.dim)->capture_default_str();
  syn->add_option("--images-per-class", synth_cfg.images_per_class)->capture_default_str();
  syn->add_option("--queries", synth_cfg.query_images)->capture_default_str();
  syn->add_option("--separation", synth_cfg.cluster_separation, "Minimum centroid angle (rad)")->capture_default_str();
  syn->add_option("--noise", synth_cfg.feature_noise)->capture_default_str();
  syn->add_option("--misalignment", synth_cfg.text_misalignment, "Text rotation (rad)")->capture_default_str();
  syn->add_option("--no-visual-fraction", synth_cfg.fraction_without_visual)->capture_default_str();
  syn->add_option("--no-text-fraction", synth_cfg.fraction_without_text)->capture_default_str();
  syn->add_option("--out", out)->required();

  std::string axis = "support_size", points_csv = "1,2,5,10";
  std::size_t seeds = 4;
  rns::SynthConfig sweep_cfg;
  auto* sw = app.add_subcommand("sweep", "Average a synthetic sweep over several seeds; prints a TSV table");
  sw->add_option("--axis", axis, "support_size | visual_drop_fraction | text_drop_fraction")->capture_default_str();
  sw->add_option("--points", points_csv)->capture_default_str();
  sw->add_option("--seeds", seeds)->capture_default_str();
  sw->add_option("--world-seed", sweep_cfg.seed)->capture_default_str();
  sw->add_option("--classes", sweep_cfg.num_classes)->capture_default_str();
  sw->add_option("--dim", sweep_cfg.dim)->capture_default_str();
  sw->add_option("--images-per-class", sweep_cfg.images_per_class)->capture_default_str();
  sw->add_option("--separation", sweep_cfg.cluster_separation, "Minimum centroid angle (rad)")->capture_default_str();
  sw->add_option("--noise", sweep_cfg.feature_noise)->capture_default_str();
  sw->add_option("--misalignment", sweep_cfg.text_misalignment, "Text rotation (rad)")->capture_default_str();
  add_train_flags(sw, train);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 3;
  }

  try {
    if (*build) {
      const auto s = rns::commands::build_support(manifest, out, parse_doubles(lambdas_csv));
      std::cerr << "store: " << s.size() << " entries\n";
    } else if (*add) {
      const auto s = rns::commands::add_support(store, features, mask, out, image_id.empty() ? features : image_id);
      std::cerr << "store: " << s.size() << " entries\n";
    } else if (*seg) {
      rns::commands::SegmentArgs args;
      args.store = store;
      args.manifest = manifest;
      args.query = query;
      if (!regions.empty()) args.regions = regions;
      if (!unsupported.empty()) args.unsupported = parse_classes(unsupported, rns::load_manifest(manifest));
      args.out = out;
      args.config = train;
      const auto r = rns::commands::segment(args);
      if (!r.adapted) std::cerr << "no training signal; zero-shot fallback\n";
    } else if (*zs) {
      std::optional<std::filesystem::path> reg;
      if (!regions.empty()) reg = regions;
      rns::commands::zero_shot(manifest, query, reg, train.tau, out);
    } else if (*ev) {
      std::cout << rns::commands::eval(pred_dir, gt_dir, num_classes, ignore) << '\n';
    } else if (*syn) {
      rns::commands::synth(synth_cfg, out);
    } else if (*sw) {
      const auto ax = parse_axis(axis);
      rns::write_sweep_table(std::cout, ax, rns::commands::sweep(sweep_cfg, ax, parse_doubles(points_csv), seeds, train));
    }
  } catch (const rns::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return rns::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
