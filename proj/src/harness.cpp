#include "rns/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>

namespace rns {

void SynthConfig::validate() const {
  if (num_classes == 0 || dim == 0) throw Error(ErrorKind::InvalidArgument, "synthetic world needs C >= 1, d >= 1");
  if (grid_h == 0 || grid_w == 0 || patch_size == 0) throw Error(ErrorKind::InvalidArgument, "empty patch grid");
  if (max_classes_per_image == 0 || max_classes_per_image > std::max(grid_h, grid_w))
    throw Error(ErrorKind::InvalidArgument, "max_classes_per_image must fit in the grid");
  if (!(feature_noise >= 0) || !(cluster_separation >= 0) || !(cluster_separation <= std::numbers::pi))
    throw Error(ErrorKind::InvalidArgument, "invalid noise or separation");
  for (double f : {fraction_without_visual, fraction_without_text})
    if (!(f >= 0 && f <= 1)) throw Error(ErrorKind::InvalidArgument, "fractions must lie in [0,1]");
}

namespace {

Eigen::VectorXd gaussian_vector(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
  return v;
}

// Centroids at a common pairwise angle equal to the separation: a shared
// random direction mixed with the vertices of a random regular simplex.
// Needs d >= C; smaller dimensions fall back to rejection sampling.
RowMatrixXd sample_centroids(const SynthConfig& cfg, std::mt19937_64& rng) {
  const std::size_t C = cfg.num_classes;
  const std::size_t d = cfg.dim;
  const double target = std::cos(cfg.cluster_separation);
  RowMatrixXd centroids(C, d);
  if (C == 1) {
    centroids.row(0) = l2_normalized(gaussian_vector(d, rng)).transpose();
    return centroids;
  }
  const double simplex_cos = -1.0 / double(C - 1);
  if (target < simplex_cos - 1e-12)
    throw Error(ErrorKind::InfeasibleSeparation, std::to_string(C) + " centroids cannot be separated by " +
                                                     std::to_string(cfg.cluster_separation) + " rad");
  if (d >= C) {
    RowMatrixXd g(d, C);
    for (std::size_t c = 0; c < C; ++c) g.col(c) = gaussian_vector(d, rng);
    const Eigen::MatrixXd basis = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ() *
                                  Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(C));
    // Regular simplex in the span of basis columns 1..C-1.
    const Eigen::VectorXd shared = basis.col(0);
    const Eigen::MatrixXd e = basis.rightCols(static_cast<Eigen::Index>(C - 1));
    Eigen::MatrixXd simplex(static_cast<Eigen::Index>(C - 1), static_cast<Eigen::Index>(C));
    {
      // Centered one-hot vectors of R^C projected onto an orthonormal basis of
      // the sum-zero hyperplane.
      Eigen::MatrixXd centered = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(C));
      centered.rowwise() -= Eigen::RowVectorXd::Constant(static_cast<Eigen::Index>(C), 1.0 / double(C));
      const Eigen::MatrixXd plane = Eigen::HouseholderQR<Eigen::MatrixXd>(centered).householderQ() *
                                    Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(C - 1));
      simplex = plane.transpose() * centered;
      simplex.colwise().normalize();
    }
    // cos(angle) = a^2 + (1 - a^2) * simplex_cos  =>  a^2 = (target - simplex_cos) / (1 - simplex_cos)
    const double a2 = std::clamp((target - simplex_cos) / (1.0 - simplex_cos), 0.0, 1.0);
    const double a = std::sqrt(a2);
    const double b = std::sqrt(1.0 - a2);
    for (std::size_t c = 0; c < C; ++c)
      centroids.row(c) = l2_normalized(a * shared + b * e * simplex.col(static_cast<Eigen::Index>(c))).transpose();
    return centroids;
  }

  constexpr int kAttempts = 20000;
  for (std::size_t c = 0; c < C; ++c) {
    bool placed = false;
    for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
      Eigen::VectorXd v = gaussian_vector(d, rng);
      if (v.norm() < kMinNorm) continue;
      v.normalize();
      placed = true;
      for (std::size_t o = 0; o < c && placed; ++o)
        if (centroids.row(o).dot(v) > target + 1e-12) placed = false;
      if (placed) centroids.row(c) = v.transpose();
    }
    if (!placed)
      throw Error(ErrorKind::InfeasibleSeparation, "could not place " + std::to_string(C) +
                                                       " centroids at the requested angle in dimension " +
                                                       std::to_string(d));
  }
  return centroids;
}

// Rotates each centroid by `angle` towards a random orthogonal direction.
RowMatrixXd misaligned_text(const RowMatrixXd& centroids, double angle, std::mt19937_64& rng) {
  RowMatrixXd text(centroids.rows(), centroids.cols());
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const Eigen::VectorXd t = centroids.row(c).transpose();
    Eigen::VectorXd u = Eigen::VectorXd::Zero(t.size());
    if (t.size() > 1) {
      while (u.norm() < 1e-6) {
        u = gaussian_vector(static_cast<std::size_t>(t.size()), rng);
        u -= u.dot(t) * t;
      }
      u.normalize();
    }
    text.row(c) = l2_normalized(std::cos(angle) * t + std::sin(angle) * u).transpose();
  }
  return text;
}

SynthImage make_image(const SynthConfig& cfg, const RowMatrixXd& centroids, std::vector<ClassId> classes,
                      std::uint64_t image_id, std::mt19937_64& rng) {
  std::shuffle(classes.begin(), classes.end(), rng);
  bool vertical = std::bernoulli_distribution(0.5)(rng);
  if ((vertical ? cfg.grid_w : cfg.grid_h) < classes.size()) vertical = !vertical;
  const std::size_t span = vertical ? cfg.grid_w : cfg.grid_h;

  // Random stripe boundaries, each stripe at least one patch wide.
  std::vector<std::size_t> cuts(span - 1);
  std::iota(cuts.begin(), cuts.end(), std::size_t{1});
  std::shuffle(cuts.begin(), cuts.end(), rng);
  cuts.resize(classes.size() - 1);
  std::sort(cuts.begin(), cuts.end());
  cuts.push_back(span);

  SynthImage img;
  img.image_id = image_id;
  img.features.grid_h = cfg.grid_h;
  img.features.grid_w = cfg.grid_w;
  img.features.image_h = cfg.grid_h * cfg.patch_size;
  img.features.image_w = cfg.grid_w * cfg.patch_size;
  img.features.data.resize(cfg.grid_h * cfg.grid_w, cfg.dim);
  img.mask.num_classes = cfg.num_classes;
  img.mask.data.resize(img.features.image_h, img.features.image_w);

  std::normal_distribution<double> noise(0.0, cfg.feature_noise);
  for (std::size_t r = 0; r < cfg.grid_h; ++r) {
    for (std::size_t q = 0; q < cfg.grid_w; ++q) {
      const std::size_t along = vertical ? q : r;
      const std::size_t stripe = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), along) - cuts.begin());
      const ClassId c = classes[stripe];
      Eigen::VectorXd f = centroids.row(c).transpose();
      for (Eigen::Index k = 0; k < f.size(); ++k) f(k) += noise(rng);
      img.features.data.row(r * cfg.grid_w + q) = l2_normalized(f).transpose();
      img.mask.data.block(r * cfg.patch_size, q * cfg.patch_size, cfg.patch_size, cfg.patch_size)
          .setConstant(static_cast<std::uint16_t>(c));
    }
  }
  std::sort(classes.begin(), classes.end());
  img.classes = std::move(classes);
  return img;
}

std::vector<ClassId> random_classes(const SynthConfig& cfg, std::optional<ClassId> required, std::mt19937_64& rng) {
  const std::size_t k = std::uniform_int_distribution<std::size_t>(
      1, std::min(cfg.max_classes_per_image, cfg.num_classes))(rng);
  std::vector<ClassId> all(cfg.num_classes);
  std::iota(all.begin(), all.end(), ClassId{0});
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<ClassId> out;
  if (required) out.push_back(*required);
  for (ClassId c : all) {
    if (out.size() >= k) break;
    if (!required || c != *required) out.push_back(c);
  }
  return out;
}

}  // namespace

std::vector<SynthImage> sample_support(const std::vector<SynthImage>& pool, std::size_t num_classes,
                                       std::size_t images_per_class, std::mt19937_64& rng) {
  std::vector<ClassId> order(num_classes);
  std::iota(order.begin(), order.end(), ClassId{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::size_t> seen(num_classes, 0);
  // One random pool order shared by every class: drawing per-class
  // candidates from it keeps samples for growing B mostly nested.
  std::vector<std::size_t> pool_order(pool.size());
  std::iota(pool_order.begin(), pool_order.end(), std::size_t{0});
  std::shuffle(pool_order.begin(), pool_order.end(), rng);

  std::vector<bool> taken(pool.size(), false);
  std::vector<std::size_t> picked;
  for (ClassId c : order) {
    if (seen[c] >= images_per_class) continue;
    std::vector<std::size_t> candidates;
    for (std::size_t i : pool_order)
      if (candidates.size() < images_per_class && !taken[i] &&
          std::binary_search(pool[i].classes.begin(), pool[i].classes.end(), c))
        candidates.push_back(i);
    for (std::size_t i : candidates) {
      taken[i] = true;
      picked.push_back(i);
      for (ClassId o : pool[i].classes) ++seen[o];
    }
  }
  std::vector<SynthImage> out;
  out.reserve(picked.size());
  for (std::size_t i : picked) out.push_back(pool[i]);
  return out;
}

SynthWorld generate_world(const SynthConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  SynthWorld w;
  w.config = config;
  w.centroids = sample_centroids(config, rng);
  w.text.features = misaligned_text(w.centroids, config.text_misalignment, rng);
  w.text.present.assign(config.num_classes, true);
  w.text.class_names.resize(config.num_classes);
  for (std::size_t c = 0; c < config.num_classes; ++c) w.text.class_names[c] = "class_" + std::to_string(c);

  std::uint64_t next_id = 0;
  for (ClassId c = 0; c < config.num_classes; ++c)
    for (std::size_t i = 0; i < config.pool_images_per_class; ++i)
      w.pool.push_back(make_image(config, w.centroids, random_classes(config, c, rng), next_id++, rng));
  for (std::size_t i = 0; i < config.query_images; ++i)
    w.queries.push_back(make_image(config, w.centroids, random_classes(config, std::nullopt, rng), next_id++, rng));

  w.class_order.resize(config.num_classes);
  std::iota(w.class_order.begin(), w.class_order.end(), ClassId{0});
  std::shuffle(w.class_order.begin(), w.class_order.end(), rng);

  std::mt19937_64 support_rng(config.seed ^ 0x5eed5u);
  w.support = sample_support(w.pool, config.num_classes, config.images_per_class, support_rng);
  return w;
}

IoUReport compute_miou(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& gts, std::size_t num_classes,
                       std::uint16_t ignore_index) {
  if (preds.size() != gts.size()) throw Error(ErrorKind::ShapeMismatch, "prediction and ground-truth counts differ");
  IoUReport r;
  r.true_positive.assign(num_classes, 0);
  r.false_positive.assign(num_classes, 0);
  r.false_negative.assign(num_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const LabelGrid& p = preds[i].data;
    const LabelGrid& g = gts[i].data;
    if (p.rows() != g.rows() || p.cols() != g.cols())
      throw Error(ErrorKind::ShapeMismatch, "prediction " + std::to_string(i) + " differs in size from ground truth");
    for (Eigen::Index k = 0; k < g.size(); ++k) {
      const std::uint16_t gt = g.reshaped<Eigen::RowMajor>()(k);
      if (gt == ignore_index) continue;
      if (gt >= num_classes) throw Error(ErrorKind::InvalidArgument, "ground-truth label out of range");
      const std::uint16_t pr = p.reshaped<Eigen::RowMajor>()(k);
      if (pr == gt) {
        ++r.true_positive[gt];
      } else {
        ++r.false_negative[gt];
        if (pr < num_classes) ++r.false_positive[pr];
      }
    }
  }
  r.per_class_iou.assign(num_classes, 0.0);
  r.evaluated.assign(num_classes, false);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::uint64_t uni = r.true_positive[c] + r.false_positive[c] + r.false_negative[c];
    if (uni == 0) continue;
    r.evaluated[c] = true;
    r.per_class_iou[c] = double(r.true_positive[c]) / double(uni);
    sum += r.per_class_iou[c];
    ++n;
  }
  r.mean_iou = n ? sum / double(n) : 0.0;
  return r;
}

SupportStore build_store(const std::vector<SynthImage>& images, std::size_t num_classes, std::size_t dim,
                         const std::set<ClassId>& hidden_classes, const std::vector<double>& lambdas) {
  SupportStore store(num_classes, dim, lambdas);
  for (const SynthImage& img : images) {
    LabelMask mask = img.mask;
    bool any = false;
    for (Eigen::Index k = 0; k < mask.data.size(); ++k) {
      auto& v = mask.data.reshaped<Eigen::RowMajor>()(k);
      if (v != mask.ignore_index && hidden_classes.contains(v)) v = mask.ignore_index;
      any = any || v != mask.ignore_index;
    }
    if (any) store.add_support_image(img.features, mask, img.image_id);
  }
  return store;
}

std::set<ClassId> dropped_classes(const SynthWorld& world, double fraction) {
  const auto n = static_cast<std::size_t>(std::lround(fraction * double(world.class_order.size())));
  return {world.class_order.begin(), world.class_order.begin() + static_cast<std::ptrdiff_t>(n)};
}

TextBank drop_text(const TextBank& bank, const std::set<ClassId>& classes) {
  TextBank out = bank;
  for (ClassId c : classes) {
    out.present.at(c) = false;
    out.features.row(c).setZero();
  }
  return substitute_missing_text(std::move(out));
}

const char* to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::SupportSize: return "support_size";
    case SweepAxis::VisualDropFraction: return "visual_drop_fraction";
    case SweepAxis::TextDropFraction: return "text_drop_fraction";
  }
  return "unknown";
}

EvalResult evaluate_rns(const SynthWorld& world, const SupportStore& store, const TextBank& bank,
                        const std::set<ClassId>& unsupported, const TrainConfig& config) {
  EvalResult out;
  std::vector<LabelMask> gts;
  for (const SynthImage& q : world.queries) {
    out.predictions.push_back(segment(store, q.features, bank, nullptr, unsupported, config).full_res_labels);
    gts.push_back(q.mask);
  }
  out.miou = compute_miou(out.predictions, gts, world.config.num_classes).mean_iou;
  return out;
}

EvalResult evaluate_zero_shot(const SynthWorld& world, const TextBank& bank, double tau) {
  EvalResult out;
  std::vector<LabelMask> gts;
  for (const SynthImage& q : world.queries) {
    out.predictions.push_back(zero_shot_segment(q.features, bank, tau).full_res_labels);
    gts.push_back(q.mask);
  }
  out.miou = compute_miou(out.predictions, gts, world.config.num_classes).mean_iou;
  return out;
}

std::vector<SweepRow> run_sweep(const SynthWorld& world, SweepAxis axis, const std::vector<double>& points,
                                const TrainConfig& config) {
  const std::size_t C = world.config.num_classes;
  const std::size_t d = world.config.dim;
  const TextBank full_text = substitute_missing_text(world.text);
  std::set<ClassId> all_classes;
  for (ClassId c = 0; c < C; ++c) all_classes.insert(c);
  const TextBank no_text = drop_text(world.text, all_classes);
  TrainConfig no_pseudo = config;
  no_pseudo.beta_p = 0.0;

  std::vector<SweepRow> rows;
  for (double point : points) {
    SweepRow row;
    row.point = point;
    switch (axis) {
      case SweepAxis::SupportSize: {
        if (point < 0) throw Error(ErrorKind::InvalidArgument, "support size must be non-negative");
        std::mt19937_64 rng(world.config.seed ^ 0x5eed5u);
        const auto support = sample_support(world.pool, C, static_cast<std::size_t>(point), rng);
        const SupportStore store = build_store(support, C, d);
        row.zero_shot_miou = evaluate_zero_shot(world, full_text, config.tau).miou;
        row.rns_miou = evaluate_rns(world, store, full_text, {}, config).miou;
        // No class lacks visual support, so the pseudo-label term is empty.
        row.rns_without_pseudo_miou = row.rns_miou;
        row.rns_without_text_miou = evaluate_rns(world, store, no_text, {}, config).miou;
        break;
      }
      case SweepAxis::VisualDropFraction: {
        const std::set<ClassId> dropped = dropped_classes(world, point);
        const SupportStore store = build_store(world.support, C, d, dropped);
        row.zero_shot_miou = evaluate_zero_shot(world, full_text, config.tau).miou;
        row.rns_miou = evaluate_rns(world, store, full_text, dropped, config).miou;
        row.rns_without_pseudo_miou =
            dropped.empty() ? row.rns_miou : evaluate_rns(world, store, full_text, dropped, no_pseudo).miou;
        row.rns_without_text_miou = evaluate_rns(world, store, no_text, {}, config).miou;
        break;
      }
      case SweepAxis::TextDropFraction: {
        const TextBank bank = drop_text(world.text, dropped_classes(world, point));
        const SupportStore store = build_store(world.support, C, d);
        row.zero_shot_miou = evaluate_zero_shot(world, bank, config.tau).miou;
        row.rns_miou = evaluate_rns(world, store, bank, {}, config).miou;
        row.rns_without_pseudo_miou = row.rns_miou;
        row.rns_without_text_miou = evaluate_rns(world, store, no_text, {}, config).miou;
        break;
      }
    }
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_table(std::ostream& os, SweepAxis axis, const std::vector<SweepRow>& rows) {
  os << to_string(axis) << "\tzero_shot_miou\trns_miou\trns_without_text_miou\trns_without_pseudo_miou\n";
  os << std::setprecision(6) << std::fixed;
  for (const SweepRow& r : rows)
    os << r.point << '\t' << r.zero_shot_miou << '\t' << r.rns_miou << '\t' << r.rns_without_text_miou << '\t'
       << r.rns_without_pseudo_miou << '\n';
}

}  // namespace rns
