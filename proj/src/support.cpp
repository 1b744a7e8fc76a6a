#include "rns/support.hpp"

#include <algorithm>
#include <cmath>

#include "binary.hpp"

namespace rns {

std::vector<double> default_lambdas() { return {0.9, 0.8, 0.6, 0.4, 0.2, 0.0}; }

bool TextBank::materialized() const {
  if (all_absent) return true;
  for (Eigen::Index c = 0; c < features.rows(); ++c)
    if (std::abs(features.row(c).norm() - 1.0) > 1e-5) return false;
  return true;
}

TextBank substitute_missing_text(TextBank bank) {
  const std::size_t C = bank.num_classes();
  if (bank.present.size() != C) throw Error(ErrorKind::ShapeMismatch, "present flags do not match class count");

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(bank.features.cols());
  std::size_t n_present = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (!bank.present[c]) continue;
    mean += bank.features.row(c).transpose();
    ++n_present;
  }
  if (n_present == 0) {
    bank.features.setZero();
    bank.all_absent = true;
    return bank;
  }
  if (n_present == C) return bank;

  const Eigen::VectorXd fill = l2_normalized(mean / double(n_present));
  for (std::size_t c = 0; c < C; ++c)
    if (!bank.present[c]) bank.features.row(c) = fill.transpose();
  bank.all_absent = false;
  return bank;
}

Eigen::VectorXd fuse(const Eigen::Ref<const Eigen::VectorXd>& text, const Eigen::Ref<const Eigen::VectorXd>& visual,
                     double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw Error(ErrorKind::InvalidArgument, "lambda outside [0,1]");
  if (text.size() != visual.size()) throw Error(ErrorKind::DimensionMismatch, "fusion operands differ in size");
  if (lambda == 1.0) return l2_normalized(text);
  if (lambda == 0.0) return l2_normalized(visual);
  return l2_normalized(lambda * text + (1.0 - lambda) * visual);
}

std::vector<std::pair<ClassId, Eigen::VectorXd>> pool_image_class_features(const DenseFeatureMap& x,
                                                                           const PatchLabelMatrix& labels) {
  if (labels.data.rows() != x.data.rows())
    throw Error(ErrorKind::ShapeMismatch, "label matrix and feature map differ in patch count");
  std::vector<std::pair<ClassId, Eigen::VectorXd>> out;
  for (Eigen::Index c = 0; c < labels.data.cols(); ++c) {
    const auto col = labels.data.col(c);
    if ((col.array() == 0.0).all()) continue;
    out.emplace_back(static_cast<ClassId>(c), l2_normalized(x.data.transpose() * col));
  }
  return out;
}

std::uint64_t hash_image_id(std::string_view id) noexcept {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : id) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

SupportStore::SupportStore(std::size_t num_classes, std::size_t dim, std::vector<double> lambdas)
    : num_classes_(num_classes),
      dim_(dim),
      lambdas_(std::move(lambdas)),
      accumulators_(RowMatrixXf::Zero(num_classes, dim)),
      counts_(num_classes, 0),
      fused_(num_classes) {
  if (num_classes == 0 || dim == 0) throw Error(ErrorKind::InvalidArgument, "store needs C >= 1 and d >= 1");
  if (lambdas_.empty()) throw Error(ErrorKind::InvalidArgument, "lambda set is empty");
  for (double l : lambdas_)
    if (!(l >= 0.0 && l <= 1.0)) throw Error(ErrorKind::InvalidArgument, "lambda outside [0,1]");
}

SupportEntry SupportStore::entry(std::size_t i) const {
  return {Eigen::Map<const Eigen::VectorXf>(vectors_.data() + i * dim_, static_cast<Eigen::Index>(dim_)),
          class_ids_[i], image_ids_[i], entry_ids_[i]};
}

Eigen::Map<const RowMatrixXf> SupportStore::vectors() const {
  return {vectors_.data(), static_cast<Eigen::Index>(size()), static_cast<Eigen::Index>(dim_)};
}

std::uint64_t SupportStore::add_entry(ClassId class_id, const Eigen::Ref<const Eigen::VectorXd>& vector,
                                      std::uint64_t image_id) {
  if (class_id >= num_classes_) throw Error(ErrorKind::InvalidArgument, "class id out of range");
  if (static_cast<std::size_t>(vector.size()) != dim_)
    throw Error(ErrorKind::DimensionMismatch, "support vector dimension differs from store");
  const Eigen::VectorXf v = vector.cast<float>();
  vectors_.insert(vectors_.end(), v.data(), v.data() + dim_);
  class_ids_.push_back(class_id);
  image_ids_.push_back(image_id);
  entry_ids_.push_back(next_entry_id_);
  accumulators_.row(class_id) += v.transpose();
  ++counts_[class_id];
  return next_entry_id_++;
}

std::vector<ClassId> SupportStore::add_support_image(const DenseFeatureMap& x, const LabelMask& mask,
                                                     std::uint64_t image_id) {
  if (x.dim() != dim_) throw Error(ErrorKind::DimensionMismatch, "feature dimension differs from store");
  if (mask.num_classes > num_classes_) throw Error(ErrorKind::InvalidArgument, "mask has more classes than store");
  LabelMask m = mask;
  m.num_classes = num_classes_;
  const PatchLabelMatrix labels = downsample_labels(m, x.grid_h, x.grid_w);
  std::vector<ClassId> affected;
  for (const auto& [c, v] : pool_image_class_features(x, labels)) {
    add_entry(c, v, image_id);
    affected.push_back(c);
  }
  if (text_)
    for (ClassId c : affected) refresh_fused(c);
  return affected;
}

void SupportStore::attach_text(std::shared_ptr<const TextBank> bank) {
  if (!bank) throw Error(ErrorKind::InvalidArgument, "null text bank");
  if (bank->num_classes() != num_classes_ || bank->dim() != dim_)
    throw Error(ErrorKind::DimensionMismatch, "text bank shape differs from store");
  if (!bank->materialized())
    throw Error(ErrorKind::InvalidArgument, "text bank must be materialized before fusion");
  text_ = std::move(bank);
  for (ClassId c = 0; c < num_classes_; ++c) refresh_fused(c);
}

std::vector<double> SupportStore::effective_lambdas() const {
  if (text_ && text_->all_absent) return {0.0};
  return lambdas_;
}

void SupportStore::refresh_fused(ClassId c) {
  fused_[c].clear();
  if (counts_[c] == 0) return;
  const Eigen::VectorXd visual = aggregate_class_feature(*this, c);
  const Eigen::VectorXd text = text_->features.row(c).transpose();
  for (double lambda : effective_lambdas()) fused_[c].push_back(fuse(text, visual, lambda));
}

std::vector<FusedFeature> SupportStore::fused() const {
  if (!text_) throw Error(ErrorKind::InvalidArgument, "no text bank attached");
  const auto lambdas = effective_lambdas();
  std::vector<FusedFeature> out;
  for (ClassId c = 0; c < num_classes_; ++c)
    for (std::size_t l = 0; l < fused_[c].size(); ++l) out.push_back({c, lambdas[l], fused_[c][l]});
  return out;
}

const std::vector<Eigen::VectorXd>& SupportStore::fused_for(ClassId c) const {
  if (!text_) throw Error(ErrorKind::InvalidArgument, "no text bank attached");
  return fused_.at(c);
}

bool operator==(const SupportStore& a, const SupportStore& b) {
  return a.num_classes_ == b.num_classes_ && a.dim_ == b.dim_ && a.lambdas_ == b.lambdas_ &&
         a.vectors_ == b.vectors_ && a.class_ids_ == b.class_ids_ && a.entry_ids_ == b.entry_ids_ &&
         a.image_ids_ == b.image_ids_ && a.accumulators_ == b.accumulators_ && a.counts_ == b.counts_;
}

Eigen::VectorXd aggregate_class_feature(const SupportStore& store, ClassId class_id) {
  if (class_id >= store.num_classes() || store.class_counts()[class_id] == 0)
    throw Error(ErrorKind::NoVisualSupport, "class " + std::to_string(class_id) + " has no visual support");
  return l2_normalized(store.class_accumulators().row(class_id).transpose().cast<double>());
}

std::vector<FusedFeature> build_fused_set(const SupportStore& store, const TextBank& bank) {
  const std::vector<double> lambdas = bank.all_absent ? std::vector<double>{0.0} : store.lambdas();
  std::vector<FusedFeature> out;
  for (ClassId c = 0; c < store.num_classes(); ++c) {
    if (store.class_counts()[c] == 0) continue;
    const Eigen::VectorXd visual = aggregate_class_feature(store, c);
    for (double lambda : lambdas) out.push_back({c, lambda, fuse(bank.features.row(c).transpose(), visual, lambda)});
  }
  return out;
}

namespace {
constexpr std::string_view kStoreMagic = "RNSS";
constexpr std::uint8_t kStoreVersion = 1;
}  // namespace

std::vector<std::uint8_t> serialize_store(const SupportStore& store) {
  detail::ByteWriter w;
  w.bytes(kStoreMagic);
  w.u8(kStoreVersion);
  w.u32(static_cast<std::uint32_t>(store.num_classes()));
  w.u32(static_cast<std::uint32_t>(store.dim()));
  w.u32(static_cast<std::uint32_t>(store.lambdas().size()));
  for (double l : store.lambdas()) w.f64(l);
  w.u64(store.size());
  const auto vecs = store.vectors();
  for (std::size_t i = 0; i < store.size(); ++i) {
    w.u32(store.class_ids()[i]);
    w.u64(store.entry_ids()[i]);
    w.u64(store.image_ids()[i]);
    for (Eigen::Index k = 0; k < vecs.cols(); ++k) w.f32(vecs(static_cast<Eigen::Index>(i), k));
  }
  const RowMatrixXf& acc = store.class_accumulators();
  for (Eigen::Index c = 0; c < acc.rows(); ++c)
    for (Eigen::Index k = 0; k < acc.cols(); ++k) w.f32(acc(c, k));
  for (std::uint64_t n : store.class_counts()) w.u64(n);
  return w.take();
}

void save_store(const SupportStore& store, const std::filesystem::path& path) {
  detail::write_file(path, serialize_store(store));
}

SupportStore deserialize_store(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < kStoreMagic.size() + 1) throw Error(ErrorKind::TruncatedFile, "store header too short");
  if (r.bytes(kStoreMagic.size()) != kStoreMagic) throw Error(ErrorKind::FormatError, "bad store magic");
  if (const auto version = r.u8(); version != kStoreVersion)
    throw Error(ErrorKind::FormatError, "unsupported store version " + std::to_string(version));
  const std::uint32_t C = r.u32();
  const std::uint32_t d = r.u32();
  const std::uint32_t n_lambdas = r.u32();
  if (C == 0 || d == 0 || n_lambdas == 0) throw Error(ErrorKind::FormatError, "store header has zero extent");
  r.need(std::size_t(n_lambdas) * 8);
  std::vector<double> lambdas(n_lambdas);
  for (double& l : lambdas) l = r.f64();

  SupportStore store(C, d, std::move(lambdas));
  const std::uint64_t n = r.u64();
  const std::size_t entry_bytes = 4 + 8 + 8 + std::size_t(d) * 4;
  if (n > r.remaining() / entry_bytes) throw Error(ErrorKind::TruncatedFile, "store entries exceed file size");
  store.vectors_.reserve(n * d);
  for (std::uint64_t i = 0; i < n; ++i) {
    const ClassId c = r.u32();
    const std::uint64_t id = r.u64();
    const std::uint64_t image = r.u64();
    if (c >= C) throw Error(ErrorKind::FormatError, "entry class id out of range");
    if (!store.entry_ids_.empty() && id <= store.entry_ids_.back())
      throw Error(ErrorKind::FormatError, "entry ids not strictly increasing");
    for (std::uint32_t k = 0; k < d; ++k) store.vectors_.push_back(r.f32());
    store.class_ids_.push_back(c);
    store.entry_ids_.push_back(id);
    store.image_ids_.push_back(image);
    store.next_entry_id_ = id + 1;
  }
  r.need(std::size_t(C) * d * 4 + std::size_t(C) * 8);
  for (Eigen::Index c = 0; c < C; ++c)
    for (Eigen::Index k = 0; k < d; ++k) store.accumulators_(c, k) = r.f32();
  for (std::uint64_t& count : store.counts_) count = r.u64();
  if (r.remaining() != 0) throw Error(ErrorKind::FormatError, "trailing bytes after store payload");

  std::vector<std::uint64_t> tally(C, 0);
  for (ClassId c : store.class_ids_) ++tally[c];
  if (tally != store.counts_) throw Error(ErrorKind::FormatError, "class counts disagree with entries");
  return store;
}

SupportStore load_store(const std::filesystem::path& path) { return deserialize_store(detail::read_file(path)); }

}  // namespace rns
