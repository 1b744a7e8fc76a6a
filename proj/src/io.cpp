#include "rns/io.hpp"

#include "binary.hpp"

namespace rns {

namespace {
constexpr std::string_view kTensorMagic = "RNSF";
constexpr std::string_view kMaskMagic = "RNSM";
constexpr std::uint8_t kFormatVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

void expect_header(detail::ByteReader& r, std::string_view magic) {
  if (r.remaining() < magic.size() + 1) throw Error(ErrorKind::TruncatedFile, "header too short");
  if (r.bytes(magic.size()) != magic) throw Error(ErrorKind::FormatError, "bad magic, expected " + std::string(magic));
  if (const auto v = r.u8(); v != kFormatVersion)
    throw Error(ErrorKind::FormatError, "unsupported version " + std::to_string(v));
}
}  // namespace

std::uint64_t Tensor::numel() const {
  std::uint64_t n = 1;
  for (std::uint64_t s : shape) n *= s;
  return n;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.shape.empty() || t.shape.size() > 255) throw Error(ErrorKind::ShapeMismatch, "tensor rank must be 1..255");
  if (t.numel() != t.values.size()) throw Error(ErrorKind::ShapeMismatch, "tensor shape does not match payload");
  detail::ByteWriter w;
  w.bytes(kTensorMagic);
  w.u8(kFormatVersion);
  w.u8(kDtypeF32);
  w.u8(static_cast<std::uint8_t>(t.shape.size()));
  for (std::uint64_t s : t.shape) w.u64(s);
  for (float v : t.values) w.f32(v);
  return w.take();
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  expect_header(r, kTensorMagic);
  if (const auto dtype = r.u8(); dtype != kDtypeF32)
    throw Error(ErrorKind::FormatError, "unsupported dtype " + std::to_string(dtype));
  const std::uint8_t ndim = r.u8();
  if (ndim == 0) throw Error(ErrorKind::FormatError, "tensor rank is zero");
  Tensor t;
  t.shape.resize(ndim);
  for (auto& s : t.shape) s = r.u64();
  const std::uint64_t n = t.numel();
  if (n > r.remaining() / 4) throw Error(ErrorKind::TruncatedFile, "tensor payload shorter than declared shape");
  t.values.resize(n);
  for (float& v : t.values) v = r.f32();
  if (r.remaining() != 0) throw Error(ErrorKind::FormatError, "trailing bytes after tensor payload");
  return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) { detail::write_file(path, encode_tensor(t)); }

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(detail::read_file(path)); }

void write_feature_map(const std::filesystem::path& path, const DenseFeatureMap& x) {
  if (x.patches() != x.grid_h * x.grid_w) throw Error(ErrorKind::ShapeMismatch, "feature rows do not match grid");
  Tensor t{{x.grid_h, x.grid_w, x.dim()}, {}};
  const RowMatrixXf f = x.data.cast<float>();
  t.values.assign(f.data(), f.data() + f.size());
  write_tensor(path, t);
}

DenseFeatureMap read_feature_map(const std::filesystem::path& path, std::size_t image_h, std::size_t image_w,
                                 std::optional<std::size_t> expected_dim) {
  const Tensor t = read_tensor(path);
  if (t.shape.size() != 3) throw Error(ErrorKind::ShapeMismatch, path.string() + ": feature map must be [h, w, d]");
  const auto h = static_cast<std::size_t>(t.shape[0]);
  const auto w = static_cast<std::size_t>(t.shape[1]);
  const auto d = static_cast<std::size_t>(t.shape[2]);
  if (h == 0 || w == 0 || d == 0) throw Error(ErrorKind::ShapeMismatch, path.string() + ": empty feature map");
  if (expected_dim && *expected_dim != d)
    throw Error(ErrorKind::DimensionMismatch,
                path.string() + ": feature dim " + std::to_string(d) + " != " + std::to_string(*expected_dim));
  if (image_h < h || image_w < w) throw Error(ErrorKind::ShapeMismatch, path.string() + ": image smaller than grid");
  const Eigen::Map<const RowMatrixXf> raw(t.values.data(), static_cast<Eigen::Index>(h * w),
                                          static_cast<Eigen::Index>(d));
  return {l2_normalize_rows(raw.cast<double>()), h, w, image_h, image_w};
}

std::vector<std::uint8_t> encode_mask(const LabelGrid& grid) {
  detail::ByteWriter w;
  w.bytes(kMaskMagic);
  w.u8(kFormatVersion);
  w.u64(static_cast<std::uint64_t>(grid.rows()));
  w.u64(static_cast<std::uint64_t>(grid.cols()));
  for (Eigen::Index y = 0; y < grid.rows(); ++y)
    for (Eigen::Index x = 0; x < grid.cols(); ++x) w.u16(grid(y, x));
  return w.take();
}

LabelGrid decode_mask(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  expect_header(r, kMaskMagic);
  const std::uint64_t H = r.u64();
  const std::uint64_t W = r.u64();
  if (H == 0 || W == 0) throw Error(ErrorKind::FormatError, "mask has zero extent");
  if (W > r.remaining() / 2 || H > r.remaining() / 2 / W)
    throw Error(ErrorKind::TruncatedFile, "mask payload shorter than declared size");
  LabelGrid grid(static_cast<Eigen::Index>(H), static_cast<Eigen::Index>(W));
  for (Eigen::Index y = 0; y < grid.rows(); ++y)
    for (Eigen::Index x = 0; x < grid.cols(); ++x) grid(y, x) = r.u16();
  if (r.remaining() != 0) throw Error(ErrorKind::FormatError, "trailing bytes after mask payload");
  return grid;
}

void write_mask(const std::filesystem::path& path, const LabelMask& mask) {
  detail::write_file(path, encode_mask(mask.data));
}

LabelGrid read_label_grid(const std::filesystem::path& path) { return decode_mask(detail::read_file(path)); }

LabelMask read_mask(const std::filesystem::path& path, std::size_t num_classes, std::uint16_t ignore_index) {
  LabelMask m{read_label_grid(path), ignore_index, num_classes};
  for (Eigen::Index i = 0; i < m.data.size(); ++i) {
    const std::uint16_t v = m.data.reshaped<Eigen::RowMajor>()(i);
    if (v != ignore_index && v >= num_classes)
      throw Error(ErrorKind::FormatError, path.string() + ": label " + std::to_string(v) + " >= class count");
  }
  return m;
}

std::pair<DenseFeatureMap, LabelMask> load_support_image(const std::filesystem::path& feature_file,
                                                          const std::filesystem::path& mask_file,
                                                          std::size_t num_classes, std::size_t dim,
                                                          std::uint16_t ignore_index) {
  LabelMask mask = read_mask(mask_file, num_classes, ignore_index);
  DenseFeatureMap x = read_feature_map(feature_file, mask.height(), mask.width(), dim);
  return {std::move(x), std::move(mask)};
}

}  // namespace rns
