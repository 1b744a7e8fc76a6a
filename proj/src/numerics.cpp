#include "rns/numerics.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace rns {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::NearZeroRow: return "NearZeroRow";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorKind::EmptyMask: return "EmptyMask";
    case ErrorKind::NoVisualSupport: return "NoVisualSupport";
    case ErrorKind::EmptyStore: return "EmptyStore";
    case ErrorKind::EmptyRegion: return "EmptyRegion";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::InfeasibleSeparation: return "InfeasibleSeparation";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::TruncatedFile: return "TruncatedFile";
    case ErrorKind::ParseError: return "ParseError";
  }
  return "Unknown";
}

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::FormatError:
    case ErrorKind::TruncatedFile:
    case ErrorKind::ParseError:
      return 2;
    case ErrorKind::NearZeroRow:
    case ErrorKind::NonFiniteGradient:
      return 4;
    default:
      return 3;
  }
}

namespace {

struct Span {
  std::size_t cell;
  double overlap;
};

// For each source pixel along one axis, the patch cells it overlaps and the
// overlap length in pixel units.
std::vector<std::vector<Span>> axis_spans(std::size_t pixels, std::size_t cells) {
  std::vector<std::vector<Span>> spans(pixels);
  const double cell_len = static_cast<double>(pixels) / static_cast<double>(cells);
  for (std::size_t c = 0; c < cells; ++c) {
    const double lo = static_cast<double>(c) * cell_len;
    const double hi = static_cast<double>(c + 1) * cell_len;
    const auto first = static_cast<std::size_t>(std::floor(lo));
    const auto last = std::min(pixels, static_cast<std::size_t>(std::ceil(hi)));
    for (std::size_t p = first; p < last; ++p) {
      const double overlap = std::min(hi, double(p + 1)) - std::max(lo, double(p));
      if (overlap > 0) spans[p].push_back({c, overlap});
    }
  }
  return spans;
}

}  // namespace

RowMatrixXd label_area_fractions(const LabelMask& mask, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t H = mask.height();
  const std::size_t W = mask.width();
  if (grid_h == 0 || grid_w == 0 || grid_h > H || grid_w > W)
    throw Error(ErrorKind::ShapeMismatch, "patch grid must be nonempty and no larger than the mask");

  const auto rows = axis_spans(H, grid_h);
  const auto cols = axis_spans(W, grid_w);
  const double cell_area = (double(H) / double(grid_h)) * (double(W) / double(grid_w));

  RowMatrixXd frac = RowMatrixXd::Zero(grid_h * grid_w, mask.num_classes);
  bool any = false;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::uint16_t label = mask.data(y, x);
      if (label == mask.ignore_index) continue;
      if (label >= mask.num_classes)
        throw Error(ErrorKind::InvalidArgument, "mask label " + std::to_string(label) + " out of range");
      any = true;
      for (const Span& r : rows[y])
        for (const Span& c : cols[x])
          frac(r.cell * grid_w + c.cell, label) += r.overlap * c.overlap / cell_area;
    }
  }
  if (!any) throw Error(ErrorKind::EmptyMask, "every pixel carries the ignore index");
  return frac;
}

PatchLabelMatrix downsample_labels(const LabelMask& mask, std::size_t grid_h, std::size_t grid_w) {
  PatchLabelMatrix out{label_area_fractions(mask, grid_h, grid_w), grid_h, grid_w};
  for (Eigen::Index c = 0; c < out.data.cols(); ++c) {
    const double mass = out.data.col(c).sum();
    if (mass > 0) out.data.col(c) /= mass;
  }
  return out;
}

RowMatrixXd upsample_probs(const ProbMap& probs, std::size_t height, std::size_t width) {
  const std::size_t h = probs.grid_h;
  const std::size_t w = probs.grid_w;
  if (h == 0 || w == 0 || static_cast<std::size_t>(probs.data.rows()) != h * w)
    throw Error(ErrorKind::ShapeMismatch, "probability map rows do not match its grid");
  if (height < h || width < w) throw Error(ErrorKind::ShapeMismatch, "upsampling target smaller than grid");

  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t out, std::size_t in) {
    std::vector<Tap> t(out);
    const double scale = double(in) / double(out);
    for (std::size_t i = 0; i < out; ++i) {
      const double src = std::max(0.0, (double(i) + 0.5) * scale - 0.5);
      const auto lo = std::min(static_cast<std::size_t>(src), in - 1);
      const std::size_t hi = std::min(lo + 1, in - 1);
      t[i] = {lo, hi, src - double(lo)};
    }
    return t;
  };
  const auto ys = taps(height, h);
  const auto xs = taps(width, w);

  const Eigen::Index C = probs.data.cols();
  RowMatrixXd out(height * width, C);
  for (std::size_t y = 0; y < height; ++y) {
    const Tap& ty = ys[y];
    for (std::size_t x = 0; x < width; ++x) {
      const Tap& tx = xs[x];
      out.row(y * width + x) =
          (1 - ty.frac) * ((1 - tx.frac) * probs.data.row(ty.lo * w + tx.lo) + tx.frac * probs.data.row(ty.lo * w + tx.hi)) +
          ty.frac * ((1 - tx.frac) * probs.data.row(ty.hi * w + tx.lo) + tx.frac * probs.data.row(ty.hi * w + tx.hi));
    }
  }
  return out;
}

LabelMask argmax_map(const RowMatrixXd& grid, std::size_t height, std::size_t width) {
  if (static_cast<std::size_t>(grid.rows()) != height * width || grid.cols() < 1)
    throw Error(ErrorKind::ShapeMismatch, "grid does not match H x W x C");
  LabelMask out;
  out.num_classes = static_cast<std::size_t>(grid.cols());
  out.data.resize(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      out.data(y, x) = static_cast<std::uint16_t>(argmax(grid.row(y * width + x)));
  return out;
}

}  // namespace rns
