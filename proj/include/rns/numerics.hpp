#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>

#include <Eigen/Dense>

#include "rns/error.hpp"

namespace rns {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXd = RowMatrix<double>;
using RowMatrixXf = RowMatrix<float>;

using ClassId = std::uint32_t;
using LabelGrid = Eigen::Array<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::uint16_t kDefaultIgnore = 65535;
inline constexpr double kMinNorm = 1e-12;

/// Patch feature matrix (n x d, one row per patch in row-major grid order)
/// together with the patch grid and source image geometry.
struct DenseFeatureMap {
  RowMatrixXd data;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t image_h = 0;
  std::size_t image_w = 0;

  std::size_t patches() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(data.cols()); }
};

/// Dense H x W grid of class indices. Pixels equal to ignore_index carry no class.
struct LabelMask {
  LabelGrid data;
  std::uint16_t ignore_index = kDefaultIgnore;
  std::size_t num_classes = 0;

  std::size_t height() const { return static_cast<std::size_t>(data.rows()); }
  std::size_t width() const { return static_cast<std::size_t>(data.cols()); }
};

/// n x C per-patch class weights, each nonzero column summing to one.
struct PatchLabelMatrix {
  RowMatrixXd data;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

/// n x C row-stochastic class probabilities on the patch grid.
struct ProbMap {
  RowMatrixXd data;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
};

template <typename Derived>
RowMatrix<typename Derived::Scalar> l2_normalize_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  RowMatrix<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const Scalar norm = m.row(i).norm();
    if (!(norm >= Scalar(kMinNorm)))
      throw Error(ErrorKind::NearZeroRow, "row " + std::to_string(i) + " has norm below 1e-12");
    out.row(i) = m.row(i) / norm;
  }
  return out;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> l2_normalized(
    const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Scalar norm = v.norm();
  if (!(norm >= Scalar(kMinNorm))) throw Error(ErrorKind::NearZeroRow, "vector has norm below 1e-12");
  return v / norm;
}

/// Temperature softmax exp(v_i/tau) / sum_j exp(v_j/tau), max-subtracted.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& v,
                                                                   typename Derived::Scalar tau = 1) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > 0)) throw Error(ErrorKind::InvalidArgument, "softmax temperature must be positive");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = (v.derived().reshaped().array() / tau).matrix();
  e = (e.array() - e.maxCoeff()).exp().matrix();
  return e / e.sum();
}

/// Row-wise temperature softmax of a score matrix.
template <typename Derived>
RowMatrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& scores,
                                                 typename Derived::Scalar tau = 1) {
  using Scalar = typename Derived::Scalar;
  if (!(tau > 0)) throw Error(ErrorKind::InvalidArgument, "softmax temperature must be positive");
  RowMatrix<Scalar> out = scores / tau;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    out.row(i).array() = (out.row(i).array() - out.row(i).maxCoeff()).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// Index of the largest coefficient; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax(const Eigen::DenseBase<Derived>& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v.derived().reshaped()(i) > v.derived().reshaped()(best)) best = i;
  return best;
}

/// Area-fraction downsampling of a label mask onto a grid_h x grid_w patch
/// grid, followed by L1 normalization of every nonzero class column.
PatchLabelMatrix downsample_labels(const LabelMask& mask, std::size_t grid_h, std::size_t grid_w);

/// Stage one of downsample_labels only: per-cell class area fractions.
RowMatrixXd label_area_fractions(const LabelMask& mask, std::size_t grid_h, std::size_t grid_w);

/// Bilinear upsampling (pixel-center aligned) of a patch probability map to
/// an (H*W) x C matrix, one row per output pixel in row-major order.
RowMatrixXd upsample_probs(const ProbMap& probs, std::size_t height, std::size_t width);

/// Per-pixel argmax over the channels of an (H*W) x C grid.
LabelMask argmax_map(const RowMatrixXd& grid, std::size_t height, std::size_t width);

}  // namespace rns
