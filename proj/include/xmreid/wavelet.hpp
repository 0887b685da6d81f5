// Single-level orthonormal Haar analysis and high-frequency patch scoring.
#pragma once

#include "xmreid/instrumentation.hpp"
#include "xmreid/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmreid {

enum class Modality { kInfrared, kVisible };

inline const char* modality_name(Modality m) { return m == Modality::kInfrared ? "ir" : "rgb"; }

// One plane per channel, each H x W.
template <typename Scalar>
struct Image {
  std::vector<Matrix<Scalar>> planes;

  Image() = default;
  Image(Index height, Index width, Index channels, Scalar fill = Scalar(0))
      : planes(static_cast<std::size_t>(channels), Matrix<Scalar>::Constant(height, width, fill)) {}

  Index height() const { return planes.empty() ? 0 : planes.front().rows(); }
  Index width() const { return planes.empty() ? 0 : planes.front().cols(); }
  Index channels() const { return static_cast<Index>(planes.size()); }

  Scalar& operator()(Index y, Index x, Index c) { return planes[static_cast<std::size_t>(c)](y, x); }
  Scalar operator()(Index y, Index x, Index c) const { return planes[static_cast<std::size_t>(c)](y, x); }

  template <typename Other>
  Image<Other> cast() const {
    Image<Other> out;
    for (const auto& p : planes) out.planes.push_back(p.template cast<Other>());
    return out;
  }

  bool operator==(const Image& o) const {
    if (planes.size() != o.planes.size()) return false;
    for (std::size_t c = 0; c < planes.size(); ++c)
      if (planes[c].rows() != o.planes[c].rows() || planes[c].cols() != o.planes[c].cols() || planes[c] != o.planes[c])
        return false;
    return true;
  }
};

using ImageD = Image<double>;

// LL, LH, HL, HH; each channel plane is H/2 x W/2.
template <typename Scalar>
struct WaveletSubbands {
  std::vector<Matrix<Scalar>> ll, lh, hl, hh;
};

struct HighFreqScores {
  Eigen::VectorXd per_patch;
};

namespace detail {

template <typename Scalar>
void check_planes(const std::vector<Matrix<Scalar>>& planes, const std::string& op) {
  if (planes.empty()) throw ShapeError(op + ": no channels");
  for (const auto& p : planes)
    if (p.rows() != planes.front().rows() || p.cols() != planes.front().cols())
      throw ShapeError(op + ": channel planes differ in shape");
}

}  // namespace detail

template <typename Scalar>
WaveletSubbands<Scalar> haar_decompose(const Image<Scalar>& img) {
  ++instrumentation::counters().wavelet;
  detail::check_planes(img.planes, "haar_decompose");
  const Index h = img.height(), w = img.width();
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("haar_decompose: dimensions must be even, got " + std::to_string(h) + "x" + std::to_string(w));
  WaveletSubbands<Scalar> sb;
  for (const auto& p : img.planes) {
    const auto a = p(Eigen::seq(0, h - 2, 2), Eigen::seq(0, w - 2, 2));
    const auto b = p(Eigen::seq(0, h - 2, 2), Eigen::seq(1, w - 1, 2));
    const auto c = p(Eigen::seq(1, h - 1, 2), Eigen::seq(0, w - 2, 2));
    const auto d = p(Eigen::seq(1, h - 1, 2), Eigen::seq(1, w - 1, 2));
    sb.ll.emplace_back((a + b + c + d) / Scalar(2));
    sb.lh.emplace_back((a + b - c - d) / Scalar(2));
    sb.hl.emplace_back((a - b + c - d) / Scalar(2));
    sb.hh.emplace_back((a - b - c + d) / Scalar(2));
  }
  return sb;
}

template <typename Scalar>
Image<Scalar> haar_reconstruct(const WaveletSubbands<Scalar>& sb) {
  ++instrumentation::counters().wavelet;
  detail::check_planes(sb.ll, "haar_reconstruct");
  const std::size_t channels = sb.ll.size();
  if (sb.lh.size() != channels || sb.hl.size() != channels || sb.hh.size() != channels)
    throw ShapeError("haar_reconstruct: subbands disagree on channel count");
  const Index h = sb.ll.front().rows(), w = sb.ll.front().cols();
  for (std::size_t c = 0; c < channels; ++c)
    for (const auto* band : {&sb.lh[c], &sb.hl[c], &sb.hh[c]})
      if (band->rows() != h || band->cols() != w) throw ShapeError("haar_reconstruct: subband shape mismatch");

  Image<Scalar> img(2 * h, 2 * w, static_cast<Index>(channels));
  for (std::size_t c = 0; c < channels; ++c) {
    const auto& ll = sb.ll[c];
    const auto& lh = sb.lh[c];
    const auto& hl = sb.hl[c];
    const auto& hh = sb.hh[c];
    auto& p = img.planes[c];
    p(Eigen::seq(0, 2 * h - 2, 2), Eigen::seq(0, 2 * w - 2, 2)) = (ll + lh + hl + hh) / Scalar(2);
    p(Eigen::seq(0, 2 * h - 2, 2), Eigen::seq(1, 2 * w - 1, 2)) = (ll + lh - hl - hh) / Scalar(2);
    p(Eigen::seq(1, 2 * h - 1, 2), Eigen::seq(0, 2 * w - 2, 2)) = (ll - lh + hl - hh) / Scalar(2);
    p(Eigen::seq(1, 2 * h - 1, 2), Eigen::seq(1, 2 * w - 1, 2)) = (ll - lh - hl + hh) / Scalar(2);
  }
  return img;
}

// LH + HL + HH per channel.
template <typename Scalar>
std::vector<Matrix<Scalar>> highfreq_map(const WaveletSubbands<Scalar>& sb) {
  ++instrumentation::counters().wavelet;
  std::vector<Matrix<Scalar>> out;
  for (std::size_t c = 0; c < sb.lh.size(); ++c) out.emplace_back(sb.lh[c] + sb.hl[c] + sb.hh[c]);
  return out;
}

// Corner-aligned bilinear resampling. A target extent of 1 samples the
// source midpoint.
template <typename Scalar>
Matrix<Scalar> resample_bilinear(const Matrix<Scalar>& src, Index out_rows, Index out_cols) {
  if (src.size() == 0 || out_rows < 1 || out_cols < 1) throw ShapeError("resample_bilinear: empty operand");
  if (src.rows() == out_rows && src.cols() == out_cols) return src;
  auto coord = [](Index i, Index n_out, Index n_in) {
    if (n_out == 1) return 0.5 * static_cast<double>(n_in - 1);
    return static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
  };
  Matrix<Scalar> out(out_rows, out_cols);
  for (Index i = 0; i < out_rows; ++i) {
    const double y = coord(i, out_rows, src.rows());
    const Index y0 = static_cast<Index>(std::floor(y));
    const Index y1 = std::min<Index>(y0 + 1, src.rows() - 1);
    const double fy = y - static_cast<double>(y0);
    for (Index j = 0; j < out_cols; ++j) {
      const double x = coord(j, out_cols, src.cols());
      const Index x0 = static_cast<Index>(std::floor(x));
      const Index x1 = std::min<Index>(x0 + 1, src.cols() - 1);
      const double fx = x - static_cast<double>(x0);
      const double v = (1 - fy) * ((1 - fx) * src(y0, x0) + fx * src(y0, x1)) + fy * ((1 - fx) * src(y1, x0) + fx * src(y1, x1));
      out(i, j) = static_cast<Scalar>(v);
    }
  }
  return out;
}

// Resamples each channel of the map to (grid_rows*cell) x (grid_cols*cell)
// and flattens every cell into one row, ordered (y, x, channel). Patches are
// in raster order. Returns N x (cell*cell*C).
template <typename Scalar>
Matrix<Scalar> project_to_patches(const std::vector<Matrix<Scalar>>& map, Index grid_rows, Index grid_cols, Index cell = 1) {
  ++instrumentation::counters().wavelet;
  detail::check_planes(map, "project_to_patches");
  if (grid_rows * grid_cols <= 0) throw ShapeError("project_to_patches: empty patch grid");
  if (cell < 1) throw ShapeError("project_to_patches: cell size must be >= 1");
  const Index channels = static_cast<Index>(map.size());
  std::vector<Matrix<Scalar>> resampled;
  for (const auto& p : map) resampled.push_back(resample_bilinear(p, grid_rows * cell, grid_cols * cell));
  Matrix<Scalar> out(grid_rows * grid_cols, cell * cell * channels);
  for (Index r = 0; r < grid_rows; ++r)
    for (Index c = 0; c < grid_cols; ++c) {
      Index k = 0;
      for (Index y = 0; y < cell; ++y)
        for (Index x = 0; x < cell; ++x)
          for (Index ch = 0; ch < channels; ++ch)
            out(r * grid_cols + c, k++) = resampled[static_cast<std::size_t>(ch)](r * cell + y, c * cell + x);
    }
  return out;
}

template <typename Derived>
double hf_response(const Eigen::MatrixBase<Derived>& patch) {
  ++instrumentation::counters().wavelet;
  return static_cast<double>(patch.norm());
}

template <typename Scalar>
HighFreqScores patch_scores(const Matrix<Scalar>& patches) {
  HighFreqScores s;
  s.per_patch.resize(patches.rows());
  for (Index i = 0; i < patches.rows(); ++i) s.per_patch(i) = hf_response(patches.row(i));
  return s;
}

// Indices of the k largest values; ties go to the smaller index; the
// result is returned in ascending index order.
inline std::vector<Index> topk_select(const Eigen::VectorXd& scores, Index k) {
  const Index n = scores.size();
  if (k < 1 || k > n)
    throw std::out_of_range("topk_select: k=" + std::to_string(k) + " outside [1," + std::to_string(n) + "]");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
    if (scores(a) != scores(b)) return scores(a) > scores(b);
    return a < b;
  });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

inline std::vector<Index> topk_select(const HighFreqScores& scores, Index k) {
  ++instrumentation::counters().wavelet;
  return topk_select(scores.per_patch, k);
}

// k = floor(fraction * n), at least 1.
inline Index count_from_fraction(double fraction, Index n) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("count_from_fraction: fraction outside (0,1]");
  return std::max<Index>(1, static_cast<Index>(std::floor(fraction * static_cast<double>(n) + 1e-9)));
}

}  // namespace xmreid
