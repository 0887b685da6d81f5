// Cross-modal high-frequency patch mining and the enhanced-representation
// objective. Mining runs on the shadow encoder with no gradient path; only
// the final encoding of the selected subsequences uses the live encoder.
#pragma once

#include "xmreid/encoder.hpp"
#include "xmreid/instrumentation.hpp"
#include "xmreid/numcore.hpp"
#include "xmreid/objectives.hpp"
#include "xmreid/wavelet.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xmreid {

enum class MiningPairing { kSlot, kPooled };

inline MiningPairing parse_pairing(const std::string& s) {
  if (s == "slot") return MiningPairing::kSlot;
  if (s == "pooled") return MiningPairing::kPooled;
  throw std::invalid_argument("mining_pairing: expected slot|pooled, got '" + s + "'");
}

inline const char* pairing_name(MiningPairing p) { return p == MiningPairing::kSlot ? "slot" : "pooled"; }

// kRaw scores RGB patches by plain dot products with the IR high-frequency
// embeddings. kCentered first subtracts the RGB image's mean patch embedding
// from both sides, so a direction shared by every token cannot decide the
// ranking.
enum class MiningSimilarity { kCentered, kRaw };

inline MiningSimilarity parse_similarity(const std::string& s) {
  if (s == "centered") return MiningSimilarity::kCentered;
  if (s == "raw") return MiningSimilarity::kRaw;
  throw std::invalid_argument("mining_similarity: expected centered|raw, got '" + s + "'");
}

inline const char* similarity_name(MiningSimilarity m) { return m == MiningSimilarity::kCentered ? "centered" : "raw"; }

template <typename Scalar>
struct Subsequence {
  TokenSequence<Scalar> seq;  // one or more stacked sequences of length 1 + k
  Modality modality = Modality::kInfrared;
};

struct MiningOptions {
  double fraction = 0.30;
  Index cell = 0;  // high-frequency cell size in map pixels; 0 means map rows / patch rows
  MiningPairing pairing = MiningPairing::kSlot;
  MiningSimilarity similarity = MiningSimilarity::kCentered;
};

// Indices selected per image of a batch, in ascending order.
struct MinedIndices {
  std::vector<std::vector<Index>> ir, rgb;
};

// Per-patch high-frequency energy of one image on the encoder's patch grid.
template <typename Scalar>
HighFreqScores highfreq_scores(const Image<Scalar>& img, const EncoderConfig& cfg, Index cell = 0) {
  const auto sb = haar_decompose(img);
  const auto hf = highfreq_map(sb);
  if (cell == 0) cell = std::max<Index>(1, hf.front().rows() / cfg.grid_rows());
  return patch_scores(project_to_patches(hf, cfg.grid_rows(), cfg.grid_cols(), cell));
}

template <typename Scalar>
std::vector<Index> ir_highfreq_indices(const Image<Scalar>& ir_img, Index k, const EncoderConfig& cfg, Index cell = 0) {
  ++instrumentation::counters().chpe;
  if (k < 1 || k > cfg.num_patches())
    throw std::out_of_range("mine_ir_highfreq: k=" + std::to_string(k) + " outside [1," + std::to_string(cfg.num_patches()) + "]");
  return topk_select(highfreq_scores(ir_img, cfg, cell), k);
}

// Class token plus the k tokenized IR patches with the strongest
// high-frequency response. `ir_seq` holds the tokenized image.
template <typename Scalar>
Subsequence<Scalar> mine_ir_highfreq(const TokenSequence<Scalar>& ir_seq, const Image<Scalar>& ir_img, Index k,
                                     const EncoderConfig& cfg, Index cell = 0) {
  if (ir_seq.count() != 1) throw ShapeError("mine_ir_highfreq: expects a single tokenized image");
  return {subsequence(ir_seq, {ir_highfreq_indices(ir_img, k, cfg, cell)}), Modality::kInfrared};
}

// S = X_ir X_rgb^T over patch rows (class tokens already excluded).
template <typename Scalar>
Matrix<Scalar> cross_modal_similarity(const Matrix<Scalar>& ir_encoded, const Matrix<Scalar>& rgb_encoded) {
  ++instrumentation::counters().chpe;
  if (ir_encoded.cols() != rgb_encoded.cols())
    throw ShapeError("cross_modal_similarity: widths differ (" + std::to_string(ir_encoded.cols()) + " vs " +
                     std::to_string(rgb_encoded.cols()) + ")");
  Matrix<Scalar> s = ir_encoded * rgb_encoded.transpose();
  if (!s.allFinite()) throw NumericError("cross_modal_similarity: non-finite value");
  return s;
}

// Column means of S.
template <typename Scalar>
Eigen::VectorXd correlation_vector(const Matrix<Scalar>& s) {
  ++instrumentation::counters().chpe;
  if (s.rows() < 1) throw ShapeError("correlation_vector: empty similarity matrix");
  return s.template cast<double>().colwise().mean().transpose();
}

// Top-k RGB patches for one image: `ir_encoded` holds the IR high-frequency
// embeddings (M x D), `rgb_encoded` every RGB patch embedding (N x D).
template <typename Scalar>
std::vector<Index> correlated_rgb_indices(const Matrix<Scalar>& ir_encoded, const Matrix<Scalar>& rgb_encoded, Index k,
                                          MiningSimilarity similarity) {
  if (similarity == MiningSimilarity::kRaw) return topk_select(correlation_vector(cross_modal_similarity(ir_encoded, rgb_encoded)), k);
  if (ir_encoded.cols() != rgb_encoded.cols()) throw ShapeError("correlated_rgb_indices: widths differ");
  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean = rgb_encoded.colwise().mean();
  const Matrix<Scalar> q = ir_encoded.rowwise() - mean, g = rgb_encoded.rowwise() - mean;
  return topk_select(correlation_vector(cross_modal_similarity(q, g)), k);
}

template <typename Scalar>
Subsequence<Scalar> select_rgb_correlated(const TokenSequence<Scalar>& rgb_seq, const Eigen::VectorXd& s, Index k) {
  ++instrumentation::counters().chpe;
  if (rgb_seq.count() != 1) throw ShapeError("select_rgb_correlated: expects a single tokenized image");
  if (s.size() != rgb_seq.seq_len - 1) throw ShapeError("select_rgb_correlated: correlation length differs from patch count");
  return {subsequence(rgb_seq, {topk_select(s, k)}), Modality::kVisible};
}

// Mining for a slot-aligned batch: ir[b] and rgb[b] share labels[b]. The
// shadow encoder runs on its own tape with every parameter constant.
template <typename Scalar>
MinedIndices mine_batch(const std::vector<Image<Scalar>>& ir, const std::vector<Image<Scalar>>& rgb, const std::vector<Index>& labels,
                        const EncoderParams<Scalar>& shadow, const MiningOptions& opt) {
  ++instrumentation::counters().chpe;
  const EncoderConfig& cfg = shadow.config;
  const std::size_t b = ir.size();
  if (rgb.size() != b || labels.size() != b) throw ShapeError("mine_batch: IR, RGB and label counts differ");
  if (b == 0) throw ShapeError("mine_batch: empty batch");
  const Index n = cfg.num_patches();
  const Index k = count_from_fraction(opt.fraction, n);

  MinedIndices out;
  for (const auto& img : ir) out.ir.push_back(ir_highfreq_indices(img, k, cfg, opt.cell));

  Tape<Scalar> tape;
  const EncoderVars<Scalar> sv = bind(tape, shadow, nullptr);
  const Matrix<Scalar> ir_enc = encode_patches(subsequence(tokenize(tape, ir, sv), out.ir), sv).value();  // b*k x D
  const Matrix<Scalar> rgb_enc = encode_patches(tokenize(tape, rgb, sv), sv).value();                    // b*n x D

  auto ir_rows = [&](std::size_t s) { return ir_enc.middleRows(static_cast<Index>(s) * k, k); };
  std::map<Index, std::vector<std::size_t>> by_identity;
  for (std::size_t s = 0; s < b; ++s) by_identity[labels[s]].push_back(s);

  for (std::size_t r = 0; r < b; ++r) {
    Matrix<Scalar> query;
    if (opt.pairing == MiningPairing::kSlot) {
      query = ir_rows(r);
    } else {
      const auto& slots = by_identity[labels[r]];
      query.resize(static_cast<Index>(slots.size()) * k, cfg.width);
      for (std::size_t i = 0; i < slots.size(); ++i) query.middleRows(static_cast<Index>(i) * k, k) = ir_rows(slots[i]);
    }
    out.rgb.push_back(correlated_rgb_indices(query, Matrix<Scalar>(rgb_enc.middleRows(static_cast<Index>(r) * n, n)), k, opt.similarity));
  }
  return out;
}

// z_I and z_R: class outputs of the live encoder on the mined subsequences.
// Both subsequences run as one stacked pass when their lengths agree.
template <typename Scalar>
std::pair<Var<Scalar>, Var<Scalar>> enhanced_representations(const Subsequence<Scalar>& ir_sub, const Subsequence<Scalar>& rgb_sub,
                                                             const EncoderVars<Scalar>& live) {
  ++instrumentation::counters().chpe;
  if (ir_sub.seq.count() == 0 || rgb_sub.seq.count() == 0) throw ShapeError("enhanced_representations: empty subsequence");
  if (ir_sub.seq.seq_len != rgb_sub.seq.seq_len)
    return {encode_class(ir_sub.seq, live), encode_class(rgb_sub.seq, live)};
  TokenSequence<Scalar> both;
  both.seq_len = ir_sub.seq.seq_len;
  both.tokens = concat_rows(std::vector<Var<Scalar>>{ir_sub.seq.tokens, rgb_sub.seq.tokens});
  both.patch_indices = ir_sub.seq.patch_indices;
  both.patch_indices.insert(both.patch_indices.end(), rgb_sub.seq.patch_indices.begin(), rgb_sub.seq.patch_indices.end());
  Var<Scalar> z = encode_class(both, live);
  return {slice_rows(z, 0, ir_sub.seq.count()), slice_rows(z, ir_sub.seq.count(), rgb_sub.seq.count())};
}

// CE + Tri on each enhanced representation.
template <typename Scalar>
Var<Scalar> loss_high(const Var<Scalar>& z_ir, const Var<Scalar>& z_rgb, const std::vector<Index>& labels, const Var<Scalar>& classifier,
                      Scalar margin = Scalar(0.3)) {
  ++instrumentation::counters().chpe;
  Var<Scalar> ir = add(cross_entropy(z_ir, labels, classifier), triplet(z_ir, labels, margin));
  return add(ir, add(cross_entropy(z_rgb, labels, classifier), triplet(z_rgb, labels, margin)));
}

}  // namespace xmreid
