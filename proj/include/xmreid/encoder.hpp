// Toy part-based vision transformer and its moving-average shadow copy.
//
// Parameter structures are templated on the member type so the same layout
// serves as storage (Matrix), gradient accumulator (Matrix) and tape binding
// (Var). visit() enumerates members with stable names; checkpoints, the
// optimizer and the EMA update all walk that enumeration.
#pragma once

#include "xmreid/numcore.hpp"
#include "xmreid/wavelet.hpp"

#include <random>
#include <string>
#include <vector>

namespace xmreid {

struct EncoderConfig {
  Index image_height = 64;
  Index image_width = 32;
  Index channels = 3;
  Index patch = 8;
  Index width = 64;
  Index depth = 3;
  Index heads = 4;
  Index parts = 4;
  Index mlp_ratio = 4;
  Index classes = 16;
  // LayerNorm over the class-token outputs (f_g, f_j, z). Off by default.
  bool final_norm = false;
  // Pixels enter the patch projection as (v - pixel_mean) / pixel_std.
  double pixel_mean = 0.5;
  double pixel_std = 0.25;

  Index grid_rows() const { return image_height / patch; }
  Index grid_cols() const { return image_width / patch; }
  Index num_patches() const { return grid_rows() * grid_cols(); }
  Index patch_dim() const { return patch * patch * channels; }

  void validate() const;
};

inline void EncoderConfig::validate() const {
  if (patch < 1 || image_height % patch != 0 || image_width % patch != 0)
    throw ShapeError("encoder: image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                     " not divisible by patch size " + std::to_string(patch));
  if (width < 1 || heads < 1 || width % heads != 0) throw ShapeError("encoder: width not divisible by heads");
  if (parts < 1 || num_patches() % parts != 0)
    throw ShapeError("encoder: " + std::to_string(num_patches()) + " patches not divisible into " +
                     std::to_string(parts) + " parts");
  if (depth < 0 || mlp_ratio < 1 || classes < 1 || channels < 1) throw ShapeError("encoder: invalid configuration");
  if (!(pixel_std > 0.0)) throw ShapeError("encoder: pixel_std must be positive");
}

template <typename T>
struct BlockT {
  T ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;

  template <typename Self, typename F>
  static void visit(Self& b, const std::string& prefix, F&& f) {
    f(prefix + "ln1_g", b.ln1_g);
    f(prefix + "ln1_b", b.ln1_b);
    f(prefix + "qkv_w", b.qkv_w);
    f(prefix + "qkv_b", b.qkv_b);
    f(prefix + "proj_w", b.proj_w);
    f(prefix + "proj_b", b.proj_b);
    f(prefix + "ln2_g", b.ln2_g);
    f(prefix + "ln2_b", b.ln2_b);
    f(prefix + "fc1_w", b.fc1_w);
    f(prefix + "fc1_b", b.fc1_b);
    f(prefix + "fc2_w", b.fc2_w);
    f(prefix + "fc2_b", b.fc2_b);
  }
};

template <typename T>
struct EncoderT {
  EncoderConfig config;
  T patch_w, patch_b, cls, pos;
  std::vector<BlockT<T>> blocks;
  BlockT<T> part_block, global_block;
  T norm_g, norm_b;
  T classifier;

  template <typename Self, typename F>
  static void visit(Self& e, F&& f) {
    f(std::string("patch_w"), e.patch_w);
    f(std::string("patch_b"), e.patch_b);
    f(std::string("cls"), e.cls);
    f(std::string("pos"), e.pos);
    for (std::size_t i = 0; i < e.blocks.size(); ++i) BlockT<T>::visit(e.blocks[i], "blocks." + std::to_string(i) + ".", f);
    BlockT<T>::visit(e.part_block, "part_block.", f);
    BlockT<T>::visit(e.global_block, "global_block.", f);
    f(std::string("norm_g"), e.norm_g);
    f(std::string("norm_b"), e.norm_b);
    f(std::string("classifier"), e.classifier);
  }

  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }
};

template <typename Scalar>
using EncoderParams = EncoderT<Matrix<Scalar>>;

template <typename Scalar>
using EncoderVars = EncoderT<Var<Scalar>>;

// EMA copy of the encoder. Never bound with a gradient sink.
template <typename Scalar>
struct ShadowParams {
  EncoderParams<Scalar> params;
  double momentum = 0.9999;
};

// A stack of equal-length token sequences; row 0 of every sequence is the
// class token. patch_indices[s] names the original patch of each non-class row.
template <typename Scalar>
struct TokenSequence {
  Var<Scalar> tokens;
  Index seq_len = 0;
  std::vector<std::vector<Index>> patch_indices;

  Index count() const { return static_cast<Index>(patch_indices.size()); }
};

template <typename Scalar>
struct PartOutputs {
  Var<Scalar> global;              // count x D
  std::vector<Var<Scalar>> parts;  // T entries, each count x D
};

// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
Matrix<Scalar> trunc_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    double v;
    do v = nd(rng);
    while (std::abs(v) > 2.0);
    m.data()[i] = static_cast<Scalar>(v * stddev);
  }
  return m;
}

template <typename Scalar>
BlockT<Matrix<Scalar>> init_block(Index d, Index hidden, std::mt19937_64& rng) {
  BlockT<Matrix<Scalar>> b;
  b.ln1_g = Matrix<Scalar>::Ones(1, d);
  b.ln1_b = Matrix<Scalar>::Zero(1, d);
  b.qkv_w = trunc_normal<Scalar>(d, 3 * d, 0.02, rng);
  b.qkv_b = Matrix<Scalar>::Zero(1, 3 * d);
  b.proj_w = trunc_normal<Scalar>(d, d, 0.02, rng);
  b.proj_b = Matrix<Scalar>::Zero(1, d);
  b.ln2_g = Matrix<Scalar>::Ones(1, d);
  b.ln2_b = Matrix<Scalar>::Zero(1, d);
  b.fc1_w = trunc_normal<Scalar>(d, hidden, 0.02, rng);
  b.fc1_b = Matrix<Scalar>::Zero(1, hidden);
  b.fc2_w = trunc_normal<Scalar>(hidden, d, 0.02, rng);
  b.fc2_b = Matrix<Scalar>::Zero(1, d);
  return b;
}

template <typename A, typename B, typename F>
void zip_params(A& a, B& b, F&& f) {
  std::vector<std::pair<std::string, decltype(&a.patch_w)>> pa;
  std::vector<decltype(&b.patch_w)> pb;
  a.for_each([&](const std::string& name, auto& m) { pa.emplace_back(name, &m); });
  b.for_each([&](const std::string&, auto& m) { pb.push_back(&m); });
  if (pa.size() != pb.size()) throw ShapeError("encoder: parameter structures differ");
  for (std::size_t i = 0; i < pa.size(); ++i) f(pa[i].first, *pa[i].second, *pb[i]);
}

}  // namespace detail

template <typename Scalar>
EncoderParams<Scalar> init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const Index d = cfg.width;
  EncoderParams<Scalar> p;
  p.config = cfg;
  p.patch_w = detail::trunc_normal<Scalar>(cfg.patch_dim(), d, 0.02, rng);
  p.patch_b = Matrix<Scalar>::Zero(1, d);
  p.cls = detail::trunc_normal<Scalar>(1, d, 0.02, rng);
  p.pos = Matrix<Scalar>::Zero(1 + cfg.num_patches(), d);
  for (Index i = 0; i < cfg.depth; ++i) p.blocks.push_back(detail::init_block<Scalar>(d, d * cfg.mlp_ratio, rng));
  p.part_block = detail::init_block<Scalar>(d, d * cfg.mlp_ratio, rng);
  p.global_block = detail::init_block<Scalar>(d, d * cfg.mlp_ratio, rng);
  p.norm_g = Matrix<Scalar>::Ones(1, d);
  p.norm_b = Matrix<Scalar>::Zero(1, d);
  p.classifier = detail::trunc_normal<Scalar>(d, cfg.classes, 0.02, rng);
  return p;
}

// Same structure, every entry zero.
template <typename Scalar>
EncoderParams<Scalar> zeros_like(const EncoderParams<Scalar>& p) {
  EncoderParams<Scalar> z = p;
  z.for_each([](const std::string&, Matrix<Scalar>& m) { m.setZero(); });
  return z;
}

template <typename Scalar>
std::size_t parameter_count(const EncoderParams<Scalar>& p) {
  std::size_t n = 0;
  p.for_each([&](const std::string&, const Matrix<Scalar>& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

// Binds parameters onto a tape. With grads == nullptr every parameter is a
// constant and no gradient path into them exists.
template <typename Scalar>
EncoderVars<Scalar> bind(Tape<Scalar>& tape, const EncoderParams<Scalar>& p, EncoderParams<Scalar>* grads) {
  EncoderVars<Scalar> v;
  v.config = p.config;
  v.blocks.resize(p.blocks.size());
  if (grads != nullptr) {
    if (grads->blocks.size() != p.blocks.size()) throw ShapeError("bind: gradient structure mismatch");
    std::vector<Matrix<Scalar>*> sinks;
    grads->for_each([&](const std::string&, Matrix<Scalar>& m) { sinks.push_back(&m); });
    std::size_t i = 0;
    detail::zip_params(p, v, [&](const std::string&, const Matrix<Scalar>& m, Var<Scalar>& var) {
      var = tape.bind(m, sinks[i++]);
    });
  } else {
    detail::zip_params(p, v, [&](const std::string&, const Matrix<Scalar>& m, Var<Scalar>& var) { var = tape.constant(m); });
  }
  return v;
}

template <typename Scalar>
EncoderVars<Scalar> bind(Tape<Scalar>& tape, const EncoderParams<Scalar>& p, std::nullptr_t) {
  return bind(tape, p, static_cast<EncoderParams<Scalar>*>(nullptr));
}

// Flattens each image into num_patches rows of (y, x, channel)-ordered,
// standardized patch pixels, images stacked in order.
template <typename Scalar>
Matrix<Scalar> patchify(const std::vector<Image<Scalar>>& images, const EncoderConfig& cfg) {
  const Index n = cfg.num_patches(), ps = cfg.patch;
  const Scalar mean = Scalar(cfg.pixel_mean), inv_std = Scalar(1.0 / cfg.pixel_std);
  Matrix<Scalar> out(static_cast<Index>(images.size()) * n, cfg.patch_dim());
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image<Scalar>& img = images[b];
    if (img.height() % ps != 0 || img.width() % ps != 0)
      throw ShapeError("tokenize: image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                       " not divisible by patch size " + std::to_string(ps));
    if (img.height() != cfg.image_height || img.width() != cfg.image_width || img.channels() != cfg.channels)
      throw ShapeError("tokenize: image shape does not match encoder configuration");
    for (Index r = 0; r < cfg.grid_rows(); ++r)
      for (Index c = 0; c < cfg.grid_cols(); ++c) {
        const Index row = static_cast<Index>(b) * n + r * cfg.grid_cols() + c;
        Index k = 0;
        for (Index y = 0; y < ps; ++y)
          for (Index x = 0; x < ps; ++x)
            for (Index ch = 0; ch < cfg.channels; ++ch) out(row, k++) = (img(r * ps + y, c * ps + x, ch) - mean) * inv_std;
      }
  }
  return out;
}

// X = [x_cls, F(x_1) .. F(x_N)] + E_pos for every image.
template <typename Scalar>
TokenSequence<Scalar> tokenize(Tape<Scalar>& tape, const std::vector<Image<Scalar>>& images, const EncoderVars<Scalar>& p) {
  const EncoderConfig& cfg = p.config;
  const Index n = cfg.num_patches(), len = n + 1, count = static_cast<Index>(images.size());
  if (count == 0) throw ShapeError("tokenize: no images");
  Var<Scalar> patches = tape.constant(patchify(images, cfg));
  Var<Scalar> embedded = linear(patches, p.patch_w, p.patch_b);
  Var<Scalar> pool = concat_rows(std::vector<Var<Scalar>>{p.cls, embedded});
  std::vector<Index> order, pos_rows;
  order.reserve(static_cast<std::size_t>(count * len));
  for (Index b = 0; b < count; ++b)
    for (Index i = 0; i < len; ++i) {
      order.push_back(i == 0 ? 0 : 1 + b * n + (i - 1));
      pos_rows.push_back(i);
    }
  TokenSequence<Scalar> seq;
  seq.tokens = add(gather_rows(pool, order), gather_rows(p.pos, pos_rows));
  seq.seq_len = len;
  std::vector<Index> all(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  seq.patch_indices.assign(static_cast<std::size_t>(count), all);
  return seq;
}

// Keeps the class token and the listed patch rows (positions into the
// sequence's own patch list) of every sequence. All lists must share one length.
template <typename Scalar>
TokenSequence<Scalar> subsequence(const TokenSequence<Scalar>& seq, const std::vector<std::vector<Index>>& keep) {
  if (static_cast<Index>(keep.size()) != seq.count()) throw ShapeError("subsequence: one index list per sequence required");
  if (keep.empty() || keep.front().empty()) throw ShapeError("subsequence: empty patch set");
  const Index k = static_cast<Index>(keep.front().size());
  TokenSequence<Scalar> out;
  out.seq_len = k + 1;
  std::vector<Index> rows;
  for (Index s = 0; s < seq.count(); ++s) {
    const auto& idx = keep[static_cast<std::size_t>(s)];
    if (static_cast<Index>(idx.size()) != k) throw ShapeError("subsequence: ragged index lists");
    rows.push_back(s * seq.seq_len);
    std::vector<Index> origin;
    for (Index i : idx) {
      if (i < 0 || i >= seq.seq_len - 1) throw ShapeError("subsequence: patch index " + std::to_string(i) + " out of range");
      rows.push_back(s * seq.seq_len + 1 + i);
      origin.push_back(seq.patch_indices[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
    }
    out.patch_indices.push_back(std::move(origin));
  }
  out.tokens = gather_rows(seq.tokens, rows);
  return out;
}

// Sequences first .. first + count - 1 of a stack.
template <typename Scalar>
TokenSequence<Scalar> slice_sequences(const TokenSequence<Scalar>& seq, Index first, Index count) {
  if (first < 0 || count < 1 || first + count > seq.count()) throw ShapeError("slice_sequences: range outside the stack");
  TokenSequence<Scalar> out;
  out.seq_len = seq.seq_len;
  out.tokens = slice_rows(seq.tokens, first * seq.seq_len, count * seq.seq_len);
  out.patch_indices.assign(seq.patch_indices.begin() + first, seq.patch_indices.begin() + first + count);
  return out;
}

// Pre-norm transformer block over stacked sequences of length seq_len.
template <typename Scalar>
Var<Scalar> transformer_block(const Var<Scalar>& x, const BlockT<Var<Scalar>>& b, Index seq_len, Index heads) {
  const Index d = x.cols();
  Var<Scalar> h = layer_norm(x, b.ln1_g, b.ln1_b);
  Var<Scalar> qkv = linear(h, b.qkv_w, b.qkv_b);
  Var<Scalar> att = attention(slice_cols(qkv, 0, d), slice_cols(qkv, d, d), slice_cols(qkv, 2 * d, d), seq_len, heads);
  Var<Scalar> x1 = add(x, linear(att, b.proj_w, b.proj_b));
  Var<Scalar> m = gelu(linear(layer_norm(x1, b.ln2_g, b.ln2_b), b.fc1_w, b.fc1_b));
  return add(x1, linear(m, b.fc2_w, b.fc2_b));
}

namespace detail {

template <typename Scalar>
Var<Scalar> trunk(const TokenSequence<Scalar>& seq, const EncoderVars<Scalar>& p) {
  Var<Scalar> h = seq.tokens;
  for (const auto& b : p.blocks) h = transformer_block(h, b, seq.seq_len, p.config.heads);
  return h;
}

template <typename Scalar>
Var<Scalar> class_rows(const Var<Scalar>& x, Index seq_len) {
  std::vector<Index> rows;
  for (Index s = 0; s < x.rows() / seq_len; ++s) rows.push_back(s * seq_len);
  return gather_rows(x, rows);
}

template <typename Scalar>
Var<Scalar> output_norm(const Var<Scalar>& f, const EncoderVars<Scalar>& p) {
  return p.config.final_norm ? layer_norm(f, p.norm_g, p.norm_b) : f;
}

}  // namespace detail

// Global representation f_g plus T part representations f_j.
template <typename Scalar>
PartOutputs<Scalar> encode_parts(const TokenSequence<Scalar>& seq, const EncoderVars<Scalar>& p) {
  const Index n = seq.seq_len - 1, t = p.config.parts;
  if (n < 1 || n % t != 0)
    throw ShapeError("encode_parts: " + std::to_string(n) + " patches not divisible into " + std::to_string(t) + " parts");
  const Index per = n / t;
  Var<Scalar> h = detail::trunk(seq, p);

  PartOutputs<Scalar> out;
  out.global = detail::output_norm(
      detail::class_rows(transformer_block(h, p.global_block, seq.seq_len, p.config.heads), seq.seq_len), p);

  // All T * count part sequences go through the shared block in one pass.
  std::vector<Index> rows;
  for (Index j = 0; j < t; ++j)
    for (Index s = 0; s < seq.count(); ++s) {
      rows.push_back(s * seq.seq_len);
      for (Index i = 0; i < per; ++i) rows.push_back(s * seq.seq_len + 1 + j * per + i);
    }
  Var<Scalar> encoded = transformer_block(gather_rows(h, rows), p.part_block, per + 1, p.config.heads);
  Var<Scalar> cls = detail::output_norm(detail::class_rows(encoded, per + 1), p);
  for (Index j = 0; j < t; ++j) out.parts.push_back(slice_rows(cls, j * seq.count(), seq.count()));
  return out;
}

// Encoded class token through the trunk and the global block; accepts
// shortened sequences.
template <typename Scalar>
Var<Scalar> encode_class(const TokenSequence<Scalar>& seq, const EncoderVars<Scalar>& p) {
  if (seq.seq_len < 2) throw ShapeError("encode_class: empty patch set");
  Var<Scalar> h = transformer_block(detail::trunk(seq, p), p.global_block, seq.seq_len, p.config.heads);
  return detail::output_norm(detail::class_rows(h, seq.seq_len), p);
}

// Encoded patch rows (class token dropped), sequence by sequence:
// count * (seq_len - 1) x D.
template <typename Scalar>
Var<Scalar> encode_patches(const TokenSequence<Scalar>& seq, const EncoderVars<Scalar>& p) {
  if (seq.seq_len < 2) throw ShapeError("encode_patches: empty patch set");
  Var<Scalar> h = transformer_block(detail::trunk(seq, p), p.global_block, seq.seq_len, p.config.heads);
  std::vector<Index> rows;
  for (Index s = 0; s < seq.count(); ++s)
    for (Index i = 1; i < seq.seq_len; ++i) rows.push_back(s * seq.seq_len + i);
  return gather_rows(h, rows);
}

template <typename Scalar>
Var<Scalar> classify(const Var<Scalar>& reps, const EncoderVars<Scalar>& p) {
  return matmul(reps, p.classifier);
}

// shadow <- m * shadow + (1 - m) * live
template <typename Scalar>
void ema_update(ShadowParams<Scalar>& shadow, const EncoderParams<Scalar>& live) {
  const double m = shadow.momentum;
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("ema_update: momentum outside [0,1]");
  detail::zip_params(shadow.params, live, [&](const std::string& name, Matrix<Scalar>& s, const Matrix<Scalar>& l) {
    if (s.rows() != l.rows() || s.cols() != l.cols()) throw ShapeError("ema_update: shape mismatch at " + name);
    if (m == 1.0) return;
    if (m == 0.0) {
      s = l;
      return;
    }
    s = Scalar(m) * s + Scalar(1.0 - m) * l;
  });
}

}  // namespace xmreid
