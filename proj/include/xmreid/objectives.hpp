// Training objectives. Contrastive terms use the -log form so that every
// term is non-negative and decreases as same-identity similarity dominates.
#pragma once

#include "xmreid/numcore.hpp"
#include "xmreid/protobank.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmreid {

struct LossReport {
  std::optional<double> base, high, i2p, p2p, p2p_pp, inst;
  double overall = 0.0;
  std::map<std::string, double> grad_norms;
};

struct SimilarityKernel {
  double temperature = 0.1;

  explicit SimilarityKernel(double tau = 0.1) : temperature(tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("SimilarityKernel: temperature must be positive");
  }
};

namespace detail {

inline std::size_t distinct_count(const std::vector<Index>& labels) {
  return std::set<Index>(labels.begin(), labels.end()).size();
}

// Instances per identity; every identity must contribute the same number.
inline Index per_identity_count(const std::vector<Index>& labels) {
  std::map<Index, Index> counts;
  for (Index y : labels) ++counts[y];
  if (counts.empty()) throw std::invalid_argument("empty batch");
  for (const auto& [id, n] : counts)
    if (n != counts.begin()->second) throw std::invalid_argument("identity " + std::to_string(id) + " is unbalanced in the batch");
  return counts.begin()->second;
}

}  // namespace detail

// Mean over rows of -log softmax(reps * classifier)[label].
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& reps, const std::vector<Index>& labels, const Var<Scalar>& classifier) {
  if (static_cast<Index>(labels.size()) != reps.rows()) throw ShapeError("cross_entropy: label count differs from rows");
  const Index classes = classifier.cols();
  std::vector<std::pair<Index, Index>> cells;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " outside [0," + std::to_string(classes) + ")");
    cells.emplace_back(static_cast<Index>(i), labels[i]);
  }
  Var<Scalar> lp = log_softmax(matmul(reps, classifier));
  return scale(sum(pick(lp, cells)), Scalar(-1) / Scalar(labels.size()));
}

// Batch-hard triplet: for every anchor the farthest positive and the nearest
// negative, hinge at `margin`, averaged over anchors. Euclidean distances.
template <typename Scalar>
Var<Scalar> triplet(const Var<Scalar>& reps, const std::vector<Index>& labels, Scalar margin = Scalar(0.3)) {
  if (static_cast<Index>(labels.size()) != reps.rows()) throw ShapeError("triplet: label count differs from rows");
  if (detail::distinct_count(labels) < 2) throw std::invalid_argument("triplet: needs at least two identities");
  Var<Scalar> d = pairwise_distance(reps, reps);
  const Matrix<Scalar>& dv = d.value();
  const Index n = reps.rows();
  std::vector<std::pair<Index, Index>> pos, neg;
  for (Index i = 0; i < n; ++i) {
    Index hp = i, hn = -1;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (hp == i || dv(i, j) > dv(i, hp)) hp = j;
      } else if (hn < 0 || dv(i, j) < dv(i, hn)) {
        hn = j;
      }
    }
    pos.emplace_back(i, hp);
    neg.emplace_back(i, hn);
  }
  Var<Scalar> gap = shift(sub(pick(d, pos), pick(d, neg)), margin);
  return scale(sum(relu(gap)), Scalar(1) / Scalar(n));
}

// -log softmax over {c} u negatives of v.c_j / tau_j. v, c: 1 x D;
// negatives: n x D; taus: 1 + n entries, taus[0] for c.
template <typename Scalar>
Var<Scalar> proto_nce(const Var<Scalar>& v, const Var<Scalar>& c, const Var<Scalar>& negatives, const std::vector<Scalar>& taus) {
  if (negatives.rows() < 1) throw std::invalid_argument("proto_nce: empty negative set");
  if (static_cast<Index>(taus.size()) != negatives.rows() + 1) throw ShapeError("proto_nce: one temperature per prototype required");
  Matrix<Scalar> inv(1, static_cast<Index>(taus.size()));
  for (std::size_t i = 0; i < taus.size(); ++i) {
    if (!(taus[i] > Scalar(0))) throw std::invalid_argument("proto_nce: temperatures must be positive");
    inv(0, static_cast<Index>(i)) = Scalar(1) / taus[i];
  }
  Var<Scalar> protos = concat_rows(std::vector<Var<Scalar>>{c, negatives});
  Var<Scalar> logits = hadamard(matmul_nt(v, protos), v.tape()->constant(std::move(inv)));
  return scale(pick(log_softmax(logits), {{0, 0}}), Scalar(-1));
}

// CE(f_g) + Tri(f_g) + (1/T) sum_j [CE(f_j) + Tri(f_j)]
template <typename Scalar>
Var<Scalar> loss_base(const Var<Scalar>& global, const std::vector<Var<Scalar>>& parts, const std::vector<Index>& labels,
                      const Var<Scalar>& classifier, Scalar margin = Scalar(0.3)) {
  if (parts.empty()) throw std::invalid_argument("loss_base: no part representations");
  Var<Scalar> total = add(cross_entropy(global, labels, classifier), triplet(global, labels, margin));
  std::vector<Var<Scalar>> terms;
  for (const auto& f : parts) terms.push_back(add(cross_entropy(f, labels, classifier), triplet(f, labels, margin)));
  Var<Scalar> part_sum = terms.front();
  for (std::size_t j = 1; j < terms.size(); ++j) part_sum = add(part_sum, terms[j]);
  return add(total, scale(part_sum, Scalar(1) / Scalar(parts.size())));
}

// exp(cos(a, b) / tau) for plain vectors.
template <typename DerivedA, typename DerivedB>
double kernel_sim(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("kernel_sim: temperature must be positive");
  const double na = static_cast<double>(a.norm()), nb = static_cast<double>(b.norm());
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("kernel_sim: zero vector");
  return std::exp(static_cast<double>(a.cwiseProduct(b).sum()) / (na * nb) / tau);
}

// Pairwise kernel matrix on the tape: exp(normalize(a) normalize(b)^T / tau).
template <typename Scalar>
Var<Scalar> kernel_matrix(const Var<Scalar>& a, const Var<Scalar>& b, const SimilarityKernel& k) {
  return exp(scale(matmul_nt(normalize_rows(a), normalize_rows(b)), Scalar(1.0 / k.temperature)));
}

// Instance-to-prototype distances for both streams, summed over the batch and
// normalized by P, the number of IR (or RGB) instances per identity:
//   (1/P) sum D(z^I, p^I) + (1/P) sum D(z^R, p^R) + (1/2P) sum_{both} D(z, p)
// plus the same for the global stream against q.
template <typename Scalar>
Var<Scalar> loss_i2p(const Var<Scalar>& z_ir, const Var<Scalar>& z_rgb, const Var<Scalar>& fg_ir, const Var<Scalar>& fg_rgb,
                     const std::vector<Index>& labels, const BankView<Scalar>& view) {
  const Index n = static_cast<Index>(labels.size());
  for (const auto* v : {&z_ir, &z_rgb, &fg_ir, &fg_rgb})
    if (v->rows() != n) throw ShapeError("loss_i2p: representation rows differ from label count");
  if (n == 0) throw std::invalid_argument("loss_i2p: empty batch");
  std::vector<Index> rows;
  for (Index y : labels) rows.push_back(view.row_of(y));

  auto stream = [&](const Var<Scalar>& ir, const Var<Scalar>& rgb, const std::array<Var<Scalar>, 3>& protos) {
    Var<Scalar> fused = gather_rows(protos[kFused], rows);
    Var<Scalar> own = add(sum(row_distance(ir, gather_rows(protos[kInfrared], rows))),
                          sum(row_distance(rgb, gather_rows(protos[kVisible], rows))));
    Var<Scalar> shared = add(sum(row_distance(ir, fused)), sum(row_distance(rgb, fused)));
    return add(own, scale(shared, Scalar(0.5)));
  };
  Var<Scalar> total = add(stream(z_ir, z_rgb, view.high), stream(fg_ir, fg_rgb, view.global));
  return scale(total, Scalar(1) / Scalar(detail::per_identity_count(labels)));
}

// Set-to-set prototype contrast over C identities with 3 elements each:
//   (1/C) sum_c sum_i -log( sum_{j!=i} S(A_ci, B_cj) /
//                          (sum_{j!=i} S(A_ci, B_cj) + sum_{k!=c} sum_j S(A_ci, B_kj)) )
template <typename Scalar>
Var<Scalar> prototype_contrast(const std::array<Var<Scalar>, 3>& anchors, const std::array<Var<Scalar>, 3>& targets,
                               const SimilarityKernel& k) {
  const Index c = anchors[0].rows();
  if (c < 2) throw std::invalid_argument("prototype contrast: needs at least two initialized identities");
  // Row c*3 + i holds element i of identity c.
  std::vector<Index> order;
  for (Index id = 0; id < c; ++id)
    for (Index i = 0; i < 3; ++i) order.push_back(i * c + id);
  Var<Scalar> a = gather_rows(concat_rows(std::vector<Var<Scalar>>{anchors[0], anchors[1], anchors[2]}), order);
  Var<Scalar> b = gather_rows(concat_rows(std::vector<Var<Scalar>>{targets[0], targets[1], targets[2]}), order);
  Var<Scalar> sim = kernel_matrix(a, b, k);

  const Index m = 3 * c;
  Matrix<Scalar> pos = Matrix<Scalar>::Zero(m, m), all = Matrix<Scalar>::Ones(m, m);
  for (Index id = 0; id < c; ++id)
    for (Index i = 0; i < 3; ++i) {
      all(id * 3 + i, id * 3 + i) = Scalar(0);
      for (Index j = 0; j < 3; ++j)
        if (j != i) pos(id * 3 + i, id * 3 + j) = Scalar(1);
    }
  Tape<Scalar>& tape = *a.tape();
  Var<Scalar> num = sum_axis(hadamard(sim, tape.constant(std::move(pos))), 1);
  Var<Scalar> den = sum_axis(hadamard(sim, tape.constant(std::move(all))), 1);
  return scale(sub(sum(log(den)), sum(log(num))), Scalar(1) / Scalar(c));
}

// Contrast within P and within Q.
template <typename Scalar>
Var<Scalar> loss_p2p(const BankView<Scalar>& view, const SimilarityKernel& k) {
  return add(prototype_contrast(view.global, view.global, k), prototype_contrast(view.high, view.high, k));
}

// Global anchors against stop-gradient high-frequency targets.
template <typename Scalar>
Var<Scalar> loss_p2p_plus(const BankView<Scalar>& view, const SimilarityKernel& k) {
  std::array<Var<Scalar>, 3> targets;
  for (int i = 0; i < 3; ++i) targets[i] = stop_gradient(view.high[i]);
  return prototype_contrast(view.global, targets, k);
}

// Cross-modal instance contrast: RGB anchors against IR instances, both
// streams. Rows are slot-aligned with labels.
template <typename Scalar>
Var<Scalar> loss_inst(const Var<Scalar>& z_ir, const Var<Scalar>& z_rgb, const Var<Scalar>& fg_ir, const Var<Scalar>& fg_rgb,
                      const std::vector<Index>& labels, const SimilarityKernel& k) {
  const Index n = static_cast<Index>(labels.size());
  for (const auto* v : {&z_ir, &z_rgb, &fg_ir, &fg_rgb})
    if (v->rows() != n) throw ShapeError("loss_inst: representation rows differ from label count");
  if (detail::distinct_count(labels) < 2) throw std::invalid_argument("loss_inst: needs at least two identities");
  Matrix<Scalar> pos = Matrix<Scalar>::Zero(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) pos(i, j) = Scalar(1);
  Tape<Scalar>& tape = *z_ir.tape();
  Var<Scalar> mask = tape.constant(std::move(pos));
  auto stream = [&](const Var<Scalar>& anchors, const Var<Scalar>& targets) {
    Var<Scalar> sim = kernel_matrix(anchors, targets, k);
    Var<Scalar> num = sum_axis(hadamard(sim, mask), 1);
    Var<Scalar> den = sum_axis(sim, 1);
    return scale(sub(sum(log(den)), sum(log(num))), Scalar(1) / Scalar(n));
  };
  return add(stream(fg_rgb, fg_ir), stream(z_rgb, z_ir));
}

// Sum of the five terms; every one must be present (disabled terms are
// passed as zero).
template <typename Scalar>
Var<Scalar> loss_overall(const std::map<std::string, Var<Scalar>>& terms) {
  static const char* required[] = {"base", "high", "i2p", "p2p", "p2p_pp"};
  Var<Scalar> total;
  for (const char* name : required) {
    auto it = terms.find(name);
    if (it == terms.end() || !it->second.valid()) throw std::invalid_argument(std::string("loss_overall: missing term ") + name);
    total = total.valid() ? add(total, it->second) : it->second;
  }
  for (const auto& [name, v] : terms) {
    bool known = false;
    for (const char* r : required) known = known || name == r;
    if (!known) total = add(total, v);
  }
  return total;
}

}  // namespace xmreid
