// Multimodal prototype memory: per identity, IR / RGB / fused prototypes for
// the high-frequency stream (P) and the global stream (Q), refreshed from
// mini-batch centers by an exponential moving average.
#pragma once

#include "xmreid/instrumentation.hpp"
#include "xmreid/numcore.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xmreid {

// Element order inside every prototype set.
enum ProtoSlot : int { kInfrared = 0, kVisible = 1, kFused = 2 };

template <typename Scalar>
struct PrototypeBank {
  Index classes = 0;
  Index width = 0;
  double alpha = 0.8;
  std::array<Matrix<Scalar>, 3> high;    // each classes x width
  std::array<Matrix<Scalar>, 3> global;  // each classes x width
  std::vector<bool> initialized;

  PrototypeBank() = default;
  PrototypeBank(Index c, Index d, double decay) : classes(c), width(d), alpha(decay), initialized(static_cast<std::size_t>(c), false) {
    if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("PrototypeBank: decay rate outside [0,1]");
    for (auto& m : high) m = Matrix<Scalar>::Zero(c, d);
    for (auto& m : global) m = Matrix<Scalar>::Zero(c, d);
  }

  bool is_initialized(Index c) const { return c >= 0 && c < classes && initialized[static_cast<std::size_t>(c)]; }

  std::vector<Index> initialized_ids() const {
    std::vector<Index> ids;
    for (Index c = 0; c < classes; ++c)
      if (initialized[static_cast<std::size_t>(c)]) ids.push_back(c);
    return ids;
  }
};

// Mini-batch centers, one row per identity (in `identities` order).
template <typename Scalar>
struct BatchCenters {
  std::vector<Index> identities;
  Index per_identity = 0;
  std::array<Var<Scalar>, 3> high;
  std::array<Var<Scalar>, 3> global;
};

// Post-update prototypes for every initialized identity, as tape values.
// Rows for identities in the current batch carry gradient into that batch's
// representations; all other rows are constants.
template <typename Scalar>
struct BankView {
  std::vector<Index> identities;  // ascending
  std::array<Var<Scalar>, 3> high;
  std::array<Var<Scalar>, 3> global;

  Index row_of(Index identity) const {
    auto it = std::lower_bound(identities.begin(), identities.end(), identity);
    if (it == identities.end() || *it != identity)
      throw std::out_of_range("prototype for identity " + std::to_string(identity) + " is not initialized");
    return static_cast<Index>(it - identities.begin());
  }
};

enum class ProtoUpdateOrder { kBefore, kAfter };

// z_* and fg_* are instance rows, slot-aligned with labels (row s of the IR
// and RGB matrices belongs to identity labels[s]).
template <typename Scalar>
BatchCenters<Scalar> batch_centers(const Var<Scalar>& z_ir, const Var<Scalar>& z_rgb, const Var<Scalar>& fg_ir,
                                   const Var<Scalar>& fg_rgb, const std::vector<Index>& labels) {
  ++instrumentation::counters().protobank;
  const Index n = static_cast<Index>(labels.size());
  for (const auto* v : {&z_ir, &z_rgb, &fg_ir, &fg_rgb})
    if (v->rows() != n) throw ShapeError("batch_centers: representation rows differ from label count");

  std::map<Index, Index> counts;
  for (Index y : labels) ++counts[y];
  BatchCenters<Scalar> out;
  out.per_identity = counts.begin()->second;
  for (const auto& [id, count] : counts) {
    if (count != out.per_identity)
      throw std::invalid_argument("batch_centers: identity " + std::to_string(id) + " has " + std::to_string(count) +
                                  " instances, expected " + std::to_string(out.per_identity));
    out.identities.push_back(id);
  }

  std::vector<std::vector<Index>> groups(out.identities.size());
  for (Index s = 0; s < n; ++s) {
    const auto row = std::lower_bound(out.identities.begin(), out.identities.end(), labels[static_cast<std::size_t>(s)]) -
                     out.identities.begin();
    groups[static_cast<std::size_t>(row)].push_back(s);
  }
  auto centers = [&](const Var<Scalar>& ir, const Var<Scalar>& rgb) {
    Var<Scalar> ci = group_mean_rows(ir, groups);
    Var<Scalar> cr = group_mean_rows(rgb, groups);
    return std::array<Var<Scalar>, 3>{ci, cr, scale(add(ci, cr), Scalar(0.5))};
  };
  out.high = centers(z_ir, z_rgb);
  out.global = centers(fg_ir, fg_rgb);
  return out;
}

// new = alpha * batch_center + (1 - alpha) * previous; first observations
// initialize directly. Writes the detached values into the bank and returns
// the prototypes the losses should see (post-update for kBefore, the
// pre-update state for kAfter, with batch centers standing in for identities
// seen for the first time).
template <typename Scalar>
BankView<Scalar> ema_prototype_update(PrototypeBank<Scalar>& bank, const BatchCenters<Scalar>& centers,
                                      ProtoUpdateOrder order = ProtoUpdateOrder::kBefore) {
  ++instrumentation::counters().protobank;
  Tape<Scalar>& tape = *centers.high[0].tape();
  const Scalar alpha = Scalar(bank.alpha);
  const Index nb = static_cast<Index>(centers.identities.size());
  for (Index id : centers.identities)
    if (id < 0 || id >= bank.classes) throw std::out_of_range("ema_prototype_update: identity " + std::to_string(id) + " outside bank");

  std::vector<bool> fresh(static_cast<std::size_t>(nb));
  for (Index r = 0; r < nb; ++r)
    fresh[static_cast<std::size_t>(r)] = !bank.is_initialized(centers.identities[static_cast<std::size_t>(r)]);

  auto updated = [&](const Var<Scalar>& center, const Matrix<Scalar>& stored) {
    Matrix<Scalar> prev(nb, bank.width);
    Matrix<Scalar> keep(nb, bank.width);
    for (Index r = 0; r < nb; ++r) {
      const bool f = fresh[static_cast<std::size_t>(r)];
      prev.row(r) = f ? Matrix<Scalar>::Zero(1, bank.width) : Matrix<Scalar>(stored.row(centers.identities[static_cast<std::size_t>(r)]) * (Scalar(1) - alpha));
      keep.row(r).setConstant(f ? Scalar(1) : alpha);
    }
    return add(hadamard(center, tape.constant(std::move(keep))), tape.constant(std::move(prev)));
  };

  std::array<Var<Scalar>, 3> new_high, new_global;
  for (int i = 0; i < 3; ++i) {
    new_high[i] = updated(centers.high[i], bank.high[i]);
    new_global[i] = updated(centers.global[i], bank.global[i]);
  }

  // Snapshot before writing, for the kAfter view.
  const PrototypeBank<Scalar> before = order == ProtoUpdateOrder::kAfter ? bank : PrototypeBank<Scalar>();

  for (Index r = 0; r < nb; ++r) {
    const Index id = centers.identities[static_cast<std::size_t>(r)];
    for (int i = 0; i < 3; ++i) {
      bank.high[i].row(id) = new_high[i].value().row(r);
      bank.global[i].row(id) = new_global[i].value().row(r);
    }
    bank.initialized[static_cast<std::size_t>(id)] = true;
  }

  BankView<Scalar> view;
  view.identities = bank.initialized_ids();
  const Index nv = static_cast<Index>(view.identities.size());

  auto assemble = [&](const Var<Scalar>& batch_rows, const Matrix<Scalar>& stored_other, bool use_before) {
    // Pool = [batch rows; every bank row as constant]; gather picks per identity.
    Matrix<Scalar> others(nv, bank.width);
    for (Index r = 0; r < nv; ++r) others.row(r) = stored_other.row(view.identities[static_cast<std::size_t>(r)]);
    Var<Scalar> pool = concat_rows(std::vector<Var<Scalar>>{batch_rows, tape.constant(std::move(others))});
    std::vector<Index> rows;
    for (Index r = 0; r < nv; ++r) {
      const Index id = view.identities[static_cast<std::size_t>(r)];
      auto it = std::find(centers.identities.begin(), centers.identities.end(), id);
      const bool in_batch = it != centers.identities.end();
      const Index br = static_cast<Index>(it - centers.identities.begin());
      if (in_batch && !(use_before && before.is_initialized(id)))
        rows.push_back(br);
      else
        rows.push_back(nb + r);
    }
    return gather_rows(pool, rows);
  };

  const bool after = order == ProtoUpdateOrder::kAfter;
  for (int i = 0; i < 3; ++i) {
    if (after) {
      view.high[i] = assemble(centers.high[i], before.high[i], true);
      view.global[i] = assemble(centers.global[i], before.global[i], true);
    } else {
      view.high[i] = assemble(new_high[i], bank.high[i], false);
      view.global[i] = assemble(new_global[i], bank.global[i], false);
    }
  }
  return view;
}

// (P_c, Q_c), each ordered (IR, RGB, fused).
template <typename Scalar>
std::pair<std::array<Matrix<Scalar>, 3>, std::array<Matrix<Scalar>, 3>> prototype_sets(const PrototypeBank<Scalar>& bank, Index c) {
  ++instrumentation::counters().protobank;
  if (!bank.is_initialized(c)) throw std::out_of_range("prototype_sets: identity " + std::to_string(c) + " is not initialized");
  std::array<Matrix<Scalar>, 3> p, q;
  for (int i = 0; i < 3; ++i) {
    p[i] = bank.high[i].row(c);
    q[i] = bank.global[i].row(c);
  }
  return {p, q};
}

// View of the stored bank with no gradient path, e.g. for evaluating the
// prototype losses on a bank directly.
template <typename Scalar>
BankView<Scalar> constant_view(Tape<Scalar>& tape, const PrototypeBank<Scalar>& bank) {
  BankView<Scalar> view;
  view.identities = bank.initialized_ids();
  std::vector<Index> rows(view.identities.begin(), view.identities.end());
  for (int i = 0; i < 3; ++i) {
    view.high[i] = gather_rows(tape.constant(bank.high[i]), rows);
    view.global[i] = gather_rows(tape.constant(bank.global[i]), rows);
  }
  return view;
}

}  // namespace xmreid
