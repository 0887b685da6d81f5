#include "xmreid/gradsuite.hpp"

#include "xmreid/chpe.hpp"
#include "xmreid/objectives.hpp"
#include "xmreid/protobank.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace xmreid {

namespace {

using VarMap = std::map<std::string, Var<double>>;

constexpr Index kWidth = 6;
constexpr Index kClasses = 2;
// With tau = 0.1 some loss_inst gradient entries are ~1e-8, where roundoff in
// the loss swamps a 1e-4 stencil. The five-point truncation error is still
// negligible at 1e-3.
constexpr double kStep = 1e-3;

Matrix<double> uniform(Index rows, Index cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> nd(-1.0, 1.0);
  Matrix<double> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

// Batch-hard mining and the hinge are kinked where two candidate distances
// tie or the hinge argument is zero. Inputs closer than `gap` to such a point
// are redrawn so the finite-difference probe stays on one smooth piece.
bool clear_of_kinks(const Matrix<double>& x, const std::vector<Index>& labels, double margin, double gap = 1e-2) {
  const Index n = x.rows();
  for (Index i = 0; i < n; ++i) {
    std::vector<double> pos, neg;
    for (Index j = 0; j < n; ++j)
      if (j != i) (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)] ? pos : neg).push_back((x.row(i) - x.row(j)).norm());
    std::sort(pos.rbegin(), pos.rend());
    std::sort(neg.begin(), neg.end());
    if (pos.size() > 1 && pos[0] - pos[1] < gap) return false;
    if (neg.size() > 1 && neg[1] - neg[0] < gap) return false;
    if (std::abs(pos[0] - neg[0] + margin) < gap) return false;
  }
  return true;
}

Matrix<double> triplet_input(Index rows, const std::vector<Index>& labels, std::mt19937_64& rng) {
  for (;;) {
    Matrix<double> m = uniform(rows, kWidth, rng);
    if (clear_of_kinks(m, labels, 0.3)) return m;
  }
}

// A bank where both identities already hold prototypes, so the update mixes
// stored values with batch centers.
PrototypeBank<double> seeded_bank(std::mt19937_64& rng) {
  PrototypeBank<double> bank(kClasses + 1, kWidth, 0.8);
  for (int i = 0; i < 3; ++i) {
    bank.high[i] = uniform(kClasses + 1, kWidth, rng);
    bank.global[i] = uniform(kClasses + 1, kWidth, rng);
  }
  bank.initialized.assign(kClasses + 1, true);
  return bank;
}

BankView<double> updated_view(const PrototypeBank<double>& stored, const VarMap& v, const std::vector<Index>& labels) {
  PrototypeBank<double> bank = stored;
  return ema_prototype_update(bank, batch_centers(v.at("z_ir"), v.at("z_rgb"), v.at("fg_ir"), v.at("fg_rgb"), labels));
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, double tolerance) {
  std::mt19937_64 rng(seed);
  const std::vector<Index> labels{0, 0, 1, 1};
  const std::vector<Index> labels2{0, 0, 1, 1, 0, 0, 1, 1};
  const SimilarityKernel kernel(0.1);
  const double margin = 0.3;
  std::vector<GradSuiteEntry> out;

  auto check = [&](const std::string& name, const LossFn& fn, const ParamMap& params) {
    const GradCheckReport r = grad_check(fn, params, kStep);
    out.push_back({name, r.max_rel_error, r.max_rel_error < tolerance});
  };

  const Matrix<double> classifier = uniform(kWidth, kClasses, rng);
  const ParamMap reps{{"reps", triplet_input(4, labels, rng)}, {"classifier", classifier}};
  check("cross_entropy", [&](Tape<double>&, const VarMap& v) { return cross_entropy(v.at("reps"), labels, v.at("classifier")); }, reps);
  check("triplet", [&](Tape<double>&, const VarMap& v) { return triplet(v.at("reps"), labels, margin); }, {{"reps", reps.at("reps")}});

  const std::vector<double> taus{0.5, 0.3, 0.7, 0.4};
  check("proto_nce",
        [&](Tape<double>&, const VarMap& v) { return proto_nce(v.at("v"), v.at("c"), v.at("neg"), taus); },
        {{"v", uniform(1, kWidth, rng) * 0.5}, {"c", uniform(1, kWidth, rng) * 0.5}, {"neg", uniform(3, kWidth, rng) * 0.5}});

  check("loss_base",
        [&](Tape<double>&, const VarMap& v) {
          return loss_base(v.at("global"), {v.at("part0"), v.at("part1")}, labels2, v.at("classifier"), margin);
        },
        {{"global", triplet_input(8, labels2, rng)}, {"part0", triplet_input(8, labels2, rng)}, {"part1", triplet_input(8, labels2, rng)}, {"classifier", classifier}});

  ParamMap inst{{"z_ir", triplet_input(4, labels, rng)}, {"z_rgb", triplet_input(4, labels, rng)}};
  for (;;) {
    inst["fg_ir"] = uniform(4, kWidth, rng);
    inst["fg_rgb"] = uniform(4, kWidth, rng);
    Matrix<double> global(8, kWidth);
    global << inst["fg_ir"], inst["fg_rgb"];
    if (clear_of_kinks(global, labels2, margin)) break;
  }
  check("loss_high",
        [&](Tape<double>&, const VarMap& v) { return loss_high(v.at("z_ir"), v.at("z_rgb"), labels, v.at("classifier"), margin); },
        {{"z_ir", inst.at("z_ir")}, {"z_rgb", inst.at("z_rgb")}, {"classifier", classifier}});

  const PrototypeBank<double> bank = seeded_bank(rng);
  check("loss_i2p",
        [&](Tape<double>&, const VarMap& v) {
          return loss_i2p(v.at("z_ir"), v.at("z_rgb"), v.at("fg_ir"), v.at("fg_rgb"), labels, updated_view(bank, v, labels));
        },
        inst);

  ParamMap protos;
  for (int i = 0; i < 3; ++i) {
    protos["P" + std::to_string(i)] = uniform(3, kWidth, rng);
    protos["Q" + std::to_string(i)] = uniform(3, kWidth, rng);
  }
  auto view_of = [](const VarMap& v) {
    BankView<double> view;
    view.identities = {0, 1, 2};
    for (int i = 0; i < 3; ++i) {
      view.high[i] = v.at("P" + std::to_string(i));
      view.global[i] = v.at("Q" + std::to_string(i));
    }
    return view;
  };
  check("loss_p2p", [&](Tape<double>&, const VarMap& v) { return loss_p2p(view_of(v), kernel); }, protos);

  // Targets sit behind a stop-gradient, so only the anchors are probed.
  check("loss_p2p_plus",
        [&](Tape<double>& t, const VarMap& v) {
          VarMap all = v;
          for (int i = 0; i < 3; ++i) all["P" + std::to_string(i)] = t.constant(protos.at("P" + std::to_string(i)));
          return loss_p2p_plus(view_of(all), kernel);
        },
        {{"Q0", protos.at("Q0")}, {"Q1", protos.at("Q1")}, {"Q2", protos.at("Q2")}});

  check("loss_inst",
        [&](Tape<double>&, const VarMap& v) { return loss_inst(v.at("z_ir"), v.at("z_rgb"), v.at("fg_ir"), v.at("fg_rgb"), labels, kernel); },
        inst);

  // Full composition: batch centers, prototype update and all five terms.
  // The stop-gradient targets are frozen at their unperturbed values, which is
  // what the stop-gradient means for a finite-difference probe.
  ParamMap all = inst;
  all["parts0"] = triplet_input(8, labels2, rng);
  all["parts1"] = triplet_input(8, labels2, rng);
  all["classifier"] = classifier;
  std::array<Matrix<double>, 3> frozen;
  {
    Tape<double> t;
    VarMap v;
    for (const auto& [k, m] : all) v.emplace(k, t.constant(m));
    const BankView<double> view = updated_view(bank, v, labels);
    for (int i = 0; i < 3; ++i) frozen[static_cast<std::size_t>(i)] = view.high[i].value();
  }
  check("loss_overall",
        [&](Tape<double>& t, const VarMap& v) {
          const Var<double> global = concat_rows(std::vector<Var<double>>{v.at("fg_ir"), v.at("fg_rgb")});
          const BankView<double> view = updated_view(bank, v, labels);
          std::array<Var<double>, 3> targets;
          for (int i = 0; i < 3; ++i) targets[i] = t.constant(frozen[static_cast<std::size_t>(i)]);
          std::map<std::string, Var<double>> terms;
          terms["base"] = loss_base(global, {v.at("parts0"), v.at("parts1")}, labels2, v.at("classifier"), margin);
          terms["high"] = loss_high(v.at("z_ir"), v.at("z_rgb"), labels, v.at("classifier"), margin);
          terms["i2p"] = loss_i2p(v.at("z_ir"), v.at("z_rgb"), v.at("fg_ir"), v.at("fg_rgb"), labels, view);
          terms["p2p"] = loss_p2p(view, kernel);
          terms["p2p_pp"] = prototype_contrast(view.global, targets, kernel);
          return loss_overall(terms);
        },
        all);
  return out;
}

}  // namespace xmreid
