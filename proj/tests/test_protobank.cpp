#include "xmreid/protobank.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace xmreid;

namespace {

Matrix<double> random_matrix(Index r, Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

struct Batch {
  Matrix<double> zi, zr, gi, gr;
  std::vector<Index> labels;
};

// Two instances per identity for identities {1, 3}, interleaved.
Batch random_batch(std::uint64_t seed, Index width = 5) {
  return {random_matrix(4, width, seed), random_matrix(4, width, seed + 1), random_matrix(4, width, seed + 2),
          random_matrix(4, width, seed + 3), {3, 1, 1, 3}};
}

BatchCenters<double> centers_of(Tape<double>& t, const Batch& b) {
  return batch_centers(t.constant(b.zi), t.constant(b.zr), t.constant(b.gi), t.constant(b.gr), b.labels);
}

}  // namespace

TEST(Protobank, IdenticalInstancesGiveThatCenter) {
  Tape<double> t;
  Matrix<double> v = random_matrix(1, 5, 1).replicate(4, 1);
  const auto c = batch_centers(t.constant(v), t.constant(v), t.constant(v), t.constant(v), {0, 0, 0, 0});
  EXPECT_EQ(c.per_identity, 4);
  for (int i = 0; i < 3; ++i) EXPECT_LT((c.high[i].value() - v.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Protobank, FusedCenterIsMidpoint) {
  Tape<double> t;
  const Matrix<double> a = random_matrix(1, 5, 2).replicate(4, 1), b = random_matrix(1, 5, 3).replicate(4, 1);
  const auto c = batch_centers(t.constant(a), t.constant(b), t.constant(a), t.constant(b), {0, 0, 0, 0});
  EXPECT_LT((c.high[kFused].value() - (a.row(0) + b.row(0)) / 2).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Protobank, CentersMatchMeanOracle) {
  const Batch b = random_batch(4);
  Tape<double> t;
  const auto c = centers_of(t, b);
  ASSERT_EQ(c.identities, (std::vector<Index>{1, 3}));
  for (std::size_t r = 0; r < 2; ++r) {
    const Index id = c.identities[r];
    Eigen::RowVectorXd si = Eigen::RowVectorXd::Zero(5), sr = si, gi = si, gr = si;
    for (Index s = 0; s < 4; ++s)
      if (b.labels[static_cast<std::size_t>(s)] == id) {
        si += b.zi.row(s);
        sr += b.zr.row(s);
        gi += b.gi.row(s);
        gr += b.gr.row(s);
      }
    const Index row = static_cast<Index>(r);
    EXPECT_EQ(c.high[kInfrared].value().row(row), si / 2);
    EXPECT_EQ(c.high[kVisible].value().row(row), sr / 2);
    EXPECT_NEAR((c.high[kFused].value().row(row) - (si + sr) / 4).norm(), 0.0, 1e-15);
    EXPECT_EQ(c.global[kInfrared].value().row(row), gi / 2);
    EXPECT_EQ(c.global[kVisible].value().row(row), gr / 2);
    EXPECT_NEAR((c.global[kFused].value().row(row) - (gi + gr) / 4).norm(), 0.0, 1e-15);
  }
}

TEST(Protobank, UnbalancedIdentityRejected) {
  Tape<double> t;
  const Matrix<double> m = random_matrix(3, 4, 5);
  EXPECT_THROW(batch_centers(t.constant(m), t.constant(m), t.constant(m), t.constant(m), {0, 0, 1}), std::invalid_argument);
}

TEST(Protobank, FirstObservationInitializes) {
  PrototypeBank<double> bank(5, 5, 0.8);
  const Batch b = random_batch(6);
  Tape<double> t;
  const auto c = centers_of(t, b);
  ema_prototype_update(bank, c);
  EXPECT_EQ(bank.initialized_ids(), (std::vector<Index>{1, 3}));
  EXPECT_EQ(Matrix<double>(bank.high[kVisible].row(3)), Matrix<double>(c.high[kVisible].value().row(1)));
  EXPECT_TRUE(bank.global[kFused].row(0).isZero(0.0));
}

TEST(Protobank, DecayEndpoints) {
  const Batch first = random_batch(7), second = random_batch(11);
  for (double alpha : {0.0, 1.0}) {
    PrototypeBank<double> bank(4, 5, alpha);
    Tape<double> t;
    ema_prototype_update(bank, centers_of(t, first));
    const PrototypeBank<double> init = bank;
    const auto c2 = centers_of(t, second);
    ema_prototype_update(bank, c2);
    for (int i = 0; i < 3; ++i)
      for (std::size_t r = 0; r < 2; ++r) {
        const Index id = c2.identities[r];
        const Matrix<double> expect = alpha == 1.0 ? Matrix<double>(c2.high[i].value().row(static_cast<Index>(r)))
                                                   : Matrix<double>(init.high[i].row(id));
        EXPECT_EQ(Matrix<double>(bank.high[i].row(id)), expect);
      }
  }
}

TEST(Protobank, DecayArithmetic) {
  PrototypeBank<double> bank(1, 1, 0.8);
  bank.initialized[0] = true;
  Tape<double> t;
  const Matrix<double> one = Matrix<double>::Ones(1, 1);
  ema_prototype_update(bank, batch_centers(t.constant(one), t.constant(one), t.constant(one), t.constant(one), {0}));
  EXPECT_DOUBLE_EQ(bank.high[kInfrared](0, 0), 0.8);
  EXPECT_THROW(PrototypeBank<double>(1, 1, 1.2), std::invalid_argument);
}

TEST(Protobank, AbsentIdentitiesUnchanged) {
  PrototypeBank<double> bank(6, 5, 0.8);
  Tape<double> t;
  Batch other = random_batch(12);
  other.labels = {0, 5, 5, 0};
  ema_prototype_update(bank, centers_of(t, other));
  const PrototypeBank<double> before = bank;
  ema_prototype_update(bank, centers_of(t, random_batch(13)));
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(Matrix<double>(bank.global[i].row(0)), Matrix<double>(before.global[i].row(0)));
    EXPECT_EQ(Matrix<double>(bank.high[i].row(5)), Matrix<double>(before.high[i].row(5)));
  }
}

TEST(Protobank, UpdateStaysWithinPreviousAndCenter) {
  PrototypeBank<double> bank(4, 5, 0.8);
  Tape<double> t;
  ema_prototype_update(bank, centers_of(t, random_batch(14)));
  for (std::uint64_t step = 0; step < 20; ++step) {
    const PrototypeBank<double> prev = bank;
    const auto c = centers_of(t, random_batch(100 + step));
    ema_prototype_update(bank, c);
    for (int i = 0; i < 3; ++i)
      for (std::size_t r = 0; r < 2; ++r) {
        const Index id = c.identities[r];
        for (Index k = 0; k < 5; ++k) {
          const double a = prev.high[i](id, k), b = c.high[i].value()(static_cast<Index>(r), k);
          EXPECT_GE(bank.high[i](id, k), std::min(a, b) - 1e-15);
          EXPECT_LE(bank.high[i](id, k), std::max(a, b) + 1e-15);
        }
      }
  }
}

TEST(Protobank, GeometricConvergenceToFixedCenters) {
  const double alpha = 0.8;
  PrototypeBank<double> bank(4, 5, alpha);
  Tape<double> t;
  ema_prototype_update(bank, centers_of(t, random_batch(15)));
  const auto target = centers_of(t, random_batch(16));
  const Index id = target.identities[0];
  double gap = (bank.global[kFused].row(id) - target.global[kFused].value().row(0)).norm();
  for (int step = 0; step < 30; ++step) {
    ema_prototype_update(bank, target);
    const double next = (bank.global[kFused].row(id) - target.global[kFused].value().row(0)).norm();
    EXPECT_NEAR(next / gap, 1.0 - alpha, 1e-9);
    gap = next;
    if (gap < 1e-6) break;
  }
}

TEST(Protobank, ViewSeesPostUpdateValuesWithGradientIntoBatch) {
  PrototypeBank<double> bank(4, 5, 0.8);
  {
    Tape<double> t;
    ema_prototype_update(bank, centers_of(t, random_batch(17)));
  }
  Tape<double> t;
  const Batch b = random_batch(18);
  const Var<double> zi = t.leaf(b.zi);
  const auto c = batch_centers(zi, t.constant(b.zr), t.constant(b.gi), t.constant(b.gr), b.labels);
  const BankView<double> view = ema_prototype_update(bank, c);
  EXPECT_EQ(view.identities, (std::vector<Index>{1, 3}));
  EXPECT_EQ(view.high[kInfrared].value(), Matrix<double>(bank.high[kInfrared](std::vector<Index>{1, 3}, Eigen::all)));
  t.backward(sum(view.high[kInfrared]));
  // d/dz of alpha * mean over 2 instances.
  EXPECT_LT((t.grad(zi).array() - 0.4).abs().maxCoeff(), 1e-15);
}

TEST(Protobank, AfterOrderShowsPreviousPrototypes) {
  PrototypeBank<double> bank(4, 5, 0.8);
  {
    Tape<double> t;
    ema_prototype_update(bank, centers_of(t, random_batch(19)));
  }
  const PrototypeBank<double> before = bank;
  Tape<double> t;
  const BankView<double> view = ema_prototype_update(bank, centers_of(t, random_batch(20)), ProtoUpdateOrder::kAfter);
  EXPECT_EQ(view.global[kFused].value(), Matrix<double>(before.global[kFused](std::vector<Index>{1, 3}, Eigen::all)));
  EXPECT_NE(bank.global[kFused], before.global[kFused]);
}

TEST(Protobank, PrototypeSetsOrderAndAliasing) {
  PrototypeBank<double> bank(4, 5, 0.8);
  EXPECT_THROW(prototype_sets(bank, 1), std::out_of_range);
  Tape<double> t;
  ema_prototype_update(bank, centers_of(t, random_batch(21)));
  const auto [p, q] = prototype_sets(bank, 3);
  EXPECT_EQ(p.size(), 3u);
  EXPECT_EQ(q.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(p[static_cast<std::size_t>(i)], Matrix<double>(bank.high[i].row(3)));
    EXPECT_EQ(q[static_cast<std::size_t>(i)], Matrix<double>(bank.global[i].row(3)));
  }
  ema_prototype_update(bank, centers_of(t, random_batch(22)));
  EXPECT_EQ(prototype_sets(bank, 3).first[kVisible], Matrix<double>(bank.high[kVisible].row(3)));
}
