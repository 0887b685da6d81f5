// Acceptance criteria 1-10. Prints one PASS/FAIL line per criterion, with
// detail lines indented underneath, and exits nonzero if any criterion fails.
//
//   acceptance [--only N] [--config FILE]
#include "xmreid/gradsuite.hpp"
#include "xmreid/instrumentation.hpp"
#include "xmreid/trainer.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <type_traits>

using namespace xmreid;

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
  }
  void note(const std::string& what) { notes.push_back("     " + what); }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[200];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Matrix<double> normal_matrix(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

ImageD uniform_image(Index h, Index w, Index ch, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageD img(h, w, ch);
  for (auto& p : img.planes)
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  return img;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto entries = run_gradient_suite(7, 1e-4);
  const double elapsed = seconds_since(t0);
  for (const auto& e : entries) o.require(e.passed && e.max_rel_error < 1e-4, e.name + fmt(": max rel err %.3g", e.max_rel_error));
  o.require(entries.size() == 10, fmt("%g losses checked", static_cast<double>(entries.size())));
  o.require(elapsed < 60.0, fmt("runtime %.2f s (< 60)", elapsed));
  return o;
}

Outcome wavelet_suite() {
  Outcome o;
  std::mt19937_64 rng(2024);
  double worst_energy = 0, worst_recon = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const ImageD img = uniform_image(64, 32, 3, rng);
    const auto sb = haar_decompose(img);
    double e_in = 0, e_out = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      e_in += img.planes[c].squaredNorm();
      e_out += sb.ll[c].squaredNorm() + sb.lh[c].squaredNorm() + sb.hl[c].squaredNorm() + sb.hh[c].squaredNorm();
    }
    worst_energy = std::max(worst_energy, std::abs(e_in - e_out));
    const ImageD back = haar_reconstruct(sb);
    for (std::size_t c = 0; c < 3; ++c) worst_recon = std::max(worst_recon, (back.planes[c] - img.planes[c]).cwiseAbs().maxCoeff());
  }
  o.require(worst_energy <= 1e-9, fmt("energy conservation, worst |diff| %.3g over 100 images (<= 1e-9)", worst_energy));
  o.require(worst_recon <= 1e-10, fmt("reconstruction, worst |diff| %.3g (<= 1e-10)", worst_recon));
  ImageD block(2, 2, 1);
  block.planes[0] << 1, 2, 3, 4;
  const auto sb = haar_decompose(block);
  const double ll = sb.ll[0](0, 0), lh = sb.lh[0](0, 0), hl = sb.hl[0](0, 0), hh = sb.hh[0](0, 0);
  o.require(ll == 5 && lh == -2 && hl == -1 && hh == 0,
            "block [[1,2],[3,4]] -> (" + fmt("%g, %g", ll, lh) + fmt(", %g, %g)", hl, hh));
  return o;
}

std::vector<Index> topk_oracle(const Eigen::VectorXd& s, Index k) {
  std::vector<std::pair<double, Index>> v;
  for (Index i = 0; i < s.size(); ++i) v.emplace_back(-s(i), i);
  std::sort(v.begin(), v.end());
  std::vector<Index> out;
  for (Index i = 0; i < k; ++i) out.push_back(v[static_cast<std::size_t>(i)].second);
  std::sort(out.begin(), out.end());
  return out;
}

Index rank_of(const Matrix<double>& d, Index q, Index j) {
  Index r = 0;
  for (Index i = 0; i < d.cols(); ++i) r += d(q, i) < d(q, j) || (d(q, i) == d(q, j) && i < j);
  return r;
}

Outcome oracle_equivalence() {
  Outcome o;
  std::mt19937_64 rng(31);

  int topk_ok = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Index n = 1 + trial % 48;
    Eigen::VectorXd s(n);
    for (Index i = 0; i < n; ++i)
      s(i) = trial % 2 ? static_cast<double>(rng() % 5) : std::uniform_real_distribution<double>()(rng);
    const Index k = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(n));
    topk_ok += topk_select(s, k) == topk_oracle(s, k);
  }
  o.require(topk_ok == 1000, fmt("topk_select == sort oracle in %g / 1000 trials", topk_ok));

  int centers_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index ids = 2 + trial % 4, per = 1 + trial % 3, n = ids * per, d = 6;
    std::vector<Index> labels;
    for (Index s = 0; s < n; ++s) labels.push_back((s * 7) % ids * 3 + 1);
    std::array<Matrix<double>, 4> reps{normal_matrix(n, d, rng), normal_matrix(n, d, rng), normal_matrix(n, d, rng),
                                       normal_matrix(n, d, rng)};
    Tape<double> t;
    const auto c = batch_centers(t.constant(reps[0]), t.constant(reps[1]), t.constant(reps[2]), t.constant(reps[3]), labels);
    bool ok = true;
    for (std::size_t r = 0; r < c.identities.size(); ++r) {
      std::array<Eigen::RowVectorXd, 4> mean;
      for (auto& m : mean) m = Eigen::RowVectorXd::Zero(d);
      for (Index s = 0; s < n; ++s)
        if (labels[static_cast<std::size_t>(s)] == c.identities[r])
          for (std::size_t k = 0; k < 4; ++k) mean[k] += reps[k].row(s);
      for (auto& m : mean) m /= static_cast<double>(per);
      const Index row = static_cast<Index>(r);
      ok = ok && c.high[kInfrared].value().row(row) == mean[0] && c.high[kVisible].value().row(row) == mean[1] &&
           c.global[kInfrared].value().row(row) == mean[2] && c.global[kVisible].value().row(row) == mean[3] &&
           c.high[kFused].value().row(row) == 0.5 * (mean[0] + mean[1]) && c.global[kFused].value().row(row) == 0.5 * (mean[2] + mean[3]);
    }
    centers_ok += ok;
  }
  o.require(centers_ok == 100, fmt("batch_centers == mean oracle in %g / 100 batches", centers_ok));

  int retrieval_ok = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Matrix<double> d(20, 50);
    for (Index i = 0; i < d.size(); ++i)
      d.data()[i] = trial % 2 ? static_cast<double>(rng() % 7) : std::uniform_real_distribution<double>(0, 2)(rng);
    std::vector<Index> ql, gl;
    for (Index g = 0; g < 50; ++g) gl.push_back(g % 12);
    for (Index q = 0; q < 20; ++q) ql.push_back(static_cast<Index>(rng() % 12));
    std::vector<double> curve(50, 0.0);
    double total_ap = 0;
    for (Index q = 0; q < 20; ++q) {
      std::vector<Index> ranks;
      for (Index j = 0; j < 50; ++j)
        if (gl[static_cast<std::size_t>(j)] == ql[static_cast<std::size_t>(q)]) ranks.push_back(rank_of(d, q, j));
      std::sort(ranks.begin(), ranks.end());
      for (Index k = ranks.front(); k < 50; ++k) curve[static_cast<std::size_t>(k)] += 1.0;
      double ap = 0;
      for (std::size_t h = 0; h < ranks.size(); ++h) ap += static_cast<double>(h + 1) / static_cast<double>(ranks[h] + 1);
      total_ap += ap / static_cast<double>(ranks.size());
    }
    for (double& c : curve) c /= 20.0;
    retrieval_ok += cmc(d, ql, gl, 50) == curve && mean_ap(d, ql, gl) == total_ap / 20.0;
  }
  o.require(retrieval_ok == 50, fmt("cmc and mAP == brute-force ranking oracle on 20x50 in %g / 50 trials", retrieval_ok));
  return o;
}

EncoderConfig micro_encoder() {
  EncoderConfig c;
  c.width = 16;
  c.depth = 1;
  c.heads = 2;
  c.classes = 2;
  return c;
}

double squared_norm(const EncoderParams<double>& p) {
  double s = 0;
  p.for_each([&](const std::string&, const Matrix<double>& m) { s += m.squaredNorm(); });
  return s;
}

bool same_params(const EncoderParams<double>& a, const EncoderParams<double>& b) {
  bool same = true;
  detail::zip_params(a, b, [&](const std::string&, const Matrix<double>& x, const Matrix<double>& y) { same = same && x == y; });
  return same;
}

Outcome isolation() {
  Outcome o;
  std::mt19937_64 rng(41);

  {
    Tape<double> t;
    BankView<double> v;
    v.identities = {0, 1, 2};
    std::array<Var<double>, 3> p, q;
    for (int i = 0; i < 3; ++i) {
      v.high[i] = p[static_cast<std::size_t>(i)] = t.leaf(normal_matrix(3, 8, rng));
      v.global[i] = q[static_cast<std::size_t>(i)] = t.leaf(normal_matrix(3, 8, rng));
    }
    t.backward(loss_p2p_plus(v, SimilarityKernel(0.1)));
    double into_p = 0, into_q = 0;
    for (int i = 0; i < 3; ++i) {
      into_p += t.grad(p[static_cast<std::size_t>(i)]).squaredNorm();
      into_q += t.grad(q[static_cast<std::size_t>(i)]).squaredNorm();
    }
    o.require(into_p == 0.0 && into_q > 0.0, fmt("L_p2p++: |grad sg(P)|^2 = %g, |grad Q|^2 = %.3g", into_p, into_q));
  }

  {
    const EncoderConfig c = micro_encoder();
    const auto live = init_encoder<double>(c, 1), shadow = init_encoder<double>(c, 2), shadow_copy = shadow;
    const std::vector<ImageD> ir{uniform_image(64, 32, 3, rng), uniform_image(64, 32, 3, rng)};
    const std::vector<ImageD> rgb{uniform_image(64, 32, 3, rng), uniform_image(64, 32, 3, rng)};
    const std::vector<Index> labels{0, 1};
    const MinedIndices mined = mine_batch(ir, rgb, labels, shadow, MiningOptions{});
    static_assert(std::is_same_v<decltype(mined.ir), std::vector<std::vector<Index>>> &&
                      std::is_same_v<decltype(mined.rgb), std::vector<std::vector<Index>>>,
                  "selections are integer indices");
    EncoderParams<double> live_grad = zeros_like(live), shadow_grad = zeros_like(shadow);
    Tape<double> t;
    const auto lv = bind(t, live, &live_grad);
    bind(t, shadow, &shadow_grad);
    const Subsequence<double> is{subsequence(tokenize(t, ir, lv), mined.ir), Modality::kInfrared};
    const Subsequence<double> rs{subsequence(tokenize(t, rgb, lv), mined.rgb), Modality::kVisible};
    const auto [zi, zr] = enhanced_representations(is, rs, lv);
    t.backward(loss_high(zi, zr, labels, lv.classifier, 0.3));
    o.require(squared_norm(shadow_grad) == 0.0 && squared_norm(live_grad) > 0.0,
              fmt("L_high: |grad shadow|^2 = %g, |grad live|^2 = %.3g", squared_norm(shadow_grad), squared_norm(live_grad)));
    o.require(same_params(shadow, shadow_copy), "mining leaves the shadow encoder unchanged");
    o.note("selection indices are std::vector<Index>: no differentiable path (compile-time check)");
  }

  {
    const EncoderConfig c = micro_encoder();
    const auto live = init_encoder<double>(c, 3), start = init_encoder<double>(c, 4);
    ShadowParams<double> keep{start, 1.0};
    ema_update(keep, live);
    ShadowParams<double> copy{start, 0.0};
    ema_update(copy, live);
    o.require(same_params(keep.params, start), "ema_update m = 1 keeps the shadow exactly");
    o.require(same_params(copy.params, live), "ema_update m = 0 copies the live encoder exactly");
  }
  return o;
}

BatchCenters<double> random_centers(Tape<double>& t, std::mt19937_64& rng) {
  return batch_centers(t.constant(normal_matrix(4, 6, rng)), t.constant(normal_matrix(4, 6, rng)), t.constant(normal_matrix(4, 6, rng)),
                       t.constant(normal_matrix(4, 6, rng)), {0, 2, 2, 0});
}

Outcome prototype_algebra() {
  Outcome o;
  std::mt19937_64 rng(51);
  for (double alpha : {0.0, 1.0}) {
    PrototypeBank<double> bank(3, 6, alpha);
    Tape<double> t;
    ema_prototype_update(bank, random_centers(t, rng));
    const PrototypeBank<double> before = bank;
    const auto c = random_centers(t, rng);
    ema_prototype_update(bank, c);
    bool exact = true;
    for (int i = 0; i < 3; ++i)
      for (std::size_t r = 0; r < 2; ++r) {
        const Index id = c.identities[r], row = static_cast<Index>(r);
        const auto& want_h = alpha == 1.0 ? Matrix<double>(c.high[i].value().row(row)) : Matrix<double>(before.high[i].row(id));
        const auto& want_g = alpha == 1.0 ? Matrix<double>(c.global[i].value().row(row)) : Matrix<double>(before.global[i].row(id));
        exact = exact && Matrix<double>(bank.high[i].row(id)) == want_h && Matrix<double>(bank.global[i].row(id)) == want_g;
      }
    o.require(exact, fmt(alpha == 1.0 ? "alpha = %g: prototypes become the batch centers exactly" : "alpha = %g: prototypes unchanged exactly",
                         alpha));
  }
  for (double alpha : {0.8, 0.5}) {
    PrototypeBank<double> bank(3, 6, alpha);
    Tape<double> t;
    ema_prototype_update(bank, random_centers(t, rng));
    const auto target = random_centers(t, rng);
    double worst = 0;
    for (std::size_t r = 0; r < 2; ++r)
      for (int i = 0; i < 3; ++i) {
        PrototypeBank<double> b = bank;
        const Index id = target.identities[r];
        double gap = (b.high[i].row(id) - target.high[i].value().row(static_cast<Index>(r))).norm();
        for (int step = 0; step < 8; ++step) {
          ema_prototype_update(b, target);
          const double next = (b.high[i].row(id) - target.high[i].value().row(static_cast<Index>(r))).norm();
          worst = std::max(worst, std::abs(next / gap - (1.0 - alpha)));
          gap = next;
        }
      }
    o.require(worst <= 1e-9, fmt("alpha = %g: distance ratio per step within %.3g of 1 - alpha (<= 1e-9)", alpha, worst));
  }
  return o;
}

// ---------------------------------------------------------------------------
// Smoke benchmark shared by criteria 6-8.

struct RunResult {
  double untrained_rank1 = 0, rank1 = 0, map = 0;
  double pos_before = 0, gap_before = 0, pos_after = 0, gap_after = 0;
  double seconds = 0;
};

struct Benchmark {
  TrainConfig config;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  // [variant][seed]
  std::array<std::vector<RunResult>, 3> runs;
  bool done = false;
};

const char* variant_name(Variant v) { return v == Variant::kBaseline ? "baseline" : v == Variant::kChpe ? "baseline+CHPE" : "full"; }

Benchmark& benchmark(const TrainConfig& cfg) {
  static Benchmark b;
  if (b.done) return b;
  b.config = cfg;
  for (std::uint64_t seed : b.seeds) {
    const Dataset ds = generate_dataset(32, 8, seed);
    for (Variant v : {Variant::kBaseline, Variant::kChpe, Variant::kFull}) {
      TrainConfig c = apply_variant(cfg, v);
      c.seed = seed;
      RunResult r;
      const RetrievalResult before = evaluate(init_state(c, 16).live, ds);
      r.untrained_rank1 = before.rank1();
      r.pos_before = before.pos_mean;
      r.gap_before = before.gap;
      const auto t0 = Clock::now();
      const TrainState s = train(c, ds);
      r.seconds = seconds_since(t0);
      const RetrievalResult after = evaluate(s.live, ds);
      r.rank1 = after.rank1();
      r.map = after.map;
      r.pos_after = after.pos_mean;
      r.gap_after = after.gap;
      std::printf("    [run] seed %llu %-13s rank1 %.4f mAP %.4f untrained %.4f pos %.4f->%.4f gap %.4f->%.4f %.0f s\n",
                  static_cast<unsigned long long>(seed), variant_name(v), r.rank1, r.map, r.untrained_rank1, r.pos_before, r.pos_after,
                  r.gap_before, r.gap_after, r.seconds);
      std::fflush(stdout);
      b.runs[static_cast<std::size_t>(v)].push_back(r);
    }
  }
  b.done = true;
  return b;
}

double mean_of(const std::vector<RunResult>& runs, double RunResult::*field) {
  double s = 0;
  for (const auto& r : runs) s += r.*field;
  return s / static_cast<double>(runs.size());
}

Outcome smoke_benchmark(const TrainConfig& cfg) {
  Outcome o;
  const Benchmark& b = benchmark(cfg);
  const auto& full = b.runs[static_cast<std::size_t>(Variant::kFull)];
  const auto& base = b.runs[static_cast<std::size_t>(Variant::kBaseline)];
  o.note(fmt("%g iterations per run, 16 train + 16 test identities, 8 images per modality", static_cast<double>(cfg.total_iterations())));
  o.require(cfg.total_iterations() <= 2000, fmt("iterations %g (<= 2000)", static_cast<double>(cfg.total_iterations())));
  double slowest = 0;
  for (const auto& runs : b.runs)
    for (const auto& r : runs) slowest = std::max(slowest, r.seconds);
  o.require(slowest <= 600.0, fmt("slowest training run %.0f s (<= 600)", slowest));
  const double untrained = mean_of(base, &RunResult::untrained_rank1);
  o.require(untrained <= 0.20, fmt("untrained baseline Rank-1 mean %.4f (<= 0.20)", untrained));
  const double r1 = mean_of(full, &RunResult::rank1);
  o.require(r1 >= 0.90, fmt("full method Rank-1 mean %.4f over 3 seeds (>= 0.90), mAP mean %.4f", r1, mean_of(full, &RunResult::map)));
  return o;
}

Outcome ablation_direction(const TrainConfig& cfg) {
  Outcome o;
  const Benchmark& b = benchmark(cfg);
  const double base = mean_of(b.runs[0], &RunResult::rank1);
  const double chpe = mean_of(b.runs[1], &RunResult::rank1);
  const double full = mean_of(b.runs[2], &RunResult::rank1);
  o.note(fmt("mean Rank-1: baseline %.4f, baseline+CHPE %.4f, full %.4f", base, chpe, full));
  o.require(chpe >= base - 0.01, fmt("baseline+CHPE - baseline = %+.4f (>= -0.01)", chpe - base));
  o.require(full >= chpe - 0.01, fmt("full - baseline+CHPE = %+.4f (>= -0.01)", full - chpe));
  return o;
}

Outcome distance_direction(const TrainConfig& cfg) {
  Outcome o;
  const Benchmark& b = benchmark(cfg);
  const auto& full = b.runs[static_cast<std::size_t>(Variant::kFull)];
  for (std::size_t i = 0; i < full.size(); ++i) {
    const RunResult& r = full[i];
    o.require(r.pos_after < r.pos_before && r.gap_after > r.gap_before,
              "seed " + std::to_string(b.seeds[i]) + fmt(": pos_mean %.4f -> %.4f", r.pos_before, r.pos_after) +
                  fmt(", gap %.4f -> %.4f", r.gap_before, r.gap_after));
  }
  return o;
}

Outcome inference_purity(const TrainConfig& cfg) {
  Outcome o;
  TrainConfig c = cfg;
  c.iters_per_epoch = 2;
  c.epochs = 1;
  const Dataset ds = generate_dataset(32, 8, 5);
  auto& counters = instrumentation::counters();
  counters.reset();
  const TrainState s = train(c, ds);
  o.note(fmt("training touched wavelet %g, chpe %g, protobank %g times", static_cast<double>(counters.wavelet.load()),
             static_cast<double>(counters.chpe.load()), static_cast<double>(counters.protobank.load())));
  counters.reset();
  evaluate(s.live, ds, Direction::kInfraredToVisible);
  evaluate(s.live, ds, Direction::kVisibleToInfrared);
  o.require(counters.wavelet == 0 && counters.chpe == 0 && counters.protobank == 0,
            fmt("evaluate (both directions): wavelet %g, chpe %g, protobank %g calls", static_cast<double>(counters.wavelet.load()),
                static_cast<double>(counters.chpe.load()), static_cast<double>(counters.protobank.load())));
  return o;
}

Outcome determinism(const TrainConfig& cfg) {
  Outcome o;
  TrainConfig c = cfg;
  c.epochs = 1;
  c.iters_per_epoch = 10;
  const Dataset ds = generate_dataset(32, 8, 6);
  auto run = [&](std::string& log) {
    std::ostringstream out;
    TrainHooks hooks;
    hooks.metrics = &out;
    TrainState s = train(c, ds, hooks);
    log = out.str();
    return s;
  };
  std::string a, b;
  const TrainState s = run(a);
  run(b);
  o.require(a == b && std::count(a.begin(), a.end(), '\n') == 10, "two 10-step runs give byte-identical loss logs");

  const fs::path dir = fs::temp_directory_path() / "xmreid_acceptance_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_checkpoint(s, dir / "checkpoint.json");
  const TrainState back = load_checkpoint(dir / "checkpoint.json");
  const RetrievalResult r0 = evaluate(s.live, ds), r1 = evaluate(back.live, ds);
  o.require(r0.dist == r1.dist && r0.cmc == r1.cmc && r0.map == r1.map && r0.pos_mean == r1.pos_mean && r0.gap == r1.gap,
            "checkpoint save -> load -> evaluate is bitwise identical");
  fs::remove_all(dir);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  fs::path config_path = XMREID_SMOKE_CONFIG;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--only") && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else if (!std::strcmp(argv[i], "--config") && i + 1 < argc) {
      config_path = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--only N] [--config FILE]\n");
      return 2;
    }
  }
  const TrainConfig smoke = TrainConfig::from_file(config_path);
  std::printf("smoke config: %s\n", config_path.string().c_str());

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"wavelet suite", wavelet_suite},
      {"oracle equivalence", oracle_equivalence},
      {"stop-gradient and EMA isolation", isolation},
      {"prototype algebra", prototype_algebra},
      {"end-to-end smoke benchmark", [&] { return smoke_benchmark(smoke); }},
      {"ablation direction", [&] { return ablation_direction(smoke); }},
      {"distance-distribution direction", [&] { return distance_direction(smoke); }},
      {"inference purity", [&] { return inference_purity(smoke); }},
      {"determinism and round-trip", [&] { return determinism(smoke); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (only != 0 && only != number) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    std::printf("%s %2d %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", number, criteria[i].first.c_str(), seconds_since(t0));
    for (const auto& n : o.notes) std::printf("        %s\n", n.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
