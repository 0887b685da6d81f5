// xmreid: dataset generation, training, evaluation, patch inspection and
// gradient checks.
#include "xmreid/gradsuite.hpp"
#include "xmreid/pnm.hpp"
#include "xmreid/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace xmreid;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

int gen_data(const fs::path& out, Index ids, Index per_id, std::uint64_t seed) {
  const Dataset ds = generate_dataset(ids, per_id, seed);
  write_dataset(ds, out);
  std::cout << "wrote " << ds.images.size() << " images for " << ids << " identities to " << out.string() << '\n';
  return 0;
}

int train_cmd(const fs::path& config_path, const fs::path& data, const fs::path& out) {
  const TrainConfig cfg = TrainConfig::from_file(config_path);
  const Dataset ds = read_dataset(data);
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.jsonl");
  TrainHooks hooks;
  hooks.metrics = &metrics;
  hooks.on_epoch_end = [&](const TrainState& s, long epoch) {
    save_checkpoint(s, out / ("checkpoint_epoch" + std::to_string(epoch) + ".json"));
    metrics.flush();
  };
  hooks.on_iteration = [&](const TrainState& s, const LossReport& r) {
    if (s.iteration % 50 == 0 || s.iteration == cfg.total_iterations())
      std::cerr << "iter " << s.iteration << "/" << cfg.total_iterations() << " overall " << std::setprecision(5) << r.overall << '\n';
  };
  const TrainState final_state = train(cfg, ds, hooks);
  save_checkpoint(final_state, out / "checkpoint.json");
  std::cout << "checkpoint: " << (out / "checkpoint.json").string() << '\n';
  return 0;
}

int eval_cmd(const fs::path& ckpt, const fs::path& data, const std::string& direction, const fs::path& json_out,
             const fs::path& hist_out) {
  const Direction dir = parse_direction(direction);
  const TrainState s = load_checkpoint(ckpt);
  const Dataset ds = read_dataset(data);
  const RetrievalResult r = evaluate(s.live, ds, dir);
  const std::string text = metrics_json(r, direction_name(dir));
  if (json_out.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream(json_out) << text << '\n';
    std::cout << "rank1 " << r.rank1() << " mAP " << r.map << '\n';
  }
  if (!hist_out.empty()) {
    std::vector<ImageD> images;
    std::vector<Index> labels;
    std::vector<Modality> mods;
    for (Index id : ds.manifest.test_ids)
      for (Modality m : {Modality::kInfrared, Modality::kVisible})
        for (Index k = 0; k < ds.manifest.per_identity; ++k) {
          images.push_back(ds.image(id, m, k));
          labels.push_back(id);
          mods.push_back(m);
        }
    write_histogram_csv(pair_distance_stats(center_and_normalize(embed(s.live, images)), labels, mods), hist_out);
  }
  return 0;
}

ImageD load_three_channel(const fs::path& p) {
  ImageD img = read_pnm(p);
  if (img.channels() == 1) img.planes.assign(3, img.planes.front());
  return img;
}

int inspect_cmd(const fs::path& ckpt, const fs::path& ir_path, const fs::path& rgb_path, const fs::path& out) {
  const TrainState s = load_checkpoint(ckpt);
  const ImageD ir = load_three_channel(ir_path), rgb = load_three_channel(rgb_path);
  MiningOptions mo;
  mo.fraction = s.config.k_fraction;
  mo.cell = s.config.hf_cell;
  mo.pairing = MiningPairing::kSlot;
  mo.similarity = s.config.mining_similarity;
  const MinedIndices mined = mine_batch(to_real({ir}), to_real({rgb}), {0}, s.shadow.params, mo);
  fs::create_directories(out);
  const Index patch = s.config.encoder.patch;
  dump_patch_overlay(ir, mined.ir.front(), patch, out / "ir_highfreq.ppm");
  dump_patch_overlay(rgb, mined.rgb.front(), patch, out / "rgb_correlated.ppm");
  auto show = [](const std::vector<Index>& v) {
    std::string s;
    for (Index i : v) s += (s.empty() ? "" : " ") + std::to_string(i);
    return s;
  };
  std::cout << "ir patches:  " << show(mined.ir.front()) << '\n' << "rgb patches: " << show(mined.rgb.front()) << '\n';
  return 0;
}

int gradcheck_cmd(std::uint64_t seed) {
  bool ok = true;
  for (const auto& e : run_gradient_suite(seed)) {
    std::cout << std::left << std::setw(16) << e.name << " max_rel_err " << std::scientific << std::setprecision(3) << e.max_rel_error
              << (e.passed ? "  ok" : "  FAIL") << '\n';
    ok = ok && e.passed;
  }
  return ok ? 0 : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xmreid: cross-modal patch mining and prototype contrast on a synthetic person dataset"};
  app.require_subcommand(1);

  fs::path out, data, config, ckpt, json_out, hist_out, image, pair;
  Index ids = 32, per_id = 8;
  std::uint64_t seed = 0, gc_seed = 7;
  std::string direction = "i2v";

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--ids", ids, "identity count (first half trains)")->check(CLI::Range(2, 100000));
  gen->add_option("--per-id", per_id, "images per modality per identity")->check(CLI::Range(1, 100000));
  gen->add_option("--seed", seed, "dataset seed");

  auto* tr = app.add_subcommand("train", "train from a JSON config");
  tr->add_option("--config", config, "config JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test identities");
  ev->add_option("--ckpt", ckpt, "checkpoint manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--direction", direction, "i2v (IR queries) or v2i (RGB queries)")->check(CLI::IsMember({"i2v", "v2i"}));
  ev->add_option("--json", json_out, "metrics output (stdout when omitted)");
  ev->add_option("--hist", hist_out, "cross-modal distance histogram CSV");

  auto* ins = app.add_subcommand("inspect-patches", "dump mined IR and RGB patch overlays");
  ins->add_option("--ckpt", ckpt, "checkpoint manifest")->required()->check(CLI::ExistingFile);
  ins->add_option("--image", image, "IR image (PGM or PPM)")->required()->check(CLI::ExistingFile);
  ins->add_option("--pair", pair, "RGB image (PPM)")->required()->check(CLI::ExistingFile);
  ins->add_option("--out", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  gc->add_option("--seed", gc_seed, "random batch seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) return gen_data(out, ids, per_id, seed);
    if (tr->parsed()) return train_cmd(config, data, out);
    if (ev->parsed()) return eval_cmd(ckpt, data, direction, json_out, hist_out);
    if (ins->parsed()) return inspect_cmd(ckpt, image, pair, out);
    if (gc->parsed()) return gradcheck_cmd(gc_seed);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
