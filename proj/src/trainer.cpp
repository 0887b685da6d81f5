#include "xmreid/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

namespace xmreid {

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  need(lr >= 0.0 && std::isfinite(lr), "lr must be a finite value >= 0");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(epochs >= 1, "epochs must be >= 1");
  need(iters_per_epoch >= 1, "iters_per_epoch must be >= 1");
  need(k_fraction > 0.0 && k_fraction <= 1.0, "k_fraction must lie in (0, 1]");
  need(momentum >= 0.0 && momentum <= 1.0, "momentum must lie in [0, 1]");
  need(proto_decay >= 0.0 && proto_decay <= 1.0, "proto_decay must lie in [0, 1]");
  need(temperature > 0.0, "temperature must be > 0");
  need(margin >= 0.0, "margin must be >= 0");
  need(identities_per_batch >= 2, "identities_per_batch must be >= 2");
  need(per_modality >= 1, "per_modality must be >= 1");
  need(hf_cell >= 0, "hf_cell must be >= 0");
  need(enable_chpe || (!multiproco() && !use_inst_contrast),
       "prototype and instance contrast terms need the enhanced representations; set enable_chpe");
  need(!(use_inst_contrast && multiproco()), "use_inst_contrast replaces enable_i2p/enable_p2p/enable_p2p_pp; disable those");
  encoder.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"weight_decay", weight_decay},
          {"epochs", epochs},
          {"iters_per_epoch", iters_per_epoch},
          {"k_fraction", k_fraction},
          {"momentum", momentum},
          {"proto_decay", proto_decay},
          {"temperature", temperature},
          {"margin", margin},
          {"parts", encoder.parts},
          {"identities_per_batch", identities_per_batch},
          {"per_modality", per_modality},
          {"seed", seed},
          {"enable_chpe", enable_chpe},
          {"enable_i2p", enable_i2p},
          {"enable_p2p", enable_p2p},
          {"enable_p2p_pp", enable_p2p_pp},
          {"use_inst_contrast", use_inst_contrast},
          {"mining_pairing", pairing_name(mining_pairing)},
          {"mining_similarity", similarity_name(mining_similarity)},
          {"proto_update_order", proto_update_order == ProtoUpdateOrder::kBefore ? "before" : "after"},
          {"hf_cell", hf_cell},
          {"log_grad_norms", log_grad_norms},
          {"encoder",
           {{"width", encoder.width},
            {"depth", encoder.depth},
            {"heads", encoder.heads},
            {"patch", encoder.patch},
            {"mlp_ratio", encoder.mlp_ratio},
            {"final_norm", encoder.final_norm},
            {"pixel_mean", encoder.pixel_mean},
            {"pixel_std", encoder.pixel_std}}}};
}

namespace {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out, const std::string& prefix = "") {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config: key '" + prefix + key + "' has the wrong type");
  }
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError("config: '" + (prefix.empty() ? std::string("<root>") : prefix) + "' must be an object");
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("config: unknown key '" + prefix + key + "'");
}

}  // namespace

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"lr", "weight_decay", "epochs", "iters_per_epoch", "k_fraction", "momentum", "proto_decay", "temperature",
                  "margin", "parts", "identities_per_batch", "per_modality", "seed", "enable_chpe", "enable_i2p", "enable_p2p",
                  "enable_p2p_pp", "use_inst_contrast", "mining_pairing", "mining_similarity", "proto_update_order", "hf_cell", "log_grad_norms",
                  "encoder"},
                 "");
  TrainConfig c;
  read_key(j, "lr", c.lr);
  read_key(j, "weight_decay", c.weight_decay);
  read_key(j, "epochs", c.epochs);
  read_key(j, "iters_per_epoch", c.iters_per_epoch);
  read_key(j, "k_fraction", c.k_fraction);
  read_key(j, "momentum", c.momentum);
  read_key(j, "proto_decay", c.proto_decay);
  read_key(j, "temperature", c.temperature);
  read_key(j, "margin", c.margin);
  read_key(j, "parts", c.encoder.parts);
  read_key(j, "identities_per_batch", c.identities_per_batch);
  read_key(j, "per_modality", c.per_modality);
  read_key(j, "seed", c.seed);
  read_key(j, "enable_chpe", c.enable_chpe);
  read_key(j, "enable_i2p", c.enable_i2p);
  read_key(j, "enable_p2p", c.enable_p2p);
  read_key(j, "enable_p2p_pp", c.enable_p2p_pp);
  read_key(j, "use_inst_contrast", c.use_inst_contrast);
  read_key(j, "hf_cell", c.hf_cell);
  read_key(j, "log_grad_norms", c.log_grad_norms);
  std::string pairing = pairing_name(c.mining_pairing), similarity = similarity_name(c.mining_similarity), order = "before";
  read_key(j, "mining_pairing", pairing);
  read_key(j, "mining_similarity", similarity);
  read_key(j, "proto_update_order", order);
  try {
    c.mining_pairing = parse_pairing(pairing);
    c.mining_similarity = parse_similarity(similarity);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (order == "before")
    c.proto_update_order = ProtoUpdateOrder::kBefore;
  else if (order == "after")
    c.proto_update_order = ProtoUpdateOrder::kAfter;
  else
    throw ConfigError("config: proto_update_order must be before|after, got '" + order + "'");
  if (j.contains("encoder")) {
    const nlohmann::json& e = j.at("encoder");
    reject_unknown(e, {"width", "depth", "heads", "patch", "mlp_ratio", "final_norm", "pixel_mean", "pixel_std"}, "encoder.");
    read_key(e, "width", c.encoder.width, "encoder.");
    read_key(e, "depth", c.encoder.depth, "encoder.");
    read_key(e, "heads", c.encoder.heads, "encoder.");
    read_key(e, "patch", c.encoder.patch, "encoder.");
    read_key(e, "mlp_ratio", c.encoder.mlp_ratio, "encoder.");
    read_key(e, "final_norm", c.encoder.final_norm, "encoder.");
    read_key(e, "pixel_mean", c.encoder.pixel_mean, "encoder.");
    read_key(e, "pixel_std", c.encoder.pixel_std, "encoder.");
  }
  try {
    c.validate();
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return from_json(j);
}

std::string TrainConfig::hash() const {
  // FNV-1a over the canonical JSON text.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json().dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

TrainConfig apply_variant(TrainConfig cfg, Variant v) {
  cfg.use_inst_contrast = false;
  cfg.enable_chpe = v != Variant::kBaseline;
  cfg.enable_i2p = cfg.enable_p2p = cfg.enable_p2p_pp = v == Variant::kFull;
  return cfg;
}

// ---------------------------------------------------------------------------
// Training

TrainState init_state(const TrainConfig& config, Index classes) {
  config.validate();
  TrainState s;
  s.config = config;
  s.config.encoder.classes = classes;
  s.live = init_encoder<Real>(s.config.encoder, config.seed);
  s.shadow = {s.live, config.momentum};
  s.bank = PrototypeBank<Real>(classes, s.config.encoder.width, config.proto_decay);
  s.optimizer = adamw_init(s.live);
  return s;
}

std::vector<Image<Real>> to_real(const std::vector<ImageD>& images) {
  std::vector<Image<Real>> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(img.cast<Real>());
  return out;
}

Batch batch_for_iteration(const Dataset& ds, const TrainConfig& cfg, long t) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(t), 0x5eedU};
  std::mt19937_64 rng(seq);
  return sample_batch(ds, cfg.identities_per_batch, rng, cfg.per_modality);
}

namespace {

std::string dump_terms(const std::map<std::string, double>& terms) {
  std::ostringstream os;
  os << std::setprecision(9);
  for (const auto& [k, v] : terms) os << ' ' << k << '=' << v;
  return os.str();
}

double squared_norm(const EncoderParams<Real>& g) {
  double s = 0.0;
  g.for_each([&](const std::string&, const Matrix<Real>& m) { s += m.template cast<double>().squaredNorm(); });
  return s;
}

}  // namespace

LossReport train_step(TrainState& state, const Batch& batch, double lr) {
  const TrainConfig& cfg = state.config;
  const Index b = static_cast<Index>(batch.labels.size());
  if (b == 0 || static_cast<Index>(batch.ir.size()) != b || static_cast<Index>(batch.rgb.size()) != b)
    throw ShapeError("train_step: malformed batch");

  Tape<Real> tape;
  EncoderParams<Real> grads = zeros_like(state.live);
  const EncoderVars<Real> vars = bind(tape, state.live, &grads);
  const SimilarityKernel kernel(cfg.temperature);
  const Real margin = Real(cfg.margin);
  const std::vector<Image<Real>> ir = to_real(batch.ir), rgb = to_real(batch.rgb);

  std::map<std::string, Var<Real>> terms;
  std::map<std::string, double> values;
  const Var<Real> zero = tape.constant(Matrix<Real>::Zero(1, 1));
  try {
    std::vector<Image<Real>> images = ir;
    images.insert(images.end(), rgb.begin(), rgb.end());
    std::vector<Index> labels2 = batch.labels;
    labels2.insert(labels2.end(), batch.labels.begin(), batch.labels.end());

    const TokenSequence<Real> seq = tokenize(tape, images, vars);
    const PartOutputs<Real> out = encode_parts(seq, vars);
    terms["base"] = loss_base(out.global, out.parts, labels2, vars.classifier, margin);
    values["base"] = terms["base"].item();
    const Var<Real> fg_ir = slice_rows(out.global, 0, b), fg_rgb = slice_rows(out.global, b, b);

    terms["high"] = terms["i2p"] = terms["p2p"] = terms["p2p_pp"] = zero;
    if (cfg.enable_chpe) {
      MiningOptions mo;
      mo.fraction = cfg.k_fraction;
      mo.cell = cfg.hf_cell;
      mo.pairing = cfg.mining_pairing;
      mo.similarity = cfg.mining_similarity;
      const MinedIndices mined = mine_batch(ir, rgb, batch.labels, state.shadow.params, mo);
      const Subsequence<Real> ir_sub{subsequence(slice_sequences(seq, 0, b), mined.ir), Modality::kInfrared};
      const Subsequence<Real> rgb_sub{subsequence(slice_sequences(seq, b, b), mined.rgb), Modality::kVisible};
      const auto [z_ir, z_rgb] = enhanced_representations(ir_sub, rgb_sub, vars);
      terms["high"] = loss_high(z_ir, z_rgb, batch.labels, vars.classifier, margin);
      values["high"] = terms["high"].item();

      if (cfg.multiproco()) {
        const BatchCenters<Real> centers = batch_centers(z_ir, z_rgb, fg_ir, fg_rgb, batch.labels);
        const BankView<Real> view = ema_prototype_update(state.bank, centers, cfg.proto_update_order);
        if (cfg.enable_i2p) terms["i2p"] = loss_i2p(z_ir, z_rgb, fg_ir, fg_rgb, batch.labels, view);
        if (cfg.enable_p2p) terms["p2p"] = loss_p2p(view, kernel);
        if (cfg.enable_p2p_pp) terms["p2p_pp"] = loss_p2p_plus(view, kernel);
        for (const char* k : {"i2p", "p2p", "p2p_pp"}) values[k] = terms[k].item();
      }
      if (cfg.use_inst_contrast) {
        terms["inst"] = loss_inst(z_ir, z_rgb, fg_ir, fg_rgb, batch.labels, kernel);
        values["inst"] = terms["inst"].item();
      }
    }
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " | terms at failure:" + dump_terms(values));
  }

  const Var<Real> overall = loss_overall(terms);
  LossReport report;
  report.base = terms["base"].item();
  report.high = terms["high"].item();
  report.i2p = terms["i2p"].item();
  report.p2p = terms["p2p"].item();
  report.p2p_pp = terms["p2p_pp"].item();
  if (terms.count("inst")) report.inst = terms["inst"].item();
  report.overall = overall.item();
  if (!std::isfinite(report.overall)) throw NumericError("train_step: non-finite overall loss | terms:" + dump_terms(values));

  if (cfg.log_grad_norms) {
    for (const auto& [name, v] : terms) {
      if (!v.requires_grad()) {
        report.grad_norms[name] = 0.0;
        continue;
      }
      grads = zeros_like(state.live);
      tape.zero_grad();
      tape.backward(v);
      report.grad_norms[name] = std::sqrt(squared_norm(grads));
    }
    grads = zeros_like(state.live);
    tape.zero_grad();
  }
  tape.backward(overall);
  if (cfg.log_grad_norms) report.grad_norms["overall"] = std::sqrt(squared_norm(grads));

  AdamWConfig ac;
  ac.weight_decay = cfg.weight_decay;
  adamw_step(state.live, grads, state.optimizer, lr, ac);
  ema_update(state.shadow, state.live);
  return report;
}

std::string metrics_line(long iteration, double lr, const LossReport& r) {
  nlohmann::json j = {{"iter", iteration},        {"lr", lr},           {"base", r.base.value_or(0.0)},
                      {"high", r.high.value_or(0.0)}, {"i2p", r.i2p.value_or(0.0)}, {"p2p", r.p2p.value_or(0.0)},
                      {"p2p_pp", r.p2p_pp.value_or(0.0)}, {"overall", r.overall}};
  if (r.inst) j["inst"] = *r.inst;
  if (!r.grad_norms.empty()) j["grad_norms"] = r.grad_norms;
  return j.dump();
}

TrainState train(const TrainConfig& config, const Dataset& ds, const TrainHooks& hooks) {
  TrainState state = init_state(config, static_cast<Index>(ds.manifest.train_ids.size()));
  const long total = config.total_iterations();
  for (long t = 0; t < total; ++t) {
    const double lr = cosine_lr(config.lr, t, total);
    const LossReport report = train_step(state, batch_for_iteration(ds, config, t), lr);
    state.iteration = t + 1;
    if (hooks.metrics != nullptr) *hooks.metrics << metrics_line(t, lr, report) << '\n';
    if (hooks.on_iteration) hooks.on_iteration(state, report);
    if (hooks.on_epoch_end && state.iteration % config.iters_per_epoch == 0) hooks.on_epoch_end(state, state.iteration / config.iters_per_epoch);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Evaluation

Matrix<double> embed(const EncoderParams<Real>& params, const std::vector<ImageD>& images, Index chunk) {
  if (chunk < 1) throw std::invalid_argument("embed: chunk must be >= 1");
  Matrix<double> out(static_cast<Index>(images.size()), params.config.width);
  for (std::size_t first = 0; first < images.size(); first += static_cast<std::size_t>(chunk)) {
    const std::size_t last = std::min(images.size(), first + static_cast<std::size_t>(chunk));
    const std::vector<ImageD> part(images.begin() + static_cast<std::ptrdiff_t>(first), images.begin() + static_cast<std::ptrdiff_t>(last));
    Tape<Real> tape;
    const EncoderVars<Real> vars = bind(tape, params, nullptr);
    const Var<Real> f = encode_class(tokenize(tape, to_real(part), vars), vars);
    out.middleRows(static_cast<Index>(first), static_cast<Index>(last - first)) = f.value().cast<double>();
  }
  return out;
}

Matrix<double> center_and_normalize(const Matrix<double>& f) {
  Matrix<double> c = f.rowwise() - f.colwise().mean();
  for (Index i = 0; i < c.rows(); ++i) {
    const double n = c.row(i).norm();
    if (n > 0.0) c.row(i) /= n;
  }
  return c;
}

Direction parse_direction(const std::string& s) {
  if (s == "i2v") return Direction::kInfraredToVisible;
  if (s == "v2i") return Direction::kVisibleToInfrared;
  throw std::invalid_argument("direction must be i2v or v2i, got '" + s + "'");
}

const char* direction_name(Direction d) { return d == Direction::kInfraredToVisible ? "i2v" : "v2i"; }

RetrievalResult evaluate(const EncoderParams<Real>& params, const Dataset& ds, Direction direction) {
  const auto& ids = ds.manifest.test_ids;
  if (ids.size() < 2) throw std::invalid_argument("evaluate: needs at least 2 test identities");
  const Index per = ds.manifest.per_identity;
  std::vector<ImageD> images;
  std::vector<Index> labels;
  std::vector<Modality> mods;
  for (Index id : ids)
    for (Modality m : {Modality::kInfrared, Modality::kVisible})
      for (Index k = 0; k < per; ++k) {
        images.push_back(ds.image(id, m, k));
        labels.push_back(id);
        mods.push_back(m);
      }
  const Matrix<double> f = center_and_normalize(embed(params, images));

  const Modality qm = direction == Direction::kInfraredToVisible ? Modality::kInfrared : Modality::kVisible;
  std::vector<Index> q_rows, g_rows, q_labels, g_labels;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Index k = static_cast<Index>(i) % per;
    if (mods[i] == qm) {
      q_rows.push_back(static_cast<Index>(i));
      q_labels.push_back(labels[i]);
    } else if (k == 0) {
      g_rows.push_back(static_cast<Index>(i));
      g_labels.push_back(labels[i]);
    }
  }
  RetrievalResult r;
  r.dist = distance_matrix(f(q_rows, Eigen::all), f(g_rows, Eigen::all));
  r.cmc = cmc(r.dist, q_labels, g_labels, static_cast<Index>(g_rows.size()));
  r.map = mean_ap(r.dist, q_labels, g_labels);
  const PairDistanceStats s = pair_distance_stats(f, labels, mods);
  r.pos_mean = s.pos_mean;
  r.neg_mean = s.neg_mean;
  r.gap = s.gap;
  return r;
}

}  // namespace xmreid
