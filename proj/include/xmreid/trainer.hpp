// Training loop, checkpoints and evaluation. Training runs in float; the
// gradient suite runs the same losses in double.
#pragma once

#include "xmreid/chpe.hpp"
#include "xmreid/encoder.hpp"
#include "xmreid/evalkit.hpp"
#include "xmreid/objectives.hpp"
#include "xmreid/optim.hpp"
#include "xmreid/protobank.hpp"
#include "xmreid/synthdata.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace xmreid {

using Real = float;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 1e-4;
  long epochs = 1;
  long iters_per_epoch = 200;
  double k_fraction = 0.30;
  double momentum = 0.9999;
  double proto_decay = 0.8;
  double temperature = 0.1;
  double margin = 0.3;
  Index identities_per_batch = 8;
  Index per_modality = 4;
  std::uint64_t seed = 0;
  bool enable_chpe = true;
  bool enable_i2p = true;
  bool enable_p2p = true;
  bool enable_p2p_pp = true;
  bool use_inst_contrast = false;
  MiningPairing mining_pairing = MiningPairing::kSlot;
  MiningSimilarity mining_similarity = MiningSimilarity::kCentered;
  ProtoUpdateOrder proto_update_order = ProtoUpdateOrder::kBefore;
  Index hf_cell = 0;
  bool log_grad_norms = false;
  EncoderConfig encoder;  // classes is overwritten with the training identity count

  long total_iterations() const { return epochs * iters_per_epoch; }
  bool multiproco() const { return enable_i2p || enable_p2p || enable_p2p_pp; }

  void validate() const;
  nlohmann::json to_json() const;
  // Keys missing from `j` keep their defaults; unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_file(const std::filesystem::path& path);
  std::string hash() const;
};

// Baseline only, baseline + CHPE, and the full method.
enum class Variant { kBaseline, kChpe, kFull };
TrainConfig apply_variant(TrainConfig cfg, Variant v);

struct TrainState {
  TrainConfig config;
  EncoderParams<Real> live;
  ShadowParams<Real> shadow;
  PrototypeBank<Real> bank;
  AdamWState<Real> optimizer;
  long iteration = 0;
};

TrainState init_state(const TrainConfig& config, Index classes);

// Converts a dataset batch into the float images the encoder consumes.
std::vector<Image<Real>> to_real(const std::vector<ImageD>& images);

// One iteration: baseline forward, CHPE mining and enhancement, prototype
// update, prototype contrast terms, backward, AdamW, shadow EMA. Disabled terms
// report zero. Throws NumericError when the loss is not finite.
LossReport train_step(TrainState& state, const Batch& batch, double lr);

// Batch for iteration t; a pure function of (seed, t).
Batch batch_for_iteration(const Dataset& ds, const TrainConfig& cfg, long t);

std::string metrics_line(long iteration, double lr, const LossReport& r);

struct TrainHooks {
  std::ostream* metrics = nullptr;                                          // JSON lines
  std::function<void(const TrainState&, long epoch)> on_epoch_end;          // e.g. checkpointing
  std::function<void(const TrainState&, const LossReport&)> on_iteration;  // progress
};

TrainState train(const TrainConfig& config, const Dataset& ds, const TrainHooks& hooks = {});

// f_g for every image, in float, returned in double.
Matrix<double> embed(const EncoderParams<Real>& params, const std::vector<ImageD>& images, Index chunk = 64);

// Subtracts the mean row, then scales each row to unit length.
Matrix<double> center_and_normalize(const Matrix<double>& f);

enum class Direction { kInfraredToVisible, kVisibleToInfrared };
Direction parse_direction(const std::string& s);
const char* direction_name(Direction d);

// Test identities only. Queries: every image of the query modality;
// gallery: the first image of each identity in the other modality.
RetrievalResult evaluate(const EncoderParams<Real>& params, const Dataset& ds, Direction direction = Direction::kInfraredToVisible);

// Writes <path> (JSON manifest) and <path stem>.bin (float32 little-endian).
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace xmreid
