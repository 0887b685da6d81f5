// Procedural two-modality person dataset. Identity lives in stripe textures,
// glyphs and silhouette edges; backgrounds are smooth, so the evidence sits in
// the wavelet high bands while the low band mostly carries clutter.
#pragma once

#include "xmreid/numcore.hpp"
#include "xmreid/wavelet.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xmreid {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr Index kImageHeight = 64;
constexpr Index kImageWidth = 32;

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct IdentitySignature {
  std::uint64_t seed = 0;
  double head_radius = 0, head_x = 0;
  double torso_width = 0, torso_top = 0;
  double leg_width = 0, leg_gap = 0;
  std::array<int, 4> texture{};  // per horizontal band: stripe period family, odd-column carrier when >= 4
  std::array<int, 4> phase{};
  std::array<std::pair<int, int>, 2> glyphs{};  // (row, col) centers of 3x3 marks
  Eigen::Matrix<double, 4, 3, Eigen::RowMajor> color;  // per band RGB body color
  Mask silhouette;                                     // unshifted, kImageHeight x kImageWidth
};

IdentitySignature generate_identity(std::uint64_t seed);

// Silhouette translated right by `shift` columns.
Mask silhouette_mask(const IdentitySignature& sig, int shift = 0);

// Texture value in [-1, 1] for stripes, 2 on glyphs; expressed in the
// translated frame.
Matrix<double> texture_field(const IdentitySignature& sig, int shift = 0);

// RGB: band colors plus texture over a smooth colored background. IR: one
// gray body level plus the same texture with 4x4 blocks dropped (p = 0.2),
// smooth gray background and pixel noise, replicated to three channels.
// Output is quantized to 8 bits.
ImageD render(const IdentitySignature& sig, Modality modality, std::uint64_t variation_seed);

double silhouette_iou(const Mask& a, const Mask& b);

struct DatasetManifest {
  Index identities = 0;
  Index per_identity = 0;  // images per modality per identity
  std::uint64_t seed = 0;
  std::vector<Index> train_ids, test_ids;
};

struct DatasetEntry {
  std::string file;  // relative to the dataset root
  Index identity = 0;
  Modality modality = Modality::kInfrared;
  Index index = 0;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<DatasetEntry> entries;  // ordered by identity, modality (ir first), index
  std::vector<ImageD> images;         // parallel to entries

  const ImageD& image(Index identity, Modality m, Index k) const;
};

std::uint64_t identity_seed(std::uint64_t dataset_seed, Index identity);
std::uint64_t variation_seed(std::uint64_t dataset_seed, Index identity, Modality m, Index k);

// First half of the identities trains, the second half tests.
Dataset generate_dataset(Index identities, Index per_identity, std::uint64_t seed);

std::string image_filename(Index identity, Modality m, Index k);

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

// P identities x (per_modality RGB + per_modality IR). Row s of `ir` and `rgb`
// share labels[s]; labels are positions in manifest.train_ids.
struct Batch {
  std::vector<ImageD> ir, rgb;
  std::vector<Index> labels;
  std::vector<Index> identities;  // dataset identity per slot
};

Batch sample_batch(const Dataset& ds, Index identities_per_batch, std::mt19937_64& rng, Index per_modality = 4);

}  // namespace xmreid
