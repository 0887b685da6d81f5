#include "xmreid/synthdata.hpp"

#include "xmreid/pnm.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace xmreid {

namespace {

constexpr double kTextureAmp = 0.15;
constexpr double kBackgroundAmp = 0.3;
constexpr double kIrNoise = 0.02;
constexpr double kIrDrop = 0.2;
constexpr int kShiftStep = 2;
constexpr int kFamilies = 8;

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// splitmix64 finalizer, used to derive independent stream seeds.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Sum of three low-frequency cosines, amplitude `amp` overall.
Matrix<double> smooth_field(std::mt19937_64& rng, double amp) {
  Matrix<double> f = Matrix<double>::Zero(kImageHeight, kImageWidth);
  constexpr int terms = 3;
  for (int t = 0; t < terms; ++t) {
    const double fy = uniform(rng, 0.0, 1.5 / kImageHeight);
    const double fx = uniform(rng, 0.0, 1.5 / kImageWidth);
    const double ph = uniform(rng, 0.0, 2 * std::numbers::pi);
    for (Index y = 0; y < kImageHeight; ++y)
      for (Index x = 0; x < kImageWidth; ++x) f(y, x) += std::cos(2 * std::numbers::pi * (fy * y + fx * x) + ph);
  }
  return f * (amp / terms);
}

double stripe(int family, int phase, Index y, Index x) {
  const int period = 2 * (family % 4 + 1);
  double v = ((y + phase) % period) < period / 2 ? 1.0 : -1.0;
  if (family >= 4 && x % 2 != 0) v = -v;
  return v;
}

// Non-negative remainder.
Index floor_mod(Index x, Index m) { return ((x % m) + m) % m; }

}  // namespace

IdentitySignature generate_identity(std::uint64_t seed) {
  std::mt19937_64 rng(mix(seed));
  IdentitySignature s;
  s.seed = seed;
  s.head_radius = uniform(rng, 3.0, 6.5);
  s.head_x = uniform(rng, 12, 20);
  s.torso_width = uniform(rng, 12, 26);
  s.torso_top = uniform(rng, 12, 18);
  s.leg_width = uniform(rng, 4, 9);
  s.leg_gap = uniform(rng, 1, 6);
  for (auto& t : s.texture) t = uniform_int(rng, 0, kFamilies - 1);
  for (auto& p : s.phase) p = uniform_int(rng, 0, 7);
  for (auto& g : s.glyphs) g = {uniform_int(rng, 18, 45), uniform_int(rng, 10, 21)};
  for (Index b = 0; b < 4; ++b)
    for (Index c = 0; c < 3; ++c) s.color(b, c) = uniform(rng, 0.25, 0.75);
  s.silhouette = silhouette_mask(s, 0);
  return s;
}

Mask silhouette_mask(const IdentitySignature& s, int shift) {
  Mask m(kImageHeight, kImageWidth);
  constexpr double cx = 16.0;
  const double g = s.leg_gap / 2;
  for (Index y = 0; y < kImageHeight; ++y)
    for (Index x = 0; x < kImageWidth; ++x) {
      const double xs = static_cast<double>(x - shift);
      const double yd = static_cast<double>(y);
      const bool head = (yd - 7) * (yd - 7) + (xs - s.head_x) * (xs - s.head_x) <= s.head_radius * s.head_radius;
      const bool torso = yd >= s.torso_top && y < 40 && std::abs(xs + 0.5 - cx) <= s.torso_width / 2;
      const double c = xs + 0.5;
      const bool legs = y >= 40 && y < 63 &&
                        ((c >= cx - g - s.leg_width && c < cx - g) || (c >= cx + g && c < cx + g + s.leg_width));
      m(y, x) = head || torso || legs;
    }
  return m;
}

Matrix<double> texture_field(const IdentitySignature& s, int shift) {
  Matrix<double> t(kImageHeight, kImageWidth);
  for (Index y = 0; y < kImageHeight; ++y)
    for (Index x = 0; x < kImageWidth; ++x) {
      const Index xs = x - shift;
      const std::size_t band = static_cast<std::size_t>(y / 16);
      double v = stripe(s.texture[band], s.phase[band], y, floor_mod(xs, 2));
      for (const auto& [gy, gx] : s.glyphs)
        if (std::abs(y - gy) <= 1 && std::abs(xs - gx) <= 1) v = 2.0;
      t(y, x) = v;
    }
  return t;
}

ImageD render(const IdentitySignature& s, Modality modality, std::uint64_t vseed) {
  std::mt19937_64 rng(mix(vseed));
  const int shift = kShiftStep * uniform_int(rng, -1, 1);
  const Mask person = silhouette_mask(s, shift);
  const Matrix<double> tex = texture_field(s, shift);
  ImageD img(kImageHeight, kImageWidth, 3);

  if (modality == Modality::kVisible) {
    std::array<double, 3> base;
    for (auto& b : base) b = uniform(rng, 0.3, 0.7);
    for (Index c = 0; c < 3; ++c) {
      const Matrix<double> bg = smooth_field(rng, kBackgroundAmp).array() + base[static_cast<std::size_t>(c)];
      for (Index y = 0; y < kImageHeight; ++y)
        for (Index x = 0; x < kImageWidth; ++x)
          img(y, x, c) = person(y, x) ? s.color(y / 16, c) + kTextureAmp * tex(y, x) : bg(y, x);
    }
  } else {
    Mask keep(kImageHeight / 4, kImageWidth / 4);
    for (Index by = 0; by < keep.rows(); ++by)
      for (Index bx = 0; bx < keep.cols(); ++bx) keep(by, bx) = uniform(rng, 0.0, 1.0) >= kIrDrop;
    const double level = uniform(rng, 0.3, 0.7);
    const Matrix<double> bg = smooth_field(rng, kBackgroundAmp).array() + level;
    const double body = uniform(rng, 0.3, 0.7);
    std::normal_distribution<double> noise(0.0, kIrNoise);
    for (Index y = 0; y < kImageHeight; ++y)
      for (Index x = 0; x < kImageWidth; ++x) {
        const double t = keep(y / 4, x / 4) ? kTextureAmp * tex(y, x) : 0.0;
        const double v = (person(y, x) ? body + t : bg(y, x)) + noise(rng);
        for (Index c = 0; c < 3; ++c) img(y, x, c) = v;
      }
  }
  for (auto& p : img.planes) p = p.cwiseMax(0.0).cwiseMin(1.0);
  return quantize8(img);
}

double silhouette_iou(const Mask& a, const Mask& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("silhouette_iou: mask shapes differ");
  const double inter = (a && b).count();
  const double uni = (a || b).count();
  return uni == 0 ? 1.0 : inter / uni;
}

const ImageD& Dataset::image(Index identity, Modality m, Index k) const {
  const Index per = manifest.per_identity;
  if (identity < 0 || identity >= manifest.identities || k < 0 || k >= per)
    throw std::out_of_range("dataset: no image " + image_filename(identity, m, k));
  const Index pos = identity * 2 * per + (m == Modality::kInfrared ? 0 : per) + k;
  return images[static_cast<std::size_t>(pos)];
}

std::uint64_t identity_seed(std::uint64_t dataset_seed, Index identity) {
  return mix(dataset_seed * 0x100000001b3ULL + static_cast<std::uint64_t>(identity));
}

std::uint64_t variation_seed(std::uint64_t dataset_seed, Index identity, Modality m, Index k) {
  const std::uint64_t tag = static_cast<std::uint64_t>(identity) * 2 + (m == Modality::kInfrared ? 0 : 1);
  return mix(identity_seed(dataset_seed, identity) ^ mix(tag * 0x10000 + static_cast<std::uint64_t>(k)));
}

std::string image_filename(Index identity, Modality m, Index k) {
  std::ostringstream os;
  os << "images/" << identity << '_' << modality_name(m) << '_' << k << (m == Modality::kInfrared ? ".pgm" : ".ppm");
  return os.str();
}

Dataset generate_dataset(Index identities, Index per_identity, std::uint64_t seed) {
  if (identities < 2) throw std::invalid_argument("generate_dataset: need at least 2 identities");
  if (per_identity < 1) throw std::invalid_argument("generate_dataset: need at least 1 image per identity");
  Dataset ds;
  ds.manifest.identities = identities;
  ds.manifest.per_identity = per_identity;
  ds.manifest.seed = seed;
  for (Index c = 0; c < identities; ++c) (c < identities / 2 ? ds.manifest.train_ids : ds.manifest.test_ids).push_back(c);
  for (Index c = 0; c < identities; ++c) {
    const IdentitySignature sig = generate_identity(identity_seed(seed, c));
    for (Modality m : {Modality::kInfrared, Modality::kVisible})
      for (Index k = 0; k < per_identity; ++k) {
        ds.entries.push_back({image_filename(c, m, k), c, m, k});
        ds.images.push_back(render(sig, m, variation_seed(seed, c, m, k)));
      }
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  const DatasetManifest& m = ds.manifest;
  nlohmann::json j = {{"identities", m.identities}, {"per_identity", m.per_identity}, {"seed", m.seed},
                      {"height", kImageHeight},     {"width", kImageWidth},           {"train_ids", m.train_ids},
                      {"test_ids", m.test_ids}};
  std::ofstream(dir / "manifest.json") << j.dump(2) << '\n';

  std::ofstream labels(dir / "labels.csv");
  labels << "filename,identity,modality\n";
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    const DatasetEntry& e = ds.entries[i];
    labels << e.file << ',' << e.identity << ',' << modality_name(e.modality) << '\n';
    ImageD img = ds.images[i];
    if (e.modality == Modality::kInfrared) img.planes.resize(1);
    write_pnm(dir / e.file, img);
  }
  if (!labels) throw DatasetError("write failed: " + (dir / "labels.csv").string());
}

namespace {

template <typename T>
T manifest_field(const nlohmann::json& j, const char* field) {
  if (!j.contains(field)) throw DatasetError(std::string("manifest.json: missing field '") + field + "'");
  try {
    return j.at(field).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw DatasetError(std::string("manifest.json: field '") + field + "' has the wrong type");
  }
}

}  // namespace

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DatasetError("missing manifest: " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("manifest.json: not valid JSON (" + std::string(e.what()) + ")");
  }
  Dataset ds;
  DatasetManifest& m = ds.manifest;
  m.identities = manifest_field<Index>(j, "identities");
  m.per_identity = manifest_field<Index>(j, "per_identity");
  m.seed = manifest_field<std::uint64_t>(j, "seed");
  m.train_ids = manifest_field<std::vector<Index>>(j, "train_ids");
  m.test_ids = manifest_field<std::vector<Index>>(j, "test_ids");
  if (manifest_field<Index>(j, "height") != kImageHeight || manifest_field<Index>(j, "width") != kImageWidth)
    throw DatasetError("manifest.json: field 'height'/'width' does not match the 64x32 image size");
  if (m.identities < 2) throw DatasetError("manifest.json: field 'identities' must be >= 2");
  if (m.per_identity < 1) throw DatasetError("manifest.json: field 'per_identity' must be >= 1");
  for (const auto* ids : {&m.train_ids, &m.test_ids})
    for (Index c : *ids)
      if (c < 0 || c >= m.identities) throw DatasetError("manifest.json: identity " + std::to_string(c) + " outside 'identities'");
  for (Index c : m.train_ids)
    if (std::find(m.test_ids.begin(), m.test_ids.end(), c) != m.test_ids.end())
      throw DatasetError("manifest.json: identity " + std::to_string(c) + " in both 'train_ids' and 'test_ids'");

  std::ifstream labels(dir / "labels.csv");
  if (!labels) throw DatasetError("missing labels: " + (dir / "labels.csv").string());
  std::string line;
  std::getline(labels, line);
  if (line != "filename,identity,modality") throw DatasetError("labels.csv: unexpected header '" + line + "'");
  std::size_t row = 1;
  while (std::getline(labels, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string file, id, mod;
    if (!std::getline(ls, file, ',') || !std::getline(ls, id, ',') || !std::getline(ls, mod))
      throw DatasetError("labels.csv: malformed row " + std::to_string(row));
    DatasetEntry e;
    e.file = file;
    try {
      e.identity = std::stol(id);
    } catch (const std::exception&) {
      throw DatasetError("labels.csv: row " + std::to_string(row) + " has a bad identity '" + id + "'");
    }
    if (mod == "ir")
      e.modality = Modality::kInfrared;
    else if (mod == "rgb")
      e.modality = Modality::kVisible;
    else
      throw DatasetError("labels.csv: row " + std::to_string(row) + " has an unknown modality '" + mod + "'");
    ds.entries.push_back(e);
  }

  // Reorder into the canonical layout and check completeness.
  const std::size_t expected = static_cast<std::size_t>(m.identities * 2 * m.per_identity);
  std::vector<DatasetEntry> ordered(expected);
  std::vector<bool> seen(expected, false);
  for (DatasetEntry& e : ds.entries) {
    const std::string stem = e.file.substr(e.file.find('/') + 1);
    Index k = -1;
    const auto us = stem.rfind('_'), dot = stem.rfind('.');
    if (us != std::string::npos && dot != std::string::npos && dot > us) {
      try {
        k = std::stol(stem.substr(us + 1, dot - us - 1));
      } catch (const std::exception&) {
        k = -1;
      }
    }
    if (e.identity < 0 || e.identity >= m.identities || k < 0 || k >= m.per_identity || e.file != image_filename(e.identity, e.modality, k))
      throw DatasetError("labels.csv: entry '" + e.file + "' does not match the manifest layout");
    e.index = k;
    const std::size_t pos = static_cast<std::size_t>(e.identity * 2 * m.per_identity +
                                                     (e.modality == Modality::kInfrared ? 0 : m.per_identity) + k);
    if (seen[pos]) throw DatasetError("labels.csv: duplicate entry '" + e.file + "'");
    seen[pos] = true;
    ordered[pos] = e;
  }
  for (std::size_t i = 0; i < expected; ++i)
    if (!seen[i]) throw DatasetError("labels.csv: " + std::to_string(expected) + " images expected, some are missing");
  ds.entries = std::move(ordered);

  for (const DatasetEntry& e : ds.entries) {
    ImageD img = read_pnm(dir / e.file);
    if (img.height() != kImageHeight || img.width() != kImageWidth)
      throw DatasetError(e.file + ": image is " + std::to_string(img.height()) + "x" + std::to_string(img.width()));
    if (img.channels() == 1) img.planes.assign(3, img.planes.front());
    ds.images.push_back(std::move(img));
  }
  return ds;
}

Batch sample_batch(const Dataset& ds, Index p, std::mt19937_64& rng, Index per_modality) {
  const auto& train = ds.manifest.train_ids;
  if (p < 1 || p > static_cast<Index>(train.size()))
    throw std::invalid_argument("sample_batch: " + std::to_string(p) + " identities requested, " + std::to_string(train.size()) +
                                " available for training");
  if (per_modality < 1 || per_modality > ds.manifest.per_identity)
    throw std::invalid_argument("sample_batch: " + std::to_string(per_modality) + " images per modality requested, " +
                                std::to_string(ds.manifest.per_identity) + " available");
  std::vector<Index> order(train.size());
  std::iota(order.begin(), order.end(), Index(0));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(p));

  Batch b;
  std::vector<Index> pool(static_cast<std::size_t>(ds.manifest.per_identity));
  for (Index label : order) {
    const Index id = train[static_cast<std::size_t>(label)];
    std::iota(pool.begin(), pool.end(), Index(0));
    std::shuffle(pool.begin(), pool.end(), rng);
    std::vector<Index> ir_pick(pool.begin(), pool.begin() + per_modality);
    std::shuffle(pool.begin(), pool.end(), rng);
    for (Index s = 0; s < per_modality; ++s) {
      b.ir.push_back(ds.image(id, Modality::kInfrared, ir_pick[static_cast<std::size_t>(s)]));
      b.rgb.push_back(ds.image(id, Modality::kVisible, pool[static_cast<std::size_t>(s)]));
      b.labels.push_back(label);
      b.identities.push_back(id);
    }
  }
  return b;
}

}  // namespace xmreid
