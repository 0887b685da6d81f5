#include "xmreid/evalkit.hpp"

#include "xmreid/pnm.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

namespace xmreid {

namespace {

void check_inputs(const Matrix<double>& dist, const std::vector<Index>& q_labels, const std::vector<Index>& g_labels) {
  if (dist.rows() != static_cast<Index>(q_labels.size()) || dist.cols() != static_cast<Index>(g_labels.size()))
    throw ShapeError("retrieval: distance matrix is " + std::to_string(dist.rows()) + "x" + std::to_string(dist.cols()) + " but " +
                     std::to_string(q_labels.size()) + " queries and " + std::to_string(g_labels.size()) + " gallery labels given");
  if (!dist.allFinite()) throw NumericError("retrieval: non-finite distance");
  for (std::size_t q = 0; q < q_labels.size(); ++q)
    if (std::find(g_labels.begin(), g_labels.end(), q_labels[q]) == g_labels.end())
      throw std::invalid_argument("retrieval: query " + std::to_string(q) + " (identity " + std::to_string(q_labels[q]) +
                                  ") has no positive in the gallery");
}

}  // namespace

Matrix<double> distance_matrix(const Matrix<double>& queries, const Matrix<double>& gallery) {
  if (queries.cols() != gallery.cols()) throw ShapeError("distance_matrix: embedding widths differ");
  const Eigen::VectorXd qn = queries.rowwise().squaredNorm();
  const Eigen::VectorXd gn = gallery.rowwise().squaredNorm();
  Matrix<double> d2 = (-2.0 * queries * gallery.transpose()).colwise() + qn;
  d2.rowwise() += gn.transpose();
  return d2.cwiseMax(0.0).cwiseSqrt();
}

std::vector<Index> rank_gallery(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::vector<Index> order(static_cast<std::size_t>(row.size()));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return row(a) < row(b); });
  return order;
}

std::vector<double> cmc(const Matrix<double>& dist, const std::vector<Index>& q_labels, const std::vector<Index>& g_labels,
                        Index max_rank) {
  check_inputs(dist, q_labels, g_labels);
  if (max_rank < 1) throw std::invalid_argument("cmc: max_rank must be >= 1");
  max_rank = std::min<Index>(max_rank, dist.cols());
  std::vector<double> curve(static_cast<std::size_t>(max_rank), 0.0);
  for (Index q = 0; q < dist.rows(); ++q) {
    const auto order = rank_gallery(dist.row(q));
    Index first = 0;
    while (g_labels[static_cast<std::size_t>(order[static_cast<std::size_t>(first)])] != q_labels[static_cast<std::size_t>(q)]) ++first;
    for (Index r = first; r < max_rank; ++r) curve[static_cast<std::size_t>(r)] += 1.0;
  }
  for (double& c : curve) c /= static_cast<double>(dist.rows());
  return curve;
}

double mean_ap(const Matrix<double>& dist, const std::vector<Index>& q_labels, const std::vector<Index>& g_labels) {
  check_inputs(dist, q_labels, g_labels);
  double total = 0.0;
  for (Index q = 0; q < dist.rows(); ++q) {
    const auto order = rank_gallery(dist.row(q));
    double hits = 0.0, ap = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r)
      if (g_labels[static_cast<std::size_t>(order[r])] == q_labels[static_cast<std::size_t>(q)]) {
        hits += 1.0;
        ap += hits / static_cast<double>(r + 1);
      }
    total += ap / hits;
  }
  return total / static_cast<double>(dist.rows());
}

PairDistanceStats pair_distance_stats(const Matrix<double>& emb, const std::vector<Index>& labels, const std::vector<Modality>& modalities) {
  if (static_cast<Index>(labels.size()) != emb.rows() || modalities.size() != labels.size())
    throw ShapeError("pair_distance_stats: labels and modalities must match embedding rows");
  if (std::set<Index>(labels.begin(), labels.end()).size() < 2) throw std::invalid_argument("pair_distance_stats: needs >= 2 identities");
  PairDistanceStats s;
  for (Index i = 0; i < emb.rows(); ++i) {
    if (modalities[static_cast<std::size_t>(i)] != Modality::kInfrared) continue;
    for (Index j = 0; j < emb.rows(); ++j) {
      if (modalities[static_cast<std::size_t>(j)] != Modality::kVisible) continue;
      const double d = (emb.row(i) - emb.row(j)).norm();
      (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? s.pos : s.neg).push_back(d);
    }
  }
  if (s.pos.empty() && s.neg.empty()) throw std::invalid_argument("pair_distance_stats: no cross-modal pairs");
  auto mean = [](const std::vector<double>& v) { return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  s.pos_mean = mean(s.pos);
  s.neg_mean = mean(s.neg);
  s.gap = s.neg_mean - s.pos_mean;
  return s;
}

void write_histogram_csv(const PairDistanceStats& stats, const std::filesystem::path& path, int bins) {
  if (bins < 1) throw std::invalid_argument("write_histogram_csv: bins must be >= 1");
  double hi = 0.0;
  for (const auto* v : {&stats.pos, &stats.neg})
    for (double d : *v) hi = std::max(hi, d);
  const double width = hi > 0.0 ? hi / bins : 1.0 / bins;
  std::vector<long> pos(static_cast<std::size_t>(bins), 0), neg(static_cast<std::size_t>(bins), 0);
  auto bin = [&](double d) { return static_cast<std::size_t>(std::min<long>(bins - 1, static_cast<long>(d / width))); };
  for (double d : stats.pos) ++pos[bin(d)];
  for (double d : stats.neg) ++neg[bin(d)];
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "bin_left,count_pos,count_neg\n";
  for (int b = 0; b < bins; ++b) out << b * width << ',' << pos[static_cast<std::size_t>(b)] << ',' << neg[static_cast<std::size_t>(b)] << '\n';
}

ImageD patch_overlay(const ImageD& img, const std::vector<Index>& indices, Index patch) {
  if (patch < 1 || img.height() % patch != 0 || img.width() % patch != 0)
    throw ShapeError("patch_overlay: image does not tile into " + std::to_string(patch) + "-pixel patches");
  const Index cols = img.width() / patch, n = (img.height() / patch) * cols;
  ImageD out = img;
  for (Index idx : indices) {
    if (idx < 0 || idx >= n) throw std::out_of_range("patch_overlay: patch index " + std::to_string(idx) + " outside [0," + std::to_string(n) + ")");
    const Index y0 = (idx / cols) * patch, x0 = (idx % cols) * patch;
    for (auto& p : out.planes) {
      auto cell = p.block(y0, x0, patch, patch);
      cell = (0.5 * cell.array() + 0.5).matrix();
      cell.row(0).setOnes();
      cell.row(patch - 1).setOnes();
      cell.col(0).setOnes();
      cell.col(patch - 1).setOnes();
    }
  }
  return out;
}

void dump_patch_overlay(const ImageD& img, const std::vector<Index>& indices, Index patch, const std::filesystem::path& path) {
  ImageD out = patch_overlay(img, indices, patch);
  if (out.channels() == 1) out.planes.assign(3, out.planes.front());
  write_pnm(path, out);
}

std::string metrics_json(const RetrievalResult& r, const std::string& direction) {
  nlohmann::json j = {{"direction", direction}, {"rank1", r.rank1()},     {"mAP", r.map},
                      {"cmc", r.cmc},           {"pos_mean", r.pos_mean}, {"neg_mean", r.neg_mean},
                      {"gap", r.gap},           {"queries", r.dist.rows()}, {"gallery", r.dist.cols()}};
  return j.dump(2);
}

}  // namespace xmreid
