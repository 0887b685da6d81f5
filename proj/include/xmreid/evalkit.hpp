// Retrieval metrics, cross-modal distance statistics and patch overlays.
#pragma once

#include "xmreid/numcore.hpp"
#include "xmreid/wavelet.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace xmreid {

struct PairDistanceStats {
  double pos_mean = 0, neg_mean = 0, gap = 0;
  std::vector<double> pos, neg;  // every cross-modal pair distance
};

struct RetrievalResult {
  Matrix<double> dist;      // queries x gallery
  std::vector<double> cmc;  // cmc[r] = Rank-(r+1) accuracy
  double map = 0;
  double pos_mean = 0, neg_mean = 0, gap = 0;

  double rank1() const { return cmc.empty() ? 0.0 : cmc.front(); }
};

// Euclidean distances between rows.
Matrix<double> distance_matrix(const Matrix<double>& queries, const Matrix<double>& gallery);

// Gallery order for one query: ascending distance, ties by gallery index.
std::vector<Index> rank_gallery(const Eigen::Ref<const Eigen::RowVectorXd>& dist_row);

std::vector<double> cmc(const Matrix<double>& dist, const std::vector<Index>& q_labels, const std::vector<Index>& g_labels,
                        Index max_rank);

double mean_ap(const Matrix<double>& dist, const std::vector<Index>& q_labels, const std::vector<Index>& g_labels);

// Distances between every IR row and every RGB row, split by identity.
PairDistanceStats pair_distance_stats(const Matrix<double>& embeddings, const std::vector<Index>& labels,
                                      const std::vector<Modality>& modalities);

// bin_left,count_pos,count_neg over [0, max distance], `bins` equal bins.
void write_histogram_csv(const PairDistanceStats& stats, const std::filesystem::path& path, int bins = 32);

// Brightens each selected patch and draws a one-pixel white border around
// it. Patches are numbered in raster order on a grid of patch x patch cells.
ImageD patch_overlay(const ImageD& img, const std::vector<Index>& indices, Index patch);

void dump_patch_overlay(const ImageD& img, const std::vector<Index>& indices, Index patch, const std::filesystem::path& path);

std::string metrics_json(const RetrievalResult& r, const std::string& direction);

}  // namespace xmreid
