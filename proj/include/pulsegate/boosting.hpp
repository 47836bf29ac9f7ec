#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pulsegate/kernels.hpp"
#include "pulsegate/matrix.hpp"
#include "pulsegate/windowing.hpp"

namespace pulsegate::boosting {

struct GbdtParams {
  int num_leaves = 31;
  int max_bin = 255;
  double learning_rate = 0.1;
  int n_trees = 100;
  int min_samples_leaf = 1;

  /// Throws BadSpec.
  void validate() const;
  bool operator==(const GbdtParams&) const = default;
};

/// Ascending cut points per feature. A value v falls in bin
/// lower_bound(cuts, v), so bin b holds cuts[b-1] < v <= cuts[b].
struct BinMap {
  std::vector<std::vector<double>> cuts;

  std::size_t features() const { return cuts.size(); }
  std::size_t bin_count(std::size_t feature) const { return cuts[feature].size() + 1; }
  std::uint16_t bin(std::size_t feature, double value) const;
  kernels::BinnedFeatures apply(MatrixView<const double> x) const;
  bool operator==(const BinMap&) const = default;
};

/// Internal nodes route bin <= bin_threshold to the left child.
struct TreeNode {
  int feature = -1;
  std::uint16_t bin_threshold = 0;
  int left = -1;
  int right = -1;
  double value = 0.0;

  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // root at 0

  std::size_t leaf_count() const;
  double evaluate(const BinMap& bins, std::span<const double> x) const;
};

struct GbdtModel {
  GbdtParams params;
  BinMap bins;
  double init_score = 0.0;
  std::vector<Tree> trees;
  /// Mean logistic loss on the training rows, before any tree and after each.
  std::vector<double> train_loss;
};

BinMap build_bins(MatrixView<const double> x, int max_bin);

/// Rows of `x` are samples; y holds 0/1 labels. Throws SingleClass.
GbdtModel fit(MatrixView<const double> x, std::span<const int> y, const GbdtParams& params,
              kernels::Backend backend = kernels::Backend::automatic);
GbdtModel fit(const windowing::LabeledDataset& train, const GbdtParams& params,
              kernels::Backend backend = kernels::Backend::automatic);

double predict_raw(const GbdtModel& model, std::span<const double> x);
double predict_gbdt(const GbdtModel& model, std::span<const double> x);

Matrix<double> feature_matrix(const windowing::LabeledDataset& ds);
std::vector<int> label_vector(const windowing::LabeledDataset& ds);

/// Model-spec JSON for the container header (family "gbdt", params in "hyper").
std::string params_json(const GbdtParams& params);
GbdtParams params_from_json(const std::string& json);

std::vector<std::byte> serialize_gbdt(const GbdtModel& model, int horizon_hours);
/// Throws BadMagic, VersionMismatch, ChecksumMismatch.
GbdtModel deserialize_gbdt(std::span<const std::byte> bytes, int* horizon_hours = nullptr);

/// Payload only, for callers that frame it themselves.
std::vector<std::byte> encode_payload(const GbdtModel& model);
GbdtModel decode_payload(std::span<const std::byte> payload, const GbdtParams& params);

}  // namespace pulsegate::boosting
