#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace qlab {

inline constexpr int kNumFeatures = 8;

// One dataset row: the eight regression inputs plus the optional target.
struct FeatureRecord {
  std::string model_id;
  std::int64_t d_params = 0;
  double nll_fp = 0.0;
  double sqnr_rtn_db = 0.0;
  double nll_rtn = 0.0;
  double slope_db = 0.0;
  int precision = 0;
  int ebits = 0;  // element exponent bits; 0 for integer-element formats
  int block = 0;
  std::optional<double> nll_gptq;
};

const std::array<std::string, kNumFeatures>& feature_names();

// Validates finiteness, d_params > 0, precision >= 2; throws invalid_argument.
std::array<double, kNumFeatures> feature_vector(const FeatureRecord& rec);

std::string features_csv_header();
std::string features_csv(std::span<const FeatureRecord> records);
std::vector<FeatureRecord> parse_features_csv(std::string_view text);

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double leaf = 0.0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root, children follow
  // Total variance reduction credited to each feature by this tree's splits.
  std::array<double, kNumFeatures> split_credit{};

  double predict(const std::array<double, kNumFeatures>& x) const;
};

struct ForestOptions {
  int n_estimators = 120;
  int max_depth = 8;  // <= 0 grows trees without a depth limit
  bool bootstrap = true;
};

struct Forest {
  ForestOptions options;
  std::uint64_t seed = 0;
  std::vector<RegressionTree> trees;
};

// Records are put in a canonical order (model_id, then the remaining fields)
// before per-tree bootstrap resampling, so input order never matters.
Forest fit_forest(std::span<const FeatureRecord> records,
                  const ForestOptions& options, std::uint64_t seed);

double predict(const Forest& forest, const std::array<double, kNumFeatures>& x);
double predict(const Forest& forest, const FeatureRecord& record);

struct ImportanceReport {
  std::array<double, kNumFeatures> mean{};   // sums to 1
  std::array<double, kNumFeatures> stdev{};  // across-tree spread
};
ImportanceReport importance(const Forest& forest);

std::vector<std::pair<double, double>> partial_dependence(
    const Forest& forest, std::span<const FeatureRecord> records,
    int feature_index, std::span<const double> grid);

std::string forest_json(const Forest& forest);
Forest parse_forest_json(std::string_view text);

}  // namespace qlab
