#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "longseg/volume.hpp"

namespace longseg {

struct GroupSample {
  std::string label;
  std::vector<double> values;
};

/// Absolute symmetrized percent change between two volumes:
/// 100 |v2 - v1| / ((v1 + v2) / 2). Both volumes zero is an error.
double aspc(double v1, double v2);

/// Signed variant of aspc.
double spc(double v1, double v2);

/// Annualized percent change of one structure: ordinary least-squares line
/// v(t) = a + b t over the series, reported as 100 b / a. The intercept sits
/// at the first scan because times are years from baseline; a <= 0 is an
/// error.
double apc(const VolumeTimeSeries& series, const std::string& structure);

/// Effect size (mean_a - mean_b) / s_pooled with the pooled sample variance
/// s^2 = ((n_a-1) s_a^2 + (n_b-1) s_b^2) / (n_a + n_b - 2).
double cohens_d(const GroupSample& a, const GroupSample& b);

/// Per-group sample size for a two-sided two-sample comparison at the given
/// power and significance, n = ceil(2 (z_{1-alpha/2} + z_power)^2 / d^2).
int required_sample_size(const GroupSample& a, const GroupSample& b, double power = 0.8,
                         double alpha = 0.05);

/// Quantile function of the standard normal distribution.
double inverse_normal_cdf(double p);

/// Annualized lesion voxel gain and loss rates over consecutive mask pairs:
/// rates.first counts voxels lesioned at t+1 but not t, rates.second the
/// reverse, each divided by the years elapsed and averaged over pairs.
std::pair<double, double> lesion_rates(const std::vector<std::vector<std::uint8_t>>& masks,
                                       const std::vector<double>& times);

/// Overlap 2|X n Y| / (|X| + |Y|); two empty masks count as identical.
double dice(const std::vector<std::uint8_t>& x, const std::vector<std::uint8_t>& y);

/// Symmetrized percent changes of every unordered pair of repeated
/// measurements, for test-retest sets.
struct PairChange {
  std::size_t first = 0;
  std::size_t second = 0;
  double aspc = 0.0;
  double spc = 0.0;
};
std::vector<PairChange> pairwise_changes(const std::vector<double>& volumes);

/// Cross-validated linear discriminant classification of feature vectors:
/// per fold, the held-out scores w . x with w = Sigma_pooled^-1 (mu_pos -
/// mu_neg) are pooled into one ROC curve. Folds are stratified and shuffled
/// deterministically from the seed.
struct LdaRocResult {
  double auc = 0.0;
  std::vector<std::pair<double, double>> curve;  // (fpr, tpr), monotone in fpr
  bool regularized = false;  // pooled covariance needed a ridge in some fold
};
LdaRocResult lda_roc(const std::vector<Eigen::VectorXd>& features,
                     const std::vector<int>& labels, int folds = 5, std::uint64_t seed = 0);

// ---- CSV emission ------------------------------------------------------------

struct MetricRecord {
  std::string metric;
  std::string subject;
  std::string structure;
  double value = 0.0;
};

/// Writes rows under the header `metric,subject,structure,value`.
void write_metric_csv(const std::vector<MetricRecord>& rows, const std::string& path);

/// Writes an ROC curve under the header `fpr,tpr`.
void write_roc_csv(const std::vector<std::pair<double, double>>& curve, const std::string& path);

}  // namespace longseg
