#include "longseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "longseg/error.hpp"
#include "longseg/rng.hpp"

namespace longseg {

double aspc(double v1, double v2) { return std::abs(spc(v1, v2)); }

double spc(double v1, double v2) {
  if (!(v1 + v2 > 0.0)) throw validation_error("spc: volumes sum to zero");
  return 100.0 * (v2 - v1) / ((v1 + v2) / 2.0);
}

double apc(const VolumeTimeSeries& series, const std::string& structure) {
  series.validate();
  std::vector<double> times;
  std::vector<double> volumes;
  for (const auto& entry : series.entries) {
    const auto it = entry.volumes_mm3.find(structure);
    if (it == entry.volumes_mm3.end()) {
      throw validation_error("apc: structure '" + structure + "' missing at time " +
                             std::to_string(entry.time_years));
    }
    times.push_back(entry.time_years);
    volumes.push_back(it->second);
  }
  if (times.size() < 2) throw validation_error("apc: need at least two time points");

  const double n = static_cast<double>(times.size());
  const double t_mean = std::accumulate(times.begin(), times.end(), 0.0) / n;
  const double v_mean = std::accumulate(volumes.begin(), volumes.end(), 0.0) / n;
  double cov = 0.0;
  double var = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    cov += (times[i] - t_mean) * (volumes[i] - v_mean);
    var += (times[i] - t_mean) * (times[i] - t_mean);
  }
  const double slope = cov / var;
  const double intercept = v_mean - slope * t_mean;
  if (!(intercept > 0.0)) {
    throw numeric_error("apc: fitted baseline volume is not positive");
  }
  return 100.0 * slope / intercept;
}

namespace {

double sample_variance(const std::vector<double>& values, double mean) {
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return ss / (static_cast<double>(values.size()) - 1.0);
}

}  // namespace

double cohens_d(const GroupSample& a, const GroupSample& b) {
  if (a.values.size() < 2 || b.values.size() < 2) {
    throw validation_error("cohens_d: each group needs at least two values");
  }
  const double n_a = static_cast<double>(a.values.size());
  const double n_b = static_cast<double>(b.values.size());
  const double mean_a = std::accumulate(a.values.begin(), a.values.end(), 0.0) / n_a;
  const double mean_b = std::accumulate(b.values.begin(), b.values.end(), 0.0) / n_b;
  const double pooled = ((n_a - 1.0) * sample_variance(a.values, mean_a) +
                         (n_b - 1.0) * sample_variance(b.values, mean_b)) /
                        (n_a + n_b - 2.0);
  if (!(pooled > 0.0)) throw numeric_error("cohens_d: pooled variance is zero");
  return (mean_a - mean_b) / std::sqrt(pooled);
}

int required_sample_size(const GroupSample& a, const GroupSample& b, double power, double alpha) {
  if (!(power > 0.0 && power < 1.0) || !(alpha > 0.0 && alpha < 1.0)) {
    throw validation_error("required_sample_size: power and alpha must be in (0, 1)");
  }
  const double d = cohens_d(a, b);
  if (d == 0.0) {
    throw numeric_error("required_sample_size: effect size is zero, size unbounded");
  }
  const double z = inverse_normal_cdf(1.0 - alpha / 2.0) + inverse_normal_cdf(power);
  return static_cast<int>(std::ceil(2.0 * z * z / (d * d)));
}

double inverse_normal_cdf(double p) {
  // Wichura's PPND16 rational approximations, accurate to ~1e-16.
  if (!(p > 0.0 && p < 1.0)) {
    throw validation_error("inverse_normal_cdf: p must be in (0, 1)");
  }
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    const double num =
        (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
              6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
            1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
          1.3314166789178437745e2) * r + 3.3871328727963666080e0);
    const double den =
        (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
              3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
            5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
          4.2313330701600911252e1) * r + 1.0);
    return q * num / den;
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double value;
  if (r <= 5.0) {
    r -= 1.6;
    const double num =
        (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
              2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
            3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
          4.63033784615654529590e0) * r + 1.42343711074968357734e0);
    const double den =
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
              1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
            6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
          2.05319162663775882187e0) * r + 1.0);
    value = num / den;
  } else {
    r -= 5.0;
    const double num =
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
              1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
            2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
          5.46378491116411436990e0) * r + 6.65790464350110377720e0);
    const double den =
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
              1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
            1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
          5.99832206555887937690e-1) * r + 1.0);
    value = num / den;
  }
  return q < 0.0 ? -value : value;
}

std::pair<double, double> lesion_rates(const std::vector<std::vector<std::uint8_t>>& masks,
                                       const std::vector<double>& times) {
  if (masks.size() != times.size()) throw validation_error("lesion_rates: mask/time mismatch");
  if (masks.size() < 2) throw validation_error("lesion_rates: need at least two time points");
  for (std::size_t t = 0; t + 1 < masks.size(); ++t) {
    if (masks[t].size() != masks[t + 1].size()) {
      throw validation_error("lesion_rates: mask sizes differ");
    }
    if (!(times[t + 1] > times[t])) {
      throw validation_error("lesion_rates: times must strictly increase");
    }
  }
  double gain = 0.0;
  double loss = 0.0;
  for (std::size_t t = 0; t + 1 < masks.size(); ++t) {
    std::size_t appeared = 0;
    std::size_t vanished = 0;
    for (std::size_t i = 0; i < masks[t].size(); ++i) {
      const bool before = masks[t][i] != 0;
      const bool after = masks[t + 1][i] != 0;
      if (after && !before) ++appeared;
      if (before && !after) ++vanished;
    }
    const double delta = times[t + 1] - times[t];
    gain += static_cast<double>(appeared) / delta;
    loss += static_cast<double>(vanished) / delta;
  }
  const double pairs = static_cast<double>(masks.size() - 1);
  return {gain / pairs, loss / pairs};
}

double dice(const std::vector<std::uint8_t>& x, const std::vector<std::uint8_t>& y) {
  if (x.size() != y.size()) throw validation_error("dice: mask sizes differ");
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t both = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool in_x = x[i] != 0;
    const bool in_y = y[i] != 0;
    nx += in_x;
    ny += in_y;
    both += in_x && in_y;
  }
  if (nx + ny == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(nx + ny);
}

std::vector<PairChange> pairwise_changes(const std::vector<double>& volumes) {
  std::vector<PairChange> out;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    for (std::size_t j = i + 1; j < volumes.size(); ++j) {
      PairChange pc;
      pc.first = i;
      pc.second = j;
      pc.spc = spc(volumes[i], volumes[j]);
      pc.aspc = std::abs(pc.spc);
      out.push_back(pc);
    }
  }
  return out;
}

LdaRocResult lda_roc(const std::vector<Eigen::VectorXd>& features, const std::vector<int>& labels,
                     int folds, std::uint64_t seed) {
  if (features.size() != labels.size()) throw validation_error("lda_roc: size mismatch");
  if (folds < 2) throw validation_error("lda_roc: need at least two folds");
  if (features.empty()) throw validation_error("lda_roc: empty input");
  const Eigen::Index dim = features[0].size();
  for (const auto& f : features) {
    if (f.size() != dim) throw validation_error("lda_roc: ragged feature vectors");
  }

  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) {
      pos.push_back(i);
    } else if (labels[i] == 0) {
      neg.push_back(i);
    } else {
      throw validation_error("lda_roc: labels must be 0 or 1");
    }
  }
  if (pos.size() < static_cast<std::size_t>(folds) ||
      neg.size() < static_cast<std::size_t>(folds)) {
    throw validation_error("lda_roc: each class needs at least one subject per fold");
  }

  // Stratified fold assignment: shuffle within each class, deal round-robin.
  auto shuffle = [&](std::vector<std::size_t>& idx, std::uint64_t stream) {
    CounterRng rng = CounterRng::derive(seed, {0x6c6461u, stream});
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[rng.next_below(i)]);
    }
  };
  shuffle(pos, 1);
  shuffle(neg, 2);
  std::vector<int> fold_of(labels.size(), 0);
  for (std::size_t i = 0; i < pos.size(); ++i) fold_of[pos[i]] = static_cast<int>(i % folds);
  for (std::size_t i = 0; i < neg.size(); ++i) fold_of[neg[i]] = static_cast<int>(i % folds);

  LdaRocResult result;
  std::vector<std::pair<double, int>> scored;  // (score, label), pooled over folds
  for (int fold = 0; fold < folds; ++fold) {
    Eigen::VectorXd mean_pos = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd mean_neg = Eigen::VectorXd::Zero(dim);
    double n_pos = 0.0;
    double n_neg = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (fold_of[i] == fold) continue;
      if (labels[i] == 1) {
        mean_pos += features[i];
        n_pos += 1.0;
      } else {
        mean_neg += features[i];
        n_neg += 1.0;
      }
    }
    if (n_pos < 1.0 || n_neg < 1.0 || n_pos + n_neg < 3.0) {
      throw validation_error("lda_roc: fold " + std::to_string(fold) +
                             " leaves too little training data");
    }
    mean_pos /= n_pos;
    mean_neg /= n_neg;
    Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(dim, dim);
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (fold_of[i] == fold) continue;
      const Eigen::VectorXd d = features[i] - (labels[i] == 1 ? mean_pos : mean_neg);
      scatter.noalias() += d * d.transpose();
    }
    Eigen::MatrixXd pooled = scatter / (n_pos + n_neg - 2.0);
    Eigen::LLT<Eigen::MatrixXd> llt(pooled);
    if (llt.info() != Eigen::Success) {
      pooled += (1e-6 * pooled.trace() / static_cast<double>(dim)) *
                Eigen::MatrixXd::Identity(dim, dim);
      llt.compute(pooled);
      result.regularized = true;
      if (llt.info() != Eigen::Success) {
        throw numeric_error("lda_roc: pooled covariance is singular even with ridge");
      }
    }
    const Eigen::VectorXd w = llt.solve(mean_pos - mean_neg);
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (fold_of[i] != fold) continue;
      scored.emplace_back(w.dot(features[i]), labels[i]);
    }
  }

  // ROC over the pooled held-out scores: descending thresholds, ties grouped.
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  std::size_t total_pos = 0;
  std::size_t total_neg = 0;
  for (const auto& s : scored) (s.second == 1 ? total_pos : total_neg) += 1;
  result.curve.emplace_back(0.0, 0.0);
  std::size_t tp = 0;
  std::size_t fp = 0;
  double auc = 0.0;
  std::size_t i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    std::size_t d_tp = 0;
    std::size_t d_fp = 0;
    while (j < scored.size() && scored[j].first == scored[i].first) {
      (scored[j].second == 1 ? d_tp : d_fp) += 1;
      ++j;
    }
    const double fpr0 = static_cast<double>(fp) / static_cast<double>(total_neg);
    const double tpr0 = static_cast<double>(tp) / static_cast<double>(total_pos);
    tp += d_tp;
    fp += d_fp;
    const double fpr1 = static_cast<double>(fp) / static_cast<double>(total_neg);
    const double tpr1 = static_cast<double>(tp) / static_cast<double>(total_pos);
    auc += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0;
    result.curve.emplace_back(fpr1, tpr1);
    i = j;
  }
  result.auc = auc;
  return result;
}

void write_metric_csv(const std::vector<MetricRecord>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw error(path + ": cannot open file for writing");
  out.precision(17);
  out << "metric,subject,structure,value\n";
  for (const auto& row : rows) {
    out << row.metric << ',' << row.subject << ',' << row.structure << ',' << row.value << '\n';
  }
  if (!out) throw error(path + ": write failed");
}

void write_roc_csv(const std::vector<std::pair<double, double>>& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw error(path + ": cannot open file for writing");
  out.precision(17);
  out << "fpr,tpr\n";
  for (const auto& [fpr, tpr] : curve) out << fpr << ',' << tpr << '\n';
  if (!out) throw error(path + ": write failed");
}

}  // namespace longseg
