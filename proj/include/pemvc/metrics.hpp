#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace pemvc {

// Paper-style metric suite: AUROC (Mann-Whitney with average ranks for ties)
// plus thresholded confusion metrics. Metrics with zero denominators are
// explicit nulls in the JSON serialization, never 0.

struct MetricsReport {
  std::optional<double> auroc, acc, f1, specificity, sensitivity, ppv, npv;
  double threshold = 0.5;
  int tp = 0, fp = 0, tn = 0, fn = 0;
  std::string note;  // set when AUROC is undefined

  int n() const { return tp + fp + tn + fn; }
};

// AUROC = (sum of positive ranks - n_pos(n_pos+1)/2) / (n_pos * n_neg).
// Single-class labels yield nullopt with an explanatory note.
std::optional<double> roc_auc(const std::vector<double>& scores,
                              const std::vector<int>& labels,
                              std::string* note = nullptr);

// Predict positive iff score >= threshold; scores are post-sigmoid.
MetricsReport confusion_metrics(const std::vector<double>& scores,
                                const std::vector<int>& labels,
                                double threshold = 0.5);

MetricsReport metrics_report(const std::vector<double>& scores,
                             const std::vector<int>& labels);

// One JSON object per line with stable key order. The seed-tag overload is
// for aggregate lines (e.g. "mean").
std::string metrics_json_line(const MetricsReport& report, const std::string& arm,
                              const std::string& split, uint64_t seed);
std::string metrics_json_line(const MetricsReport& report, const std::string& arm,
                              const std::string& split, const std::string& seed_tag);

}  // namespace pemvc
