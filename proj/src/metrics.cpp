#include "pemvc/metrics.hpp"

#include <algorithm>
#include <numeric>

#include <nlohmann/json.hpp>

#include "pemvc/errors.hpp"

namespace pemvc {
namespace {

void check_inputs(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty()) throw UsageError("metrics: empty input");
  if (scores.size() != labels.size())
    throw UsageError("metrics: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(labels.size()) + " labels");
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != 0 && labels[i] != 1)
      throw DataError("metrics: label at index " + std::to_string(i) +
                      " is not binary");
}

}  // namespace

std::optional<double> roc_auc(const std::vector<double>& scores,
                              const std::vector<int>& labels, std::string* note) {
  check_inputs(scores, labels);
  const int64_t n = static_cast<int64_t>(scores.size());
  int64_t n_pos = 0;
  for (int y : labels) n_pos += y;
  const int64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    if (note) *note = "AUROC undefined: labels contain a single class";
    return std::nullopt;
  }
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)];
  });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() &&
           scores[static_cast<size_t>(order[j + 1])] ==
               scores[static_cast<size_t>(order[i])])
      ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k)
      if (labels[static_cast<size_t>(order[k])] == 1) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  return (rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

MetricsReport confusion_metrics(const std::vector<double>& scores,
                                const std::vector<int>& labels, double threshold) {
  check_inputs(scores, labels);
  MetricsReport r;
  r.threshold = threshold;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool truth = labels[i] == 1;
    if (pred && truth) ++r.tp;
    else if (pred && !truth) ++r.fp;
    else if (!pred && truth) ++r.fn;
    else ++r.tn;
  }
  auto ratio = [](int num, int den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / den;
  };
  r.acc = ratio(r.tp + r.tn, r.n());
  r.sensitivity = ratio(r.tp, r.tp + r.fn);
  r.specificity = ratio(r.tn, r.tn + r.fp);
  r.ppv = ratio(r.tp, r.tp + r.fp);
  r.npv = ratio(r.tn, r.tn + r.fn);
  r.f1 = ratio(2 * r.tp, 2 * r.tp + r.fp + r.fn);
  return r;
}

MetricsReport metrics_report(const std::vector<double>& scores,
                             const std::vector<int>& labels) {
  MetricsReport r = confusion_metrics(scores, labels, 0.5);
  r.auroc = roc_auc(scores, labels, &r.note);
  return r;
}

namespace {

std::string json_line_impl(const MetricsReport& report, const std::string& arm,
                           const std::string& split, const nlohmann::ordered_json& seed) {
  nlohmann::ordered_json j;
  j["arm"] = arm;
  j["split"] = split;
  j["seed"] = seed;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
    else j[key] = nullptr;
  };
  put("auroc", report.auroc);
  put("acc", report.acc);
  put("f1", report.f1);
  put("specificity", report.specificity);
  put("sensitivity", report.sensitivity);
  put("ppv", report.ppv);
  put("npv", report.npv);
  j["threshold"] = report.threshold;
  j["tp"] = report.tp;
  j["fp"] = report.fp;
  j["tn"] = report.tn;
  j["fn"] = report.fn;
  j["n"] = report.n();
  if (!report.note.empty()) j["note"] = report.note;
  return j.dump();
}

}  // namespace

std::string metrics_json_line(const MetricsReport& report, const std::string& arm,
                              const std::string& split, uint64_t seed) {
  return json_line_impl(report, arm, split, seed);
}

std::string metrics_json_line(const MetricsReport& report, const std::string& arm,
                              const std::string& split, const std::string& seed_tag) {
  return json_line_impl(report, arm, split, seed_tag);
}

}  // namespace pemvc
