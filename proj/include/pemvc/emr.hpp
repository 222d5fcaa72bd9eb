#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pemvc/ops.hpp"
#include "pemvc/rng.hpp"
#include "pemvc/tensor.hpp"

namespace pemvc {

// Tabular side: join CSV tables on patient_id, drop zero-variance columns,
// z-score with training-split statistics, rank columns with a hinge-loss
// linear selector, embed the top-k through a frozen affine+ReLU, then run the
// EMR MLP. All fitted statistics come from the fitting rows only.

struct ColumnStats {
  std::vector<double> mean, stddev;
  std::vector<uint8_t> keep;
};

struct TabularFrame {
  std::vector<std::string> columns;      // excludes patient_id
  std::vector<std::string> patient_ids;  // one per row
  std::vector<double> values;            // rows x cols, row-major
  std::vector<uint8_t> missing;          // parallel to values
  std::optional<ColumnStats> fitted;

  int rows() const { return static_cast<int>(patient_ids.size()); }
  int cols() const { return static_cast<int>(columns.size()); }
  double at(int r, int c) const {
    return values[static_cast<size_t>(r) * columns.size() + static_cast<size_t>(c)];
  }
  double& at(int r, int c) {
    return values[static_cast<size_t>(r) * columns.size() + static_cast<size_t>(c)];
  }
  bool is_missing(int r, int c) const {
    return missing[static_cast<size_t>(r) * columns.size() + static_cast<size_t>(c)] != 0;
  }
  void resize(int r, int c) {
    patient_ids.resize(static_cast<size_t>(r));
    values.assign(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0);
    missing.assign(static_cast<size_t>(r) * static_cast<size_t>(c), 0);
  }
};

// CSV I/O: UTF-8, header row, a patient_id column, '.' decimal separator.
// Empty cells (and literal "nan") are treated as missing.
TabularFrame read_emr_csv(const std::string& path);
void write_emr_csv(const TabularFrame& frame, const std::string& path);

// Outer join on patient_id, rows in first-appearance order. With more than
// one table, column names gain a source prefix; a single table passes through
// unchanged. Duplicate patient_id inside one table is a data error.
TabularFrame join_tables(const std::vector<TabularFrame>& tables,
                         const std::vector<std::string>& table_names = {});

// Columns whose population variance over the fitting rows (observed cells
// only) falls below eps are removed; the decision applies to every row.
TabularFrame drop_zero_variance(const TabularFrame& frame,
                                const std::vector<int>& fit_rows,
                                double eps = 1e-12);

// (x - mean_fit) / std_fit per column with population std over the fitting
// rows' observed cells; missing cells impute to the fit mean, i.e. 0.
TabularFrame zscore_normalize(const TabularFrame& frame,
                              const std::vector<int>& fit_rows);

struct SelectorModel {
  std::vector<double> weights;  // one per frame column
  double bias = 0.0;
  std::vector<int> ranking;     // column indices by |weight| descending
  int k = 16;
  std::vector<int> selected() const {
    return {ranking.begin(),
            ranking.begin() + std::min<size_t>(ranking.size(), static_cast<size_t>(k))};
  }
};

// Hinge-loss linear classifier (L2 penalty lambda, plain SGD over shuffled
// rows), used only to rank columns by |weight|.
SelectorModel select_features(const TabularFrame& frame,
                              const std::vector<int>& labels,
                              const std::vector<int>& fit_rows, int k,
                              uint64_t seed = 1234, int epochs = 200,
                              double lr = 0.05, double lambda = 1e-3);

struct EmrPipelineConfig {
  double var_eps = 1e-12;
  int k = 16;
  uint64_t selector_seed = 1234;
};

// Composed fit/transform with a versioned plain-text stats file:
//   pemvc-emr-stats 1
//   k <k>
//   columns <n>
//   <name>\t<mean>\t<std>\t<keep>\t<weight>   (one line per joined column)
class EmrPipeline {
 public:
  struct Record {
    std::string name;
    double mean = 0.0, stddev = 0.0, weight = 0.0;
    bool keep = false;
  };

  void fit(const TabularFrame& joined, const std::vector<int>& labels,
           const std::vector<int>& fit_rows, const EmrPipelineConfig& cfg = {});
  // Row-major rows.size() x selected_count() matrix of z-scored selected
  // columns; the frame must carry the fitted schema.
  std::vector<double> transform(const TabularFrame& joined,
                                const std::vector<int>& rows) const;
  int selected_count() const { return static_cast<int>(selected_idx_.size()); }
  const std::vector<int>& selected_indices() const { return selected_idx_; }
  const std::vector<Record>& records() const { return records_; }
  int k() const { return k_; }
  bool fitted() const { return !records_.empty(); }

  std::string serialize() const;
  static EmrPipeline deserialize(const std::string& text);
  void save(const std::string& path) const;
  static EmrPipeline load(const std::string& path);

 private:
  std::vector<Record> records_;   // one per joined column, schema order
  std::vector<int> selected_idx_; // ranked top-k column indices
  int k_ = 16;
};

template <typename S>
Tensor<S> rows_to_tensor(const std::vector<double>& rowmajor, int rows, int cols) {
  Tensor<S> t({rows, cols});
  for (size_t i = 0; i < rowmajor.size(); ++i)
    t.data()[i] = static_cast<S>(rowmajor[i]);
  return t;
}

// Frozen seeded embedding: affine k -> E followed by ReLU. Not trained.
template <typename S>
struct EmbedParams {
  Tensor<S> w, b;
};

template <typename S>
EmbedParams<S> init_embed_params(int k, int embed_dim, uint64_t seed) {
  Rng rng(seed);
  EmbedParams<S> p;
  p.w = Tensor<S>({k, embed_dim});
  const double std = std::sqrt(2.0 / k);
  for (auto& v : p.w.vec()) v = static_cast<S>(rng.normal() * std);
  p.b = Tensor<S>({embed_dim});
  return p;
}

template <typename S>
Tensor<S> embed_records(const Tensor<S>& selected, const EmbedParams<S>& params,
                        Tape<S>* tape = nullptr) {
  if (selected.rank() != 2 || selected.dim(1) != params.w.dim(0)) {
    throw UsageError("embed_records: input has " +
                     (selected.rank() == 2 ? std::to_string(selected.dim(1))
                                           : std::string("rank!=2")) +
                     " columns, embedding expects " + std::to_string(params.w.dim(0)));
  }
  return ops::relu(ops::affine(selected, params.w, params.b, tape), tape);
}

template <typename S>
struct MlpParams {
  Tensor<S> w1, b1;          // E -> hidden
  Tensor<S> w2, b2;          // hidden -> F_emr
  Tensor<S> head_w, head_b;  // F_emr -> 1
};

template <typename S>
MlpParams<S> init_mlp_params(int embed_dim, int hidden, int feature_dim, Rng& rng) {
  auto mk = [&rng](int fin, int fout) {
    Tensor<S> w({fin, fout});
    const double std = std::sqrt(2.0 / fin);
    for (auto& v : w.vec()) v = static_cast<S>(rng.normal() * std);
    return w;
  };
  MlpParams<S> p;
  p.w1 = mk(embed_dim, hidden);
  p.b1 = Tensor<S>({hidden});
  p.w2 = mk(hidden, feature_dim);
  p.b2 = Tensor<S>({feature_dim});
  p.head_w = Tensor<S>({feature_dim, 1});  // logit layer starts at zero
  p.head_b = Tensor<S>({1});
  return p;
}

template <typename S>
struct MlpOut {
  Tensor<S> feature;  // n x F_emr
  Tensor<S> logit;    // n
};

template <typename S>
MlpOut<S> mlp_forward(const Tensor<S>& embed, MlpParams<S>& params, bool train,
                      Rng* rng, Tape<S>* tape = nullptr, double dropout_p = 0.2) {
  Tensor<S> h = ops::relu(ops::affine(embed, params.w1, params.b1, tape), tape);
  h = ops::dropout(h, dropout_p, train, rng, tape);
  Tensor<S> feature = ops::relu(ops::affine(h, params.w2, params.b2, tape), tape);
  Tensor<S> logit2d = ops::affine(feature, params.head_w, params.head_b, tape);
  MlpOut<S> out;
  out.feature = feature;
  out.logit = ops::reshape(logit2d, {embed.dim(0)}, tape);
  return out;
}

template <typename S>
void visit_mlp_params(MlpParams<S>& p, const std::string& prefix,
                      const std::function<void(const std::string&, Tensor<S>&)>& fn) {
  fn(prefix + ".w1", p.w1);
  fn(prefix + ".b1", p.b1);
  fn(prefix + ".w2", p.w2);
  fn(prefix + ".b2", p.b2);
  fn(prefix + ".head.w", p.head_w);
  fn(prefix + ".head.b", p.head_b);
}

}  // namespace pemvc
