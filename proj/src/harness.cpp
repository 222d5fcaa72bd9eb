#include "pemvc/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "pemvc/errors.hpp"
#include "pemvc/ops.hpp"

namespace pemvc {
namespace {

template <typename S>
constexpr uint8_t dtype_of() {
  return std::is_same_v<S, float> ? 0 : 1;
}

template <typename S>
std::vector<TensorBlob> collect_blobs(ModelParams<S>& params) {
  std::vector<TensorBlob> blobs;
  visit_model_params<S>(params, [&blobs](const std::string& name, Tensor<S>& t) {
    TensorBlob b;
    b.name = name;
    b.shape = t.shape();
    b.dtype = dtype_of<S>();
    b.bytes.resize(t.numel() * sizeof(S));
    std::memcpy(b.bytes.data(), t.data(), b.bytes.size());
    blobs.push_back(std::move(b));
  });
  return blobs;
}

template <typename S>
void materialize_blobs(ModelParams<S>& params, const std::vector<TensorBlob>& blobs,
                       const std::string& origin) {
  std::map<std::string, const TensorBlob*> by_name;
  for (const auto& b : blobs) by_name[b.name] = &b;
  size_t used = 0;
  visit_model_params<S>(params, [&](const std::string& name, Tensor<S>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw FormatError(origin + ": checkpoint lacks tensor '" + name + "'");
    const TensorBlob& b = *it->second;
    if (b.dtype != dtype_of<S>())
      throw FormatError(origin + ": dtype mismatch for '" + name + "'");
    if (b.shape != t.shape())
      throw FormatError(origin + ": shape mismatch for '" + name + "': stored " +
                        shape_str(b.shape) + ", model wants " + shape_str(t.shape()));
    std::memcpy(t.data(), b.bytes.data(), b.bytes.size());
    ++used;
  });
  if (used != blobs.size())
    throw FormatError(origin + ": checkpoint holds " + std::to_string(blobs.size()) +
                      " tensors, model uses " + std::to_string(used));
}

template <typename S>
ModelParams<S> snapshot_params(ModelParams<S>& params) {
  ModelParams<S> copy = params;  // handles still share storage
  visit_model_params<S>(copy, [](const std::string&, Tensor<S>& t) { t = t.clone(); });
  return copy;
}

template <typename S>
Batch<S> make_batch(const Dataset& ds, const std::vector<double>& emr_all, int k,
                    const std::vector<int>& rows, Arm arm) {
  Batch<S> b;
  const int n = static_cast<int>(rows.size());
  if (arm_uses_image(arm)) {
    b.volumes = Tensor<S>({n, ds.channels, ds.depth, ds.height, ds.width});
    S* out = b.volumes.data();
    const size_t vox = static_cast<size_t>(ds.voxels());
    for (int i = 0; i < n; ++i) {
      const auto& vol = ds.records[static_cast<size_t>(rows[static_cast<size_t>(i)])].volume;
      for (size_t v = 0; v < vox; ++v) out[static_cast<size_t>(i) * vox + v] = static_cast<S>(vol[v]);
    }
  }
  if (arm_uses_emr(arm)) {
    b.emr_selected = Tensor<S>({n, k});
    S* out = b.emr_selected.data();
    for (int i = 0; i < n; ++i) {
      const size_t base = static_cast<size_t>(rows[static_cast<size_t>(i)]) * static_cast<size_t>(k);
      for (int c = 0; c < k; ++c)
        out[static_cast<size_t>(i) * k + c] = static_cast<S>(emr_all[base + static_cast<size_t>(c)]);
    }
  }
  return b;
}

template <typename S>
Tensor<S> label_tensor(const Dataset& ds, const std::vector<int>& rows) {
  Tensor<S> t({static_cast<int>(rows.size())});
  for (size_t i = 0; i < rows.size(); ++i)
    t.data()[i] = static_cast<S>(ds.records[static_cast<size_t>(rows[i])].label);
  return t;
}

std::vector<int> labels_of(const Dataset& ds, const std::vector<int>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(ds.records[static_cast<size_t>(r)].label);
  return out;
}

template <typename S>
std::vector<double> scores_for_rows(ModelParams<S>& params, const ModelConfig& mc,
                                    const Dataset& ds, const std::vector<double>& emr_all,
                                    int k, const std::vector<int>& rows, int batch) {
  std::vector<double> scores;
  scores.reserve(rows.size());
  for (size_t start = 0; start < rows.size(); start += static_cast<size_t>(batch)) {
    const size_t stop = std::min(rows.size(), start + static_cast<size_t>(batch));
    std::vector<int> chunk(rows.begin() + static_cast<long>(start),
                           rows.begin() + static_cast<long>(stop));
    Batch<S> b = make_batch<S>(ds, emr_all, k, chunk, mc.arm);
    Tensor<S> logits =
        model_forward(b, params, mc, /*train=*/false, nullptr, static_cast<Tape<S>*>(nullptr));
    for (int64_t i = 0; i < logits.numel(); ++i) {
      const double z = static_cast<double>(logits.data()[i]);
      scores.push_back(1.0 / (1.0 + std::exp(-z)));
    }
  }
  return scores;
}

struct FittedEmr {
  EmrPipeline pipeline;
  std::vector<double> all_rows;  // n x k
  int k = 0;
};

FittedEmr fit_emr(const Dataset& ds, const std::vector<int>& train_rows) {
  FittedEmr out;
  TabularFrame frame = ds.to_frame();
  out.pipeline.fit(frame, ds.labels(), train_rows);
  out.k = out.pipeline.selected_count();
  std::vector<int> all(ds.records.size());
  std::iota(all.begin(), all.end(), 0);
  out.all_rows = out.pipeline.transform(frame, all);
  return out;
}

std::vector<double> transform_all(const EmrPipeline& pipeline, const Dataset& ds) {
  TabularFrame frame = ds.to_frame();
  std::vector<int> all(ds.records.size());
  std::iota(all.begin(), all.end(), 0);
  return pipeline.transform(frame, all);
}

// Bare SGD at the default lr occasionally blows up on the volumetric arms
// (loss goes non-finite after a few epochs on some seeds), so gradients are
// rescaled to a bounded global norm before each step. The norm is accumulated
// in a fixed order so training stays bit-reproducible.
constexpr double kMaxGradNorm = 5.0;

template <typename S>
void clip_grad_norm(const std::vector<Tensor<S>*>& params, S max_norm) {
  S sq = S(0);
  for (Tensor<S>* t : params) {
    if (!t->has_grad()) continue;
    for (const S g : t->grad_cref()) sq += g * g;
  }
  const S norm = std::sqrt(sq);
  if (!(norm > max_norm)) return;
  const S scale = max_norm / norm;
  for (Tensor<S>* t : params) {
    if (!t->has_grad()) continue;
    for (S& g : t->grad()) g *= scale;
  }
}

template <typename S>
TrainResult train_impl(const RunConfig& cfg, const Dataset& ds) {
  const Arm arm = arm_from_string(cfg.arm);
  const std::vector<int> train_rows = ds.rows_in_split("train");
  const std::vector<int> val_rows = ds.rows_in_split("val");
  if (train_rows.empty())
    throw DataError("train split is empty; was the dataset generated with splits?");
  if (val_rows.empty()) throw DataError("val split is empty");

  FittedEmr emr;
  if (arm_uses_emr(arm)) emr = fit_emr(ds, train_rows);

  const ModelConfig mc = model_config_for(arm, emr.k);
  ModelParams<S> params = init_model_params<S>(mc, cfg.seed);
  std::vector<Tensor<S>*> trainable;
  visit_trainable_params<S>(params, arm, [&trainable](const std::string&, Tensor<S>& t) {
    t.set_requires_grad(true);
    trainable.push_back(&t);
  });

  Rng order_rng(cfg.seed ^ kSaltOrder);
  Rng dropout_rng(cfg.seed ^ kSaltDropout);
  std::vector<int> order = train_rows;

  TrainResult res;
  ModelParams<S> best;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
      std::vector<int> rows(order.begin() + static_cast<long>(start),
                            order.begin() + static_cast<long>(stop));
      Batch<S> b = make_batch<S>(ds, emr.all_rows, emr.k, rows, arm);
      Tensor<S> labels = label_tensor<S>(ds, rows);
      Tape<S> tape;
      Tensor<S> logits = model_forward(b, params, mc, /*train=*/true, &dropout_rng, &tape);
      Tensor<S> loss = ops::bce_with_logits(logits, labels, &tape);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv))
        throw InternalError("training diverged: non-finite loss (arm " + cfg.arm +
                            ", seed " + std::to_string(cfg.seed) + ", epoch " +
                            std::to_string(epoch) + ", batch at " +
                            std::to_string(start) + ")");
      loss_sum += lv * static_cast<double>(rows.size());
      tape.backward(loss);
      clip_grad_norm(trainable, S(kMaxGradNorm));
      if (std::getenv("PEMVC_DEBUG_BATCH")) {
        double gn = 0.0, lm = 0.0;
        for (Tensor<S>* t : trainable)
          if (t->has_grad())
            for (const S g : t->grad_cref()) gn += static_cast<double>(g) * g;
        for (int64_t i = 0; i < logits.numel(); ++i)
          lm = std::max(lm, std::abs(static_cast<double>(logits.data()[i])));
        std::fprintf(stderr, "[dbg] ep %d at %zu loss %.4f |logit|max %.3f gnorm %.3f\n",
                     epoch, start, lv, lm, std::sqrt(gn));
      }
      sgd_step(trainable, static_cast<S>(cfg.lr));
    }
    std::vector<double> val_scores =
        scores_for_rows<S>(params, mc, ds, emr.all_rows, emr.k, val_rows, cfg.batch);
    EpochStat stat;
    stat.epoch = epoch;
    stat.train_loss = loss_sum / static_cast<double>(order.size());
    stat.val_auroc = roc_auc(val_scores, labels_of(ds, val_rows));
    res.history.push_back(stat);
    if (stat.val_auroc &&
        (!res.best_val_auroc || *stat.val_auroc > *res.best_val_auroc)) {
      res.best_val_auroc = stat.val_auroc;
      res.best_epoch = epoch;
      best = snapshot_params(params);
    }
  }
  if (res.best_epoch < 0) {  // val AUROC never defined; fall back to final params
    res.best_epoch = cfg.epochs;
    best = snapshot_params(params);
  }

  res.checkpoint.arm = cfg.arm;
  res.checkpoint.precision = cfg.precision;
  res.checkpoint.config_json = run_config_json(cfg);
  if (arm_uses_emr(arm)) res.checkpoint.pipeline_stats = emr.pipeline.serialize();
  res.checkpoint.tensors = collect_blobs(best);
  return res;
}

template <typename S>
EvalResult evaluate_checkpoint_impl(const CheckpointData& ck, const Dataset& ds,
                                    const std::string& split) {
  RunConfig echo;
  apply_config_json(echo, ck.config_json, "checkpoint config echo");
  const Arm arm = arm_from_string(ck.arm);
  const std::vector<int> rows = ds.rows_in_split(split);
  if (rows.empty()) throw DataError("split '" + split + "' is empty");

  EmrPipeline pipeline;
  std::vector<double> emr_all;
  int k = 0;
  if (arm_uses_emr(arm)) {
    pipeline = EmrPipeline::deserialize(ck.pipeline_stats);
    k = pipeline.selected_count();
    emr_all = transform_all(pipeline, ds);
  }
  const ModelConfig mc = model_config_for(arm, k);
  ModelParams<S> params = init_model_params<S>(mc, echo.seed);
  materialize_blobs(params, ck.tensors, "checkpoint");

  EvalResult out;
  std::vector<double> scores =
      scores_for_rows<S>(params, mc, ds, emr_all, k, rows, echo.batch);
  out.report = metrics_report(scores, labels_of(ds, rows));
  out.arm = ck.arm;
  out.split = split;
  out.seed = echo.seed;
  out.json_line = metrics_json_line(out.report, out.arm, split, out.seed);
  return out;
}

EvalResult evaluate_checkpoint(const CheckpointData& ck, const Dataset& ds,
                               const std::string& split) {
  if (ck.precision == "f32") return evaluate_checkpoint_impl<float>(ck, ds, split);
  if (ck.precision == "f64") return evaluate_checkpoint_impl<double>(ck, ds, split);
  throw FormatError("checkpoint has unknown precision '" + ck.precision + "'");
}

int worker_count(size_t jobs) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  long n = static_cast<long>(std::min<size_t>(hw, jobs));
  if (const char* env = std::getenv("PEMVC_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*env == '\0' || end == nullptr || *end != '\0' || v < 1)
      throw UsageError("PEMVC_THREADS must be a positive integer, got '" +
                       std::string(env) + "'");
    n = std::min<long>(v, static_cast<long>(jobs));
  }
  return static_cast<int>(std::max<long>(1, n));
}

std::optional<double> mean_of(const std::vector<std::optional<double>>& vals) {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : vals)
    if (v) {
      sum += *v;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

std::string fmt_metric(const std::optional<double>& v) {
  if (!v) return "  n/a";
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.3f", *v);
  return buf;
}

}  // namespace

ModelConfig model_config_for(Arm arm, int selected_k) {
  ModelConfig mc;
  mc.arm = arm;
  mc.selected_k = selected_k;
  return mc;  // all other extents are the fixed desk-scale defaults
}

TrainResult run_train(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.data_dir.empty()) throw UsageError("train needs --data");
  const Dataset ds = load_dataset(cfg.data_dir);
  TrainResult res = cfg.precision == "f64" ? train_impl<double>(cfg, ds)
                                           : train_impl<float>(cfg, ds);
  if (!cfg.out_path.empty()) save_checkpoint(res.checkpoint, cfg.out_path);
  return res;
}

EvalResult run_evaluate(const std::string& ckpt_path, const std::string& data_dir,
                        const std::string& split, const std::string& expect_arm) {
  if (ckpt_path.empty()) throw UsageError("eval needs --ckpt");
  if (data_dir.empty()) throw UsageError("eval needs --data");
  const CheckpointData ck = load_checkpoint(ckpt_path);
  if (!expect_arm.empty() && expect_arm != ck.arm)
    throw UsageError("checkpoint was trained for arm '" + ck.arm +
                     "', but arm '" + expect_arm + "' was requested");
  const Dataset ds = load_dataset(data_dir);
  EvalResult res = evaluate_checkpoint(ck, ds, split);
  if (split == "train" && !ds.rows_in_split("test").empty()) {
    EvalResult test = evaluate_checkpoint(ck, ds, "test");
    if (res.report.auroc && test.report.auroc &&
        *res.report.auroc < *test.report.auroc - 0.15) {
      std::fprintf(stderr,
                   "warning: train AUROC %.3f is far below test AUROC %.3f; "
                   "unusual fit\n",
                   *res.report.auroc, *test.report.auroc);
    }
  }
  return res;
}

AblationResult run_ablation(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.data_dir.empty()) throw UsageError("ablate needs --data");
  const Dataset ds = load_dataset(cfg.data_dir);

  struct Job {
    std::string arm;
    uint64_t seed = 0;
    EvalResult result;
    std::exception_ptr error;
  };
  std::vector<std::string> arms = {"emr", "full", "image", "nocmaf"};  // sorted
  std::vector<uint64_t> seeds = cfg.seeds;
  std::sort(seeds.begin(), seeds.end());
  std::vector<Job> jobs;
  for (const auto& arm : arms)
    for (uint64_t seed : seeds) jobs.push_back(Job{arm, seed, {}, nullptr});

  std::atomic<size_t> next{0};
  auto work = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      Job& job = jobs[i];
      try {
        RunConfig rc = cfg;
        rc.arm = job.arm;
        rc.seed = job.seed;
        rc.out_path.clear();
        TrainResult tr = rc.precision == "f64" ? train_impl<double>(rc, ds)
                                               : train_impl<float>(rc, ds);
        job.result = evaluate_checkpoint(tr.checkpoint, ds, "test");
      } catch (...) {
        job.error = std::current_exception();
      }
    }
  };
  const int workers = worker_count(jobs.size());
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < workers; ++i) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& job : jobs)
    if (job.error) std::rethrow_exception(job.error);

  AblationResult res;
  for (const auto& job : jobs) res.json_lines.push_back(job.result.json_line);

  // Mean-over-seeds line per arm: metric means, summed counts.
  for (const auto& arm : arms) {
    std::vector<const MetricsReport*> rs;
    for (const auto& job : jobs)
      if (job.arm == arm) rs.push_back(&job.result.report);
    MetricsReport mean;
    auto collect = [&rs](auto field) {
      std::vector<std::optional<double>> vals;
      for (const auto* r : rs) vals.push_back(r->*field);
      return mean_of(vals);
    };
    mean.auroc = collect(&MetricsReport::auroc);
    mean.acc = collect(&MetricsReport::acc);
    mean.f1 = collect(&MetricsReport::f1);
    mean.specificity = collect(&MetricsReport::specificity);
    mean.sensitivity = collect(&MetricsReport::sensitivity);
    mean.ppv = collect(&MetricsReport::ppv);
    mean.npv = collect(&MetricsReport::npv);
    for (const auto* r : rs) {
      mean.tp += r->tp;
      mean.fp += r->fp;
      mean.tn += r->tn;
      mean.fn += r->fn;
    }
    res.json_lines.push_back(metrics_json_line(mean, arm, "test", "mean"));
    res.mean_by_arm.emplace_back(arm, mean);
  }

  std::ostringstream tbl;
  tbl << "arm      AUROC   ACC     F1      Spec.   Sens.   PPV     NPV\n";
  for (const auto& arm : std::vector<std::string>{"image", "emr", "nocmaf", "full"}) {
    const MetricsReport* m = nullptr;
    for (const auto& [a, r] : res.mean_by_arm)
      if (a == arm) m = &r;
    tbl << arm << std::string(9 - arm.size(), ' ');
    tbl << fmt_metric(m->auroc) << "   " << fmt_metric(m->acc) << "   "
        << fmt_metric(m->f1) << "   " << fmt_metric(m->specificity) << "   "
        << fmt_metric(m->sensitivity) << "   " << fmt_metric(m->ppv) << "   "
        << fmt_metric(m->npv) << '\n';
  }
  tbl << "(test split, mean over " << seeds.size() << " seed"
      << (seeds.size() == 1 ? "" : "s") << ")\n";
  res.summary = tbl.str();

  if (!cfg.out_path.empty()) {
    std::ofstream out(cfg.out_path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + cfg.out_path);
    for (const auto& line : res.json_lines) out << line << '\n';
    if (!out) throw DataError("failed writing " + cfg.out_path);
  }
  return res;
}

}  // namespace pemvc
