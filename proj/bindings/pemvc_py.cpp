// Python surface over the core library: numpy in, numpy out, float64 only.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pemvc/harness.hpp"

namespace py = pybind11;
using namespace pemvc;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor<double> to_tensor(const Arr& a) {
  std::vector<int> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i)
    shape[static_cast<size_t>(i)] = static_cast<int>(a.shape(i));
  Tensor<double> t(shape);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

Arr to_array(const Tensor<double>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Arr a(shape);
  std::copy(t.data(), t.data() + t.numel(), a.mutable_data());
  return a;
}

py::object opt(const std::optional<double>& v) {
  if (!v) return py::none();
  return py::float_(*v);
}

}  // namespace

PYBIND11_MODULE(_pemvc, m) {
  m.doc() = "multi-view attention fusion core (CPU, float64 python surface)";

  m.def(
      "softmax_rows",
      [](const Arr& a) { return to_array(ops::softmax_rows(to_tensor(a))); },
      py::arg("a"), "Row-wise softmax over the last axis of a 2-D+ array.");

  m.def(
      "make_views",
      [](const Arr& x) {
        ViewSet<double> vs = make_views(to_tensor(x));
        return py::make_tuple(to_array(vs.views[0]), to_array(vs.views[1]),
                              to_array(vs.views[2]));
      },
      py::arg("x"),
      "Fold a (B,C,D,H,W) volume into the three channels-last views.");

  m.def(
      "unfold_view",
      [](const Arr& view, int t, const std::vector<int>& origin_shape) {
        if (origin_shape.size() != 5)
          throw ShapeError("unfold_view: origin_shape must have 5 entries");
        Tensor<double> zero(origin_shape);
        ViewSet<double> vs = make_views(zero);
        return to_array(unfold_view(vs, t, to_tensor(view)));
      },
      py::arg("view"), py::arg("t"), py::arg("origin_shape"),
      "Fold a view-layout array back to the canonical (B,C,D,H,W) layout.");

  m.def(
      "mvcs_forward",
      [](const Arr& x, uint64_t seed, bool residual, int channel_ratio) {
        Tensor<double> xt = to_tensor(x);
        if (xt.rank() != 5)
          throw ShapeError("mvcs_forward: expected a 5-D (B,C,D,H,W) array");
        Rng rng(seed);
        MvcsParams<double> p =
            init_mvcs_params<double>(xt.dim(1), rng, channel_ratio);
        MvcsConfig cfg;
        cfg.residual = residual;
        cfg.channel_ratio = channel_ratio;
        return to_array(mvcs_block_forward(xt, p, cfg));
      },
      py::arg("x"), py::arg("seed") = 0, py::arg("residual") = true,
      py::arg("channel_ratio") = 1,
      "Run one seeded multi-view coupled self-attention block.");

  m.def(
      "cmaf_match",
      [](const Arr& x_tokens, const Arr& y_tokens, uint64_t seed) {
        Tensor<double> xt = to_tensor(x_tokens), yt = to_tensor(y_tokens);
        if (xt.rank() != 3 || yt.rank() != 3)
          throw ShapeError("cmaf_match: token arrays must be (B,S,d)");
        CmafConfig cfg;
        cfg.tokens = xt.dim(1);
        cfg.token_dim = xt.dim(2);
        cfg.common_dim = cfg.tokens * cfg.token_dim;
        cfg.image_dim = cfg.common_dim;
        cfg.emr_dim = cfg.common_dim;
        Rng rng(seed);
        CmafParams<double> params = init_cmaf_params<double>(cfg, rng);
        TokenPair<double> tokens;
        tokens.x = xt;
        tokens.y = yt;
        MatchDegrees<double> md = match_degrees(tokens, params);
        CrossContexts<double> ctx = cross_attention_apply(md, tokens);
        py::dict out;
        out["beta"] = to_array(md.beta);
        out["rho"] = to_array(md.rho);
        out["t2i"] = to_array(ctx.t2i);
        out["i2t"] = to_array(ctx.i2t);
        return out;
      },
      py::arg("x_tokens"), py::arg("y_tokens"), py::arg("seed") = 0,
      "Bidirectional match degrees and cross contexts for two token sets.");

  m.def(
      "roc_auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        return opt(roc_auc(scores, labels));
      },
      py::arg("scores"), py::arg("labels"),
      "Rank-based AUROC; None when only one class is present.");

  m.def(
      "confusion",
      [](const std::vector<double>& scores, const std::vector<int>& labels,
         double threshold) {
        MetricsReport r = confusion_metrics(scores, labels, threshold);
        py::dict d;
        d["tp"] = r.tp;
        d["fp"] = r.fp;
        d["tn"] = r.tn;
        d["fn"] = r.fn;
        d["acc"] = opt(r.acc);
        d["f1"] = opt(r.f1);
        d["sensitivity"] = opt(r.sensitivity);
        d["specificity"] = opt(r.specificity);
        d["ppv"] = opt(r.ppv);
        d["npv"] = opt(r.npv);
        return d;
      },
      py::arg("scores"), py::arg("labels"), py::arg("threshold") = 0.5,
      "Confusion-matrix metrics at a threshold (score >= threshold is positive).");

  m.def(
      "generate",
      [](const std::string& out_dir, int n, uint64_t seed, int depth,
         int height, int width) {
        GenConfig cfg;
        cfg.n_patients = n;
        cfg.seed = seed;
        cfg.depth = depth;
        cfg.height = height;
        cfg.width = width;
        Dataset ds = generate_dataset(cfg);
        split_patients(ds.records, {0.8, 0.1, 0.1}, seed);
        save_dataset(ds, out_dir);
        int positives = 0;
        for (const auto& r : ds.records) positives += r.label;
        return positives;
      },
      py::arg("out_dir"), py::arg("n") = 512, py::arg("seed") = 0,
      py::arg("depth") = 16, py::arg("height") = 32, py::arg("width") = 32,
      "Generate, split, and save a paired synthetic dataset; returns the "
      "positive count.");

  m.def(
      "train",
      [](const std::string& data_dir, const std::string& arm, int epochs,
         double lr, int batch, uint64_t seed, const std::string& out) {
        RunConfig cfg;
        cfg.data_dir = data_dir;
        cfg.arm = arm;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.batch = batch;
        cfg.seed = seed;
        cfg.out_path = out;
        TrainResult r = run_train(cfg);
        py::list hist;
        for (const auto& e : r.history) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["train_loss"] = e.train_loss;
          d["val_auroc"] = opt(e.val_auroc);
          hist.append(d);
        }
        py::dict res;
        res["history"] = hist;
        res["best_epoch"] = r.best_epoch;
        res["best_val_auroc"] = opt(r.best_val_auroc);
        return res;
      },
      py::arg("data_dir"), py::arg("arm") = "full", py::arg("epochs") = 20,
      py::arg("lr") = 0.01, py::arg("batch") = 16, py::arg("seed") = 1,
      py::arg("out") = "",
      "Train one arm; returns per-epoch history and the best epoch.");

  m.def(
      "evaluate",
      [](const std::string& ckpt, const std::string& data_dir,
         const std::string& split) {
        return run_evaluate(ckpt, data_dir, split).json_line;
      },
      py::arg("ckpt"), py::arg("data_dir"), py::arg("split") = "test",
      "Evaluate a checkpoint on a split; returns the metrics JSON line.");

  m.def(
      "gradcheck",
      [](const std::string& scope) {
        py::list out;
        for (const auto& r : gradcheck_suite(scope)) {
          py::dict d;
          d["name"] = r.name;
          d["max_rel_err"] = r.max_rel_err;
          d["pass"] = r.pass;
          out.append(d);
        }
        return out;
      },
      py::arg("scope") = "all",
      "Finite-difference gradient check over the named scope.");

  m.def("gradcheck_names", [] { return gradcheck_unit_names(); },
        "Names accepted by gradcheck().");

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
}
