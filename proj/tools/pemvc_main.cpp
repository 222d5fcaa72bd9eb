#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pemvc/dataset.hpp"
#include "pemvc/errors.hpp"
#include "pemvc/harness.hpp"
#include "pemvc/model.hpp"

namespace {

// CLI flag > config-file key > built-in default.
void merge_config_file(CLI::App* sub, pemvc::RunConfig& cfg,
                       const std::string& config_path) {
  if (config_path.empty()) return;
  pemvc::RunConfig file_cfg;
  pemvc::apply_config_file(file_cfg, config_path);
  auto keep_cli = [sub](const char* flag) { return sub->count(flag) > 0; };
  if (!keep_cli("--arm")) cfg.arm = file_cfg.arm;
  if (!keep_cli("--epochs")) cfg.epochs = file_cfg.epochs;
  if (!keep_cli("--lr")) cfg.lr = file_cfg.lr;
  if (!keep_cli("--batch")) cfg.batch = file_cfg.batch;
  if (!keep_cli("--seed")) cfg.seed = file_cfg.seed;
  if (!keep_cli("--seeds")) cfg.seeds = file_cfg.seeds;
  if (!keep_cli("--data")) cfg.data_dir = file_cfg.data_dir;
  if (!keep_cli("--out")) cfg.out_path = file_cfg.out_path;
  if (!keep_cli("--split")) cfg.split = file_cfg.split;
  if (!keep_cli("--precision")) cfg.precision = file_cfg.precision;
}

int run(int argc, char** argv) {
  CLI::App app{"PE prediction from paired 3D volumes and tabular records: "
               "multi-view attention backbone, EMR pipeline, cross-modal fusion"};
  app.require_subcommand(1);

  pemvc::RunConfig cfg;
  std::string config_path, ckpt_path, scope = "all";
  int gen_n = 512;

  CLI::App* gen = app.add_subcommand("gen", "generate the synthetic paired dataset");
  gen->add_option("--out", cfg.out_path, "dataset directory")->required();
  gen->add_option("--n", gen_n, "number of patients (default 512)");
  gen->add_option("--seed", cfg.seed, "generator seed");

  CLI::App* train = app.add_subcommand("train", "train one arm");
  train->add_option("--data", cfg.data_dir, "dataset directory");
  train->add_option("--out", cfg.out_path, "checkpoint path to write");
  train->add_option("--arm", cfg.arm, "full|image|emr|nocmaf");
  train->add_option("--epochs", cfg.epochs, "training epochs (default 20)");
  train->add_option("--lr", cfg.lr, "SGD learning rate (default 0.01)");
  train->add_option("--batch", cfg.batch, "mini-batch size (default 16)");
  train->add_option("--seed", cfg.seed, "run seed");
  train->add_option("--precision", cfg.precision, "f32|f64");
  train->add_option("--config", config_path, "flat JSON config file");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--data", cfg.data_dir, "dataset directory");
  eval->add_option("--split", cfg.split, "train|val|test (default test)");
  eval->add_option("--arm", cfg.arm, "expected arm (checked against checkpoint)");
  eval->add_option("--out", cfg.out_path, "also write the metrics line here");
  eval->add_option("--config", config_path, "flat JSON config file");

  CLI::App* ablate = app.add_subcommand("ablate", "train+evaluate all four arms per seed");
  ablate->add_option("--data", cfg.data_dir, "dataset directory");
  ablate->add_option("--out", cfg.out_path, "metrics JSON-lines path");
  ablate->add_option("--seeds", cfg.seeds, "seed list (default 1,2,3)")->delimiter(',');
  ablate->add_option("--epochs", cfg.epochs, "training epochs per run");
  ablate->add_option("--lr", cfg.lr, "SGD learning rate");
  ablate->add_option("--batch", cfg.batch, "mini-batch size");
  ablate->add_option("--precision", cfg.precision, "f32|f64");
  ablate->add_option("--config", config_path, "flat JSON config file");

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference verification suite");
  gradcheck->add_option("--scope", scope, "all or one unit name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    pemvc::GenConfig gc;
    gc.n_patients = gen_n;
    gc.seed = cfg.seed;
    pemvc::Dataset ds = pemvc::generate_dataset(gc);
    pemvc::split_patients(ds.records, {0.8, 0.1, 0.1}, gc.seed ^ pemvc::kSaltOrder);
    pemvc::save_dataset(ds, cfg.out_path);
    int pos = 0;
    for (const auto& r : ds.records) pos += r.label;
    std::printf("wrote %d patients to %s (%d positive, train/val/test %zu/%zu/%zu)\n",
                gc.n_patients, cfg.out_path.c_str(), pos,
                ds.rows_in_split("train").size(), ds.rows_in_split("val").size(),
                ds.rows_in_split("test").size());
    return 0;
  }

  if (train->parsed()) {
    merge_config_file(train, cfg, config_path);
    pemvc::TrainResult res = pemvc::run_train(cfg);
    for (const auto& h : res.history) {
      if (h.val_auroc)
        std::printf("epoch %d train_loss %.6f val_auroc %.6f\n", h.epoch,
                    h.train_loss, *h.val_auroc);
      else
        std::printf("epoch %d train_loss %.6f val_auroc n/a\n", h.epoch, h.train_loss);
    }
    if (res.best_val_auroc)
      std::printf("best epoch %d (val AUROC %.6f)\n", res.best_epoch,
                  *res.best_val_auroc);
    if (!cfg.out_path.empty())
      std::printf("checkpoint written to %s\n", cfg.out_path.c_str());
    return 0;
  }

  if (eval->parsed()) {
    merge_config_file(eval, cfg, config_path);
    const std::string expect_arm = eval->count("--arm") ? cfg.arm : "";
    pemvc::EvalResult res =
        pemvc::run_evaluate(ckpt_path, cfg.data_dir, cfg.split, expect_arm);
    std::printf("%s\n", res.json_line.c_str());
    if (!cfg.out_path.empty()) {
      std::ofstream out(cfg.out_path, std::ios::binary);
      if (!out) throw pemvc::DataError("cannot open for writing: " + cfg.out_path);
      out << res.json_line << '\n';
    }
    return 0;
  }

  if (ablate->parsed()) {
    merge_config_file(ablate, cfg, config_path);
    pemvc::AblationResult res = pemvc::run_ablation(cfg);
    for (const auto& line : res.json_lines) std::printf("%s\n", line.c_str());
    std::printf("\n%s", res.summary.c_str());
    if (!cfg.out_path.empty())
      std::printf("metrics written to %s\n", cfg.out_path.c_str());
    return 0;
  }

  // gradcheck
  std::vector<pemvc::GradCheckResult> results = pemvc::gradcheck_suite(scope);
  bool all_pass = true;
  std::printf("%-18s %-12s %s\n", "unit", "max_rel_err", "status");
  for (const auto& r : results) {
    std::printf("%-18s %-12.3e %s\n", r.name.c_str(), r.max_rel_err,
                r.pass ? "PASS" : "FAIL");
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const pemvc::UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const pemvc::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const pemvc::DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const pemvc::FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}
