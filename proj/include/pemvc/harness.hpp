#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pemvc/dataset.hpp"
#include "pemvc/gradcheck.hpp"
#include "pemvc/metrics.hpp"
#include "pemvc/model.hpp"

namespace pemvc {

struct RunConfig {
  std::string arm = "full";
  int epochs = 20;        // paper-scale: 200
  double lr = 0.01;
  int batch = 16;         // paper-scale: 128
  uint64_t seed = 1;
  std::vector<uint64_t> seeds = {1, 2, 3};  // ablation protocol
  std::string data_dir;
  std::string out_path;
  std::string split = "test";
  std::string precision = "f32";

  void validate() const;
};

// Flat JSON of the RunConfig fields; unknown keys are rejected. Used both for
// --config files and for the config echo stored in checkpoints.
void apply_config_json(RunConfig& cfg, const std::string& json_text,
                       const std::string& origin);
void apply_config_file(RunConfig& cfg, const std::string& path);
std::string run_config_json(const RunConfig& cfg);

// Checkpoint container: "PEMC" magic, version, arm, precision, config echo,
// fitted EMR pipeline stats, then named tensors (name, dtype, shape, raw
// little-endian payload). load(save(m)) is bitwise for both precisions.
struct TensorBlob {
  std::string name;
  std::vector<int> shape;
  uint8_t dtype = 0;  // 0 = f32, 1 = f64
  std::vector<char> bytes;
};

struct CheckpointData {
  std::string arm;
  std::string precision;
  std::string config_json;
  std::string pipeline_stats;  // empty for the image arm
  std::vector<TensorBlob> tensors;
};

void save_checkpoint(const CheckpointData& ck, const std::string& path);
CheckpointData load_checkpoint(const std::string& path);

// Fixed desk-scale model shape shared by every run; only the arm and the
// EMR selection width vary.
ModelConfig model_config_for(Arm arm, int selected_k);

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;
  std::optional<double> val_auroc;
};

struct TrainResult {
  CheckpointData checkpoint;  // best-val-AUROC epoch
  std::vector<EpochStat> history;
  int best_epoch = -1;
  std::optional<double> best_val_auroc;
};

TrainResult run_train(const RunConfig& cfg);

struct EvalResult {
  MetricsReport report;
  std::string arm;
  std::string split;
  uint64_t seed = 0;
  std::string json_line;
};

EvalResult run_evaluate(const std::string& ckpt_path, const std::string& data_dir,
                        const std::string& split, const std::string& expect_arm = "");

// Trains and test-evaluates every arm for every seed (workers capped by
// PEMVC_THREADS), writes per-seed lines sorted by (arm, seed) plus one mean
// line per arm, and renders the ablation summary table.
struct AblationResult {
  std::vector<std::string> json_lines;
  std::string summary;
  std::vector<std::pair<std::string, MetricsReport>> mean_by_arm;
};

AblationResult run_ablation(const RunConfig& cfg);

// 64-bit finite-difference suite over tensor ops, the MVCS block, the CMAF
// stack, and both single-modality heads. scope is "all" or one unit name.
std::vector<GradCheckResult> gradcheck_suite(const std::string& scope = "all");
std::vector<std::string> gradcheck_unit_names();

}  // namespace pemvc
