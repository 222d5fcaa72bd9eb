#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pemvc/emr.hpp"

namespace pemvc {

// Synthetic paired dataset: 3D volumes plus a tabular row per patient with a
// planted, partially complementary signal. Positives carry the image signal
// (a bright ellipsoidal blob) with probability p_img and the EMR signal
// (shifted informative columns) with probability p_emr, redrawn until at
// least one holds — so neither modality alone can reach the joint ceiling.

struct GenConfig {
  int n_patients = 512;
  int channels = 1, depth = 16, height = 32, width = 32;
  int informative_cols = 12, decoy_cols = 4, noise_cols = 24;
  double p_img = 0.7, p_emr = 0.7;
  double sigma_img = 0.8, sigma_emr = 1.0;
  uint64_t seed = 0;

  void validate() const;
  int total_cols() const { return informative_cols + decoy_cols + noise_cols; }
  int64_t voxels() const {
    return static_cast<int64_t>(channels) * depth * height * width;
  }
};

struct PatientRecord {
  std::string patient_id;
  std::vector<float> volume;   // C*D*H*W, row-major
  std::vector<double> tabular; // raw feature row
  int label = 0;
  std::string split;           // "train" / "val" / "test", empty before split

  // Generator-only debug fields (not persisted; false/zero after load).
  bool image_carrier = false, emr_carrier = false;
  std::array<double, 4> latent{};       // shared latent u
  std::array<double, 3> blob_center{};  // d,h,w (valid when image_carrier)
};

struct Dataset {
  int channels = 1, depth = 16, height = 32, width = 32;
  std::vector<std::string> columns;
  std::vector<PatientRecord> records;

  int64_t voxels() const {
    return static_cast<int64_t>(channels) * depth * height * width;
  }
  TabularFrame to_frame() const;
  std::vector<int> labels() const;
  std::vector<int> rows_in_split(const std::string& split) const;
};

// Ellipsoid semi-axes shared by generator and tests.
inline constexpr std::array<double, 3> kBlobRadii{2.8, 6.0, 6.0};

Dataset generate_dataset(const GenConfig& cfg);

// Shuffles patient indices with the seed, then assigns floor(n*f_val) rows to
// val, floor(n*f_test) to test, and the remainder to train.
void split_patients(std::vector<PatientRecord>& records,
                    std::array<double, 3> fractions, uint64_t seed);

// On-disk layout: volumes.bin ("PEMV", version u32=1, u32 N,C,D,H,W, then
// N*C*D*H*W little-endian f32 in record order), emr.csv (patient_id first),
// manifest.csv (patient_id,label,split), all in the same record order.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace pemvc
