#include "pemvc/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "pemvc/errors.hpp"
#include "pemvc/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "on-disk format is little-endian; big-endian hosts unsupported");

namespace pemvc {
namespace {

constexpr char kMagic[4] = {'P', 'E', 'M', 'V'};
constexpr uint32_t kVersion = 1;

std::string pid_of(int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "p%04d", i);
  return buf;
}

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

}  // namespace

void GenConfig::validate() const {
  if (n_patients < 1) throw ConfigError("gen: n_patients must be positive");
  if (channels < 1 || depth < 1 || height < 1 || width < 1)
    throw ConfigError("gen: volume dims must be positive");
  if (informative_cols < 0 || decoy_cols < 0 || noise_cols < 0 || total_cols() < 1)
    throw ConfigError("gen: column counts invalid");
  if (p_img <= 0.0 || p_img > 1.0 || p_emr <= 0.0 || p_emr > 1.0)
    throw ConfigError("gen: signal probabilities must lie in (0,1]");
  if (sigma_img < 0.0 || sigma_emr < 0.0)
    throw ConfigError("gen: noise levels must be non-negative");
}

TabularFrame Dataset::to_frame() const {
  TabularFrame f;
  f.columns = columns;
  for (const auto& r : records) f.patient_ids.push_back(r.patient_id);
  f.values.reserve(records.size() * columns.size());
  for (const auto& r : records)
    f.values.insert(f.values.end(), r.tabular.begin(), r.tabular.end());
  f.missing.assign(f.values.size(), 0);
  return f;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

std::vector<int> Dataset::rows_in_split(const std::string& split) const {
  std::vector<int> out;
  for (size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

// Draw order per record, fixed so seeds pin byte-identical datasets:
//   1. label ~ bernoulli(0.5)
//   2. latent u: 4 standard normals
//   3. positives only: carrier redraw loop, bernoulli(p_img) then
//      bernoulli(p_emr) per iteration, until at least one holds
//   4. voxel noise: C*D*H*W normals in row-major order
//   5. tabular columns in column order: one normal for each informative and
//      noise column; decoy columns draw nothing
// Blob geometry/intensity and informative shifts are affine in (y, u) and
// consume no extra draws.
Dataset generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Dataset ds;
  ds.channels = cfg.channels;
  ds.depth = cfg.depth;
  ds.height = cfg.height;
  ds.width = cfg.width;
  for (int j = 0; j < cfg.informative_cols; ++j) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "sig_%02d", j);
    ds.columns.emplace_back(buf);
  }
  for (int j = 0; j < cfg.decoy_cols; ++j) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "const_%02d", j);
    ds.columns.emplace_back(buf);
  }
  for (int j = 0; j < cfg.noise_cols; ++j) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "noise_%02d", j);
    ds.columns.emplace_back(buf);
  }

  const int D = cfg.depth, H = cfg.height, W = cfg.width;
  int positives = 0;
  for (int i = 0; i < cfg.n_patients; ++i) {
    PatientRecord rec;
    rec.patient_id = pid_of(i);
    rec.label = rng.bernoulli(0.5) ? 1 : 0;
    positives += rec.label;
    for (auto& v : rec.latent) v = rng.normal();
    if (rec.label == 1) {
      do {
        rec.image_carrier = rng.bernoulli(cfg.p_img);
        rec.emr_carrier = rng.bernoulli(cfg.p_emr);
      } while (!rec.image_carrier && !rec.emr_carrier);
    }

    rec.volume.resize(static_cast<size_t>(cfg.voxels()));
    for (auto& v : rec.volume) v = static_cast<float>(rng.normal() * cfg.sigma_img);
    if (rec.image_carrier) {
      const auto& u = rec.latent;
      const double cd = std::clamp(D / 2.0 + u[0] * D / 10.0, 3.0, D - 4.0);
      const double ch = std::clamp(H / 2.0 + u[1] * H / 10.0, 7.0, H - 8.0);
      const double cw = std::clamp(W / 2.0 + u[2] * W / 10.0, 7.0, W - 8.0);
      rec.blob_center = {cd, ch, cw};
      const double amp = 1.5 + 0.25 * u[3];
      for (int c = 0; c < cfg.channels; ++c)
        for (int d = 0; d < D; ++d)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
              const double rd = (d - cd) / kBlobRadii[0];
              const double rh = (h - ch) / kBlobRadii[1];
              const double rw = (w - cw) / kBlobRadii[2];
              const double r2 = rd * rd + rh * rh + rw * rw;
              if (r2 > 6.0) continue;
              const size_t idx =
                  ((static_cast<size_t>(c) * D + d) * H + h) * W + w;
              rec.volume[idx] += static_cast<float>(amp * std::exp(-0.5 * r2));
            }
    }

    rec.tabular.resize(static_cast<size_t>(cfg.total_cols()));
    int col = 0;
    for (int j = 0; j < cfg.informative_cols; ++j, ++col) {
      double v = rng.normal() * cfg.sigma_emr;
      if (rec.emr_carrier)
        v += 0.9 + 0.05 * j + 0.3 * rec.latent[static_cast<size_t>(j % 4)];
      rec.tabular[static_cast<size_t>(col)] = v;
    }
    for (int j = 0; j < cfg.decoy_cols; ++j, ++col)
      rec.tabular[static_cast<size_t>(col)] = 0.5 * j - 1.0;
    for (int j = 0; j < cfg.noise_cols; ++j, ++col)
      rec.tabular[static_cast<size_t>(col)] = rng.normal() * cfg.sigma_emr;

    ds.records.push_back(std::move(rec));
  }

  const double dev = std::abs(positives - cfg.n_patients / 2.0);
  if (dev > 3.0 * std::sqrt(cfg.n_patients / 4.0)) {
    std::fprintf(stderr,
                 "warning: label balance off (%d positives of %d); unusual draw\n",
                 positives, cfg.n_patients);
  }
  return ds;
}

void split_patients(std::vector<PatientRecord>& records,
                    std::array<double, 3> fractions, uint64_t seed) {
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw UsageError("split fractions must sum to 1");
  const int n = static_cast<int>(records.size());
  if (n < 3) throw DataError("need at least 3 patients to split");
  const int n_val = static_cast<int>(std::floor(n * fractions[1]));
  const int n_test = static_cast<int>(std::floor(n * fractions[2]));
  std::vector<int> order(records.size());
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  rng.shuffle(order);
  for (int i = 0; i < n; ++i) {
    auto& rec = records[static_cast<size_t>(order[static_cast<size_t>(i)])];
    rec.split = i < n_val ? "val" : (i < n_val + n_test ? "test" : "train");
  }
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::string vol_path = dir + "/volumes.bin";
  {
    std::ofstream out(vol_path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + vol_path);
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_u32(out, static_cast<uint32_t>(ds.records.size()));
    write_u32(out, static_cast<uint32_t>(ds.channels));
    write_u32(out, static_cast<uint32_t>(ds.depth));
    write_u32(out, static_cast<uint32_t>(ds.height));
    write_u32(out, static_cast<uint32_t>(ds.width));
    for (const auto& rec : ds.records) {
      if (static_cast<int64_t>(rec.volume.size()) != ds.voxels())
        throw InternalError("record " + rec.patient_id + " volume size mismatch");
      out.write(reinterpret_cast<const char*>(rec.volume.data()),
                static_cast<std::streamsize>(rec.volume.size() * 4));
    }
    if (!out) throw DataError("failed writing " + vol_path);
  }
  write_emr_csv(ds.to_frame(), dir + "/emr.csv");
  {
    const std::string man_path = dir + "/manifest.csv";
    std::ofstream out(man_path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + man_path);
    out << "patient_id,label,split\n";
    for (const auto& rec : ds.records)
      out << rec.patient_id << ',' << rec.label << ',' << rec.split << '\n';
    if (!out) throw DataError("failed writing " + man_path);
  }
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  const std::string vol_path = dir + "/volumes.bin";
  std::ifstream in(vol_path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + vol_path);
  const auto file_size = std::filesystem::file_size(vol_path);
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(vol_path + ": bad magic at byte 0");
  const uint32_t version = read_u32(in);
  if (!in || version != kVersion)
    throw FormatError(vol_path + ": unsupported version " +
                      std::to_string(version) + " at byte 4");
  const uint32_t n = read_u32(in);
  ds.channels = static_cast<int>(read_u32(in));
  ds.depth = static_cast<int>(read_u32(in));
  ds.height = static_cast<int>(read_u32(in));
  ds.width = static_cast<int>(read_u32(in));
  if (!in) throw FormatError(vol_path + ": truncated header at byte " +
                             std::to_string(file_size));
  if (ds.channels < 1 || ds.depth < 1 || ds.height < 1 || ds.width < 1)
    throw FormatError(vol_path + ": non-positive extent in header");
  const uint64_t expect = 28 + 4ull * n * static_cast<uint64_t>(ds.voxels());
  if (file_size != expect) {
    throw FormatError(vol_path + ": expected " + std::to_string(expect) +
                      " bytes, found " + std::to_string(file_size) +
                      (file_size < expect ? " (truncated at byte " : " (trailing data at byte ") +
                      std::to_string(std::min<uint64_t>(file_size, expect)) + ")");
  }
  ds.records.resize(n);
  for (auto& rec : ds.records) {
    rec.volume.resize(static_cast<size_t>(ds.voxels()));
    in.read(reinterpret_cast<char*>(rec.volume.data()),
            static_cast<std::streamsize>(rec.volume.size() * 4));
    if (!in) throw FormatError(vol_path + ": short read in volume payload");
  }

  TabularFrame frame = read_emr_csv(dir + "/emr.csv");
  if (frame.rows() != static_cast<int>(n))
    throw DataError("emr.csv has " + std::to_string(frame.rows()) +
                    " rows but volumes.bin holds " + std::to_string(n));
  ds.columns = frame.columns;

  const std::string man_path = dir + "/manifest.csv";
  std::ifstream man(man_path, std::ios::binary);
  if (!man) throw DataError("cannot open: " + man_path);
  std::string line;
  if (!std::getline(man, line) ||
      (line != "patient_id,label,split" && line != "patient_id,label,split\r"))
    throw FormatError(man_path + ": unexpected header");
  size_t row = 0;
  while (std::getline(man, line)) {
    if (line.empty() || line == "\r") continue;
    if (row >= ds.records.size())
      throw DataError(man_path + " has more rows than volumes.bin records");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const size_t c1 = line.find(','), c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw FormatError(man_path + ": malformed row " + std::to_string(row + 2));
    PatientRecord& rec = ds.records[row];
    rec.patient_id = line.substr(0, c1);
    const std::string lab = line.substr(c1 + 1, c2 - c1 - 1);
    if (lab != "0" && lab != "1")
      throw DataError(man_path + ": non-binary label '" + lab + "' for " +
                      rec.patient_id);
    rec.label = lab == "1" ? 1 : 0;
    rec.split = line.substr(c2 + 1);
    if (rec.split != "train" && rec.split != "val" && rec.split != "test" &&
        !rec.split.empty())
      throw DataError(man_path + ": unknown split '" + rec.split + "'");
    if (frame.patient_ids[row] != rec.patient_id)
      throw DataError("manifest/emr patient order differs at row " +
                      std::to_string(row) + ": '" + rec.patient_id + "' vs '" +
                      frame.patient_ids[row] + "'");
    rec.tabular.assign(frame.values.begin() + static_cast<long>(row * frame.columns.size()),
                       frame.values.begin() + static_cast<long>((row + 1) * frame.columns.size()));
    ++row;
  }
  if (row != ds.records.size())
    throw DataError(man_path + " has " + std::to_string(row) +
                    " rows but volumes.bin holds " + std::to_string(n));
  return ds;
}

}  // namespace pemvc
