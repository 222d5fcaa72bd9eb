#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "pemvc/errors.hpp"
#include "pemvc/harness.hpp"

namespace pemvc {
namespace {

constexpr char kMagic[4] = {'P', 'E', 'M', 'C'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}

void write_u64(std::ofstream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}

void write_str(std::ofstream& out, const std::string& s) {
  write_u32(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

struct Reader {
  std::ifstream in;
  std::string path;
  uint64_t off = 0;

  void need(uint64_t n, const char* what) {
    off += n;
    if (!in) truncated(what);
  }
  [[noreturn]] void truncated(const char* what) {
    throw FormatError(path + ": truncated reading " + what + " near byte " +
                      std::to_string(off));
  }
  uint32_t u32(const char* what) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    need(4, what);
    return v;
  }
  uint64_t u64(const char* what) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    need(8, what);
    return v;
  }
  std::string str(const char* what) {
    const uint32_t n = u32(what);
    if (n > (1u << 28)) throw FormatError(path + ": implausible string length");
    std::string s(n, '\0');
    in.read(s.data(), n);
    need(n, what);
    return s;
  }
};

}  // namespace

void save_checkpoint(const CheckpointData& ck, const std::string& path) {
  std::set<std::string> names;
  for (const auto& t : ck.tensors)
    if (!names.insert(t.name).second)
      throw InternalError("checkpoint has duplicate tensor name " + t.name);
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 4);
  write_u32(out, kVersion);
  write_str(out, ck.arm);
  write_str(out, ck.precision);
  write_str(out, ck.config_json);
  write_str(out, ck.pipeline_stats);
  write_u32(out, static_cast<uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    write_str(out, t.name);
    out.put(static_cast<char>(t.dtype));
    write_u32(out, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) write_u32(out, static_cast<uint32_t>(d));
    write_u64(out, t.bytes.size());
    out.write(t.bytes.data(), static_cast<std::streamsize>(t.bytes.size()));
  }
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  Reader r;
  r.path = path;
  r.in.open(path, std::ios::binary);
  if (!r.in) throw DataError("cannot open checkpoint: " + path);
  char magic[4] = {};
  r.in.read(magic, 4);
  if (r.in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(path + ": bad magic at byte 0");
  r.off = 4;
  const uint32_t version = r.u32("version");
  if (version != kVersion)
    throw FormatError(path + ": unsupported version " + std::to_string(version));
  CheckpointData ck;
  ck.arm = r.str("arm");
  ck.precision = r.str("precision");
  ck.config_json = r.str("config echo");
  ck.pipeline_stats = r.str("pipeline stats");
  const uint32_t n = r.u32("tensor count");
  for (uint32_t i = 0; i < n; ++i) {
    TensorBlob t;
    t.name = r.str("tensor name");
    int c = r.in.get();
    r.need(1, "tensor dtype");
    t.dtype = static_cast<uint8_t>(c);
    if (t.dtype > 1) throw FormatError(path + ": unknown dtype for " + t.name);
    const uint32_t rank = r.u32("tensor rank");
    if (rank > 8) throw FormatError(path + ": implausible rank for " + t.name);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(static_cast<int>(r.u32("tensor dim")));
      numel *= t.shape.back();
    }
    const uint64_t bytes = r.u64("payload size");
    const uint64_t expect = static_cast<uint64_t>(numel) * (t.dtype == 0 ? 4 : 8);
    if (bytes != expect)
      throw FormatError(path + ": payload size mismatch for " + t.name);
    t.bytes.resize(bytes);
    r.in.read(t.bytes.data(), static_cast<std::streamsize>(bytes));
    r.need(bytes, "tensor payload");
    ck.tensors.push_back(std::move(t));
  }
  r.in.peek();
  if (!r.in.eof())
    throw FormatError(path + ": trailing data at byte " + std::to_string(r.off));
  return ck;
}

void RunConfig::validate() const {
  if (epochs < 1) throw UsageError("epochs must be >= 1");
  if (!(lr > 0.0)) throw UsageError("lr must be > 0");
  if (batch < 1) throw UsageError("batch must be >= 1");
  arm_from_string(arm);  // throws on unknown arm
  if (precision != "f32" && precision != "f64")
    throw UsageError("precision must be f32 or f64, got '" + precision + "'");
  if (split != "train" && split != "val" && split != "test")
    throw UsageError("split must be train, val or test, got '" + split + "'");
  if (seeds.empty()) throw UsageError("seeds list must not be empty");
}

void apply_config_json(RunConfig& cfg, const std::string& json_text,
                       const std::string& origin) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(origin + ": not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError(origin + ": config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "arm") cfg.arm = value.get<std::string>();
      else if (key == "epochs") cfg.epochs = value.get<int>();
      else if (key == "lr") cfg.lr = value.get<double>();
      else if (key == "batch") cfg.batch = value.get<int>();
      else if (key == "seed") cfg.seed = value.get<uint64_t>();
      else if (key == "seeds") cfg.seeds = value.get<std::vector<uint64_t>>();
      else if (key == "data") cfg.data_dir = value.get<std::string>();
      else if (key == "out") cfg.out_path = value.get<std::string>();
      else if (key == "split") cfg.split = value.get<std::string>();
      else if (key == "precision") cfg.precision = value.get<std::string>();
      else throw UsageError(origin + ": unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(origin + ": bad value for '" + key + "': " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  apply_config_json(cfg, text, path);
}

std::string run_config_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["arm"] = cfg.arm;
  j["epochs"] = cfg.epochs;
  j["lr"] = cfg.lr;
  j["batch"] = cfg.batch;
  j["seed"] = cfg.seed;
  j["seeds"] = cfg.seeds;
  j["data"] = cfg.data_dir;
  j["out"] = cfg.out_path;
  j["split"] = cfg.split;
  j["precision"] = cfg.precision;
  return j.dump();
}

}  // namespace pemvc
