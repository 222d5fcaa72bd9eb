#include "pemvc/emr.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "pemvc/errors.hpp"

namespace pemvc {
namespace {

std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  auto res = std::from_chars(b, e, out);
  return res.ec == std::errc() && res.ptr == e;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

bool is_missing_token(const std::string& s) {
  if (s.empty()) return true;
  std::string low = s;
  std::transform(low.begin(), low.end(), low.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return low == "nan";
}

// Population mean/variance over the observed (non-missing) fitting cells.
struct Moments {
  double mean = 0.0, var = 0.0;
  int count = 0;
};

Moments column_moments(const TabularFrame& f, const std::vector<int>& fit_rows, int c) {
  Moments m;
  double sum = 0.0;
  for (int r : fit_rows) {
    if (f.is_missing(r, c)) continue;
    sum += f.at(r, c);
    ++m.count;
  }
  if (m.count == 0) return m;
  m.mean = sum / m.count;
  double acc = 0.0;
  for (int r : fit_rows) {
    if (f.is_missing(r, c)) continue;
    const double d = f.at(r, c) - m.mean;
    acc += d * d;
  }
  m.var = acc / m.count;
  return m;
}

void check_fit_rows(const TabularFrame& f, const std::vector<int>& fit_rows) {
  if (fit_rows.empty()) throw DataError("no fitting rows provided");
  for (int r : fit_rows)
    if (r < 0 || r >= f.rows())
      throw UsageError("fitting row index " + std::to_string(r) + " out of range");
}

}  // namespace

TabularFrame read_emr_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CSV file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty CSV file: " + path);
  std::vector<std::string> header = split_csv_line(line);
  int id_col = -1;
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == "patient_id") id_col = static_cast<int>(i);
  if (id_col < 0) throw FormatError("CSV missing patient_id column: " + path);

  TabularFrame f;
  for (size_t i = 0; i < header.size(); ++i)
    if (static_cast<int>(i) != id_col) f.columns.push_back(header[i]);
  const int ncols = f.cols();

  std::unordered_set<std::string> seen;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " fields, got " +
                        std::to_string(fields.size()));
    }
    const std::string& pid = fields[static_cast<size_t>(id_col)];
    if (!seen.insert(pid).second)
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": duplicate patient_id '" + pid + "'");
    f.patient_ids.push_back(pid);
    int c = 0;
    for (size_t i = 0; i < fields.size(); ++i) {
      if (static_cast<int>(i) == id_col) continue;
      const std::string& tok = fields[i];
      if (is_missing_token(tok)) {
        f.values.push_back(0.0);
        f.missing.push_back(1);
      } else {
        double v;
        if (!parse_double(tok, v))
          throw DataError(path + ":" + std::to_string(lineno) +
                          ": unparsable number '" + tok + "' in column " +
                          f.columns[static_cast<size_t>(c)]);
        f.values.push_back(v);
        f.missing.push_back(0);
      }
      ++c;
    }
    (void)ncols;
  }
  return f;
}

void write_emr_csv(const TabularFrame& frame, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open CSV for writing: " + path);
  out << "patient_id";
  for (const auto& c : frame.columns) out << ',' << c;
  out << '\n';
  for (int r = 0; r < frame.rows(); ++r) {
    out << frame.patient_ids[static_cast<size_t>(r)];
    for (int c = 0; c < frame.cols(); ++c) {
      out << ',';
      if (!frame.is_missing(r, c)) out << fmt_double(frame.at(r, c));
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing CSV: " + path);
}

TabularFrame join_tables(const std::vector<TabularFrame>& tables,
                         const std::vector<std::string>& table_names) {
  if (tables.empty()) throw UsageError("join_tables: no tables given");
  for (const auto& t : tables) {
    std::unordered_set<std::string> seen;
    for (const auto& id : t.patient_ids)
      if (!seen.insert(id).second)
        throw DataError("join_tables: duplicate patient_id '" + id +
                        "' within one table");
  }
  if (tables.size() == 1) return tables[0];

  TabularFrame out;
  std::vector<int> col_base(tables.size());
  for (size_t t = 0; t < tables.size(); ++t) {
    col_base[t] = out.cols();
    std::string prefix =
        t < table_names.size() ? table_names[t] : "t" + std::to_string(t);
    for (const auto& c : tables[t].columns) out.columns.push_back(prefix + "." + c);
  }
  std::unordered_map<std::string, int> row_of;
  for (const auto& t : tables)
    for (const auto& id : t.patient_ids)
      if (row_of.emplace(id, static_cast<int>(row_of.size())).second)
        out.patient_ids.push_back(id);

  const size_t total = out.patient_ids.size() * static_cast<size_t>(out.cols());
  out.values.assign(total, 0.0);
  out.missing.assign(total, 1);
  for (size_t t = 0; t < tables.size(); ++t) {
    const TabularFrame& src = tables[t];
    for (int r = 0; r < src.rows(); ++r) {
      const int orow = row_of.at(src.patient_ids[static_cast<size_t>(r)]);
      for (int c = 0; c < src.cols(); ++c) {
        if (src.is_missing(r, c)) continue;
        const size_t idx = static_cast<size_t>(orow) * out.columns.size() +
                           static_cast<size_t>(col_base[t] + c);
        out.values[idx] = src.at(r, c);
        out.missing[idx] = 0;
      }
    }
  }
  return out;
}

TabularFrame drop_zero_variance(const TabularFrame& frame,
                                const std::vector<int>& fit_rows, double eps) {
  check_fit_rows(frame, fit_rows);
  std::vector<int> kept;
  for (int c = 0; c < frame.cols(); ++c)
    if (column_moments(frame, fit_rows, c).var >= eps) kept.push_back(c);
  if (kept.empty()) throw DataError("no informative features: every column has zero variance on the fitting rows");

  TabularFrame out;
  out.patient_ids = frame.patient_ids;
  for (int c : kept) out.columns.push_back(frame.columns[static_cast<size_t>(c)]);
  out.values.resize(static_cast<size_t>(frame.rows()) * kept.size());
  out.missing.resize(out.values.size());
  for (int r = 0; r < frame.rows(); ++r)
    for (size_t j = 0; j < kept.size(); ++j) {
      const size_t idx = static_cast<size_t>(r) * kept.size() + j;
      out.values[idx] = frame.at(r, kept[j]);
      out.missing[idx] = frame.is_missing(r, kept[j]) ? 1 : 0;
    }
  ColumnStats st;
  for (int c : kept) {
    Moments m = column_moments(frame, fit_rows, c);
    st.mean.push_back(m.mean);
    st.stddev.push_back(std::sqrt(m.var));
    st.keep.push_back(1);
  }
  out.fitted = std::move(st);
  return out;
}

TabularFrame zscore_normalize(const TabularFrame& frame,
                              const std::vector<int>& fit_rows) {
  check_fit_rows(frame, fit_rows);
  TabularFrame out;
  out.columns = frame.columns;
  out.patient_ids = frame.patient_ids;
  out.values.resize(frame.values.size());
  out.missing.assign(frame.values.size(), 0);  // imputed cells become 0
  ColumnStats st;
  for (int c = 0; c < frame.cols(); ++c) {
    Moments m = column_moments(frame, fit_rows, c);
    const double sd = std::sqrt(m.var);
    if (m.count == 0 || sd < 1e-12)
      throw InternalError("zscore_normalize: column '" +
                          frame.columns[static_cast<size_t>(c)] +
                          "' has (near-)zero std; variance filter must run first");
    st.mean.push_back(m.mean);
    st.stddev.push_back(sd);
    st.keep.push_back(1);
    for (int r = 0; r < frame.rows(); ++r) {
      const size_t idx = static_cast<size_t>(r) * frame.columns.size() +
                         static_cast<size_t>(c);
      out.values[idx] = frame.is_missing(r, c) ? 0.0 : (frame.at(r, c) - m.mean) / sd;
    }
  }
  out.fitted = std::move(st);
  return out;
}

SelectorModel select_features(const TabularFrame& frame,
                              const std::vector<int>& labels,
                              const std::vector<int>& fit_rows, int k,
                              uint64_t seed, int epochs, double lr,
                              double lambda) {
  check_fit_rows(frame, fit_rows);
  if (labels.size() != static_cast<size_t>(frame.rows()))
    throw UsageError("select_features: one label per frame row required");
  if (k < 1) throw UsageError("select_features: k must be >= 1");
  bool has_pos = false, has_neg = false;
  for (int r : fit_rows) {
    const int y = labels[static_cast<size_t>(r)];
    if (y != 0 && y != 1)
      throw DataError("select_features: label for row " + std::to_string(r) +
                      " is not binary");
    (y == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg)
    throw DataError("select_features: fitting rows contain a single class");

  const int ncols = frame.cols();
  std::vector<double> w(static_cast<size_t>(ncols), 0.0);
  double bias = 0.0;
  std::vector<int> order = fit_rows;
  Rng rng(seed);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (int r : order) {
      const double y = labels[static_cast<size_t>(r)] == 1 ? 1.0 : -1.0;
      double score = bias;
      for (int c = 0; c < ncols; ++c)
        if (!frame.is_missing(r, c)) score += w[static_cast<size_t>(c)] * frame.at(r, c);
      const bool active = y * score < 1.0;
      for (int c = 0; c < ncols; ++c) {
        double g = lambda * w[static_cast<size_t>(c)];
        if (active && !frame.is_missing(r, c)) g -= y * frame.at(r, c);
        w[static_cast<size_t>(c)] -= lr * g;
      }
      if (active) bias += lr * y;
    }
  }

  SelectorModel model;
  model.weights = std::move(w);
  model.bias = bias;
  model.k = std::min(k, ncols);
  model.ranking.resize(static_cast<size_t>(ncols));
  for (int c = 0; c < ncols; ++c) model.ranking[static_cast<size_t>(c)] = c;
  std::stable_sort(model.ranking.begin(), model.ranking.end(), [&](int a, int b) {
    return std::abs(model.weights[static_cast<size_t>(a)]) >
           std::abs(model.weights[static_cast<size_t>(b)]);
  });
  return model;
}

void EmrPipeline::fit(const TabularFrame& joined, const std::vector<int>& labels,
                      const std::vector<int>& fit_rows, const EmrPipelineConfig& cfg) {
  check_fit_rows(joined, fit_rows);
  if (labels.size() != static_cast<size_t>(joined.rows()))
    throw UsageError("EmrPipeline::fit: one label per row required");
  records_.clear();
  selected_idx_.clear();
  k_ = cfg.k;

  std::vector<int> kept;
  for (int c = 0; c < joined.cols(); ++c) {
    Moments m = column_moments(joined, fit_rows, c);
    Record rec;
    rec.name = joined.columns[static_cast<size_t>(c)];
    rec.mean = m.mean;
    rec.stddev = std::sqrt(m.var);
    rec.keep = m.var >= cfg.var_eps;
    records_.push_back(std::move(rec));
    if (records_.back().keep) kept.push_back(c);
  }
  if (kept.empty()) throw DataError("no informative features: every column has zero variance on the fitting rows");

  TabularFrame norm;
  norm.patient_ids = joined.patient_ids;
  for (int c : kept) norm.columns.push_back(joined.columns[static_cast<size_t>(c)]);
  norm.values.resize(static_cast<size_t>(joined.rows()) * kept.size());
  norm.missing.assign(norm.values.size(), 0);
  for (int r = 0; r < joined.rows(); ++r)
    for (size_t j = 0; j < kept.size(); ++j) {
      const Record& rec = records_[static_cast<size_t>(kept[j])];
      const size_t idx = static_cast<size_t>(r) * kept.size() + j;
      norm.values[idx] = joined.is_missing(r, kept[j])
                             ? 0.0
                             : (joined.at(r, kept[j]) - rec.mean) / rec.stddev;
    }

  SelectorModel sel = select_features(norm, labels, fit_rows, cfg.k,
                                      cfg.selector_seed);
  for (size_t j = 0; j < kept.size(); ++j)
    records_[static_cast<size_t>(kept[j])].weight = sel.weights[j];
  for (int j : sel.selected()) selected_idx_.push_back(kept[static_cast<size_t>(j)]);
}

std::vector<double> EmrPipeline::transform(const TabularFrame& joined,
                                           const std::vector<int>& rows) const {
  if (!fitted()) throw UsageError("EmrPipeline::transform before fit");
  if (joined.cols() != static_cast<int>(records_.size()))
    throw DataError("EmrPipeline::transform: frame has " +
                    std::to_string(joined.cols()) + " columns, pipeline fitted " +
                    std::to_string(records_.size()));
  for (size_t c = 0; c < records_.size(); ++c)
    if (joined.columns[c] != records_[c].name)
      throw DataError("EmrPipeline::transform: column '" + joined.columns[c] +
                      "' does not match fitted schema entry '" + records_[c].name + "'");
  std::vector<double> out;
  out.reserve(rows.size() * selected_idx_.size());
  for (int r : rows) {
    if (r < 0 || r >= joined.rows())
      throw UsageError("transform row index out of range");
    for (int c : selected_idx_) {
      const Record& rec = records_[static_cast<size_t>(c)];
      out.push_back(joined.is_missing(r, c) ? 0.0
                                            : (joined.at(r, c) - rec.mean) / rec.stddev);
    }
  }
  return out;
}

std::string EmrPipeline::serialize() const {
  if (!fitted()) throw UsageError("EmrPipeline::serialize before fit");
  std::ostringstream out;
  out << "pemvc-emr-stats 1\n";
  out << "k " << k_ << '\n';
  out << "columns " << records_.size() << '\n';
  for (const auto& r : records_) {
    out << r.name << '\t' << fmt_double(r.mean) << '\t' << fmt_double(r.stddev)
        << '\t' << (r.keep ? 1 : 0) << '\t' << fmt_double(r.weight) << '\n';
  }
  return out.str();
}

void EmrPipeline::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open stats file for writing: " + path);
  out << serialize();
  if (!out) throw DataError("failed writing stats file: " + path);
}

EmrPipeline EmrPipeline::deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "pemvc-emr-stats 1")
    throw FormatError("stats data has unknown header line");
  EmrPipeline p;
  size_t ncols = 0;
  if (!std::getline(in, line) || line.rfind("k ", 0) != 0)
    throw FormatError("stats data missing k line");
  p.k_ = std::stoi(line.substr(2));
  if (!std::getline(in, line) || line.rfind("columns ", 0) != 0)
    throw FormatError("stats data missing columns line");
  ncols = static_cast<size_t>(std::stoul(line.substr(8)));
  for (size_t i = 0; i < ncols; ++i) {
    if (!std::getline(in, line))
      throw FormatError("stats file truncated at column " + std::to_string(i));
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, '\t')) parts.push_back(tok);
    if (parts.size() != 5)
      throw FormatError("stats file line " + std::to_string(i + 4) +
                        " has " + std::to_string(parts.size()) + " fields, want 5");
    Record r;
    r.name = parts[0];
    if (!parse_double(parts[1], r.mean) || !parse_double(parts[2], r.stddev) ||
        !parse_double(parts[4], r.weight))
      throw FormatError("stats file line " + std::to_string(i + 4) +
                        ": unparsable number");
    r.keep = parts[3] == "1";
    p.records_.push_back(std::move(r));
  }
  std::vector<int> kept;
  for (size_t c = 0; c < p.records_.size(); ++c)
    if (p.records_[c].keep) kept.push_back(static_cast<int>(c));
  std::stable_sort(kept.begin(), kept.end(), [&](int a, int b) {
    return std::abs(p.records_[static_cast<size_t>(a)].weight) >
           std::abs(p.records_[static_cast<size_t>(b)].weight);
  });
  const size_t take = std::min(kept.size(), static_cast<size_t>(p.k_));
  p.selected_idx_.assign(kept.begin(), kept.begin() + static_cast<long>(take));
  return p;
}

EmrPipeline EmrPipeline::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open stats file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return deserialize(buf.str());
  } catch (const FormatError& e) {
    throw FormatError(std::string(e.what()) + ": " + path);
  }
}

}  // namespace pemvc
