#include "fedmeta/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "fedmeta/errors.hpp"
#include "fedmeta/rng.hpp"

namespace fedmeta {

std::vector<int> LabeledDataset::classes() const {
  std::vector<int> out;
  for (const auto &[c, rows] : class_index)
    out.push_back(c);
  return out;
}

std::size_t LabeledDataset::class_size(int c) const {
  auto it = class_index.find(c);
  return it == class_index.end() ? 0 : it->second.size();
}

void LabeledDataset::index_classes() {
  class_index.clear();
  for (std::size_t r = 0; r < labels.size(); ++r)
    class_index[labels[r]].push_back(r);
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t> &rows) const {
  LabeledDataset out;
  out.features = Matrix(rows.size(), dim());
  out.labels.reserve(rows.size());
  out.sample_ids.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = features.row(rows[i]);
    std::copy(src.begin(), src.end(), out.features.row(i).begin());
    out.labels.push_back(labels[rows[i]]);
    out.sample_ids.push_back(sample_ids[rows[i]]);
  }
  out.standardization = standardization;
  out.index_classes();
  return out;
}

CsvOptions arrhythmia_options() {
  CsvOptions o;
  o.label_column = -1;
  o.missing_marker = "?";
  // UCI code -> code ordered by class size.
  o.relabel = {{1, 1}, {10, 2}, {2, 3}, {6, 4}, {16, 5},
               {3, 6}, {4, 7},  {5, 8}, {9, 9}};
  o.keep_classes = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  return o;
}

void impute_median(Matrix &m) {
  std::vector<double> col;
  for (std::size_t j = 0; j < m.cols; ++j) {
    col.clear();
    for (std::size_t r = 0; r < m.rows; ++r)
      if (!std::isnan(m(r, j)))
        col.push_back(m(r, j));
    if (col.size() == m.rows)
      continue;
    double med = 0.0;
    if (!col.empty()) {
      std::sort(col.begin(), col.end());
      const std::size_t n = col.size();
      med = n % 2 ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
    }
    for (std::size_t r = 0; r < m.rows; ++r)
      if (std::isnan(m(r, j)))
        m(r, j) = med;
  }
}

Standardization fit_standardization(const Matrix &m) {
  Standardization s;
  s.mean.assign(m.cols, 0.0);
  s.std.assign(m.cols, 0.0);
  if (m.rows == 0)
    return s;
  const double n = static_cast<double>(m.rows);
  for (std::size_t j = 0; j < m.cols; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < m.rows; ++r)
      mean += m(r, j);
    mean /= n;
    double var = 0.0;
    for (std::size_t r = 0; r < m.rows; ++r)
      var += (m(r, j) - mean) * (m(r, j) - mean);
    var /= n;
    s.mean[j] = mean;
    const double sd = std::sqrt(var);
    // Relative threshold: columns that only differ by rounding are constant.
    s.std[j] = sd > 1e-12 * std::max(1.0, std::abs(mean)) ? sd : 0.0;
  }
  return s;
}

void apply_standardization(Matrix &m, const Standardization &s) {
  if (s.mean.size() != m.cols)
    throw LayoutError("standardization width does not match data");
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t j = 0; j < m.cols; ++j)
      m(r, j) = s.std[j] > 0.0 ? (m(r, j) - s.mean[j]) / s.std[j] : 0.0;
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos
                                         ? std::string_view::npos
                                         : pos - start));
    if (pos == std::string_view::npos)
      break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
    s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
    s.remove_suffix(1);
  return s;
}

bool parse_double(std::string_view s, double &out) {
  // from_chars for double is available in libstdc++ >= 11
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

} // namespace

LabeledDataset load_csv(const std::string &path, const CsvOptions &opts) {
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open " + path);

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t width = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto view = trim(line);
    if (view.empty())
      continue;
    auto fields = split_fields(view);
    if (width == 0)
      width = fields.size();
    if (fields.size() != width || width < 2)
      throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(width) + " fields, got " +
                      std::to_string(fields.size()));
    const auto label_col = static_cast<std::size_t>(
        opts.label_column < 0 ? static_cast<int>(width) + opts.label_column
                              : opts.label_column);
    if (label_col >= width)
      throw DataError("label column out of range");
    std::vector<double> feats;
    feats.reserve(width - 1);
    int label = 0;
    for (std::size_t j = 0; j < width; ++j) {
      auto f = trim(fields[j]);
      if (j == label_col) {
        double v;
        if (!parse_double(f, v) || v != std::floor(v))
          throw DataError(path + ":" + std::to_string(line_no) +
                          ": unparseable label '" + std::string(f) + "'");
        label = static_cast<int>(v);
        continue;
      }
      if (f == opts.missing_marker) {
        feats.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      double v;
      if (!parse_double(f, v))
        throw DataError(path + ":" + std::to_string(line_no) + ": field " +
                        std::to_string(j + 1) + " unparseable: '" +
                        std::string(f) + "'");
      feats.push_back(v);
    }
    rows.push_back(std::move(feats));
    labels.push_back(label);
  }
  if (rows.empty())
    throw DataError(path + ": no data rows");

  Matrix m(rows.size(), width - 1);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  impute_median(m);
  auto stats = fit_standardization(m);
  apply_standardization(m, stats);

  LabeledDataset all;
  all.features = std::move(m);
  all.standardization = stats;
  all.sample_ids.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    all.sample_ids[r] = r;
  all.labels = std::move(labels);
  if (!opts.relabel.empty())
    for (auto &y : all.labels) {
      auto it = opts.relabel.find(y);
      y = it == opts.relabel.end() ? -1 : it->second;
    }
  all.index_classes();

  if (opts.keep_classes.empty()) {
    if (all.class_index.count(-1))
      throw DataError("relabel map leaves unmapped classes and no keep-list");
    return all;
  }
  std::vector<std::size_t> keep_rows;
  for (int c : opts.keep_classes) {
    auto it = all.class_index.find(c);
    if (it == all.class_index.end() || it->second.empty())
      throw DataError(path + ": class " + std::to_string(c) +
                      " is empty after filtering");
    keep_rows.insert(keep_rows.end(), it->second.begin(), it->second.end());
  }
  std::sort(keep_rows.begin(), keep_rows.end());
  return all.subset(keep_rows);
}

void write_csv(const LabeledDataset &ds, const std::string &path) {
  std::ofstream out(path);
  if (!out)
    throw DataError("cannot open " + path + " for writing");
  out << std::setprecision(17);
  for (std::size_t r = 0; r < ds.rows(); ++r) {
    for (std::size_t j = 0; j < ds.dim(); ++j)
      out << ds.features(r, j) << ',';
    out << ds.labels[r] << '\n';
  }
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset &ds,
                                                const std::vector<int> &common,
                                                const std::vector<int> &rare) {
  std::set<int> cs(common.begin(), common.end());
  std::set<int> rs(rare.begin(), rare.end());
  for (int c : rs)
    if (cs.count(c))
      throw DataError("class " + std::to_string(c) + " is both common and rare");
  auto gather = [&](const std::set<int> &want, const char *which) {
    std::vector<std::size_t> rows;
    for (int c : want) {
      auto it = ds.class_index.find(c);
      if (it == ds.class_index.end())
        throw DataError(std::string(which) + " class " + std::to_string(c) +
                        " not present in dataset");
      rows.insert(rows.end(), it->second.begin(), it->second.end());
    }
    if (rows.empty())
      throw DataError(std::string("empty ") + which + " pool");
    std::sort(rows.begin(), rows.end());
    return ds.subset(rows);
  };
  return {gather(cs, "common"), gather(rs, "rare")};
}

void SplitSpec::validate() const {
  std::set<int> cs(common_classes.begin(), common_classes.end());
  for (int r : rare_classes)
    if (cs.count(r))
      throw DataError("class " + std::to_string(r) + " is both common and rare");
  for (const auto &shard : hospital_shards)
    for (int c : shard)
      if (!cs.count(c))
        throw DataError("hospital shard class " + std::to_string(c) +
                        " is not a common class");
}

SplitSpec shard_hospitals(const LabeledDataset &train_pool,
                          std::size_t n_hospitals,
                          std::size_t classes_per_hospital, Rng &rng) {
  SplitSpec spec;
  spec.common_classes = train_pool.classes();
  const std::size_t n_common = spec.common_classes.size();
  if (n_hospitals == 0)
    throw ConfigError("n_hospitals must be >= 1");
  if (classes_per_hospital == 0 || classes_per_hospital > n_common)
    throw ConfigError("classes_per_hospital must be in [1, " +
                      std::to_string(n_common) + "]");
  for (std::size_t h = 0; h < n_hospitals; ++h) {
    auto picks = rng.sample_without_replacement(n_common, classes_per_hospital);
    std::vector<int> shard;
    for (auto i : picks)
      shard.push_back(spec.common_classes[i]);
    std::sort(shard.begin(), shard.end());
    spec.hospital_shards.push_back(std::move(shard));
  }
  return spec;
}

LabeledDataset hospital_data(const LabeledDataset &train_pool,
                             const SplitSpec &spec, std::size_t hospital,
                             bool sample_split) {
  const auto &shard = spec.hospital_shards.at(hospital);
  std::vector<std::size_t> rows;
  for (int c : shard) {
    const auto &class_rows = train_pool.class_index.at(c);
    if (!sample_split) {
      rows.insert(rows.end(), class_rows.begin(), class_rows.end());
      continue;
    }
    std::vector<std::size_t> holders;
    for (std::size_t h = 0; h < spec.hospital_shards.size(); ++h) {
      const auto &s = spec.hospital_shards[h];
      if (std::find(s.begin(), s.end(), c) != s.end())
        holders.push_back(h);
    }
    const auto pos = static_cast<std::size_t>(
        std::find(holders.begin(), holders.end(), hospital) - holders.begin());
    const std::size_t n = class_rows.size();
    const std::size_t lo = n * pos / holders.size();
    const std::size_t hi = n * (pos + 1) / holders.size();
    rows.insert(rows.end(), class_rows.begin() + static_cast<long>(lo),
                class_rows.begin() + static_cast<long>(hi));
  }
  std::sort(rows.begin(), rows.end());
  return train_pool.subset(rows);
}

void SyntheticSpec::validate() const {
  if (n_classes < 2)
    throw ConfigError("synthetic.n_classes must be >= 2");
  if (dim == 0)
    throw ConfigError("synthetic.dim must be >= 1");
  if (samples_per_class.size() != n_classes)
    throw ConfigError("synthetic.samples_per_class must have n_classes entries");
  if (!(cluster_spread > 0.0) || !(class_separation > 0.0))
    throw ConfigError("synthetic spread and separation must be > 0");
  if (latent_dim > dim)
    throw ConfigError("synthetic.latent_dim must be <= dim");
}

void to_json(nlohmann::json &j, const SyntheticSpec &s) {
  j = {{"n_classes", s.n_classes},
       {"dim", s.dim},
       {"samples_per_class", s.samples_per_class},
       {"cluster_spread", s.cluster_spread},
       {"class_separation", s.class_separation},
       {"latent_dim", s.latent_dim},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json &j, SyntheticSpec &s) {
  SyntheticSpec d;
  s.n_classes = j.value("n_classes", d.n_classes);
  s.dim = j.value("dim", d.dim);
  s.samples_per_class = j.value("samples_per_class", d.samples_per_class);
  s.cluster_spread = j.value("cluster_spread", d.cluster_spread);
  s.class_separation = j.value("class_separation", d.class_separation);
  s.latent_dim = j.value("latent_dim", d.latent_dim);
  s.seed = j.value("seed", d.seed);
}

LabeledDataset gen_synthetic(const SyntheticSpec &spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t d = spec.dim;
  const std::size_t r = spec.latent_dim == 0 ? d : spec.latent_dim;

  // Orthonormal basis (d x r) for the centre subspace via Gram-Schmidt.
  std::vector<std::vector<double>> basis;
  while (basis.size() < r) {
    std::vector<double> v(d);
    for (auto &x : v)
      x = rng.normal();
    for (const auto &b : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i)
        dot += v[i] * b[i];
      for (std::size_t i = 0; i < d; ++i)
        v[i] -= dot * b[i];
    }
    double norm = 0.0;
    for (double x : v)
      norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8)
      continue;
    for (auto &x : v)
      x /= norm;
    basis.push_back(std::move(v));
  }

  // Rejection-sample centres until every pair is at least `separation` apart.
  std::vector<std::vector<double>> centres;
  double scale = spec.class_separation;
  int failures = 0;
  while (centres.size() < spec.n_classes) {
    std::vector<double> z(r);
    for (auto &x : z)
      x = scale * rng.normal();
    std::vector<double> c(d, 0.0);
    for (std::size_t k = 0; k < r; ++k)
      for (std::size_t i = 0; i < d; ++i)
        c[i] += z[k] * basis[k][i];
    bool ok = true;
    for (const auto &o : centres) {
      double dist2 = 0.0;
      for (std::size_t i = 0; i < d; ++i)
        dist2 += (c[i] - o[i]) * (c[i] - o[i]);
      if (dist2 < spec.class_separation * spec.class_separation) {
        ok = false;
        break;
      }
    }
    if (ok) {
      centres.push_back(std::move(c));
    } else if (++failures % 1000 == 0) {
      scale *= 1.1;
    }
  }

  std::size_t total = 0;
  for (auto n : spec.samples_per_class)
    total += n;
  LabeledDataset ds;
  ds.features = Matrix(total, d);
  std::size_t row = 0;
  for (std::size_t c = 0; c < spec.n_classes; ++c)
    for (std::size_t s = 0; s < spec.samples_per_class[c]; ++s, ++row) {
      for (std::size_t i = 0; i < d; ++i)
        ds.features(row, i) = centres[c][i] + spec.cluster_spread * rng.normal();
      ds.labels.push_back(static_cast<int>(c + 1));
      ds.sample_ids.push_back(row);
    }
  ds.standardization.mean.assign(d, 0.0);
  ds.standardization.std.assign(d, 1.0);
  ds.index_classes();
  return ds;
}

} // namespace fedmeta
