#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmeta/matrix.hpp"

namespace fedmeta {

class Rng;

struct Standardization {
  std::vector<double> mean;
  std::vector<double> std; // 0 marks a constant feature

  bool operator==(const Standardization &) const = default;
};

// Rows of features with original class labels. Immutable after construction.
struct LabeledDataset {
  Matrix features;
  std::vector<int> labels;
  std::vector<std::size_t> sample_ids; // row id in the originating dataset
  std::map<int, std::vector<std::size_t>> class_index;
  Standardization standardization;

  std::size_t rows() const { return features.rows; }
  std::size_t dim() const { return features.cols; }
  std::vector<int> classes() const;
  std::size_t class_size(int c) const;

  // Rebuilds class_index from labels.
  void index_classes();
  LabeledDataset subset(const std::vector<std::size_t> &rows) const;
};

struct CsvOptions {
  int label_column = -1;                // negative counts from the end
  std::string missing_marker = "?";
  std::vector<int> keep_classes;        // empty keeps every class
  std::map<int, int> relabel;           // applied before the keep-list
};

// Column keep-list and relabelling that reproduce the nine-class subset of
// the UCI Arrhythmia file (codes 1..9 by descending class size).
CsvOptions arrhythmia_options();

// NaN entries are replaced by their column's median over non-missing rows.
void impute_median(Matrix &m);
Standardization fit_standardization(const Matrix &m);
void apply_standardization(Matrix &m, const Standardization &s);

// Parse, impute (median), standardize over the whole file, then relabel and
// filter classes. Throws DataError naming the line on malformed input.
LabeledDataset load_csv(const std::string &path, const CsvOptions &opts);

// One sample per line, features then label.
void write_csv(const LabeledDataset &ds, const std::string &path);

// Partition by class membership into (train_pool, test_pool).
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset &ds,
                                                const std::vector<int> &common,
                                                const std::vector<int> &rare);

struct SplitSpec {
  std::vector<int> common_classes;
  std::vector<int> rare_classes;
  std::vector<std::vector<int>> hospital_shards; // sorted class ids

  void validate() const;
};

// Each hospital receives a uniformly random subset of classes_per_hospital
// common classes.
SplitSpec shard_hospitals(const LabeledDataset &train_pool,
                          std::size_t n_hospitals,
                          std::size_t classes_per_hospital, Rng &rng);

// The rows hospital h holds. With sample_split, rows of a class shared by
// several hospitals are divided into contiguous, near-equal chunks;
// otherwise every holder gets all rows of the class.
LabeledDataset hospital_data(const LabeledDataset &train_pool,
                             const SplitSpec &spec, std::size_t hospital,
                             bool sample_split);

struct SyntheticSpec {
  std::size_t n_classes = 9;
  std::size_t dim = 32;
  std::vector<std::size_t> samples_per_class{245, 50, 44, 25, 22, 15, 15, 13, 9};
  double cluster_spread = 1.0;
  double class_separation = 3.0;
  // Class centres lie in a random subspace of this dimension (0 = dim); the
  // remaining directions carry only within-class noise.
  std::size_t latent_dim = 0;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const SyntheticSpec &) const = default;
};

void to_json(nlohmann::json &j, const SyntheticSpec &s);
void from_json(const nlohmann::json &j, SyntheticSpec &s);

// Isotropic Gaussian clusters; class ids are 1..n_classes. Centres are at
// least class_separation apart.
LabeledDataset gen_synthetic(const SyntheticSpec &spec);

} // namespace fedmeta
