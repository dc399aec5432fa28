#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmeta/data.hpp"
#include "fedmeta/fedsim.hpp"
#include "fedmeta/metalearn.hpp"
#include "fedmeta/network.hpp"

namespace fedmeta {

enum class Variant {
  ATML_local,
  ATML3_local,
  MAML_local,
  FedAvg_plain,
  FedAvg_MAML,
  FedAvg_ATML3,
  FedAcc_plain,
  FedAcc_MAML,
  DWA_FML,
  baseline_MLP,
  baseline_LR,
  baseline_KNN,
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string &s);
const std::vector<Variant> &all_variants();

bool is_federated(Variant v);
bool is_baseline(Variant v);

struct DataConfig {
  enum class Source { synthetic, csv };
  Source source = Source::synthetic;
  std::string csv_path;
  bool arrhythmia_preset = true; // relabel + keep-list for the UCI file
  int label_column = -1;
  std::string missing_marker = "?";
  std::vector<int> keep_classes;
  SyntheticSpec synthetic{};
  bool reseed_per_run = true; // synthetic seed mixed with the run seed
};

struct SplitConfig {
  std::vector<int> common{1, 2, 3, 4, 5};
  std::vector<int> rare{6, 7, 8, 9};
  std::size_t n_hospitals = 4;
  std::size_t classes_per_hospital = 3;
  bool sample_split = false;
};

struct BaselineConfig {
  std::size_t iterations = 5;
  double lr = 0.001;
  double weight_decay = 0.1;
  std::vector<std::size_t> mlp_hidden{64, 32, 32};
  std::size_t knn_neighbors = 1;
};

struct RunConfig {
  Variant variant = Variant::DWA_FML;
  std::size_t rounds = 150;
  std::size_t local_episodes = 5;
  std::size_t local_budget = 0; // standalone iterations; 0 = rounds * local_episodes
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::size_t finetune_curve_steps = 10;
  std::size_t training_curve_steps = 10;
};

struct ExperimentConfig {
  DataConfig data;
  SplitConfig split;
  ModelConfig model;
  MetaConfig meta;
  FusionPolicy fusion;
  BaselineConfig baseline;
  RunConfig run;

  void validate() const;
  // Resolved, canonical JSON; every field present.
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json &j);
  static ExperimentConfig load(const std::filesystem::path &path);
  // FNV-1a over the canonical JSON dump.
  std::string hash() const;
};

// Data for one seed: train (common) and test (rare) pools plus hospital
// shards.
struct PreparedData {
  LabeledDataset full;
  LabeledDataset train_pool;
  LabeledDataset test_pool;
  SplitSpec split;
  std::vector<LabeledDataset> shards;
};

PreparedData prepare_data(const ExperimentConfig &cfg, std::uint64_t seed);

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<double> hospital_accs; // one entry for single-model variants
  std::size_t uploads = 0;
  std::size_t rounds = 0;
  std::vector<double> finetune_curve;               // index = fine-tune steps
  std::vector<std::vector<double>> training_curves; // per hospital, index = step - 1
  std::vector<RoundRecord> round_log;
  double mean() const;
};

nlohmann::json to_json(const SeedResult &r);

struct RunReport {
  std::string variant;
  std::string config_hash;
  std::vector<SeedResult> seeds;
  std::vector<double> hospital_mean; // over seeds
  std::vector<double> hospital_std;
  double mean = 0.0; // over seeds of per-seed hospital averages
  double std = 0.0;
  std::size_t upload_total = 0;
  std::string round_log_path;

  nlohmann::json to_json() const;
};

// Direct training on each meta-test episode's support set (no meta-learning).
// Returns mean query accuracy over `episodes` episodes drawn from Rng(seed).
double baseline_direct(Variant variant, const LabeledDataset &test_pool,
                       const MetaConfig &meta, const BaselineConfig &bcfg,
                       std::size_t episodes, std::uint64_t seed);

// k-nearest-neighbour prediction for each query row (Euclidean, majority
// vote, ties to the lowest label).
std::vector<int> knn_predict(const Batch &support, const Matrix &query,
                             std::size_t n_way, std::size_t k);

SeedResult run_seed(const ExperimentConfig &cfg, std::uint64_t seed);

using ProgressHook = std::function<void(const std::string &)>;

// All seeds; writes report.json, rounds.jsonl and curves/ when out_dir is
// set.
RunReport run_experiment(const ExperimentConfig &cfg,
                         const std::optional<std::filesystem::path> &out_dir,
                         const ProgressHook &progress = {});

// Rebuilds a report from a run directory's rounds.jsonl.
RunReport report_from_round_log(const std::filesystem::path &run_dir);

// Markdown comparison table (one row per run dir) plus curve CSVs.
std::string cli_report(const std::vector<std::filesystem::path> &run_dirs,
                       const std::filesystem::path &out_dir);

void write_curves(const RunReport &report, const std::filesystem::path &dir);

struct GradcheckPath {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::uint64_t seed = 7;
  std::string corrupt_path; // test hook: perturb this path's analytic gradient
};

std::vector<GradcheckPath> cli_gradcheck(const GradcheckOptions &opts = {});

} // namespace fedmeta
