#include <fstream>
#include <set>

#include "fedmeta/errors.hpp"
#include "fedmeta/harness.hpp"

namespace fedmeta {

namespace {

const std::vector<std::pair<Variant, const char *>> kVariantNames = {
    {Variant::ATML_local, "ATML_local"},
    {Variant::ATML3_local, "ATML3_local"},
    {Variant::MAML_local, "MAML_local"},
    {Variant::FedAvg_plain, "FedAvg_plain"},
    {Variant::FedAvg_MAML, "FedAvg_MAML"},
    {Variant::FedAvg_ATML3, "FedAvg_ATML3"},
    {Variant::FedAcc_plain, "FedAcc_plain"},
    {Variant::FedAcc_MAML, "FedAcc_MAML"},
    {Variant::DWA_FML, "DWA_FML"},
    {Variant::baseline_MLP, "baseline_MLP"},
    {Variant::baseline_LR, "baseline_LR"},
    {Variant::baseline_KNN, "baseline_KNN"},
};

void reject_unknown(const nlohmann::json &j, const std::string &section,
                    std::initializer_list<const char *> known) {
  if (!j.is_object())
    throw ConfigError(section + ": expected an object");
  std::set<std::string> ok(known.begin(), known.end());
  for (const auto &[k, v] : j.items())
    if (!ok.count(k))
      throw ConfigError(section + "." + k + ": unknown field");
}

// Wraps nlohmann type errors with the offending section name.
template <typename F> void with_section(const std::string &section, F &&f) {
  try {
    f();
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(section + ": " + e.what());
  }
}

} // namespace

std::string to_string(Variant v) {
  for (const auto &[k, name] : kVariantNames)
    if (k == v)
      return name;
  return "?";
}

Variant variant_from_string(const std::string &s) {
  for (const auto &[k, name] : kVariantNames)
    if (s == name)
      return k;
  std::string all;
  for (const auto &[k, name] : kVariantNames)
    all += std::string(all.empty() ? "" : ", ") + name;
  throw ConfigError("run.variant: unknown variant '" + s + "' (one of " + all + ")");
}

const std::vector<Variant> &all_variants() {
  static const std::vector<Variant> v = [] {
    std::vector<Variant> out;
    for (const auto &[k, name] : kVariantNames)
      out.push_back(k);
    return out;
  }();
  return v;
}

bool is_federated(Variant v) {
  switch (v) {
  case Variant::FedAvg_plain:
  case Variant::FedAvg_MAML:
  case Variant::FedAvg_ATML3:
  case Variant::FedAcc_plain:
  case Variant::FedAcc_MAML:
  case Variant::DWA_FML:
    return true;
  default:
    return false;
  }
}

bool is_baseline(Variant v) {
  return v == Variant::baseline_MLP || v == Variant::baseline_LR ||
         v == Variant::baseline_KNN;
}

void ExperimentConfig::validate() const {
  if (data.source == DataConfig::Source::csv && data.csv_path.empty())
    throw ConfigError("data.csv_path: required when data.source is csv");
  if (data.source == DataConfig::Source::synthetic)
    data.synthetic.validate();
  if (split.common.empty())
    throw ConfigError("split.common: must list at least one class");
  if (split.rare.empty())
    throw ConfigError("split.rare: must list at least one class");
  for (int c : split.rare)
    for (int d : split.common)
      if (c == d)
        throw ConfigError("split: class " + std::to_string(c) +
                          " is both common and rare");
  if (split.n_hospitals < 1)
    throw ConfigError("split.n_hospitals: must be >= 1");
  if (split.classes_per_hospital < 1 ||
      split.classes_per_hospital > split.common.size())
    throw ConfigError("split.classes_per_hospital: must be in [1, |common|]");
  if (model.n_way != meta.n_way)
    throw ConfigError("model.n_way: must equal meta.n_way");
  if (model.n_way < 2)
    throw ConfigError("model.n_way: must be >= 2");
  meta.validate();
  fusion.validate();
  if (baseline.knn_neighbors < 1)
    throw ConfigError("baseline.knn_neighbors: must be >= 1");
  if (run.seeds.empty())
    throw ConfigError("run.seeds: must list at least one seed");
  if (run.local_episodes < 1)
    throw ConfigError("run.local_episodes: must be >= 1");
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  nlohmann::json syn;
  fedmeta::to_json(syn, data.synthetic);
  j["data"] = {{"source", data.source == DataConfig::Source::csv ? "csv" : "synthetic"},
               {"csv_path", data.csv_path},
               {"arrhythmia_preset", data.arrhythmia_preset},
               {"label_column", data.label_column},
               {"missing_marker", data.missing_marker},
               {"keep_classes", data.keep_classes},
               {"synthetic", syn},
               {"reseed_per_run", data.reseed_per_run}};
  j["split"] = {{"common", split.common},
                {"rare", split.rare},
                {"n_hospitals", split.n_hospitals},
                {"classes_per_hospital", split.classes_per_hospital},
                {"sample_split", split.sample_split}};
  nlohmann::json m, me, f;
  fedmeta::to_json(m, model);
  fedmeta::to_json(me, meta);
  fedmeta::to_json(f, fusion);
  j["model"] = m;
  j["meta"] = me;
  j["fusion"] = f;
  j["baseline"] = {{"iterations", baseline.iterations},
                   {"lr", baseline.lr},
                   {"weight_decay", baseline.weight_decay},
                   {"mlp_hidden", baseline.mlp_hidden},
                   {"knn_neighbors", baseline.knn_neighbors}};
  j["run"] = {{"variant", to_string(run.variant)},
              {"rounds", run.rounds},
              {"local_episodes", run.local_episodes},
              {"local_budget", run.local_budget},
              {"seeds", run.seeds},
              {"finetune_curve_steps", run.finetune_curve_steps},
              {"training_curve_steps", run.training_curve_steps}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json &j) {
  ExperimentConfig c;
  reject_unknown(j, "config",
                 {"data", "split", "model", "meta", "fusion", "baseline", "run"});
  if (j.contains("data")) {
    const auto &d = j["data"];
    reject_unknown(d, "data",
                   {"source", "csv_path", "arrhythmia_preset", "label_column",
                    "missing_marker", "keep_classes", "synthetic",
                    "reseed_per_run"});
    with_section("data", [&] {
      const auto src = d.value("source", std::string("synthetic"));
      if (src == "csv")
        c.data.source = DataConfig::Source::csv;
      else if (src == "synthetic")
        c.data.source = DataConfig::Source::synthetic;
      else
        throw ConfigError("data.source: expected csv or synthetic, got '" + src + "'");
      c.data.csv_path = d.value("csv_path", c.data.csv_path);
      c.data.arrhythmia_preset = d.value("arrhythmia_preset", c.data.arrhythmia_preset);
      c.data.label_column = d.value("label_column", c.data.label_column);
      c.data.missing_marker = d.value("missing_marker", c.data.missing_marker);
      c.data.keep_classes = d.value("keep_classes", c.data.keep_classes);
      c.data.reseed_per_run = d.value("reseed_per_run", c.data.reseed_per_run);
      if (d.contains("synthetic")) {
        reject_unknown(d["synthetic"], "data.synthetic",
                       {"n_classes", "dim", "samples_per_class", "cluster_spread",
                        "class_separation", "latent_dim", "seed"});
        c.data.synthetic = d["synthetic"].get<SyntheticSpec>();
      }
    });
  }
  if (j.contains("split")) {
    const auto &s = j["split"];
    reject_unknown(s, "split",
                   {"common", "rare", "n_hospitals", "classes_per_hospital",
                    "sample_split"});
    with_section("split", [&] {
      c.split.common = s.value("common", c.split.common);
      c.split.rare = s.value("rare", c.split.rare);
      c.split.n_hospitals = s.value("n_hospitals", c.split.n_hospitals);
      c.split.classes_per_hospital =
          s.value("classes_per_hospital", c.split.classes_per_hospital);
      c.split.sample_split = s.value("sample_split", c.split.sample_split);
    });
  }
  if (j.contains("model")) {
    reject_unknown(j["model"], "model",
                   {"input_dim", "encoder_dims", "batch_norm", "head_dims",
                    "n_way", "bn_eps"});
    with_section("model", [&] { c.model = j["model"].get<ModelConfig>(); });
  }
  if (j.contains("meta")) {
    reject_unknown(j["meta"], "meta",
                   {"alpha", "beta", "eta", "lambda", "phi", "n_way", "k_shot",
                    "q_per_class", "tasks_per_episode", "adapt_steps",
                    "finetune_steps", "test_episodes", "first_order", "learner",
                    "outer_optimizer", "weight_decay", "pinned_accuracy"});
    with_section("meta", [&] { c.meta = j["meta"].get<MetaConfig>(); });
  }
  if (j.contains("fusion")) {
    reject_unknown(j["fusion"], "fusion", {"kind", "eval_episodes", "eval_seed", "reseed_each_round"});
    with_section("fusion", [&] { c.fusion = j["fusion"].get<FusionPolicy>(); });
  }
  if (j.contains("baseline")) {
    const auto &b = j["baseline"];
    reject_unknown(b, "baseline",
                   {"iterations", "lr", "weight_decay", "mlp_hidden",
                    "knn_neighbors"});
    with_section("baseline", [&] {
      c.baseline.iterations = b.value("iterations", c.baseline.iterations);
      c.baseline.lr = b.value("lr", c.baseline.lr);
      c.baseline.weight_decay = b.value("weight_decay", c.baseline.weight_decay);
      c.baseline.mlp_hidden = b.value("mlp_hidden", c.baseline.mlp_hidden);
      c.baseline.knn_neighbors = b.value("knn_neighbors", c.baseline.knn_neighbors);
    });
  }
  if (j.contains("run")) {
    const auto &r = j["run"];
    reject_unknown(r, "run",
                   {"variant", "rounds", "local_episodes", "local_budget", "seeds",
                    "finetune_curve_steps", "training_curve_steps"});
    with_section("run", [&] {
      c.run.variant = variant_from_string(r.value("variant", to_string(c.run.variant)));
      c.run.rounds = r.value("rounds", c.run.rounds);
      c.run.local_episodes = r.value("local_episodes", c.run.local_episodes);
      c.run.local_budget = r.value("local_budget", c.run.local_budget);
      c.run.seeds = r.value("seeds", c.run.seeds);
      c.run.finetune_curve_steps =
          r.value("finetune_curve_steps", c.run.finetune_curve_steps);
      c.run.training_curve_steps =
          r.value("training_curve_steps", c.run.training_curve_steps);
    });
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error &e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string ExperimentConfig::hash() const {
  const std::string s = to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

} // namespace fedmeta
