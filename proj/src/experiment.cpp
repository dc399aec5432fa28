#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include "fedmeta/errors.hpp"
#include "fedmeta/harness.hpp"
#include "fedmeta/rng.hpp"

namespace fedmeta {

namespace {

// Stream tags for derive_seed.
enum : std::uint64_t {
  kTagData = 0xda7a,
  kTagShard = 0x5a4d,
  kTagInit = 0x1417,
  kTagReport = 0x4e90,
  kTagEval = 0xe7a1,
  kTagLocal = 0x10ca,
  kTagCurve = 0xc04e,
  kTagBaseline = 0xba5e,
};

constexpr const char *kFinalSchema = "fedmeta.final/1";

Learner learner_for(Variant v) {
  switch (v) {
  case Variant::MAML_local:
  case Variant::FedAvg_MAML:
  case Variant::FedAcc_MAML:
    return Learner::maml;
  case Variant::FedAvg_plain:
  case Variant::FedAcc_plain:
    return Learner::plain;
  default:
    return Learner::atml;
  }
}

FusionPolicy::Kind fusion_for(Variant v, FusionPolicy::Kind configured) {
  switch (v) {
  case Variant::FedAvg_plain:
  case Variant::FedAvg_MAML:
  case Variant::FedAvg_ATML3:
    return FusionPolicy::Kind::average;
  default:
    return configured == FusionPolicy::Kind::accuracy_gate_only
               ? configured
               : FusionPolicy::Kind::dynamic_weight;
  }
}

std::uint64_t report_seed(std::uint64_t seed, std::size_t hospital) {
  return derive_seed(seed, {kTagReport, hospital});
}

double mean_of(const std::vector<double> &v) {
  if (v.empty())
    return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double> &v) {
  if (v.size() < 2)
    return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v)
    s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void add_curve(std::vector<double> &acc, const std::vector<double> &c) {
  if (acc.empty())
    acc.assign(c.size(), 0.0);
  for (std::size_t i = 0; i < c.size(); ++i)
    acc[i] += c[i];
}

RunReport aggregate(const std::string &variant, const std::string &hash,
                    std::vector<SeedResult> seeds) {
  RunReport rep;
  rep.variant = variant;
  rep.config_hash = hash;
  rep.round_log_path = "rounds.jsonl";
  const std::size_t n_hosp = seeds.empty() ? 0 : seeds.front().hospital_accs.size();
  std::vector<double> per_seed;
  for (std::size_t h = 0; h < n_hosp; ++h) {
    std::vector<double> col;
    for (const auto &s : seeds)
      col.push_back(s.hospital_accs.at(h));
    rep.hospital_mean.push_back(mean_of(col));
    rep.hospital_std.push_back(sample_std(col));
  }
  for (const auto &s : seeds) {
    per_seed.push_back(s.mean());
    rep.upload_total += s.uploads;
  }
  rep.mean = mean_of(per_seed);
  rep.std = sample_std(per_seed);
  rep.seeds = std::move(seeds);
  return rep;
}

} // namespace

double SeedResult::mean() const { return mean_of(hospital_accs); }

nlohmann::json to_json(const SeedResult &r) {
  return {{"seed", r.seed},
          {"hospital_accs", r.hospital_accs},
          {"mean", r.mean()},
          {"uploads", r.uploads},
          {"rounds", r.rounds},
          {"finetune_curve", r.finetune_curve},
          {"training_curves", r.training_curves}};
}

nlohmann::json RunReport::to_json() const {
  auto seeds_json = nlohmann::json::array();
  for (const auto &s : seeds)
    seeds_json.push_back(fedmeta::to_json(s));
  return {{"schema", "fedmeta.report/1"},
          {"variant", variant},
          {"config_hash", config_hash},
          {"seeds", seeds_json},
          {"hospital_mean", hospital_mean},
          {"hospital_std", hospital_std},
          {"mean", mean},
          {"std", std},
          {"upload_total", upload_total},
          {"round_log", round_log_path}};
}

PreparedData prepare_data(const ExperimentConfig &cfg, std::uint64_t seed) {
  PreparedData pd;
  if (cfg.data.source == DataConfig::Source::csv) {
    CsvOptions opts = cfg.data.arrhythmia_preset ? arrhythmia_options() : CsvOptions{};
    opts.label_column = cfg.data.label_column;
    opts.missing_marker = cfg.data.missing_marker;
    if (!cfg.data.keep_classes.empty())
      opts.keep_classes = cfg.data.keep_classes;
    pd.full = load_csv(cfg.data.csv_path, opts);
  } else {
    SyntheticSpec spec = cfg.data.synthetic;
    if (cfg.data.reseed_per_run)
      spec.seed = derive_seed(spec.seed, {kTagData, seed});
    pd.full = gen_synthetic(spec);
  }
  std::tie(pd.train_pool, pd.test_pool) =
      split(pd.full, cfg.split.common, cfg.split.rare);
  Rng shard_rng(derive_seed(seed, {kTagShard}));
  pd.split = shard_hospitals(pd.train_pool, cfg.split.n_hospitals,
                             cfg.split.classes_per_hospital, shard_rng);
  pd.split.rare_classes = cfg.split.rare;
  for (std::size_t h = 0; h < cfg.split.n_hospitals; ++h)
    pd.shards.push_back(
        hospital_data(pd.train_pool, pd.split, h, cfg.split.sample_split));
  return pd;
}

std::vector<int> knn_predict(const Batch &support, const Matrix &query,
                             std::size_t n_way, std::size_t k) {
  const std::size_t n = support.rows();
  if (n == 0 || support.features.cols != query.cols)
    throw LayoutError("knn_predict: support/query mismatch");
  k = std::min(k, n);
  std::vector<int> out;
  out.reserve(query.rows);
  std::vector<std::pair<double, std::size_t>> dist(n);
  for (std::size_t q = 0; q < query.rows; ++q) {
    for (std::size_t s = 0; s < n; ++s) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < query.cols; ++j) {
        const double d = query(q, j) - support.features(s, j);
        d2 += d * d;
      }
      dist[s] = {d2, s};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<long>(k), dist.end());
    std::vector<std::size_t> votes(n_way, 0);
    for (std::size_t i = 0; i < k; ++i)
      ++votes[static_cast<std::size_t>(support.labels[dist[i].second])];
    out.push_back(static_cast<int>(
        std::max_element(votes.begin(), votes.end()) - votes.begin()));
  }
  return out;
}

double baseline_direct(Variant variant, const LabeledDataset &test_pool,
                       const MetaConfig &meta, const BaselineConfig &bcfg,
                       std::size_t episodes, std::uint64_t seed) {
  if (!is_baseline(variant))
    throw ConfigError("baseline_direct: " + to_string(variant) + " is not a baseline");
  ModelConfig mcfg;
  mcfg.input_dim = test_pool.dim();
  mcfg.batch_norm = false;
  mcfg.head_dims = {};
  mcfg.n_way = meta.n_way;
  mcfg.encoder_dims =
      variant == Variant::baseline_MLP ? bcfg.mlp_hidden : std::vector<std::size_t>{};

  Rng rng(seed);
  double sum = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    auto ep = sample_eval_episode(test_pool, meta, rng);
    if (variant == Variant::baseline_KNN) {
      auto pred = knn_predict(ep.support, ep.query.features, meta.n_way,
                              bcfg.knn_neighbors);
      std::size_t hits = 0;
      for (std::size_t i = 0; i < pred.size(); ++i)
        hits += pred[i] == ep.query.labels[i];
      sum += static_cast<double>(hits) / static_cast<double>(pred.size());
      continue;
    }
    Rng init_rng(derive_seed(seed, {kTagBaseline, e}));
    ParamSet w = variant == Variant::baseline_MLP
                     ? init_params(mcfg, init_rng)
                     : ParamSet(mcfg.make_layout(), 0.0);
    AdamState opt;
    for (std::size_t it = 0; it < bcfg.iterations; ++it) {
      auto fwd = forward(w, mcfg, ep.support);
      auto ce = cross_entropy(fwd.logits, ep.support.labels);
      w = adam_step(w, backward(fwd.cache, ce.grad_logits), opt, bcfg.lr,
                    bcfg.weight_decay);
    }
    sum += accuracy(predict(w, mcfg, ep.query.features), ep.query.labels);
  }
  return sum / static_cast<double>(episodes);
}

SeedResult run_seed(const ExperimentConfig &cfg, std::uint64_t seed) {
  const Variant variant = cfg.run.variant;
  auto data = prepare_data(cfg, seed);

  MetaConfig meta = cfg.meta;
  meta.learner = learner_for(variant);
  ModelConfig mcfg = cfg.model;
  if (mcfg.input_dim == 0)
    mcfg.input_dim = data.full.dim();
  else if (mcfg.input_dim != data.full.dim())
    throw ConfigError("model.input_dim: " + std::to_string(mcfg.input_dim) +
                      " but data has " + std::to_string(data.full.dim()) +
                      " features");

  for (int c : excluded_eval_classes(data.test_pool, meta.k_shot))
    std::cerr << "[harness] warning: rare class " << c << " has <= "
              << meta.k_shot << " samples and is excluded from meta-test\n";

  SeedResult res;
  res.seed = seed;
  const std::size_t episodes = meta.test_episodes;

  if (is_baseline(variant)) {
    res.hospital_accs.push_back(baseline_direct(variant, data.test_pool, meta,
                                                cfg.baseline, episodes,
                                                report_seed(seed, 0)));
    return res;
  }

  Rng init_rng(derive_seed(seed, {kTagInit}));
  ParamSet theta0 = init_params(mcfg, init_rng);
  const std::size_t budget = cfg.run.local_budget
                                 ? cfg.run.local_budget
                                 : cfg.run.rounds * cfg.run.local_episodes;

  auto curve_of = [&](const ParamSet &model, std::size_t hospital) {
    return finetune_curve(model, mcfg, data.test_pool, meta, episodes,
                          report_seed(seed, hospital), cfg.run.finetune_curve_steps);
  };

  if (is_federated(variant)) {
    FusionPolicy policy = cfg.fusion;
    policy.kind = fusion_for(variant, cfg.fusion.kind);
    policy.eval_seed = derive_seed(seed, {kTagEval, cfg.fusion.eval_seed});
    auto fed = make_federation(mcfg, meta, policy, theta0, data.shards,
                               data.test_pool, cfg.run.local_episodes,
                               derive_seed(seed, {kTagLocal}));
    auto out = run_federation(fed, cfg.run.rounds);
    res.rounds = out.rounds.size();
    for (const auto &r : out.rounds)
      res.uploads += r.uploads;
    res.round_log = std::move(out.rounds);
    std::vector<double> curve_sum;
    for (std::size_t h = 0; h < cfg.split.n_hospitals; ++h) {
      res.hospital_accs.push_back(finetune_eval(out.global, mcfg, data.test_pool,
                                                meta, episodes, report_seed(seed, h)));
      if (cfg.run.finetune_curve_steps > 0)
        add_curve(curve_sum, curve_of(out.global, h));
      if (cfg.run.training_curve_steps > 0) {
        // Accuracy of hospital h's local model as local training continues
        // from the final global model.
        std::vector<double> tc;
        Rng rng(derive_seed(seed, {kTagCurve, h}));
        train_local(out.global, mcfg, data.shards[h], meta,
                    cfg.run.training_curve_steps, rng,
                    [&](std::size_t, const MetaStep &step) {
                      tc.push_back(finetune_eval(step.theta, mcfg, data.test_pool,
                                                 meta, episodes,
                                                 report_seed(seed, h)));
                    });
        res.training_curves.push_back(std::move(tc));
      }
    }
    for (auto &v : curve_sum)
      v /= static_cast<double>(cfg.split.n_hospitals);
    res.finetune_curve = std::move(curve_sum);
    return res;
  }

  if (variant == Variant::ATML3_local) {
    std::vector<double> curve_sum;
    for (std::size_t h = 0; h < cfg.split.n_hospitals; ++h) {
      Rng rng(derive_seed(seed, {kTagLocal, h}));
      auto model = train_local(theta0, mcfg, data.shards[h], meta, budget, rng);
      res.hospital_accs.push_back(finetune_eval(model, mcfg, data.test_pool, meta,
                                                episodes, report_seed(seed, h)));
      if (cfg.run.finetune_curve_steps > 0)
        add_curve(curve_sum, curve_of(model, h));
    }
    for (auto &v : curve_sum)
      v /= static_cast<double>(cfg.split.n_hospitals);
    res.finetune_curve = std::move(curve_sum);
    return res;
  }

  // ATML_local / MAML_local: one learner over every common class.
  Rng rng(derive_seed(seed, {kTagLocal}));
  auto model = train_local(theta0, mcfg, data.train_pool, meta, budget, rng);
  res.hospital_accs.push_back(finetune_eval(model, mcfg, data.test_pool, meta,
                                            episodes, report_seed(seed, 0)));
  if (cfg.run.finetune_curve_steps > 0)
    res.finetune_curve = curve_of(model, 0);
  return res;
}

namespace {

std::string run_name(const std::filesystem::path &dir) {
  auto p = dir.lexically_normal();
  if (p.filename().empty())
    p = p.parent_path();
  return p.filename().string();
}

nlohmann::json final_line(const SeedResult &r, const std::string &variant,
                          const std::string &hash) {
  auto j = to_json(r);
  j["schema"] = kFinalSchema;
  j["variant"] = variant;
  j["config_hash"] = hash;
  return j;
}

} // namespace

RunReport run_experiment(const ExperimentConfig &cfg,
                         const std::optional<std::filesystem::path> &out_dir,
                         const ProgressHook &progress) {
  cfg.validate();
  const std::string variant = to_string(cfg.run.variant);
  const std::string hash = cfg.hash();
  std::ofstream log;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    log.open(*out_dir / "rounds.jsonl");
    if (!log)
      throw std::runtime_error("cannot write " + (*out_dir / "rounds.jsonl").string());
    std::ofstream(*out_dir / "config.json") << cfg.to_json().dump(2) << '\n';
  }
  std::vector<SeedResult> results;
  for (auto seed : cfg.run.seeds) {
    auto r = run_seed(cfg, seed);
    if (log) {
      for (const auto &rec : r.round_log) {
        auto j = to_json(rec);
        j["seed"] = seed;
        log << j.dump() << '\n';
      }
      log << final_line(r, variant, hash).dump() << '\n';
      log.flush();
    }
    if (progress)
      progress(variant + " seed " + std::to_string(seed) + ": mean accuracy " +
               std::to_string(r.mean()));
    results.push_back(std::move(r));
  }
  auto rep = aggregate(variant, hash, std::move(results));
  if (out_dir) {
    std::ofstream(*out_dir / "report.json") << rep.to_json().dump(2) << '\n';
    write_curves(rep, *out_dir / "curves");
  }
  return rep;
}

RunReport report_from_round_log(const std::filesystem::path &run_dir) {
  std::ifstream in(run_dir / "rounds.jsonl");
  if (!in)
    throw std::runtime_error("no rounds.jsonl in " + run_dir.string());
  std::map<std::uint64_t, std::vector<RoundRecord>> rounds;
  std::vector<SeedResult> seeds;
  std::string variant, hash, line;
  while (std::getline(in, line)) {
    if (line.empty())
      continue;
    auto j = nlohmann::json::parse(line);
    const auto seed = j.at("seed").get<std::uint64_t>();
    if (j.value("schema", std::string()) == kFinalSchema) {
      SeedResult r;
      r.seed = seed;
      r.hospital_accs = j.at("hospital_accs").get<std::vector<double>>();
      r.uploads = j.at("uploads").get<std::size_t>();
      r.rounds = j.at("rounds").get<std::size_t>();
      r.finetune_curve = j.at("finetune_curve").get<std::vector<double>>();
      r.training_curves =
          j.at("training_curves").get<std::vector<std::vector<double>>>();
      r.round_log = std::move(rounds[seed]);
      std::size_t uploads = 0;
      for (const auto &rec : r.round_log)
        uploads += rec.uploads;
      if (uploads != r.uploads || r.round_log.size() != r.rounds)
        throw std::runtime_error("round log disagrees with final record for seed " +
                                 std::to_string(seed));
      variant = j.at("variant").get<std::string>();
      hash = j.at("config_hash").get<std::string>();
      seeds.push_back(std::move(r));
    } else {
      rounds[seed].push_back(round_record_from_json(j));
    }
  }
  return aggregate(variant, hash, std::move(seeds));
}

void write_curves(const RunReport &report, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  std::ofstream rounds_csv(dir / "fusion_rounds.csv");
  rounds_csv << "x,y,seed,series\n";
  rounds_csv.precision(17);
  for (const auto &s : report.seeds)
    for (const auto &r : s.round_log) {
      for (std::size_t h = 0; h < r.client_accs.size(); ++h)
        if (!std::isnan(r.client_accs[h]))
          rounds_csv << r.round << ',' << r.client_accs[h] << ',' << s.seed
               << ",hospital" << h + 1 << '\n';
      rounds_csv << r.round << ',' << r.global_acc_new << ',' << s.seed << ",global\n";
    }
  std::ofstream finetune_csv(dir / "finetune_steps.csv");
  finetune_csv << "x,y,seed,series\n";
  finetune_csv.precision(17);
  for (const auto &s : report.seeds)
    for (std::size_t i = 0; i < s.finetune_curve.size(); ++i)
      finetune_csv << i << ',' << s.finetune_curve[i] << ',' << s.seed << ",mean\n";
  std::ofstream training_csv(dir / "training_steps.csv");
  training_csv << "x,y,seed,series\n";
  training_csv.precision(17);
  for (const auto &s : report.seeds)
    for (std::size_t h = 0; h < s.training_curves.size(); ++h)
      for (std::size_t i = 0; i < s.training_curves[h].size(); ++i)
        training_csv << i + 1 << ',' << s.training_curves[h][i] << ',' << s.seed
             << ",hospital" << h + 1 << '\n';
}

std::string cli_report(const std::vector<std::filesystem::path> &run_dirs,
                       const std::filesystem::path &out_dir) {
  std::vector<RunReport> reports;
  std::size_t n_cols = 0;
  bool any_baseline = false;
  for (const auto &d : run_dirs) {
    reports.push_back(report_from_round_log(d));
    n_cols = std::max(n_cols, reports.back().hospital_mean.size());
    any_baseline |= is_baseline(variant_from_string(reports.back().variant));
  }
  auto pct = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return std::string(buf);
  };
  std::string md = "| Run | Model |";
  std::string sep = "|---|---|";
  for (std::size_t h = 0; h < n_cols; ++h) {
    md += " Hos" + std::to_string(h + 1) + " |";
    sep += "---|";
  }
  md += " Avg | Uploads |\n";
  sep += "---|---|\n";
  md += sep;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto &r = reports[i];
    md += "| " + run_name(run_dirs[i]) + " | " + r.variant + " |";
    for (std::size_t h = 0; h < n_cols; ++h)
      md += " " + (h < r.hospital_mean.size() ? pct(r.hospital_mean[h]) : "") + " |";
    md += " " + pct(mean_of(r.hospital_mean)) + " | " +
          std::to_string(r.upload_total) + " |\n";
  }
  if (any_baseline)
    for (const char *name : {"LSTM", "Transformer"}) {
      md += std::string("| - | ") + name + " |";
      for (std::size_t h = 0; h < n_cols; ++h)
        md += " n/a |";
      md += " n/a | n/a |\n";
    }

  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / "comparison.md") << md;
  for (std::size_t i = 0; i < reports.size(); ++i)
    write_curves(reports[i], out_dir / "curves" / run_name(run_dirs[i]));
  return md;
}

} // namespace fedmeta
