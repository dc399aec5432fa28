#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "fedmeta/data.hpp"
#include "fedmeta/errors.hpp"
#include "fedmeta/harness.hpp"

using namespace fedmeta;

namespace {

ExperimentConfig load_or_default(const std::string &path) {
  if (path.empty()) {
    ExperimentConfig c;
    c.validate();
    return c;
  }
  return ExperimentConfig::load(path);
}

int cmd_run(const std::string &config, const std::vector<std::uint64_t> &seeds,
            const std::string &variant, std::string out_dir, bool quiet) {
  auto cfg = load_or_default(config);
  if (!variant.empty())
    cfg.run.variant = variant_from_string(variant);
  if (!seeds.empty())
    cfg.run.seeds = seeds;
  cfg.validate();
  if (out_dir.empty())
    out_dir = "runs/" + to_string(cfg.run.variant);
  auto rep = run_experiment(cfg, out_dir, [&](const std::string &msg) {
    if (!quiet)
      std::cerr << msg << '\n';
  });
  std::printf("%s: mean %.4f (std %.4f) over %zu seed(s), uploads %zu, config %s\n",
              rep.variant.c_str(), rep.mean, rep.std, rep.seeds.size(),
              rep.upload_total, rep.config_hash.c_str());
  std::printf("wrote %s/report.json\n", out_dir.c_str());
  return 0;
}

int cmd_gradcheck(const std::string &corrupt) {
  GradcheckOptions opts;
  opts.corrupt_path = corrupt;
  bool ok = true;
  for (const auto &p : cli_gradcheck(opts)) {
    std::printf("%-34s max_rel_err %.3e  %s\n", p.name.c_str(), p.max_rel_err,
                p.passed ? "PASS" : "FAIL");
    ok &= p.passed;
  }
  std::printf("gradcheck: %s\n", ok ? "all paths pass" : "FAILED");
  return ok ? 0 : 1;
}

int cmd_gen_data(const std::string &config, std::uint64_t seed, bool has_seed,
                 const std::string &out) {
  auto cfg = load_or_default(config);
  SyntheticSpec spec = cfg.data.synthetic;
  if (has_seed)
    spec.seed = seed;
  auto ds = gen_synthetic(spec);
  write_csv(ds, out);
  std::printf("wrote %zu rows x %zu features to %s\n", ds.rows(), ds.dim(),
              out.c_str());
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Federated meta-learning simulator for few-shot rare-class prediction"};
  app.require_subcommand(1);

  std::string config, variant, out_dir, corrupt, gen_out;
  std::vector<std::uint64_t> seeds;
  bool quiet = false;

  auto *run = app.add_subcommand("run", "Run one experiment variant across seeds");
  run->add_option("--config", config, "Experiment config (JSON)");
  run->add_option("--seed", seeds, "Override the seed list");
  run->add_option("--variant", variant, "Override run.variant");
  run->add_option("--out-dir", out_dir, "Output directory (default runs/<variant>)");
  run->add_flag("--quiet", quiet, "No per-seed progress");

  auto *grad = app.add_subcommand("gradcheck", "Finite-difference check of every gradient path");
  grad->add_option("--corrupt", corrupt, "Perturb the named path (negative control)");

  std::vector<std::string> dirs;
  std::string report_out = "report_out";
  auto *rep = app.add_subcommand("report", "Comparison table and curve CSVs from run dirs");
  rep->add_option("dirs", dirs, "Run directories")->required();
  rep->add_option("--out-dir", report_out, "Where to write comparison.md and curves/");

  std::uint64_t gen_seed = 0;
  auto *gen = app.add_subcommand("gen-data", "Write a synthetic dataset as CSV");
  gen->add_option("--config", config, "Config whose data.synthetic section is used");
  auto *gen_seed_opt = gen->add_option("--seed", gen_seed, "Override data.synthetic.seed");
  gen->add_option("--out", gen_out, "Output CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run)
      return cmd_run(config, seeds, variant, out_dir, quiet);
    if (*grad)
      return cmd_gradcheck(corrupt);
    if (*rep) {
      std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
      std::cout << cli_report(paths, report_out);
      return 0;
    }
    if (*gen)
      return cmd_gen_data(config, gen_seed, gen_seed_opt->count() > 0, gen_out);
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
