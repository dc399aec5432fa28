#include "fedmeta/fedsim.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "fedmeta/errors.hpp"
#include "fedmeta/rng.hpp"

namespace fedmeta {

void FusionPolicy::validate() const {
  if (eval_episodes < 1)
    throw ConfigError("fusion.eval_episodes must be >= 1");
}

std::string to_string(FusionPolicy::Kind k) {
  switch (k) {
  case FusionPolicy::Kind::dynamic_weight:
    return "dynamic_weight";
  case FusionPolicy::Kind::accuracy_gate_only:
    return "accuracy_gate_only";
  case FusionPolicy::Kind::average:
    return "average";
  }
  return "?";
}

FusionPolicy::Kind fusion_kind_from_string(const std::string &s) {
  if (s == "dynamic_weight")
    return FusionPolicy::Kind::dynamic_weight;
  if (s == "accuracy_gate_only")
    return FusionPolicy::Kind::accuracy_gate_only;
  if (s == "average")
    return FusionPolicy::Kind::average;
  throw ConfigError("fusion.kind: unknown policy '" + s + "'");
}

void to_json(nlohmann::json &j, const FusionPolicy &p) {
  j = {{"kind", to_string(p.kind)},
       {"eval_episodes", p.eval_episodes},
       {"eval_seed", p.eval_seed},
       {"reseed_each_round", p.reseed_each_round}};
}

void from_json(const nlohmann::json &j, FusionPolicy &p) {
  FusionPolicy d;
  p.kind = fusion_kind_from_string(j.value("kind", to_string(d.kind)));
  p.eval_episodes = j.value("eval_episodes", d.eval_episodes);
  p.eval_seed = j.value("eval_seed", d.eval_seed);
  p.reseed_each_round = j.value("reseed_each_round", d.reseed_each_round);
}

std::uint64_t round_eval_seed(const FusionPolicy &policy, std::size_t round) {
  return policy.reseed_each_round ? derive_seed(policy.eval_seed, {round})
                                  : policy.eval_seed;
}

namespace {

nlohmann::json nan_to_null(const std::vector<double> &v) {
  auto out = nlohmann::json::array();
  for (double x : v)
    out.push_back(std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x));
  return out;
}

} // namespace

nlohmann::json to_json(const RoundRecord &r) {
  return {{"schema", kRoundSchema},
          {"round", r.round},
          {"global_acc_prev", r.global_acc_prev},
          {"client_accs", nan_to_null(r.client_accs)},
          {"selected", r.selected},
          {"weights", r.weights},
          {"uploads", r.uploads},
          {"global_acc_new", r.global_acc_new},
          {"excluded", r.excluded},
          {"events", r.events},
          {"global_hash", r.global_hash},
          {"client_hashes", r.client_hashes}};
}

RoundRecord round_record_from_json(const nlohmann::json &j) {
  if (j.value("schema", std::string()) != kRoundSchema)
    throw std::runtime_error("round log: unsupported schema");
  RoundRecord r;
  r.round = j.at("round").get<std::size_t>();
  r.global_acc_prev = j.at("global_acc_prev").get<double>();
  for (const auto &a : j.at("client_accs"))
    r.client_accs.push_back(a.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                        : a.get<double>());
  r.selected = j.at("selected").get<std::vector<std::size_t>>();
  r.weights = j.at("weights").get<std::vector<double>>();
  r.uploads = j.at("uploads").get<std::size_t>();
  r.global_acc_new = j.at("global_acc_new").get<double>();
  r.excluded = j.at("excluded").get<std::vector<std::size_t>>();
  r.events = j.at("events").get<std::vector<std::string>>();
  r.global_hash = j.at("global_hash").get<std::string>();
  r.client_hashes = j.at("client_hashes").get<std::vector<std::string>>();
  return r;
}

double evaluate(const ParamSet &model, const LabeledDataset &eval_pool,
                const FusionPolicy &policy, const ModelConfig &mcfg,
                const MetaConfig &cfg) {
  return finetune_eval(model, mcfg, eval_pool, cfg, policy.eval_episodes,
                       policy.eval_seed);
}

std::vector<std::size_t> select_clients(double global_acc_prev,
                                        std::span<const double> client_accs) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < client_accs.size(); ++i)
    if (global_acc_prev <= client_accs[i])
      out.push_back(i);
  return out;
}

std::vector<double> fusion_weights(std::span<const double> selected_accs) {
  if (selected_accs.empty())
    throw std::invalid_argument("fusion_weights: no selected clients");
  double total = 0.0;
  for (double a : selected_accs) {
    if (!(a >= 0.0 && a <= 1.0))
      throw std::invalid_argument("fusion_weights: accuracy outside [0, 1]");
    total += a;
  }
  const double n = static_cast<double>(selected_accs.size());
  std::vector<double> w;
  w.reserve(selected_accs.size());
  for (double a : selected_accs)
    w.push_back(total > 0.0 ? a / total : 1.0 / n);
  return w;
}

Federation make_federation(const ModelConfig &model, const MetaConfig &meta,
                           const FusionPolicy &policy, ParamSet initial,
                           std::vector<LabeledDataset> shards,
                           LabeledDataset eval_pool,
                           std::size_t local_episodes, std::uint64_t seed) {
  model.validate();
  meta.validate();
  policy.validate();
  if (shards.empty())
    throw ConfigError("federation needs at least one client");
  Federation fed;
  fed.model = model;
  fed.meta = meta;
  fed.policy = policy;
  fed.eval_pool = std::move(eval_pool);
  fed.local_episodes = local_episodes;
  fed.seed = seed;
  fed.server.global = std::move(initial);
  FusionPolicy p0 = policy;
  p0.eval_seed = round_eval_seed(policy, 0);
  fed.server.global_acc = evaluate(fed.server.global, fed.eval_pool, p0, model, meta);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    ClientState c;
    c.id = i;
    c.shard = std::move(shards[i]);
    c.model = fed.server.global;
    fed.clients.push_back(std::move(c));
  }
  return fed;
}

RoundRecord run_round(Federation &fed) {
  RoundRecord rec;
  rec.round = fed.server.round + 1;
  // Every model this round, including the incoming global, is scored on the
  // same episodes.
  FusionPolicy policy = fed.policy;
  policy.eval_seed = round_eval_seed(fed.policy, rec.round);
  if (fed.policy.reseed_each_round)
    fed.server.global_acc =
        evaluate(fed.server.global, fed.eval_pool, policy, fed.model, fed.meta);
  rec.global_acc_prev = fed.server.global_acc;
  const std::size_t n = fed.clients.size();
  rec.client_accs.assign(n, std::numeric_limits<double>::quiet_NaN());

  // Local training from the broadcast global model; per-client streams are
  // keyed by (seed, client, round) only.
  std::vector<std::size_t> alive;
  for (auto &client : fed.clients) {
    Rng rng(derive_seed(fed.seed, {0x7c1e47ULL, client.id, rec.round}));
    try {
      client.model = train_local(fed.server.global, fed.model, client.shard,
                                 fed.meta, fed.local_episodes, rng);
      alive.push_back(client.id);
    } catch (const std::exception &e) {
      rec.excluded.push_back(client.id);
      rec.events.push_back("client " + std::to_string(client.id) +
                           " excluded: " + e.what());
      std::cerr << "[fedsim] round " << rec.round << ": client " << client.id
                << " excluded: " << e.what() << '\n';
    }
  }

  for (auto id : alive) {
    auto &client = fed.clients[id];
    client.last_acc =
        evaluate(client.model, fed.eval_pool, policy, fed.model, fed.meta);
    rec.client_accs[id] = client.last_acc;
  }

  std::vector<double> alive_accs;
  for (auto id : alive)
    alive_accs.push_back(rec.client_accs[id]);

  const bool first_round = rec.round == 1;
  if (!fed.policy.gated() || first_round) {
    rec.selected = alive;
    rec.weights.assign(alive.size(), alive.empty() ? 0.0 : 1.0 / alive.size());
  } else {
    for (auto i : select_clients(rec.global_acc_prev, alive_accs))
      rec.selected.push_back(alive[i]);
    std::vector<double> sel_accs;
    for (auto id : rec.selected)
      sel_accs.push_back(rec.client_accs[id]);
    if (!rec.selected.empty()) {
      if (fed.policy.kind == FusionPolicy::Kind::dynamic_weight)
        rec.weights = fusion_weights(sel_accs);
      else
        rec.weights.assign(rec.selected.size(), 1.0 / rec.selected.size());
    }
  }
  rec.uploads = rec.selected.size();

  if (!rec.selected.empty()) {
    std::vector<ParamSet> models;
    models.reserve(rec.selected.size());
    for (auto id : rec.selected)
      models.push_back(fed.clients[id].model);
    fed.server.global = weighted_sum(models, rec.weights);
    fed.server.global_acc = evaluate(fed.server.global, fed.eval_pool,
                                     policy, fed.model, fed.meta);
  }
  rec.global_acc_new = fed.server.global_acc;
  rec.global_hash = hex64(fed.server.global.hash());
  for (const auto &c : fed.clients)
    rec.client_hashes.push_back(hex64(c.model.hash()));
  if (fed.keep_client_models)
    for (const auto &c : fed.clients)
      rec.client_models.push_back(c.model);
  fed.server.round = rec.round;
  return rec;
}

FederationResult run_federation(Federation &fed, std::size_t rounds,
                                const RoundHook &hook) {
  FederationResult res;
  res.rounds.reserve(rounds);
  for (std::size_t r = 0; r < rounds; ++r) {
    res.rounds.push_back(run_round(fed));
    if (hook)
      hook(res.rounds.back());
  }
  res.global = fed.server.global;
  return res;
}

} // namespace fedmeta
