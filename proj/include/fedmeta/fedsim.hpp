#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmeta/data.hpp"
#include "fedmeta/metalearn.hpp"
#include "fedmeta/network.hpp"
#include "fedmeta/param_set.hpp"

namespace fedmeta {

struct FusionPolicy {
  enum class Kind {
    dynamic_weight,     // accuracy gate + accuracy-proportional weights
    accuracy_gate_only, // accuracy gate + uniform weights
    average,            // every client, uniform weights
  };
  Kind kind = Kind::dynamic_weight;
  std::size_t eval_episodes = 30;
  std::uint64_t eval_seed = 0x5eed;
  // Draw a new fixed episode set each round (seeded by eval_seed and the
  // round number). Otherwise every round reuses the same episodes.
  bool reseed_each_round = true;

  bool gated() const { return kind != Kind::average; }
  void validate() const;
};

std::string to_string(FusionPolicy::Kind k);
FusionPolicy::Kind fusion_kind_from_string(const std::string &s);
void to_json(nlohmann::json &j, const FusionPolicy &p);
void from_json(const nlohmann::json &j, FusionPolicy &p);

struct ClientState {
  std::size_t id = 0;
  LabeledDataset shard;
  ParamSet model;
  double last_acc = 0.0;
};

struct ServerState {
  ParamSet global;
  double global_acc = 0.0; // accuracy of `global` on the evaluation episodes
  std::size_t round = 0;   // completed fusion rounds
};

struct RoundRecord {
  std::size_t round = 0;
  double global_acc_prev = 0.0;
  std::vector<double> client_accs; // NaN for clients excluded this round
  std::vector<std::size_t> selected;
  std::vector<double> weights; // aligned with `selected`
  std::size_t uploads = 0;
  double global_acc_new = 0.0;
  std::vector<std::size_t> excluded; // clients whose local training failed
  std::vector<std::string> events;
  std::string global_hash;
  std::vector<std::string> client_hashes;
  // Populated only when Federation::keep_client_models is set.
  std::vector<ParamSet> client_models;
};

inline constexpr const char *kRoundSchema = "fedmeta.round/1";
nlohmann::json to_json(const RoundRecord &r);
RoundRecord round_record_from_json(const nlohmann::json &j);

struct Federation {
  ModelConfig model;
  MetaConfig meta;
  FusionPolicy policy;
  ServerState server;
  std::vector<ClientState> clients;
  LabeledDataset eval_pool; // rare-class pool the gate is scored on
  std::size_t local_episodes = 5;
  std::uint64_t seed = 0;
  bool keep_client_models = false;
};

// Builds the federation and scores the initial global model.
Federation make_federation(const ModelConfig &model, const MetaConfig &meta,
                           const FusionPolicy &policy, ParamSet initial,
                           std::vector<LabeledDataset> shards,
                           LabeledDataset eval_pool,
                           std::size_t local_episodes, std::uint64_t seed);

// Fine-tune accuracy on the policy's fixed evaluation episodes.
double evaluate(const ParamSet &model, const LabeledDataset &eval_pool,
                const FusionPolicy &policy, const ModelConfig &mcfg,
                const MetaConfig &cfg);

// Indices whose accuracy is at least the previous global accuracy.
std::vector<std::size_t> select_clients(double global_acc_prev,
                                        std::span<const double> client_accs);

// acc_k / sum(acc); uniform when the sum is zero.
std::vector<double> fusion_weights(std::span<const double> selected_accs);

// Evaluation seed used for every model scored in `round`.
std::uint64_t round_eval_seed(const FusionPolicy &policy, std::size_t round);
// broadcast -> local training -> evaluation -> gate -> fusion -> log.
RoundRecord run_round(Federation &fed);

struct FederationResult {
  std::vector<RoundRecord> rounds;
  ParamSet global;
};

using RoundHook = std::function<void(const RoundRecord &)>;

FederationResult run_federation(Federation &fed, std::size_t rounds,
                                const RoundHook &hook = {});

} // namespace fedmeta
