#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmeta/data.hpp"
#include "fedmeta/losses.hpp"
#include "fedmeta/network.hpp"
#include "fedmeta/optim.hpp"

namespace fedmeta {

class Rng;

// How a client turns episodes into an update of its initialization.
enum class Learner {
  atml,  // focal inner loss, attention (AT) outer loss
  maml,  // cross-entropy inner loss, summed outer loss
  plain, // no adaptation: cross-entropy on support+query at theta
};

enum class OuterOptimizer { adam, sgd };

std::string to_string(Learner l);
Learner learner_from_string(const std::string &s);

struct MetaConfig {
  double alpha = 0.01;  // inner (adaptation / fine-tune) learning rate
  double beta = 0.001;  // outer learning rate
  FocalParams focal{};
  double phi = 2.0;
  std::size_t n_way = 2;
  std::size_t k_shot = 5;
  std::size_t q_per_class = 0; // 0 selects 2 * k_shot
  std::size_t tasks_per_episode = 10;
  std::size_t adapt_steps = 5;
  std::size_t finetune_steps = 5;
  std::size_t test_episodes = 30;
  bool first_order = true;
  Learner learner = Learner::atml;
  OuterOptimizer outer_optimizer = OuterOptimizer::adam;
  double weight_decay = 0.1;
  // Diagnostic hook: replace every task's query accuracy in the outer loss.
  std::optional<double> pinned_accuracy;

  std::size_t query_per_class() const {
    return q_per_class == 0 ? 2 * k_shot : q_per_class;
  }
  // Loss used for adaptation and fine-tuning.
  FocalParams inner_loss() const {
    return learner == Learner::atml ? focal : FocalParams{1.0, 0.0};
  }
  void validate() const;
};

void to_json(nlohmann::json &j, const MetaConfig &c);
void from_json(const nlohmann::json &j, MetaConfig &c);

struct Episode {
  Batch support;
  Batch query;
  std::vector<int> class_map; // episode-local label -> original class id
  std::vector<std::size_t> support_ids;
  std::vector<std::size_t> query_ids;
};

// N classes uniformly without replacement, then K + Q samples per class
// without replacement (first K to support). Labels follow draw order.
// Throws EpisodeInfeasible naming a class with fewer than K + Q samples.
Episode sample_episode(const LabeledDataset &pool, const MetaConfig &cfg,
                       Rng &rng);

// Meta-test sampling over small pools: classes with <= K samples are
// skipped, and Q shrinks to min(Q, smallest drawn class size - K) so the
// query set stays balanced.
Episode sample_eval_episode(const LabeledDataset &pool, const MetaConfig &cfg,
                            Rng &rng);

// Classes sample_eval_episode will never draw (size <= K).
std::vector<int> excluded_eval_classes(const LabeledDataset &pool,
                                       std::size_t k_shot);

struct Adapted {
  ParamSet theta_h;
  TaskOutcome outcome;
};

// adapt_steps of SGD (lr alpha) on the support inner loss, then query loss,
// accuracy and gradient at the adapted parameters.
Adapted inner_adapt(const ParamSet &theta, const ModelConfig &mcfg,
                    const Episode &episode, const MetaConfig &cfg);

struct MetaStep {
  ParamSet theta;
  double outer_loss = 0.0;
  double mean_query_accuracy = 0.0;
  ParamSet meta_grad;
};

// One outer step over a batch of episodes. Per-task gradients are combined in
// task order with the outer-loss task weights.
MetaStep meta_update(const ParamSet &theta, const ModelConfig &mcfg,
                     const std::vector<Episode> &episodes,
                     const MetaConfig &cfg, AdamState &opt);

// Copies theta, fine-tunes for `steps` on the support set and scores the
// query set.
double finetune_episode(const ParamSet &theta, const ModelConfig &mcfg,
                        const Episode &episode, const MetaConfig &cfg,
                        std::size_t steps);

// Mean query accuracy over `episodes` meta-test episodes drawn from
// Rng(seed) in sequence.
double finetune_eval(const ParamSet &theta, const ModelConfig &mcfg,
                     const LabeledDataset &test_pool, const MetaConfig &cfg,
                     std::size_t episodes, std::uint64_t seed);

// Mean query accuracy after 0..max_steps fine-tune steps on the same
// episodes (index = step count).
std::vector<double> finetune_curve(const ParamSet &theta,
                                   const ModelConfig &mcfg,
                                   const LabeledDataset &test_pool,
                                   const MetaConfig &cfg, std::size_t episodes,
                                   std::uint64_t seed, std::size_t max_steps);

using IterationHook = std::function<void(std::size_t, const MetaStep &)>;

// `budget` outer iterations, each over tasks_per_episode fresh episodes.
ParamSet train_local(const ParamSet &theta_init, const ModelConfig &mcfg,
                     const LabeledDataset &train_pool, const MetaConfig &cfg,
                     std::size_t budget, Rng &rng,
                     const IterationHook &hook = {});

} // namespace fedmeta
