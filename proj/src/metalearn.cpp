#include "fedmeta/metalearn.hpp"

#include <algorithm>
#include <cmath>

#include "fedmeta/errors.hpp"
#include "fedmeta/rng.hpp"

namespace fedmeta {

std::string to_string(Learner l) {
  switch (l) {
  case Learner::atml:
    return "atml";
  case Learner::maml:
    return "maml";
  case Learner::plain:
    return "plain";
  }
  return "?";
}

Learner learner_from_string(const std::string &s) {
  if (s == "atml")
    return Learner::atml;
  if (s == "maml")
    return Learner::maml;
  if (s == "plain")
    return Learner::plain;
  throw ConfigError("meta.learner: unknown learner '" + s +
                    "' (expected atml, maml or plain)");
}

void MetaConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta > 0.0))
    throw ConfigError("meta.alpha must be >= 0 and meta.beta > 0");
  focal.validate();
  if (!(phi >= 0.0))
    throw ConfigError("meta.phi must be >= 0");
  if (n_way < 2)
    throw ConfigError("meta.n_way must be >= 2");
  if (k_shot < 1)
    throw ConfigError("meta.k_shot must be >= 1");
  if (tasks_per_episode < 1)
    throw ConfigError("meta.tasks_per_episode must be >= 1");
  if (adapt_steps < 1)
    throw ConfigError("meta.adapt_steps must be >= 1");
  if (test_episodes < 1)
    throw ConfigError("meta.test_episodes must be >= 1");
  if (!(weight_decay >= 0.0))
    throw ConfigError("meta.weight_decay must be >= 0");
  if (!first_order)
    throw ConfigError("meta.first_order=false: second-order meta-gradients are "
                      "not implemented");
}

void to_json(nlohmann::json &j, const MetaConfig &c) {
  j = {{"alpha", c.alpha},
       {"beta", c.beta},
       {"eta", c.focal.eta},
       {"lambda", c.focal.lambda},
       {"phi", c.phi},
       {"n_way", c.n_way},
       {"k_shot", c.k_shot},
       {"q_per_class", c.q_per_class},
       {"tasks_per_episode", c.tasks_per_episode},
       {"adapt_steps", c.adapt_steps},
       {"finetune_steps", c.finetune_steps},
       {"test_episodes", c.test_episodes},
       {"first_order", c.first_order},
       {"learner", to_string(c.learner)},
       {"outer_optimizer", c.outer_optimizer == OuterOptimizer::adam ? "adam" : "sgd"},
       {"weight_decay", c.weight_decay}};
  if (c.pinned_accuracy)
    j["pinned_accuracy"] = *c.pinned_accuracy;
}

void from_json(const nlohmann::json &j, MetaConfig &c) {
  MetaConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.focal.eta = j.value("eta", d.focal.eta);
  c.focal.lambda = j.value("lambda", d.focal.lambda);
  c.phi = j.value("phi", d.phi);
  c.n_way = j.value("n_way", d.n_way);
  c.k_shot = j.value("k_shot", d.k_shot);
  c.q_per_class = j.value("q_per_class", d.q_per_class);
  c.tasks_per_episode = j.value("tasks_per_episode", d.tasks_per_episode);
  c.adapt_steps = j.value("adapt_steps", d.adapt_steps);
  c.finetune_steps = j.value("finetune_steps", d.finetune_steps);
  c.test_episodes = j.value("test_episodes", d.test_episodes);
  c.first_order = j.value("first_order", d.first_order);
  c.learner = learner_from_string(j.value("learner", std::string("atml")));
  const auto opt = j.value("outer_optimizer", std::string("adam"));
  if (opt == "adam")
    c.outer_optimizer = OuterOptimizer::adam;
  else if (opt == "sgd")
    c.outer_optimizer = OuterOptimizer::sgd;
  else
    throw ConfigError("meta.outer_optimizer: expected adam or sgd, got '" + opt + "'");
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  if (j.contains("pinned_accuracy") && !j["pinned_accuracy"].is_null())
    c.pinned_accuracy = j["pinned_accuracy"].get<double>();
  else
    c.pinned_accuracy.reset();
}

namespace {

Episode build_episode(const LabeledDataset &pool, const std::vector<int> &classes,
                      std::size_t k, std::size_t q, Rng &rng) {
  const std::size_t n = classes.size();
  const std::size_t d = pool.dim();
  Episode ep;
  ep.class_map = classes;
  ep.support.features = Matrix(n * k, d);
  ep.query.features = Matrix(n * q, d);
  std::size_t s_row = 0, q_row = 0;
  for (std::size_t label = 0; label < n; ++label) {
    const auto &rows = pool.class_index.at(classes[label]);
    auto picks = rng.sample_without_replacement(rows.size(), k + q);
    for (std::size_t i = 0; i < k + q; ++i) {
      const std::size_t src = rows[picks[i]];
      auto from = pool.features.row(src);
      const bool to_support = i < k;
      Batch &b = to_support ? ep.support : ep.query;
      std::size_t &dst = to_support ? s_row : q_row;
      std::copy(from.begin(), from.end(), b.features.row(dst).begin());
      b.labels.push_back(static_cast<int>(label));
      (to_support ? ep.support_ids : ep.query_ids).push_back(pool.sample_ids[src]);
      ++dst;
    }
  }
  return ep;
}

std::vector<int> draw_classes(const std::vector<int> &candidates, std::size_t n,
                              Rng &rng) {
  auto picks = rng.sample_without_replacement(candidates.size(), n);
  std::vector<int> out;
  for (auto i : picks)
    out.push_back(candidates[i]);
  return out;
}

} // namespace

Episode sample_episode(const LabeledDataset &pool, const MetaConfig &cfg,
                       Rng &rng) {
  const std::size_t k = cfg.k_shot, q = cfg.query_per_class();
  auto classes = pool.classes();
  if (classes.size() < cfg.n_way)
    throw EpisodeInfeasible("pool has " + std::to_string(classes.size()) +
                                " classes, episode needs " +
                                std::to_string(cfg.n_way),
                            -1);
  for (int c : classes)
    if (pool.class_size(c) < k + q)
      throw EpisodeInfeasible("class " + std::to_string(c) + " has " +
                                  std::to_string(pool.class_size(c)) +
                                  " samples, episode needs " +
                                  std::to_string(k + q),
                              c);
  return build_episode(pool, draw_classes(classes, cfg.n_way, rng), k, q, rng);
}

std::vector<int> excluded_eval_classes(const LabeledDataset &pool,
                                       std::size_t k_shot) {
  std::vector<int> out;
  for (int c : pool.classes())
    if (pool.class_size(c) <= k_shot)
      out.push_back(c);
  return out;
}

Episode sample_eval_episode(const LabeledDataset &pool, const MetaConfig &cfg,
                            Rng &rng) {
  const std::size_t k = cfg.k_shot;
  std::vector<int> eligible;
  for (int c : pool.classes())
    if (pool.class_size(c) > k)
      eligible.push_back(c);
  if (eligible.size() < cfg.n_way)
    throw EpisodeInfeasible("only " + std::to_string(eligible.size()) +
                                " classes have more than " + std::to_string(k) +
                                " samples",
                            -1);
  auto classes = draw_classes(eligible, cfg.n_way, rng);
  std::size_t q = cfg.query_per_class();
  for (int c : classes)
    q = std::min(q, pool.class_size(c) - k);
  return build_episode(pool, classes, k, q, rng);
}

namespace {

struct LossGrad {
  double loss;
  double accuracy;
  ParamSet grad;
};

LossGrad loss_and_grad(const ParamSet &theta, const ModelConfig &mcfg,
                       const Batch &batch, const FocalParams &fp) {
  auto fwd = forward(theta, mcfg, batch);
  auto lr = focal_loss(fwd.logits, batch.labels, fp);
  const double acc = accuracy(fwd.logits, batch.labels);
  return {lr.loss, acc, backward(fwd.cache, lr.grad_logits)};
}

Batch concat(const Batch &a, const Batch &b) {
  Batch out;
  out.features = Matrix(a.rows() + b.rows(), a.features.cols);
  std::copy(a.features.data.begin(), a.features.data.end(),
            out.features.data.begin());
  std::copy(b.features.data.begin(), b.features.data.end(),
            out.features.data.begin() + static_cast<long>(a.features.data.size()));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

} // namespace

Adapted inner_adapt(const ParamSet &theta, const ModelConfig &mcfg,
                    const Episode &episode, const MetaConfig &cfg) {
  const FocalParams fp = cfg.inner_loss();
  ParamSet theta_h = theta;
  for (std::size_t s = 0; s < cfg.adapt_steps; ++s) {
    auto lg = loss_and_grad(theta_h, mcfg, episode.support, fp);
    if (!std::isfinite(lg.loss))
      throw NonFiniteError("inner_adapt: non-finite support loss at step " +
                           std::to_string(s));
    theta_h = sgd_step(theta_h, lg.grad, cfg.alpha);
  }
  auto q = loss_and_grad(theta_h, mcfg, episode.query, fp);
  TaskOutcome out{q.loss, q.accuracy, episode.query.rows(), std::move(q.grad)};
  return {std::move(theta_h), std::move(out)};
}

MetaStep meta_update(const ParamSet &theta, const ModelConfig &mcfg,
                     const std::vector<Episode> &episodes,
                     const MetaConfig &cfg, AdamState &opt) {
  if (episodes.empty())
    throw std::invalid_argument("meta_update: no episodes");
  if (!cfg.first_order)
    throw ConfigError("second-order meta-gradients are not implemented");

  MetaStep step;
  step.meta_grad = ParamSet(theta.layout_ptr(), 0.0);
  double acc_sum = 0.0;

  if (cfg.learner == Learner::plain) {
    for (const auto &ep : episodes) {
      auto lg = loss_and_grad(theta, mcfg, concat(ep.support, ep.query),
                              FocalParams{1.0, 0.0});
      step.meta_grad += lg.grad;
      step.outer_loss += lg.loss;
      acc_sum += lg.accuracy;
    }
  } else {
    std::vector<TaskOutcome> outcomes;
    outcomes.reserve(episodes.size());
    for (const auto &ep : episodes) {
      auto adapted = inner_adapt(theta, mcfg, ep, cfg);
      acc_sum += adapted.outcome.accuracy;
      if (cfg.pinned_accuracy)
        adapted.outcome.accuracy = *cfg.pinned_accuracy;
      outcomes.push_back(std::move(adapted.outcome));
    }
    std::vector<double> weights;
    if (cfg.learner == Learner::atml) {
      auto at = at_loss(outcomes, cfg.phi);
      step.outer_loss = at.loss;
      weights = std::move(at.task_weights);
    } else {
      weights.assign(outcomes.size(), 1.0);
      for (const auto &o : outcomes)
        step.outer_loss += o.focal_loss;
    }
    for (std::size_t i = 0; i < outcomes.size(); ++i)
      step.meta_grad.axpy(weights[i], outcomes[i].grad);
  }
  step.mean_query_accuracy = acc_sum / static_cast<double>(episodes.size());

  if (cfg.outer_optimizer == OuterOptimizer::adam)
    step.theta = adam_step(theta, step.meta_grad, opt, cfg.beta, cfg.weight_decay);
  else
    step.theta = sgd_step(theta, step.meta_grad, cfg.beta);
  return step;
}

namespace {

// Query accuracy after each of 0..max_steps fine-tune steps.
std::vector<double> finetune_trajectory(const ParamSet &theta,
                                        const ModelConfig &mcfg,
                                        const Episode &ep,
                                        const MetaConfig &cfg,
                                        std::size_t max_steps) {
  const FocalParams fp = cfg.inner_loss();
  std::vector<double> accs;
  accs.reserve(max_steps + 1);
  ParamSet w = theta;
  for (std::size_t s = 0;; ++s) {
    accs.push_back(
        accuracy(predict(w, mcfg, ep.query.features), ep.query.labels));
    if (s == max_steps)
      break;
    auto lg = loss_and_grad(w, mcfg, ep.support, fp);
    w = sgd_step(w, lg.grad, cfg.alpha);
  }
  return accs;
}

} // namespace

double finetune_episode(const ParamSet &theta, const ModelConfig &mcfg,
                        const Episode &episode, const MetaConfig &cfg,
                        std::size_t steps) {
  const FocalParams fp = cfg.inner_loss();
  ParamSet w = theta;
  for (std::size_t s = 0; s < steps; ++s) {
    auto lg = loss_and_grad(w, mcfg, episode.support, fp);
    w = sgd_step(w, lg.grad, cfg.alpha);
  }
  return accuracy(predict(w, mcfg, episode.query.features), episode.query.labels);
}

double finetune_eval(const ParamSet &theta, const ModelConfig &mcfg,
                     const LabeledDataset &test_pool, const MetaConfig &cfg,
                     std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0)
    throw std::invalid_argument("finetune_eval: episodes must be >= 1");
  Rng rng(seed);
  double sum = 0.0;
  for (std::size_t e = 0; e < episodes; ++e) {
    auto ep = sample_eval_episode(test_pool, cfg, rng);
    sum += finetune_episode(theta, mcfg, ep, cfg, cfg.finetune_steps);
  }
  return sum / static_cast<double>(episodes);
}

std::vector<double> finetune_curve(const ParamSet &theta,
                                   const ModelConfig &mcfg,
                                   const LabeledDataset &test_pool,
                                   const MetaConfig &cfg, std::size_t episodes,
                                   std::uint64_t seed, std::size_t max_steps) {
  if (episodes == 0)
    throw std::invalid_argument("finetune_curve: episodes must be >= 1");
  Rng rng(seed);
  std::vector<double> mean(max_steps + 1, 0.0);
  for (std::size_t e = 0; e < episodes; ++e) {
    auto ep = sample_eval_episode(test_pool, cfg, rng);
    auto accs = finetune_trajectory(theta, mcfg, ep, cfg, max_steps);
    for (std::size_t s = 0; s <= max_steps; ++s)
      mean[s] += accs[s];
  }
  for (auto &m : mean)
    m /= static_cast<double>(episodes);
  return mean;
}

ParamSet train_local(const ParamSet &theta_init, const ModelConfig &mcfg,
                     const LabeledDataset &train_pool, const MetaConfig &cfg,
                     std::size_t budget, Rng &rng, const IterationHook &hook) {
  ParamSet theta = theta_init;
  AdamState opt;
  std::vector<Episode> episodes(cfg.tasks_per_episode);
  for (std::size_t it = 0; it < budget; ++it) {
    for (auto &ep : episodes)
      ep = sample_episode(train_pool, cfg, rng);
    auto step = meta_update(theta, mcfg, episodes, cfg, opt);
    if (hook)
      hook(it, step);
    theta = std::move(step.theta);
  }
  return theta;
}

} // namespace fedmeta
