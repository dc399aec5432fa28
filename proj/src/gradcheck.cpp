#include <algorithm>
#include <cmath>
#include <functional>

#include "fedmeta/harness.hpp"
#include "fedmeta/losses.hpp"
#include "fedmeta/rng.hpp"

namespace fedmeta {

namespace {

// Components smaller than this are compared on an absolute scale.
constexpr double kRelFloor = 1e-6;

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kRelFloor});
}

// Central differences of f over every entry of x.
std::vector<double> central_diff(std::vector<double> x,
                                 const std::function<double(const std::vector<double> &)> &f,
                                 double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

GradcheckPath compare(const std::string &name, std::vector<double> analytic,
                      const std::vector<double> &numeric,
                      const GradcheckOptions &opts) {
  if (opts.corrupt_path == name && !analytic.empty())
    analytic[0] += 1e-2 * (std::abs(analytic[0]) + 1.0);
  GradcheckPath p{name, 0.0, false};
  for (std::size_t i = 0; i < analytic.size(); ++i)
    p.max_rel_err = std::max(p.max_rel_err, rel_err(analytic[i], numeric[i]));
  p.passed = p.max_rel_err < opts.tolerance;
  return p;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng &rng, double scale) {
  Matrix m(r, c);
  for (auto &v : m.data)
    v = scale * rng.normal();
  return m;
}

std::vector<int> random_labels(std::size_t n, std::size_t n_way, Rng &rng) {
  std::vector<int> y(n);
  for (auto &v : y)
    v = static_cast<int>(rng.below(n_way));
  return y;
}

GradcheckPath check_logit_loss(const std::string &name, const FocalParams &fp,
                               Rng &rng, const GradcheckOptions &opts) {
  Matrix logits = random_matrix(7, 3, rng, 1.5);
  auto labels = random_labels(7, 3, rng);
  auto res = focal_loss(logits, labels, fp);
  auto numeric = central_diff(
      logits.data,
      [&](const std::vector<double> &x) {
        Matrix l = logits;
        l.data = x;
        return focal_loss(l, labels, fp).loss;
      },
      opts.step);
  return compare(name, res.grad_logits.data, numeric, opts);
}

GradcheckPath check_network(const std::string &name, const ModelConfig &mcfg,
                            Rng &rng, const GradcheckOptions &opts) {
  ParamSet params = init_params(mcfg, rng);
  // Move batch-norm parameters off their identity init so both branches
  // carry non-trivial gradients.
  for (auto &v : params.values())
    v += 0.1 * rng.normal();
  Batch batch{random_matrix(6, mcfg.input_dim, rng, 1.0),
              random_labels(6, mcfg.n_way, rng)};
  const FocalParams fp{5.0, 2.0};
  auto fwd = forward(params, mcfg, batch);
  auto loss = focal_loss(fwd.logits, batch.labels, fp);
  auto grad = backward(fwd.cache, loss.grad_logits);
  auto numeric = central_diff(
      std::vector<double>(params.values().begin(), params.values().end()),
      [&](const std::vector<double> &x) {
        ParamSet p(params.layout_ptr(), x);
        return focal_loss(forward(p, mcfg, batch).logits, batch.labels, fp).loss;
      },
      opts.step);
  return compare(name, {grad.values().begin(), grad.values().end()}, numeric,
                 opts);
}

// Gradient of sum_i -F_i(theta)^phi log2(acc_i) with accuracies held fixed,
// assembled from per-task gradients and the at_loss task weights.
GradcheckPath check_at_loss(Rng &rng, const GradcheckOptions &opts) {
  ModelConfig mcfg;
  mcfg.input_dim = 4;
  mcfg.encoder_dims = {5};
  mcfg.head_dims = {3};
  mcfg.n_way = 2;
  ParamSet theta = init_params(mcfg, rng);
  const FocalParams fp{5.0, 2.0};
  const double phi = 2.0;
  const std::vector<double> accs{0.25, 0.5, 0.75};
  std::vector<Batch> queries;
  for (std::size_t i = 0; i < accs.size(); ++i)
    queries.push_back({random_matrix(4, 4, rng, 1.0), {0, 1, 0, 1}});

  std::vector<TaskOutcome> tasks;
  for (std::size_t i = 0; i < accs.size(); ++i) {
    auto fwd = forward(theta, mcfg, queries[i]);
    auto l = focal_loss(fwd.logits, queries[i].labels, fp);
    tasks.push_back({l.loss, accs[i], queries[i].rows(),
                     backward(fwd.cache, l.grad_logits)});
  }
  auto at = at_loss(tasks, phi);
  ParamSet meta_grad(theta.layout_ptr(), 0.0);
  for (std::size_t i = 0; i < tasks.size(); ++i)
    meta_grad.axpy(at.task_weights[i], tasks[i].grad);

  auto numeric = central_diff(
      std::vector<double>(theta.values().begin(), theta.values().end()),
      [&](const std::vector<double> &x) {
        ParamSet p(theta.layout_ptr(), x);
        double total = 0.0;
        for (std::size_t i = 0; i < accs.size(); ++i) {
          const double f =
              focal_loss(forward(p, mcfg, queries[i]).logits, queries[i].labels, fp)
                  .loss;
          total += -std::pow(f, phi) * std::log2(accs[i]);
        }
        return total;
      },
      opts.step);
  return compare("at_loss/meta_gradient", {meta_grad.values().begin(), meta_grad.values().end()},
                 numeric, opts);
}

// Exact identity: with lambda = 0 the focal gradient is eta times the
// cross-entropy gradient.
GradcheckPath check_lambda_zero(Rng &rng, const GradcheckOptions &opts) {
  Matrix logits = random_matrix(5, 3, rng, 2.0);
  auto labels = random_labels(5, 3, rng);
  const double eta = 5.0;
  auto focal = focal_loss(logits, labels, {eta, 0.0});
  auto ce = cross_entropy(logits, labels);
  std::vector<double> scaled = ce.grad_logits.data;
  for (auto &v : scaled)
    v *= eta;
  auto analytic = focal.grad_logits.data;
  if (opts.corrupt_path == "focal/lambda0_is_eta_ce")
    analytic[0] += 1e-2;
  GradcheckPath p{"focal/lambda0_is_eta_ce", 0.0, true};
  for (std::size_t i = 0; i < scaled.size(); ++i)
    p.max_rel_err = std::max(p.max_rel_err, std::abs(analytic[i] - scaled[i]));
  p.passed = p.max_rel_err == 0.0;
  return p;
}

} // namespace

std::vector<GradcheckPath> cli_gradcheck(const GradcheckOptions &opts) {
  Rng rng(opts.seed);
  std::vector<GradcheckPath> out;
  out.push_back(check_logit_loss("cross_entropy/logits", {1.0, 0.0}, rng, opts));
  out.push_back(check_logit_loss("focal(eta=5,lambda=2)/logits", {5.0, 2.0}, rng, opts));
  out.push_back(check_logit_loss("focal(eta=2,lambda=0.5)/logits", {2.0, 0.5}, rng, opts));
  out.push_back(check_lambda_zero(rng, opts));

  auto cfg = [](std::vector<std::size_t> enc, bool bn, std::vector<std::size_t> head) {
    ModelConfig m;
    m.input_dim = 5;
    m.encoder_dims = std::move(enc);
    m.batch_norm = bn;
    m.head_dims = std::move(head);
    m.n_way = 3;
    return m;
  };
  out.push_back(check_network("network/encoder1+bn", cfg({4}, true, {3}), rng, opts));
  out.push_back(check_network("network/encoder2+bn", cfg({6, 4}, true, {3}), rng, opts));
  out.push_back(check_network("network/encoder3+bn", cfg({6, 4, 3}, true, {3}), rng, opts));
  out.push_back(check_network("network/encoder2_no_bn", cfg({6, 4}, false, {3}), rng, opts));
  out.push_back(check_network("network/bn_only", cfg({}, true, {}), rng, opts));
  out.push_back(check_network("network/linear", cfg({}, false, {}), rng, opts));
  out.push_back(check_at_loss(rng, opts));
  return out;
}

} // namespace fedmeta
