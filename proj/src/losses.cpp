#include "fedmeta/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fedmeta/errors.hpp"

namespace fedmeta {

void FocalParams::validate() const {
  if (!(eta >= 0.0))
    throw ConfigError("focal.eta must be >= 0");
  if (!(lambda >= 0.0))
    throw ConfigError("focal.lambda must be >= 0");
}

namespace {

void check_labels(const Matrix &logits, std::span<const int> labels) {
  if (labels.size() != logits.rows)
    throw LayoutError("label count " + std::to_string(labels.size()) +
                      " != logit rows " + std::to_string(logits.rows));
  if (logits.rows == 0)
    throw LayoutError("empty logits");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols)
      throw LayoutError("label " + std::to_string(y) + " out of range for " +
                        std::to_string(logits.cols) + " classes");
}

// Fills probs with softmax rows and returns per-row cross-entropy.
std::vector<double> softmax_ce(const Matrix &logits, std::span<const int> labels,
                               Matrix &probs) {
  probs = Matrix(logits.rows, logits.cols);
  std::vector<double> ce(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto z = logits.row(r);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      probs(r, j) = std::exp(z[j] - mx);
      s += probs(r, j);
    }
    for (std::size_t j = 0; j < z.size(); ++j)
      probs(r, j) /= s;
    ce[r] = std::log(s) + mx - z[static_cast<std::size_t>(labels[r])];
  }
  return ce;
}

} // namespace

std::vector<double> per_sample_cross_entropy(const Matrix &logits,
                                             std::span<const int> labels) {
  check_labels(logits, labels);
  Matrix probs;
  return softmax_ce(logits, labels, probs);
}

LossResult cross_entropy(const Matrix &logits, std::span<const int> labels) {
  return focal_loss(logits, labels, FocalParams{1.0, 0.0});
}

LossResult focal_loss(const Matrix &logits, std::span<const int> labels,
                      const FocalParams &fp) {
  check_labels(logits, labels);
  fp.validate();
  Matrix probs;
  auto ce = softmax_ce(logits, labels, probs);
  const double inv_rows = 1.0 / static_cast<double>(logits.rows);

  LossResult res;
  res.grad_logits = std::move(probs);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const double c = ce[r];
    double loss_r;
    double dloss_dc;
    if (fp.lambda == 0.0) {
      loss_r = fp.eta * c;
      dloss_dc = fp.eta;
    } else {
      const double p = std::exp(-c);
      const double q = -std::expm1(-c); // 1 - p
      const double q_lam = std::pow(q, fp.lambda);
      loss_r = fp.eta * q_lam * c;
      double tail = 0.0;
      if (q > 0.0)
        tail = fp.lambda * c * std::pow(q, fp.lambda - 1.0) * p;
      dloss_dc = fp.eta * (q_lam + tail);
    }
    res.loss += loss_r;
    auto g = res.grad_logits.row(r);
    g[static_cast<std::size_t>(labels[r])] -= 1.0;
    for (auto &v : g) {
      v *= inv_rows;
      v *= dloss_dc;
    }
  }
  res.loss *= inv_rows;
  if (!std::isfinite(res.loss))
    throw NonFiniteError("focal_loss: non-finite loss");
  return res;
}

double accuracy_floor(std::size_t query_size) {
  if (query_size == 0)
    throw std::invalid_argument("accuracy_floor: empty query set");
  return 1.0 / (2.0 * static_cast<double>(query_size));
}

AttentionLoss at_loss(std::span<const TaskOutcome> tasks, double phi) {
  if (tasks.empty())
    throw std::invalid_argument("at_loss: empty task list");
  if (!(phi >= 0.0))
    throw std::invalid_argument("at_loss: phi must be >= 0");
  AttentionLoss res;
  res.task_weights.reserve(tasks.size());
  for (const auto &t : tasks) {
    const double acc =
        std::clamp(t.accuracy, accuracy_floor(t.query_size), 1.0);
    const double neg_log = -std::log2(acc);
    const double f = t.focal_loss;
    res.loss += std::pow(f, phi) * neg_log;
    double w;
    if (phi == 0.0)
      w = 0.0;
    else if (f == 0.0)
      w = phi == 1.0 ? neg_log : 0.0; // derivative of f^phi at 0 for phi > 1
    else
      w = phi * std::pow(f, phi - 1.0) * neg_log;
    res.task_weights.push_back(w);
  }
  return res;
}

double accuracy(const Matrix &logits, std::span<const int> labels) {
  check_labels(logits, labels);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    auto z = logits.row(r);
    std::size_t best = 0;
    for (std::size_t j = 1; j < z.size(); ++j)
      if (z[j] > z[best])
        best = j;
    hits += best == static_cast<std::size_t>(labels[r]);
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows);
}

} // namespace fedmeta
