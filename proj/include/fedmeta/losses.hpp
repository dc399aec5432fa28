#pragma once

#include <span>
#include <vector>

#include "fedmeta/matrix.hpp"
#include "fedmeta/param_set.hpp"

namespace fedmeta {

// Focal reweighting of cross-entropy: eta * (1 - exp(-ce))^lambda * ce.
struct FocalParams {
  double eta = 5.0;
  double lambda = 2.0;

  void validate() const;
  bool operator==(const FocalParams &) const = default;
};

struct LossResult {
  double loss = 0.0;
  Matrix grad_logits; // d(loss)/d(logits), already divided by rows
};

// What one task contributes to the attention meta-loss.
struct TaskOutcome {
  double focal_loss = 0.0;     // query-set mean focal loss at the adapted params
  double accuracy = 0.0;       // query-set accuracy at the adapted params
  std::size_t query_size = 0;  // rows in the query set; sets the accuracy floor
  ParamSet grad;               // d(focal_loss)/d(adapted params)
};

struct AttentionLoss {
  double loss = 0.0;
  std::vector<double> task_weights; // d(loss)/d(focal_loss_i)
};

// Per-row -log softmax(logits)[label], computed via log-sum-exp.
std::vector<double> per_sample_cross_entropy(const Matrix &logits,
                                             std::span<const int> labels);

LossResult cross_entropy(const Matrix &logits, std::span<const int> labels);

// Per-sample focal loss from per-sample cross-entropy, averaged over rows.
LossResult focal_loss(const Matrix &logits, std::span<const int> labels,
                      const FocalParams &fp);

// Smallest accuracy fed to log2: half of one query sample.
double accuracy_floor(std::size_t query_size);

// sum_i -focal_i^phi * log2(clamp(acc_i, floor_i, 1)). Accuracy is treated as
// a constant, so task_weights[i] = -phi * focal_i^(phi-1) * log2(acc_i).
AttentionLoss at_loss(std::span<const TaskOutcome> tasks, double phi);

// Fraction of rows whose argmax (lowest index on ties) equals the label.
double accuracy(const Matrix &logits, std::span<const int> labels);

} // namespace fedmeta
