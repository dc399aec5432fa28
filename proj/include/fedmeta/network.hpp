#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmeta/matrix.hpp"
#include "fedmeta/param_set.hpp"

namespace fedmeta {

class Rng;

// Two-branch base learner:
//
//   x --> [affine+tanh]* --> M (m dims) --+
//   x --> batch-norm (gamma, beta) --> B (b dims) --+--> concat (m+b)
//                                            --> [affine+tanh]* --> affine --> logits
//
// An empty encoder passes x through unchanged (m = input_dim). With the
// batch-norm branch disabled b = 0.
struct ModelConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> encoder_dims{64, 32};
  bool batch_norm = true;
  std::vector<std::size_t> head_dims{32};
  std::size_t n_way = 2;
  double bn_eps = 1e-5;

  std::size_t encoder_out() const {
    return encoder_dims.empty() ? input_dim : encoder_dims.back();
  }
  std::size_t bn_out() const { return batch_norm ? input_dim : 0; }
  std::size_t classifier_in() const { return encoder_out() + bn_out(); }

  void validate() const;
  std::shared_ptr<const Layout> make_layout() const;

  bool operator==(const ModelConfig &) const = default;
};

void to_json(nlohmann::json &j, const ModelConfig &c);
void from_json(const nlohmann::json &j, ModelConfig &c);

// Samples with episode-local labels in [0, n_way).
struct Batch {
  Matrix features;
  std::vector<int> labels;

  std::size_t rows() const { return features.rows; }
  void validate(std::size_t input_dim, std::size_t n_way) const;
};

// Everything backward needs from a forward pass. Holds its own copy of the
// parameters so it can never observe a later mutation.
struct ForwardCache {
  ModelConfig cfg;
  ParamSet params;
  Matrix input;
  std::vector<Matrix> encoder_acts; // post-tanh output per encoder layer
  Matrix bn_xhat;
  std::vector<double> bn_inv_std;
  Matrix concat;
  std::vector<Matrix> head_acts;
  bool valid = false;
};

struct ForwardResult {
  Matrix logits;
  ForwardCache cache;
};

// Glorot-uniform weights, zero biases, gamma = 1, beta = 0.
ParamSet init_params(const ModelConfig &cfg, Rng &rng);

ForwardResult forward(const ParamSet &params, const ModelConfig &cfg,
                      const Batch &batch);

// Logits only; skips building the cache.
Matrix predict(const ParamSet &params, const ModelConfig &cfg,
               const Matrix &features);

ParamSet backward(const ForwardCache &cache, const Matrix &grad_logits);

} // namespace fedmeta
