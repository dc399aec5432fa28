#include "fedmeta/network.hpp"

#include <cmath>
#include <string>

#include "fedmeta/errors.hpp"
#include "fedmeta/rng.hpp"

namespace fedmeta {

void affine(const Matrix &a, std::span<const double> w,
            std::span<const double> bias, Matrix &out) {
  const std::size_t n = bias.size();
  out.rows = a.rows;
  out.cols = n;
  out.data.assign(a.rows * n, 0.0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    double *__restrict o = out.data.data() + r * n;
    for (std::size_t j = 0; j < n; ++j)
      o[j] = bias[j];
    const double *x = a.data.data() + r * a.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double xk = x[k];
      const double *__restrict wk = w.data() + k * n;
      for (std::size_t j = 0; j < n; ++j)
        o[j] += xk * wk[j];
    }
  }
}

void affine_grad_params(const Matrix &a, const Matrix &g, std::span<double> dw,
                        std::span<double> db) {
  const std::size_t n = g.cols;
  for (std::size_t r = 0; r < a.rows; ++r) {
    const double *__restrict gr = g.data.data() + r * n;
    const double *x = a.data.data() + r * a.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double xk = x[k];
      double *__restrict dwk = dw.data() + k * n;
      for (std::size_t j = 0; j < n; ++j)
        dwk[j] += xk * gr[j];
    }
    for (std::size_t j = 0; j < n; ++j)
      db[j] += gr[j];
  }
}

void affine_grad_input(const Matrix &g, std::span<const double> w, Matrix &da) {
  const std::size_t n = g.cols;
  for (std::size_t r = 0; r < g.rows; ++r) {
    const double *gr = g.data.data() + r * n;
    double *out = da.data.data() + r * da.cols;
    for (std::size_t k = 0; k < da.cols; ++k) {
      const double *wk = w.data() + k * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        s += gr[j] * wk[j];
      out[k] = s;
    }
  }
}

void ModelConfig::validate() const {
  if (input_dim == 0)
    throw ConfigError("model.input_dim must be >= 1");
  if (n_way < 2)
    throw ConfigError("model.n_way must be >= 2");
  for (auto d : encoder_dims)
    if (d == 0)
      throw ConfigError("model.encoder_dims entries must be >= 1");
  for (auto d : head_dims)
    if (d == 0)
      throw ConfigError("model.head_dims entries must be >= 1");
  if (!(bn_eps > 0.0))
    throw ConfigError("model.bn_eps must be > 0");
}

std::shared_ptr<const Layout> ModelConfig::make_layout() const {
  validate();
  auto layout = std::make_shared<Layout>();
  std::size_t in = input_dim;
  for (std::size_t i = 0; i < encoder_dims.size(); ++i) {
    layout->add("enc." + std::to_string(i) + ".weight", {in, encoder_dims[i]});
    layout->add("enc." + std::to_string(i) + ".bias", {encoder_dims[i]});
    in = encoder_dims[i];
  }
  if (batch_norm) {
    layout->add("bn.gamma", {input_dim});
    layout->add("bn.beta", {input_dim});
  }
  in = classifier_in();
  for (std::size_t i = 0; i < head_dims.size(); ++i) {
    layout->add("head." + std::to_string(i) + ".weight", {in, head_dims[i]});
    layout->add("head." + std::to_string(i) + ".bias", {head_dims[i]});
    in = head_dims[i];
  }
  layout->add("out.weight", {in, n_way});
  layout->add("out.bias", {n_way});
  return layout;
}

void to_json(nlohmann::json &j, const ModelConfig &c) {
  j = {{"input_dim", c.input_dim},   {"encoder_dims", c.encoder_dims},
       {"batch_norm", c.batch_norm}, {"head_dims", c.head_dims},
       {"n_way", c.n_way},           {"bn_eps", c.bn_eps}};
}

void from_json(const nlohmann::json &j, ModelConfig &c) {
  ModelConfig d;
  c.input_dim = j.value("input_dim", d.input_dim);
  c.encoder_dims = j.value("encoder_dims", d.encoder_dims);
  c.batch_norm = j.value("batch_norm", d.batch_norm);
  c.head_dims = j.value("head_dims", d.head_dims);
  c.n_way = j.value("n_way", d.n_way);
  c.bn_eps = j.value("bn_eps", d.bn_eps);
}

void Batch::validate(std::size_t input_dim, std::size_t n_way) const {
  if (features.rows == 0)
    throw LayoutError("batch has no rows");
  if (features.cols != input_dim)
    throw LayoutError("batch width " + std::to_string(features.cols) +
                      " != model input_dim " + std::to_string(input_dim));
  if (labels.size() != features.rows)
    throw LayoutError("batch label count does not match row count");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= n_way)
      throw LayoutError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(n_way) + ")");
}

ParamSet init_params(const ModelConfig &cfg, Rng &rng) {
  ParamSet p(cfg.make_layout(), 0.0);
  const auto &entries = p.layout().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto &e = entries[i];
    auto t = p.tensor(i);
    if (e.name == "bn.gamma") {
      for (auto &v : t)
        v = 1.0;
    } else if (e.shape.size() == 2) {
      const double limit =
          std::sqrt(6.0 / static_cast<double>(e.shape[0] + e.shape[1]));
      for (auto &v : t)
        v = rng.uniform(-limit, limit);
    }
  }
  return p;
}

namespace {

void tanh_inplace(Matrix &m) {
  for (auto &v : m.data)
    v = std::tanh(v);
}

// dz = da * (1 - a^2) for a = tanh(z)
void tanh_backward(const Matrix &act, Matrix &grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    grad.data[i] *= 1.0 - act.data[i] * act.data[i];
}

void require_layout(const ParamSet &params, const ModelConfig &cfg) {
  auto expected = cfg.make_layout();
  if (params.empty() || !(params.layout() == *expected))
    throw LayoutError("parameter layout does not match model config");
}

} // namespace

ForwardResult forward(const ParamSet &params, const ModelConfig &cfg,
                      const Batch &batch) {
  require_layout(params, cfg);
  if (batch.features.rows == 0)
    throw LayoutError("batch has no rows");
  if (batch.features.cols != cfg.input_dim)
    throw LayoutError("batch width " + std::to_string(batch.features.cols) +
                      " != model input_dim " + std::to_string(cfg.input_dim));

  ForwardResult res;
  ForwardCache &c = res.cache;
  c.cfg = cfg;
  c.params = params;
  c.input = batch.features;
  const std::size_t rows = batch.features.rows;
  std::size_t entry = 0;

  const Matrix *h = &c.input;
  c.encoder_acts.resize(cfg.encoder_dims.size());
  for (std::size_t l = 0; l < cfg.encoder_dims.size(); ++l) {
    affine(*h, params.tensor(entry), params.tensor(entry + 1),
           c.encoder_acts[l]);
    tanh_inplace(c.encoder_acts[l]);
    h = &c.encoder_acts[l];
    entry += 2;
  }
  const std::size_t m = cfg.encoder_out();
  const std::size_t b = cfg.bn_out();

  if (cfg.batch_norm) {
    auto gamma = params.tensor(entry);
    auto beta = params.tensor(entry + 1);
    entry += 2;
    c.bn_xhat = Matrix(rows, b);
    c.bn_inv_std.assign(b, 0.0);
    const double inv_rows = 1.0 / static_cast<double>(rows);
    for (std::size_t j = 0; j < b; ++j) {
      double mean = 0.0;
      for (std::size_t r = 0; r < rows; ++r)
        mean += c.input(r, j);
      mean *= inv_rows;
      double var = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double d = c.input(r, j) - mean;
        var += d * d;
      }
      var *= inv_rows;
      const double inv_std = 1.0 / std::sqrt(var + cfg.bn_eps);
      c.bn_inv_std[j] = inv_std;
      for (std::size_t r = 0; r < rows; ++r)
        c.bn_xhat(r, j) = (c.input(r, j) - mean) * inv_std;
    }
    c.concat = Matrix(rows, m + b);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < m; ++j)
        c.concat(r, j) = (*h)(r, j);
      for (std::size_t j = 0; j < b; ++j)
        c.concat(r, m + j) = gamma[j] * c.bn_xhat(r, j) + beta[j];
    }
  } else {
    c.concat = *h;
  }

  const Matrix *g = &c.concat;
  c.head_acts.resize(cfg.head_dims.size());
  for (std::size_t l = 0; l < cfg.head_dims.size(); ++l) {
    affine(*g, params.tensor(entry), params.tensor(entry + 1), c.head_acts[l]);
    tanh_inplace(c.head_acts[l]);
    g = &c.head_acts[l];
    entry += 2;
  }
  affine(*g, params.tensor(entry), params.tensor(entry + 1), res.logits);
  c.valid = true;
  return res;
}

Matrix predict(const ParamSet &params, const ModelConfig &cfg,
               const Matrix &features) {
  Batch b{features, {}};
  return forward(params, cfg, b).logits;
}

ParamSet backward(const ForwardCache &c, const Matrix &grad_logits) {
  if (!c.valid)
    throw LayoutError("backward called with an empty forward cache");
  const auto &cfg = c.cfg;
  const std::size_t rows = c.input.rows;
  if (grad_logits.rows != rows || grad_logits.cols != cfg.n_way)
    throw LayoutError("grad_logits shape does not match the cached forward");

  const ParamSet &params = c.params;
  ParamSet grad(params.layout_ptr(), 0.0);
  const std::size_t n_entries = params.layout().entries().size();

  // Entry indices mirror make_layout order.
  std::size_t entry = n_entries - 2;
  const Matrix &last = cfg.head_dims.empty() ? c.concat : c.head_acts.back();
  affine_grad_params(last, grad_logits, grad.tensor(entry),
                     grad.tensor(entry + 1));
  Matrix d(rows, last.cols);
  affine_grad_input(grad_logits, params.tensor(entry), d);

  for (std::size_t l = cfg.head_dims.size(); l-- > 0;) {
    entry -= 2;
    tanh_backward(c.head_acts[l], d);
    const Matrix &in = l == 0 ? c.concat : c.head_acts[l - 1];
    affine_grad_params(in, d, grad.tensor(entry), grad.tensor(entry + 1));
    Matrix next(rows, in.cols);
    affine_grad_input(d, params.tensor(entry), next);
    d = std::move(next);
  }

  const std::size_t m = cfg.encoder_out();
  if (cfg.batch_norm) {
    entry -= 2;
    auto dgamma = grad.tensor(entry);
    auto dbeta = grad.tensor(entry + 1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < cfg.bn_out(); ++j) {
        const double dy = d(r, m + j);
        dgamma[j] += dy * c.bn_xhat(r, j);
        dbeta[j] += dy;
      }
  }

  if (cfg.encoder_dims.empty())
    return grad;

  Matrix dh(rows, m);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < m; ++j)
      dh(r, j) = d(r, j);
  for (std::size_t l = cfg.encoder_dims.size(); l-- > 0;) {
    entry -= 2;
    tanh_backward(c.encoder_acts[l], dh);
    const Matrix &in = l == 0 ? c.input : c.encoder_acts[l - 1];
    affine_grad_params(in, dh, grad.tensor(entry), grad.tensor(entry + 1));
    if (l == 0)
      break;
    Matrix next(rows, in.cols);
    affine_grad_input(dh, params.tensor(entry), next);
    dh = std::move(next);
  }
  return grad;
}

} // namespace fedmeta
