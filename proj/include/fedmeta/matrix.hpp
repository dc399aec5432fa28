#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fedmeta {

// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double &operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data[r * cols + c];
  }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  bool operator==(const Matrix &) const = default;
};

// out = a * w + bias, where w is (a.cols x out_cols) row-major.
void affine(const Matrix &a, std::span<const double> w,
            std::span<const double> bias, Matrix &out);

// dw += a^T * g ; db += colsum(g)
void affine_grad_params(const Matrix &a, const Matrix &g, std::span<double> dw,
                        std::span<double> db);

// da = g * w^T, where w is (da.cols x g.cols).
void affine_grad_input(const Matrix &g, std::span<const double> w, Matrix &da);

} // namespace fedmeta
