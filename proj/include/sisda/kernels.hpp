#pragma once

#include <cstddef>
#include <span>

// Dense row-major kernels shared by the tape and the cached decoder, so both
// paths perform the same arithmetic in the same order.
namespace sisda::kernels {

// out[m x n] += a[m x k] * b[k x n]
void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                std::size_t m, std::size_t k, std::size_t n);

// out[m x n] += a[m x k] * b[n x k]^T
void matmul_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n);

// out[k x n] += a[m x k]^T * b[m x n]
void matmul_at_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n);

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kLogFloor = 1e-12;

// Normalizes one row; writes mean and reciprocal std for the backward pass.
void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                    std::span<const double> bias, std::span<double> out, double& mean,
                    double& rstd);

// In-place softmax over the first `active` entries; the rest are set to 0.
void softmax_row(std::span<double> row, std::size_t active);

// Returns log-sum-exp of the row.
double log_sum_exp(std::span<const double> row);

double gelu(double x);
double gelu_derivative(double x);

}  // namespace sisda::kernels
