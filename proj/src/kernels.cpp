#include "sisda/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace sisda::kernels {

void matmul_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* o = out.data() + i * n;
    const double* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
    }
  }
}

void matmul_bt_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      out[i * n + j] += s;
    }
  }
}

void matmul_at_acc(std::span<const double> a, std::span<const double> b, std::span<double> out,
                   std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.data() + i * k;
    const double* bi = b.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* o = out.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * bi[j];
    }
  }
}

void layer_norm_row(std::span<const double> x, std::span<const double> gain,
                    std::span<const double> bias, std::span<double> out, double& mean,
                    double& rstd) {
  const std::size_t n = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(n);
  const double r = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t j = 0; j < n; ++j) out[j] = (x[j] - mu) * r * gain[j] + bias[j];
  mean = mu;
  rstd = r;
}

void softmax_row(std::span<double> row, std::size_t active) {
  active = std::min(active, row.size());
  double mx = row[0];
  for (std::size_t j = 1; j < active; ++j) mx = std::max(mx, row[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < active; ++j) {
    row[j] = std::exp(row[j] - mx);
    total += row[j];
  }
  for (std::size_t j = 0; j < active; ++j) row[j] /= total;
  for (std::size_t j = active; j < row.size(); ++j) row[j] = 0.0;
}

double log_sum_exp(std::span<const double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (double v : row) total += std::exp(v - mx);
  return mx + std::log(total);
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

// tanh approximation
double gelu(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace sisda::kernels
