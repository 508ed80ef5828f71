#pragma once

// Brute-force reference computations: explicit loops in double, no shared
// code with the library besides tensor storage.

#include <algorithm>
#include <cmath>
#include <vector>

#include <torch/torch.h>

namespace semattack::oracle {

inline double ssim(const torch::Tensor& x, const torch::Tensor& y) {
  const long H = x.size(1), W = x.size(2);
  const int win = static_cast<int>(std::min<long>({11, H, W}));
  std::vector<double> g(win);
  double gs = 0;
  for (int i = 0; i < win; ++i) {
    const double r = i - (win - 1) / 2.0;
    g[i] = std::exp(-r * r / (2 * 1.5 * 1.5));
    gs += g[i];
  }
  for (auto& v : g) v /= gs;
  auto X = x.to(torch::kFloat64).contiguous(), Y = y.to(torch::kFloat64).contiguous();
  auto ax = X.accessor<double, 3>(), ay = Y.accessor<double, 3>();
  auto lum = [](const torch::TensorAccessor<double, 3>& a, long r, long c) {
    return 0.299 * a[0][r][c] + 0.587 * a[1][r][c] + 0.114 * a[2][r][c];
  };
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  long count = 0;
  for (long r0 = 0; r0 + win <= H; ++r0) {
    for (long c0 = 0; c0 + win <= W; ++c0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < win; ++i) {
        for (int j = 0; j < win; ++j) {
          const double w = g[i] * g[j];
          const double a = lum(ax, r0 + i, c0 + j), b = lum(ay, r0 + i, c0 + j);
          ma += w * a;
          mb += w * b;
          saa += w * a * a;
          sbb += w * b * b;
          sab += w * a * b;
        }
      }
      saa -= ma * ma;
      sbb -= mb * mb;
      sab -= ma * mb;
      total += ((2 * ma * mb + c1) * (2 * sab + c2)) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
      ++count;
    }
  }
  return total / count;
}

inline double mse(const torch::Tensor& x, const torch::Tensor& y) {
  auto a = x.to(torch::kFloat64).contiguous().view(-1), b = y.to(torch::kFloat64).contiguous().view(-1);
  const double* pa = a.data_ptr<double>();
  const double* pb = b.data_ptr<double>();
  double s = 0;
  for (long i = 0; i < a.numel(); ++i) s += (pa[i] - pb[i]) * (pa[i] - pb[i]);
  return s / static_cast<double>(a.numel());
}

inline double sum_product(const torch::Tensor& x, const torch::Tensor& y) {
  auto a = x.to(torch::kFloat64).contiguous().view(-1), b = y.to(torch::kFloat64).contiguous().view(-1);
  const double* pa = a.data_ptr<double>();
  const double* pb = b.data_ptr<double>();
  double s = 0;
  for (long i = 0; i < a.numel(); ++i) s += pa[i] * pb[i];
  return s;
}

inline double cosine(const torch::Tensor& x, const torch::Tensor& y) {
  return sum_product(x, y) / std::sqrt(sum_product(x, x) * sum_product(y, y));
}

inline double squared_distance(const torch::Tensor& x, const torch::Tensor& y) {
  return sum_product(x, x) + sum_product(y, y) - 2 * sum_product(x, y);
}

// Largest observed distance whose cumulative count stays within fpr * n;
// 0 when even the smallest one would exceed it. Quadratic on purpose.
inline double threshold(const std::vector<double>& d, double fpr) {
  const double budget = fpr * static_cast<double>(d.size()) + 1e-9;
  double best = 0.0;
  for (double t : d) {
    long accepted = 0;
    for (double v : d) accepted += v <= t;
    if (static_cast<double>(accepted) <= budget) best = std::max(best, t);
  }
  return best;
}

}  // namespace semattack::oracle
