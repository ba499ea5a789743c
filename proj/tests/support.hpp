#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmad/rng.hpp"
#include "dmad/tensor.hpp"

namespace dmad::testing {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Values bounded away from zero, for ops with a kink at the origin.
inline Tensor<double> random_away_from_zero(Rng& rng, Shape shape, double gap = 0.05) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    const double mag = rng.uniform(gap, 1.0);
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor<double>(std::move(shape), std::move(v));
}

struct GradCheck {
  double worst_excess = 0.0;  // max over entries of |a - n| - tolerance; <= 0 passes
  double worst_abs = 0.0;
  std::size_t checked = 0;
  bool ok() const { return worst_excess <= 0.0; }
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Each entry passes when |a - n| <= rel * max(|a|, |n|) + abs_floor.
/// `max_entries` > 0 limits the check to a seeded subset per input.
inline GradCheck check_gradients(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                 double h = 1e-3, double rel = 1e-3, double abs_floor = 1e-5,
                                 std::size_t max_entries = 0, std::uint64_t subset_seed = 7) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  const auto loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }
  GradCheck out;
  Rng pick(subset_seed);
  NoGradGuard guard;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& t = inputs[i];
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    if (max_entries > 0 && idx.size() > max_entries) {
      for (std::size_t k = 0; k < max_entries; ++k) {
        std::swap(idx[k], idx[k + static_cast<std::size_t>(pick.uniform_int(0, std::int64_t(idx.size() - k - 1)))]);
      }
      idx.resize(max_entries);
    }
    for (std::size_t k : idx) {
      const double saved = t.data()[k];
      t.data()[k] = saved + h;
      const double up = f().item();
      t.data()[k] = saved - h;
      const double down = f().item();
      t.data()[k] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[i][k];
      const double diff = std::abs(a - numeric);
      const double tol = rel * std::max(std::abs(a), std::abs(numeric)) + abs_floor;
      out.worst_excess = std::max(out.worst_excess, diff - tol);
      out.worst_abs = std::max(out.worst_abs, diff);
      ++out.checked;
    }
  }
  for (auto& t : inputs) t.clear_grad();
  return out;
}

/// Direct seven-loop cross-correlation with zero padding.
inline std::vector<double> naive_conv2d(const std::vector<double>& in, int n, int c, int h, int w,
                                        const std::vector<double>& weight, int f, int k,
                                        const std::vector<double>& bias, int stride, int pad, int& oh, int& ow) {
  oh = (h + 2 * pad - k) / stride + 1;
  ow = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(std::size_t(n) * f * oh * ow, 0.0);
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < f; ++o)
      for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (int ch = 0; ch < c; ++ch)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = y * stride - pad + ky, ix = x * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += in[((std::size_t(s) * c + ch) * h + iy) * w + ix] *
                       weight[((std::size_t(o) * c + ch) * k + ky) * k + kx];
              }
          out[((std::size_t(s) * f + o) * oh + y) * ow + x] = acc;
        }
  return out;
}

}  // namespace dmad::testing
