#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dmad/tensor.hpp"

namespace dmad {

namespace detail {

template <typename Scalar>
std::vector<Scalar>* grad_sink(Node<Scalar>& node, std::size_t parent) {
  auto& p = *node.parents[parent];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <typename Scalar, typename Fwd, typename Deriv>
Tensor<Scalar> unary(const Tensor<Scalar>& x, Fwd fwd, Deriv dfdx) {
  std::vector<Scalar> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xs[i]);
  return Tensor<Scalar>::make_result(x.shape(), std::move(out), {x}, [dfdx](Node<Scalar>& n) {
    auto* g = grad_sink(n, 0);
    if (!g) return;
    const auto& xv = n.parents[0]->value;
    for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * dfdx(xv[i], n.value[i]);
  });
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<Scalar>::make_result(a.shape(), std::move(out), {a, b}, [](auto& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = detail::grad_sink(n, k)) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
      }
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<Scalar>::make_result(a.shape(), std::move(out), {a, b}, [](auto& n) {
    if (auto* g = detail::grad_sink(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
    }
    if (auto* g = detail::grad_sink(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] -= n.grad[i];
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<Scalar>::make_result(a.shape(), std::move(out), {a, b}, [](auto& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (auto* g = detail::grad_sink(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    }
    if (auto* g = detail::grad_sink(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * av[i];
    }
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, double factor) {
  const auto s = static_cast<Scalar>(factor);
  return detail::unary(x, [s](Scalar v) { return s * v; }, [s](Scalar, Scalar) { return s; });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, double offset) {
  const auto c = static_cast<Scalar>(offset);
  return detail::unary(x, [c](Scalar v) { return v + c; }, [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return v > 0 ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& x, double alpha = 0.2) {
  const auto a = static_cast<Scalar>(alpha);
  return detail::unary(
      x, [a](Scalar v) { return v > 0 ? v : a * v; },
      [a](Scalar v, Scalar) { return v > 0 ? Scalar(1) : a; });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return std::tanh(v); }, [](Scalar, Scalar y) { return Scalar(1) - y * y; });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return detail::unary(
      x,
      [](Scalar v) {
        return v >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-v))
                      : std::exp(v) / (Scalar(1) + std::exp(v));
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  for (Scalar v : x.data()) {
    if (!(v > 0)) throw DomainError("log of non-positive value " + std::to_string(double(v)));
  }
  return detail::unary(
      x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return std::abs(v); },
      [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return Scalar(2) * v; });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  double acc = 0.0;
  for (Scalar v : x.data()) acc += v;
  return Tensor<Scalar>::make_result({}, {static_cast<Scalar>(acc)}, {x}, [](auto& n) {
    if (auto* g = detail::grad_sink(n, 0)) {
      for (auto& gi : *g) gi += n.grad[0];
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> l2_norm(const Tensor<Scalar>& x) {
  double acc = 0.0;
  for (Scalar v : x.data()) acc += double(v) * double(v);
  const double norm = std::sqrt(acc);
  return Tensor<Scalar>::make_result({}, {static_cast<Scalar>(norm)}, {x}, [norm](auto& n) {
    auto* g = detail::grad_sink(n, 0);
    if (!g || norm == 0.0) return;  // subgradient 0 at the origin
    const auto& xv = n.parents[0]->value;
    const auto s = static_cast<Scalar>(n.grad[0] / norm);
    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * xv[i];
  });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  return Tensor<Scalar>::make_result(std::move(shape), std::move(out), {x}, [](auto& n) {
    if (auto* g = detail::grad_sink(n, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    }
  });
}

/// Per-row Euclidean norm of an [R, K] tensor -> [R].
template <typename Scalar>
Tensor<Scalar> row_l2_norm(const Tensor<Scalar>& x) {
  if (x.rank() != 2) throw ShapeError("row_l2_norm expects rank 2, got " + shape_str(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<Scalar> out(rows);
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += double(x[r * cols + c]) * double(x[r * cols + c]);
    out[r] = static_cast<Scalar>(std::sqrt(acc));
  }
  return Tensor<Scalar>::make_result({rows}, std::move(out), {x}, [rows, cols](auto& n) {
    auto* g = detail::grad_sink(n, 0);
    if (!g) return;
    const auto& xv = n.parents[0]->value;
    for (int r = 0; r < rows; ++r) {
      if (n.value[r] == 0) continue;
      const Scalar s = n.grad[r] / n.value[r];
      for (int c = 0; c < cols; ++c) (*g)[r * cols + c] += s * xv[r * cols + c];
    }
  });
}

/// Divides each row of an [R, K] tensor by its Euclidean norm. Rows whose norm
/// is below `tiny` are divided by (norm + eps) instead. `stabilized_rows`, when
/// given, receives how many rows took that path.
template <typename Scalar>
Tensor<Scalar> row_normalize(const Tensor<Scalar>& x, double tiny = 1e-12, double eps = 1e-8,
                             int* stabilized_rows = nullptr) {
  if (x.rank() != 2) throw ShapeError("row_normalize expects rank 2, got " + shape_str(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<Scalar> out(x.numel());
  std::vector<double> denom(rows);
  std::vector<double> norms(rows);
  int stabilized = 0;
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) acc += double(x[r * cols + c]) * double(x[r * cols + c]);
    norms[r] = std::sqrt(acc);
    denom[r] = norms[r];
    if (norms[r] < tiny) {
      denom[r] += eps;
      ++stabilized;
    }
    if (!(denom[r] > 0)) throw DomainError("row_normalize: zero row");
    for (int c = 0; c < cols; ++c) out[r * cols + c] = static_cast<Scalar>(x[r * cols + c] / denom[r]);
  }
  if (stabilized_rows) *stabilized_rows = stabilized;
  return Tensor<Scalar>::make_result(
      x.shape(), std::move(out), {x}, [rows, cols, denom, norms](auto& n) {
        auto* g = detail::grad_sink(n, 0);
        if (!g) return;
        const auto& xv = n.parents[0]->value;
        for (int r = 0; r < rows; ++r) {
          // y = x / d(|x|), d = |x| (+ eps);  dy/dx = I/d - x x^T / (d^2 |x|)
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) dot += double(n.grad[r * cols + c]) * double(xv[r * cols + c]);
          const double d = denom[r];
          const double k = norms[r] > 0 ? dot / (d * d * norms[r]) : 0.0;
          for (int c = 0; c < cols; ++c) {
            (*g)[r * cols + c] +=
                static_cast<Scalar>(double(n.grad[r * cols + c]) / d - k * double(xv[r * cols + c]));
          }
        }
      });
}

/// Concatenates two NCHW tensors along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t plane = std::size_t(a.dim(2)) * a.dim(3);
  std::vector<Scalar> out(std::size_t(n) * (ca + cb) * plane);
  for (int s = 0; s < n; ++s) {
    std::copy_n(a.data().begin() + s * ca * plane, ca * plane, out.begin() + s * (ca + cb) * plane);
    std::copy_n(b.data().begin() + s * cb * plane, cb * plane,
                out.begin() + (s * (ca + cb) + ca) * plane);
  }
  return Tensor<Scalar>::make_result(
      {n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b}, [n, ca, cb, plane](auto& nd) {
        if (auto* g = detail::grad_sink(nd, 0)) {
          for (int s = 0; s < n; ++s)
            for (std::size_t i = 0; i < ca * plane; ++i)
              (*g)[s * ca * plane + i] += nd.grad[s * (ca + cb) * plane + i];
        }
        if (auto* g = detail::grad_sink(nd, 1)) {
          for (int s = 0; s < n; ++s)
            for (std::size_t i = 0; i < cb * plane; ++i)
              (*g)[s * cb * plane + i] += nd.grad[(s * (ca + cb) + ca) * plane + i];
        }
      });
}

}  // namespace dmad
