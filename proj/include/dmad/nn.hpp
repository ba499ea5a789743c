#pragma once

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "dmad/ops.hpp"

namespace dmad {

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

struct ConvGeometry {
  int channels, height, width;
  int kernel_h, kernel_w;
  int stride, padding;
  int out_h, out_w;
};

// Column matrix [C*kh*kw, out_h*out_w] for one sample.
template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* col) {
  const int cols = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel_h; ++ky) {
      for (int kx = 0; kx < g.kernel_w; ++kx) {
        Scalar* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          Scalar* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill_n(dst, g.out_w, Scalar(0));
            continue;
          }
          const Scalar* src = image + (c * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* col, const ConvGeometry& g, Scalar* image) {
  const int cols = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel_h; ++ky) {
      for (int kx = 0; kx < g.kernel_w; ++kx) {
        const Scalar* row = col + ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          Scalar* dst = image + (c * g.height + iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Output extent of a convolution; throws unless the stride divides exactly.
inline int conv_output_extent(int in, int kernel, int stride, int padding) {
  if (stride < 1) throw ShapeError("conv stride must be >= 1");
  if (padding < 0) throw ShapeError("conv padding must be >= 0");
  const int span = in + 2 * padding - kernel;
  if (span < 0) throw ShapeError("conv kernel larger than padded input");
  if (span % stride != 0) {
    throw ShapeError("conv output extent not exact: (" + std::to_string(in) + " + 2*" +
                     std::to_string(padding) + " - " + std::to_string(kernel) + ") / " +
                     std::to_string(stride));
  }
  return span / stride + 1;
}

/// 2-D cross-correlation with zero padding. input [N,C,H,W], weight [F,C,kh,kw],
/// bias [F] (may be empty-shaped to omit).
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, int stride = 1, int padding = 0) {
  if (input.rank() != 4) throw ShapeError("conv2d input must be NCHW, got " + shape_str(input.shape()));
  if (weight.rank() != 4) throw ShapeError("conv2d weight must be FCkk, got " + shape_str(weight.shape()));
  if (weight.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) + ", weight " +
                     shape_str(weight.shape()));
  }
  const int filters = weight.dim(0);
  const bool has_bias = bias.numel() > 0;
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != filters)) {
    throw ShapeError("conv2d bias shape " + shape_str(bias.shape()) + " for " +
                     std::to_string(filters) + " filters");
  }
  detail::ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3),
                         stride, padding, 0, 0};
  g.out_h = conv_output_extent(g.height, g.kernel_h, stride, padding);
  g.out_w = conv_output_extent(g.width, g.kernel_w, stride, padding);

  const int batch = input.dim(0);
  const int patch = g.channels * g.kernel_h * g.kernel_w;
  const int cols = g.out_h * g.out_w;
  const std::size_t in_plane = std::size_t(g.channels) * g.height * g.width;

  std::vector<Scalar> out(std::size_t(batch) * filters * cols);
  std::vector<Scalar> col(std::size_t(patch) * cols);
  detail::ConstMatrixMap<Scalar> w(weight.data().data(), filters, patch);
  for (int n = 0; n < batch; ++n) {
    detail::im2col(input.data().data() + n * in_plane, g, col.data());
    detail::ConstMatrixMap<Scalar> c(col.data(), patch, cols);
    detail::MatrixMap<Scalar> o(out.data() + std::size_t(n) * filters * cols, filters, cols);
    o.noalias() = w * c;
    if (has_bias) {
      for (int f = 0; f < filters; ++f) o.row(f).array() += bias[f];
    }
  }

  std::vector<Tensor<Scalar>> parents{input, weight};
  if (has_bias) parents.push_back(bias);
  return Tensor<Scalar>::make_result(
      {batch, filters, g.out_h, g.out_w}, std::move(out), std::move(parents),
      [g, batch, filters, patch, cols, in_plane, has_bias](auto& node) {
        auto& in_node = *node.parents[0];
        auto& w_node = *node.parents[1];
        detail::ConstMatrixMap<Scalar> w(w_node.value.data(), filters, patch);
        std::vector<Scalar> col(std::size_t(patch) * cols);
        std::vector<Scalar>* gw = detail::grad_sink(node, 1);
        std::vector<Scalar>* gin = detail::grad_sink(node, 0);
        std::vector<Scalar>* gb = has_bias ? detail::grad_sink(node, 2) : nullptr;
        for (int n = 0; n < batch; ++n) {
          detail::ConstMatrixMap<Scalar> go(node.grad.data() + std::size_t(n) * filters * cols,
                                            filters, cols);
          if (gw) {
            detail::im2col(in_node.value.data() + n * in_plane, g, col.data());
            detail::ConstMatrixMap<Scalar> c(col.data(), patch, cols);
            detail::MatrixMap<Scalar> dw(gw->data(), filters, patch);
            dw.noalias() += go * c.transpose();
          }
          if (gin) {
            detail::MatrixMap<Scalar> dc(col.data(), patch, cols);
            dc.noalias() = w.transpose() * go;
            detail::col2im(col.data(), g, gin->data() + n * in_plane);
          }
          if (gb) {
            for (int f = 0; f < filters; ++f) (*gb)[f] += go.row(f).sum();
          }
        }
      });
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& input, int factor) {
  if (factor < 1) throw ConfigError("upsample factor must be >= 1, got " + std::to_string(factor));
  if (input.rank() != 4) throw ShapeError("upsample input must be NCHW");
  const int planes = input.dim(0) * input.dim(1);
  const int h = input.dim(2), w = input.dim(3);
  const int oh = h * factor, ow = w * factor;
  std::vector<Scalar> out(std::size_t(planes) * oh * ow);
  for (int p = 0; p < planes; ++p) {
    const Scalar* src = input.data().data() + std::size_t(p) * h * w;
    Scalar* dst = out.data() + std::size_t(p) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) dst[y * ow + x] = src[(y / factor) * w + x / factor];
  }
  return Tensor<Scalar>::make_result(
      {input.dim(0), input.dim(1), oh, ow}, std::move(out), {input},
      [planes, h, w, oh, ow, factor](auto& node) {
        auto* g = detail::grad_sink(node, 0);
        if (!g) return;
        for (int p = 0; p < planes; ++p) {
          const Scalar* go = node.grad.data() + std::size_t(p) * oh * ow;
          Scalar* gi = g->data() + std::size_t(p) * h * w;
          for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) gi[(y / factor) * w + x / factor] += go[y * ow + x];
        }
      });
}

/// Per-(sample, channel) plane normalisation followed by a per-channel affine map.
/// Variance is the biased (population) estimate.
template <typename Scalar>
Tensor<Scalar> instance_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& scale,
                             const Tensor<Scalar>& shift, double eps = 1e-5) {
  if (input.rank() != 4) throw ShapeError("instance_norm input must be NCHW");
  const int batch = input.dim(0), channels = input.dim(1);
  const int plane = input.dim(2) * input.dim(3);
  if (plane < 1) throw ShapeError("instance_norm needs H*W >= 1");
  if (scale.numel() != std::size_t(channels) || shift.numel() != std::size_t(channels)) {
    throw ShapeError("instance_norm affine params must have " + std::to_string(channels) + " entries");
  }
  std::vector<Scalar> out(input.numel());
  std::vector<Scalar> normalized(input.numel());
  std::vector<double> inv_std(std::size_t(batch) * channels);
  for (int n = 0; n < batch; ++n) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t base = (std::size_t(n) * channels + c) * plane;
      double mu = 0.0;
      for (int i = 0; i < plane; ++i) mu += input[base + i];
      mu /= plane;
      double var = 0.0;
      for (int i = 0; i < plane; ++i) {
        const double d = input[base + i] - mu;
        var += d * d;
      }
      var /= plane;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[n * channels + c] = is;
      for (int i = 0; i < plane; ++i) {
        normalized[base + i] = static_cast<Scalar>((input[base + i] - mu) * is);
        out[base + i] = scale[c] * normalized[base + i] + shift[c];
      }
    }
  }
  return Tensor<Scalar>::make_result(
      input.shape(), std::move(out), {input, scale, shift},
      [batch, channels, plane, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](auto& node) {
        auto* gin = detail::grad_sink(node, 0);
        auto* gscale = detail::grad_sink(node, 1);
        auto* gshift = detail::grad_sink(node, 2);
        const auto& sv = node.parents[1]->value;
        for (int n = 0; n < batch; ++n) {
          for (int c = 0; c < channels; ++c) {
            const std::size_t base = (std::size_t(n) * channels + c) * plane;
            double sum_g = 0.0, sum_gx = 0.0;
            for (int i = 0; i < plane; ++i) {
              sum_g += node.grad[base + i];
              sum_gx += double(node.grad[base + i]) * normalized[base + i];
            }
            if (gscale) (*gscale)[c] += static_cast<Scalar>(sum_gx);
            if (gshift) (*gshift)[c] += static_cast<Scalar>(sum_g);
            if (gin) {
              const double k = sv[c] * inv_std[n * channels + c] / plane;
              for (int i = 0; i < plane; ++i) {
                (*gin)[base + i] += static_cast<Scalar>(
                    k * (plane * double(node.grad[base + i]) - sum_g - normalized[base + i] * sum_gx));
              }
            }
          }
        }
      });
}

}  // namespace dmad
