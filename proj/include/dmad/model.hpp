#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmad/mask.hpp"
#include "dmad/nn.hpp"
#include "dmad/params.hpp"
#include "dmad/rng.hpp"

namespace dmad {

enum class LayerKind { Conv, Upsample, Norm, Activation, ResidualAdd };
enum class Activation { Relu, LeakyRelu, Tanh };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  std::string name;
  int input = -1;  // producer layer id, -1 for the network input
  int skip = -1;   // second operand of a residual add

  // conv
  int filters = 0;
  int channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  bool masked = false;

  int factor = 1;  // upsample
  Activation activation = Activation::Relu;
  double alpha = 0.2;  // leaky relu slope
  bool affine = true;  // norm

  // Filled in by resolve_shapes().
  int out_channels = 0;
  int in_h = 0, in_w = 0;
  int out_h = 0, out_w = 0;
};

enum class ModelRole { Generator, Discriminator };

struct ModelSpec {
  ModelRole role = ModelRole::Generator;
  std::vector<LayerSpec> layers;
  int input_channels = 3;
  int image_size = 32;
  int width = 16;
  int residual_blocks = 0;
  std::vector<int> block_last_convs;  // last conv of each residual block, in order
  std::vector<int> taps;              // default distillation tap layers
  bool resolved = false;

  std::vector<int> conv_ids() const;
  std::vector<int> masked_conv_ids() const;
  int output_layer() const { return static_cast<int>(layers.size()) - 1; }
  /// Index of the layer that reads `layer` as its primary input, or -1.
  int consumer_of(int layer, LayerKind kind) const;
};

/// Scaled-down CycleGAN-style generator: 7x7 stem, two 4x4 stride-2 convs,
/// `blocks` identity residual blocks, two upsample+conv stages and a 7x7 tanh
/// output. Convs other than the output conv are masked when they have more
/// than four filters.
ModelSpec build_generator(int width = 16, int blocks = 4, int image = 32, int channels = 3);

/// Patch discriminator: `depth` stride-2 4x4 convs of widths w, 2w, 4w, ...
/// with leaky relu, the last producing a single logit channel.
ModelSpec build_discriminator(int width = 16, int depth = 4, int in_channels = 6, int image = 32);

/// Propagates channel counts and spatial extents; throws ShapeError on any
/// mismatch along an edge.
void resolve_shapes(ModelSpec& spec);

struct LayerCost {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

struct ModelCost {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
  std::vector<LayerCost> per_layer;
};

/// Convs: MACs = n*c*kh*kw*H'*W', params = n*c*kh*kw + n. Affine norms add 2C
/// params. Everything else is free.
ModelCost macs_params(const ModelSpec& spec);

/// Per-layer listing of n, c, spatial size, MACs and params. With `original`
/// given, also the per-layer pruning rate 1 - n/n_original.
std::string architecture_report(const ModelSpec& spec, const ModelSpec* original = nullptr);

std::string param_name(const LayerSpec& layer, const char* what);

template <typename Scalar>
ParamStore<Scalar> init_params(const ModelSpec& spec, Rng& rng) {
  ParamStore<Scalar> params;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::Conv) {
      std::vector<Scalar> w(std::size_t(l.filters) * l.channels * l.kernel * l.kernel);
      for (auto& v : w) v = static_cast<Scalar>(rng.normal(0.0, 0.02));
      params.add(param_name(l, "weight"), Tensor<Scalar>({l.filters, l.channels, l.kernel, l.kernel}, std::move(w)));
      params.add(param_name(l, "bias"), Tensor<Scalar>({l.filters}, Scalar(0)));
    } else if (l.kind == LayerKind::Norm && l.affine) {
      params.add(param_name(l, "scale"), Tensor<Scalar>({l.out_channels}, Scalar(1)));
      params.add(param_name(l, "shift"), Tensor<Scalar>({l.out_channels}, Scalar(0)));
    }
  }
  return params;
}

/// Layer at whose output the mask of conv `conv` is applied: the norm reading
/// the conv when there is one, otherwise the conv itself.
int mask_site(const ModelSpec& spec, int conv);

/// Runs the layer graph. When `bank` is given, each masked conv's gate is
/// applied at its mask site (after the affine norm, before the activation).
/// Outputs of the layers listed in `taps` are returned through `tap_out`.
template <typename Scalar>
Tensor<Scalar> forward(const ModelSpec& spec, const ParamStore<Scalar>& params,
                       const Tensor<Scalar>& input, const MaskBank<Scalar>* bank = nullptr,
                       std::span<const int> taps = {}, std::vector<Tensor<Scalar>>* tap_out = nullptr) {
  if (!spec.resolved) throw ShapeError("forward on unresolved model spec");
  if (input.rank() != 4 || input.dim(1) != spec.input_channels || input.dim(2) != spec.layers.front().in_h ||
      input.dim(3) != spec.layers.front().in_w) {
    throw ShapeError("model input shape " + shape_str(input.shape()) + " does not match spec");
  }
  const std::size_t count = spec.layers.size();
  std::vector<int> site_of(count, -1);  // layer -> bank entry whose mask applies there
  if (bank) {
    for (std::size_t i = 0; i < bank->entries().size(); ++i) {
      site_of.at(mask_site(spec, bank->entries()[i].layer)) = static_cast<int>(i);
    }
  }
  std::vector<Tensor<Scalar>> values(count);
  auto in = [&](int id) -> const Tensor<Scalar>& { return id < 0 ? input : values[id]; };
  for (std::size_t k = 0; k < count; ++k) {
    const auto& l = spec.layers[k];
    switch (l.kind) {
      case LayerKind::Conv:
        values[k] = conv2d(in(l.input), params.at(param_name(l, "weight")), params.at(param_name(l, "bias")),
                           l.stride, l.padding);
        break;
      case LayerKind::Upsample:
        values[k] = upsample_nearest(in(l.input), l.factor);
        break;
      case LayerKind::Norm:
        if (l.affine) {
          values[k] = instance_norm(in(l.input), params.at(param_name(l, "scale")), params.at(param_name(l, "shift")));
        } else {
          Tensor<Scalar> ones({l.out_channels}, Scalar(1)), zeros({l.out_channels}, Scalar(0));
          values[k] = instance_norm(in(l.input), ones, zeros);
        }
        break;
      case LayerKind::Activation:
        switch (l.activation) {
          case Activation::Relu: values[k] = relu(in(l.input)); break;
          case Activation::LeakyRelu: values[k] = leaky_relu(in(l.input), l.alpha); break;
          case Activation::Tanh: values[k] = tanh(in(l.input)); break;
        }
        break;
      case LayerKind::ResidualAdd:
        values[k] = add(in(l.input), in(l.skip));
        break;
    }
    if (bank && site_of[k] >= 0) values[k] = apply_masks(values[k], bank->mask_tensor(site_of[k]));
  }
  if (tap_out) {
    tap_out->clear();
    for (int t : taps) tap_out->push_back(values.at(t));
  }
  return values.back();
}

}  // namespace dmad
