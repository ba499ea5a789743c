#include "dmad/model.hpp"

#include <iomanip>
#include <sstream>

namespace dmad {

namespace {

struct Builder {
  ModelSpec spec;

  int push(LayerSpec l) {
    spec.layers.push_back(std::move(l));
    return static_cast<int>(spec.layers.size()) - 1;
  }
  int last() const { return static_cast<int>(spec.layers.size()) - 1; }

  int conv(const std::string& name, int input, int channels, int filters, int kernel, int stride, int padding,
           bool maskable) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.name = name;
    l.input = input;
    l.channels = channels;
    l.filters = filters;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.masked = maskable && filters > 4;
    return push(std::move(l));
  }
  int norm(const std::string& name, int input) {
    LayerSpec l;
    l.kind = LayerKind::Norm;
    l.name = name;
    l.input = input;
    return push(std::move(l));
  }
  int act(const std::string& name, int input, Activation a, double alpha = 0.2) {
    LayerSpec l;
    l.kind = LayerKind::Activation;
    l.name = name;
    l.input = input;
    l.activation = a;
    l.alpha = alpha;
    return push(std::move(l));
  }
  int upsample(const std::string& name, int input, int factor) {
    LayerSpec l;
    l.kind = LayerKind::Upsample;
    l.name = name;
    l.input = input;
    l.factor = factor;
    return push(std::move(l));
  }
  int residual_add(const std::string& name, int a, int b) {
    LayerSpec l;
    l.kind = LayerKind::ResidualAdd;
    l.name = name;
    l.input = a;
    l.skip = b;
    return push(std::move(l));
  }
};

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Upsample: return "upsample";
    case LayerKind::Norm: return "norm";
    case LayerKind::Activation: return "act";
    case LayerKind::ResidualAdd: return "add";
  }
  return "?";
}

}  // namespace

std::vector<int> ModelSpec::conv_ids() const {
  std::vector<int> ids;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::Conv) ids.push_back(static_cast<int>(i));
  return ids;
}

std::vector<int> ModelSpec::masked_conv_ids() const {
  std::vector<int> ids;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == LayerKind::Conv && layers[i].masked) ids.push_back(static_cast<int>(i));
  return ids;
}

int ModelSpec::consumer_of(int layer, LayerKind kind) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].kind == kind && layers[i].input == layer) return static_cast<int>(i);
  return -1;
}

std::string param_name(const LayerSpec& layer, const char* what) { return layer.name + "." + what; }

int mask_site(const ModelSpec& spec, int conv) {
  const int norm = spec.consumer_of(conv, LayerKind::Norm);
  return norm >= 0 ? norm : conv;
}

ModelSpec build_generator(int width, int blocks, int image, int channels) {
  if (width < 4) throw ConfigError("generator width must be >= 4, got " + std::to_string(width));
  if (blocks < 1) throw ConfigError("generator needs at least one residual block");
  if (image < 4 || image % 4 != 0) throw ConfigError("generator image size must be a multiple of 4");
  Builder b;
  b.spec.role = ModelRole::Generator;
  b.spec.input_channels = channels;
  b.spec.image_size = image;
  b.spec.width = width;
  b.spec.residual_blocks = blocks;

  int x = b.conv("g.stem", -1, channels, width, 7, 1, 3, true);
  x = b.norm("g.stem.norm", x);
  const int stem_out = b.act("g.stem.relu", x, Activation::Relu);
  x = b.conv("g.down1", stem_out, width, 2 * width, 4, 2, 1, true);
  x = b.norm("g.down1.norm", x);
  const int down1_out = b.act("g.down1.relu", x, Activation::Relu);
  x = b.conv("g.down2", down1_out, 2 * width, 4 * width, 4, 2, 1, true);
  x = b.norm("g.down2.norm", x);
  int stream = b.act("g.down2.relu", x, Activation::Relu);
  const int down2_out = stream;

  const int mid_block = (blocks + 1) / 2 - 1;
  int midpoint = stream;
  for (int i = 0; i < blocks; ++i) {
    const std::string p = "g.res" + std::to_string(i);
    int h = b.conv(p + ".conv1", stream, 4 * width, 4 * width, 3, 1, 1, true);
    h = b.norm(p + ".norm1", h);
    h = b.act(p + ".relu", h, Activation::Relu);
    const int last = b.conv(p + ".conv2", h, 4 * width, 4 * width, 3, 1, 1, true);
    b.spec.block_last_convs.push_back(last);
    h = b.norm(p + ".norm2", last);
    stream = b.residual_add(p + ".add", stream, h);
    if (i == mid_block) midpoint = stream;
  }

  x = b.upsample("g.up1.upsample", stream, 2);
  x = b.conv("g.up1", x, 4 * width, 2 * width, 3, 1, 1, true);
  x = b.norm("g.up1.norm", x);
  x = b.act("g.up1.relu", x, Activation::Relu);
  x = b.upsample("g.up2.upsample", x, 2);
  x = b.conv("g.up2", x, 2 * width, width, 3, 1, 1, true);
  x = b.norm("g.up2.norm", x);
  const int pre_output = b.act("g.up2.relu", x, Activation::Relu);
  x = b.conv("g.out", pre_output, width, channels, 7, 1, 3, false);
  b.act("g.out.tanh", x, Activation::Tanh);

  b.spec.taps = {stem_out, down1_out, down2_out, midpoint, pre_output};
  resolve_shapes(b.spec);
  return b.spec;
}

ModelSpec build_discriminator(int width, int depth, int in_channels, int image) {
  if (width < 4 || width > 128) throw ConfigError("discriminator width must be in [4, 128]");
  if (depth < 1) throw ConfigError("discriminator depth must be >= 1");
  Builder b;
  b.spec.role = ModelRole::Discriminator;
  b.spec.input_channels = in_channels;
  b.spec.image_size = image;
  b.spec.width = width;
  int x = -1;
  int channels = in_channels;
  for (int i = 0; i < depth; ++i) {
    const bool last = i == depth - 1;
    const int filters = last ? 1 : width << i;
    const std::string name = "d.conv" + std::to_string(i);
    x = b.conv(name, x, channels, filters, 4, 2, 1, false);
    if (!last) {
      x = b.act(name + ".lrelu", x, Activation::LeakyRelu, 0.2);
      b.spec.taps.push_back(x);
    }
    channels = filters;
  }
  b.spec.taps.push_back(x);
  resolve_shapes(b.spec);
  return b.spec;
}

void resolve_shapes(ModelSpec& spec) {
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    auto& l = spec.layers[k];
    if (l.input >= static_cast<int>(k) || l.skip >= static_cast<int>(k)) {
      throw ShapeError("layer " + l.name + " reads a later layer");
    }
    int c, h, w;
    if (l.input < 0) {
      c = spec.input_channels;
      h = w = spec.image_size;
    } else {
      const auto& p = spec.layers[l.input];
      c = p.out_channels;
      h = p.out_h;
      w = p.out_w;
    }
    l.in_h = h;
    l.in_w = w;
    switch (l.kind) {
      case LayerKind::Conv:
        if (l.channels != c) {
          throw ShapeError("layer " + l.name + " expects " + std::to_string(l.channels) + " channels, producer has " +
                           std::to_string(c));
        }
        if (l.filters < 1) throw ShapeError("layer " + l.name + " has no filters");
        l.out_channels = l.filters;
        l.out_h = conv_output_extent(h, l.kernel, l.stride, l.padding);
        l.out_w = conv_output_extent(w, l.kernel, l.stride, l.padding);
        break;
      case LayerKind::Upsample:
        if (l.factor < 1) throw ConfigError("upsample factor must be >= 1");
        l.out_channels = c;
        l.out_h = h * l.factor;
        l.out_w = w * l.factor;
        break;
      case LayerKind::ResidualAdd: {
        if (l.skip < 0) throw ShapeError("residual add " + l.name + " lacks a second operand");
        const auto& s = spec.layers[l.skip];
        if (s.out_channels != c || s.out_h != h || s.out_w != w) {
          throw ShapeError("residual add " + l.name + " operands differ in shape");
        }
        l.out_channels = c;
        l.out_h = h;
        l.out_w = w;
        break;
      }
      case LayerKind::Norm:
      case LayerKind::Activation:
        l.out_channels = c;
        l.out_h = h;
        l.out_w = w;
        break;
    }
  }
  spec.resolved = true;
}

ModelCost macs_params(const ModelSpec& spec) {
  if (!spec.resolved) throw ShapeError("macs_params on unresolved spec");
  ModelCost cost;
  cost.per_layer.resize(spec.layers.size());
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const auto& l = spec.layers[k];
    auto& lc = cost.per_layer[k];
    if (l.kind == LayerKind::Conv) {
      const std::uint64_t weights = std::uint64_t(l.filters) * l.channels * l.kernel * l.kernel;
      lc.macs = weights * std::uint64_t(l.out_h) * l.out_w;
      lc.params = weights + l.filters;
    } else if (l.kind == LayerKind::Norm && l.affine) {
      lc.params = 2 * std::uint64_t(l.out_channels);
    }
    cost.macs += lc.macs;
    cost.params += lc.params;
  }
  return cost;
}

std::string architecture_report(const ModelSpec& spec, const ModelSpec* original) {
  const auto cost = macs_params(spec);
  std::ostringstream os;
  os << std::left << std::setw(5) << "id" << std::setw(22) << "layer" << std::setw(9) << "kind" << std::setw(6)
     << "n" << std::setw(6) << "c" << std::setw(9) << "out" << std::setw(12) << "MACs" << std::setw(10) << "params";
  if (original) os << "prune_rate";
  os << '\n';
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const auto& l = spec.layers[k];
    if (l.kind != LayerKind::Conv && !(l.kind == LayerKind::Norm && l.affine)) continue;
    os << std::left << std::setw(5) << k << std::setw(22) << l.name << std::setw(9) << kind_name(l.kind);
    if (l.kind == LayerKind::Conv) {
      os << std::setw(6) << l.filters << std::setw(6) << l.channels;
    } else {
      os << std::setw(6) << l.out_channels << std::setw(6) << "-";
    }
    os << std::setw(9) << (std::to_string(l.out_h) + "x" + std::to_string(l.out_w)) << std::setw(12)
       << cost.per_layer[k].macs << std::setw(10) << cost.per_layer[k].params;
    if (original && l.kind == LayerKind::Conv) {
      const double rate = 1.0 - double(l.filters) / double(original->layers.at(k).filters);
      os << std::fixed << std::setprecision(3) << rate << std::defaultfloat;
    }
    os << '\n';
  }
  os << "total MACs " << cost.macs << ", params " << cost.params << '\n';
  if (original) {
    const auto base = macs_params(*original);
    os << std::fixed << std::setprecision(3) << "compression MACs " << double(base.macs) / double(cost.macs)
       << "x, params " << double(base.params) / double(cost.params) << "x\n";
  }
  return os.str();
}

}  // namespace dmad
