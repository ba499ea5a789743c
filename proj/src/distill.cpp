#include "dmad/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace dmad {

namespace {

struct Tap1D {
  int lo, hi;
  double w_hi;
};

std::vector<Tap1D> linear_taps(int src, int dst) {
  std::vector<Tap1D> taps(dst);
  for (int i = 0; i < dst; ++i) {
    double pos;
    if (dst == 1) {
      pos = 0.5 * (src - 1);
    } else {
      pos = double(i) * double(src - 1) / double(dst - 1);
    }
    int lo = static_cast<int>(std::floor(pos));
    lo = std::clamp(lo, 0, src - 1);
    const int hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, hi == lo ? 0.0 : pos - lo};
  }
  return taps;
}

}  // namespace

AttentionMap align_attention(const AttentionMap& map, int target_h, int target_w) {
  if (map.height < 1 || map.width < 1 || target_h < 1 || target_w < 1) {
    throw ShapeError("align_attention: sizes must be >= 1");
  }
  if (map.values.size() != std::size_t(map.height) * map.width) throw ShapeError("align_attention: bad map");
  if (map.height == target_h && map.width == target_w) return map;
  const auto ty = linear_taps(map.height, target_h);
  const auto tx = linear_taps(map.width, target_w);
  AttentionMap out = map;
  out.height = target_h;
  out.width = target_w;
  out.values.assign(std::size_t(target_h) * target_w, 0.0);
  for (int y = 0; y < target_h; ++y) {
    for (int x = 0; x < target_w; ++x) {
      const auto& a = ty[y];
      const auto& b = tx[x];
      const double top = (1 - b.w_hi) * map.at(a.lo, b.lo) + b.w_hi * map.at(a.lo, b.hi);
      const double bottom = (1 - b.w_hi) * map.at(a.hi, b.lo) + b.w_hi * map.at(a.hi, b.hi);
      out.values[std::size_t(y) * target_w + x] = std::max(0.0, (1 - a.w_hi) * top + a.w_hi * bottom);
    }
  }
  return out;
}

AttentionMap co_attention(const AttentionMap& generator, const std::vector<AttentionMap>& discriminator) {
  AttentionMap out = generator;
  for (const auto& d : discriminator) {
    if (d.height != generator.height || d.width != generator.width) {
      throw ShapeError("co_attention: discriminator map " + std::to_string(d.height) + "x" +
                       std::to_string(d.width) + " not aligned to " + std::to_string(generator.height) + "x" +
                       std::to_string(generator.width));
    }
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += d.values[i];
  }
  for (auto& v : out.values) v *= 0.5;
  return out;
}

TapPlan make_tap_plan(const ModelSpec& generator, const ModelSpec& discriminator, int d_tap_count) {
  if (d_tap_count < 0 || d_tap_count > static_cast<int>(discriminator.taps.size())) {
    throw ConfigError("discriminator tap count must be in [0, " + std::to_string(discriminator.taps.size()) + "]");
  }
  TapPlan plan;
  plan.generator_taps = generator.taps;
  for (int g : generator.taps) {
    const double gs = generator.layers.at(g).out_h;
    std::vector<int> order(discriminator.taps.begin(), discriminator.taps.end());
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const double da = std::abs(std::log2(discriminator.layers.at(a).out_h / gs));
      const double db = std::abs(std::log2(discriminator.layers.at(b).out_h / gs));
      if (da != db) return da < db;
      return a > b;
    });
    order.resize(d_tap_count);
    plan.discriminator_taps.push_back(std::move(order));
  }
  return plan;
}

int& attention_stabilized_count() {
  static int count = 0;
  return count;
}

void write_attention_pgm(const AttentionMap& map, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path);
  out << "P5\n" << map.width << ' ' << map.height << "\n255\n";
  double peak = 0.0;
  for (double v : map.values) peak = std::max(peak, v);
  for (double v : map.values) {
    const double s = peak > 0 ? v / peak : 0.0;
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(s, 0.0, 1.0) * 255.0))));
  }
}

}  // namespace dmad
