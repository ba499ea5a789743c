#include "dmad/mask.hpp"

#include <cmath>

#include "dmad/log.hpp"

namespace dmad {

MaskKind parse_mask_kind(const std::string& s) {
  if (s == "quadratic") return MaskKind::Quadratic;
  if (s == "linear") return MaskKind::Linear;
  throw ConfigError("unknown mask kind '" + s + "' (expected quadratic or linear)");
}

std::string to_string(MaskKind kind) { return kind == MaskKind::Linear ? "linear" : "quadratic"; }

double mask_value(double p, double b, MaskKind kind) {
  if (b < 0) throw ConfigError("mask boundary must be >= 0");
  if (b == 0) return p > 0 ? 1.0 : 0.0;
  if (p <= -b) return 0.0;
  if (p >= b) return 1.0;
  if (kind == MaskKind::Linear) return (p + b) / (2.0 * b);
  if (p <= 0) {
    const double r = (p + b) / b;
    return 0.5 * r * r;
  }
  const double r = (p - b) / b;
  return 1.0 - 0.5 * r * r;
}

double mask_derivative(double p, double b, MaskKind kind) {
  if (b < 0) throw ConfigError("mask boundary must be >= 0");
  if (b == 0 || p <= -b || p >= b) return 0.0;
  if (kind == MaskKind::Linear) return 1.0 / (2.0 * b);
  return p <= 0 ? (p + b) / (b * b) : (b - p) / (b * b);
}

double boundary_at(std::int64_t e, std::int64_t total) {
  if (total < 1) throw ConfigError("boundary schedule needs E >= 1");
  if (e < 0) throw ConfigError("boundary schedule needs e >= 0");
  if (e > total) {
    log_warning("boundary_at: iteration " + std::to_string(e) + " beyond E = " +
                std::to_string(total) + ", clamping boundary to 0");
    return 0.0;
  }
  if (e == total) return 0.0;
  return 1.0 - std::cbrt(double(e) / double(total));
}

double group_coefficient(std::span<const double> group_masks, double lambda) {
  if (group_masks.empty()) throw ConfigError("group_coefficient: empty group");
  std::size_t nonzero = 0;
  for (double m : group_masks) nonzero += m != 0.0;
  if (nonzero == 0) return 0.0;
  return lambda * double(group_masks.size()) / double(nonzero);
}

}  // namespace dmad
