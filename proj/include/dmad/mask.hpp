#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dmad/ops.hpp"

namespace dmad {

/// Quadratic is the piecewise-quadratic gate; Linear is the clipped ramp
/// (p + b) / 2b kept for ablation runs.
enum class MaskKind { Quadratic, Linear };

MaskKind parse_mask_kind(const std::string& s);
std::string to_string(MaskKind kind);

/// Gate value in [0, 1] for mask input p under boundary b.
///
/// Zero for p <= -b, one for p >= b, and for b > 0 a convex then concave
/// quadratic in between that meets 1/2 at p = 0. At b = 0 it is the step
/// 1[p > 0]; p = 0 maps to 0.
double mask_value(double p, double b, MaskKind kind = MaskKind::Quadratic);

/// dm/dp; zero outside (-b, b) and everywhere when b = 0.
double mask_derivative(double p, double b, MaskKind kind = MaskKind::Quadratic);

/// Boundary at iteration e of E: 1 - cbrt(e / E). Iterations past E clamp to 0.
double boundary_at(std::int64_t e, std::int64_t total);

/// Sparse coefficient for one cross-block group: 0 if every member mask is
/// zero, otherwise lambda * s / (number of nonzero members).
double group_coefficient(std::span<const double> group_masks, double lambda);

struct MaskRef {
  std::size_t entry;   // index into MaskBank::entries()
  std::size_t filter;  // filter index within the layer
};

/// Cross-block groups: group t holds filter t of the last convolution of every
/// residual block.
struct MaskGroupSet {
  std::vector<std::vector<MaskRef>> groups;
  std::size_t blocks() const { return groups.empty() ? 0 : groups.front().size(); }
};

template <typename Scalar>
struct MaskEntry {
  int layer = -1;  // conv layer id in the model spec
  std::string name;
  Tensor<Scalar> p;
  std::vector<std::uint8_t> pinned;  // kept alive; excluded from all updates
};

/// Learnable mask inputs for every masked layer plus the shared boundary.
template <typename Scalar>
class MaskBank {
 public:
  MaskBank() = default;
  explicit MaskBank(MaskKind kind) : kind_(kind) {}

  void add_layer(int layer, std::string name, int filters, double p_init) {
    MaskEntry<Scalar> e;
    e.layer = layer;
    e.name = std::move(name);
    e.p = Tensor<Scalar>({filters}, static_cast<Scalar>(p_init));
    e.p.set_requires_grad(true);
    e.pinned.assign(filters, 0);
    entries_.push_back(std::move(e));
  }

  std::vector<MaskEntry<Scalar>>& entries() { return entries_; }
  const std::vector<MaskEntry<Scalar>>& entries() const { return entries_; }

  const MaskEntry<Scalar>* find_layer(int layer) const {
    for (const auto& e : entries_)
      if (e.layer == layer) return &e;
    return nullptr;
  }
  std::size_t index_of_layer(int layer) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].layer == layer) return i;
    throw ConfigError("layer " + std::to_string(layer) + " is not masked");
  }

  double boundary() const { return boundary_; }
  void set_boundary(double b) {
    if (b < 0) throw ConfigError("mask boundary must be >= 0");
    boundary_ = b;
  }
  MaskKind kind() const { return kind_; }

  double mask(std::size_t entry, std::size_t filter) const {
    return mask_value(entries_[entry].p[filter], boundary_, kind_);
  }

  std::vector<double> masks(std::size_t entry) const {
    std::vector<double> m(entries_[entry].p.numel());
    for (std::size_t j = 0; j < m.size(); ++j) m[j] = mask(entry, j);
    return m;
  }

  /// Masks as the step function would see them (b forced to 0).
  std::vector<double> binary_masks(std::size_t entry) const {
    std::vector<double> m(entries_[entry].p.numel());
    for (std::size_t j = 0; j < m.size(); ++j) m[j] = mask_value(entries_[entry].p[j], 0.0, kind_);
    return m;
  }

  std::size_t total_masks() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.p.numel();
    return n;
  }

  /// Fraction of masks that are exactly zero under the current boundary.
  double sparsity_fraction() const {
    const std::size_t total = total_masks();
    if (total == 0) return 0.0;
    std::size_t zeros = 0;
    for (std::size_t i = 0; i < entries_.size(); ++i)
      for (std::size_t j = 0; j < entries_[i].p.numel(); ++j) zeros += mask(i, j) == 0.0;
    return double(zeros) / double(total);
  }

  /// Flags of inputs that must not move: zero masks and pinned survivors.
  std::vector<std::uint8_t> frozen_flags(std::size_t entry) const {
    std::vector<std::uint8_t> f(entries_[entry].p.numel());
    for (std::size_t j = 0; j < f.size(); ++j)
      f[j] = entries_[entry].pinned[j] || mask(entry, j) == 0.0;
    return f;
  }

  /// Keeps every layer connected: a layer whose masks are all zero under
  /// boundary `b` gets its largest input pinned at 1 (mask 1 for any b <= 1).
  /// Returns the number of newly pinned masks.
  int enforce_alive(double b) {
    int pinned = 0;
    for (auto& e : entries_) {
      bool alive = false;
      std::size_t best = 0;
      for (std::size_t j = 0; j < e.p.numel(); ++j) {
        alive = alive || mask_value(e.p[j], b, kind_) != 0.0;
        if (e.p[j] > e.p[best]) best = j;
      }
      if (alive) continue;
      e.p.data()[best] = std::max<Scalar>(Scalar(1), e.p[best]);
      e.pinned[best] = 1;
      ++pinned;
    }
    return pinned;
  }
  int enforce_alive() { return enforce_alive(boundary_); }

  /// Differentiable mask vector for one layer.
  Tensor<Scalar> mask_tensor(std::size_t entry) const {
    const auto& p = entries_[entry].p;
    const double b = boundary_;
    const MaskKind kind = kind_;
    std::vector<Scalar> m(p.numel());
    for (std::size_t j = 0; j < m.size(); ++j) m[j] = static_cast<Scalar>(mask_value(p[j], b, kind));
    return Tensor<Scalar>::make_result(p.shape(), std::move(m), {p}, [b, kind](auto& n) {
      auto* g = detail::grad_sink(n, 0);
      if (!g) return;
      const auto& pv = n.parents[0]->value;
      for (std::size_t j = 0; j < g->size(); ++j)
        (*g)[j] += n.grad[j] * static_cast<Scalar>(mask_derivative(pv[j], b, kind));
    });
  }

 private:
  std::vector<MaskEntry<Scalar>> entries_;
  double boundary_ = 1.0;
  MaskKind kind_ = MaskKind::Quadratic;
};

/// Per-mask sparse coefficients: lambda everywhere, replaced by the group
/// coefficient for members of a cross-block group when `groups` is given.
template <typename Scalar>
std::vector<std::vector<double>> sparse_coefficients(const MaskBank<Scalar>& bank, double lambda,
                                                     const MaskGroupSet* groups) {
  std::vector<std::vector<double>> coeff(bank.entries().size());
  for (std::size_t i = 0; i < coeff.size(); ++i) coeff[i].assign(bank.entries()[i].p.numel(), lambda);
  if (groups) {
    for (const auto& group : groups->groups) {
      std::vector<double> m;
      m.reserve(group.size());
      for (const auto& ref : group) m.push_back(bank.mask(ref.entry, ref.filter));
      const double c = group_coefficient(m, lambda);
      for (const auto& ref : group) coeff[ref.entry][ref.filter] = c;
    }
  }
  return coeff;
}

/// Sum over masks of coeff * |p + b| with subgradient coeff * sign(p + b), 0 at
/// the kink and for pinned inputs. Zero masks are kept in place by the frozen
/// flags, not here.
template <typename Scalar>
Tensor<Scalar> sparse_loss(const MaskBank<Scalar>& bank, double lambda,
                           const MaskGroupSet* groups = nullptr) {
  if (lambda < 0) throw ConfigError("sparse coefficient must be >= 0");
  auto coeff = sparse_coefficients(bank, lambda, groups);
  const double b = bank.boundary();
  double total = 0.0;
  std::vector<Tensor<Scalar>> parents;
  std::vector<std::vector<std::uint8_t>> pinned;
  for (std::size_t i = 0; i < bank.entries().size(); ++i) {
    const auto& e = bank.entries()[i];
    for (std::size_t j = 0; j < e.p.numel(); ++j) total += coeff[i][j] * std::abs(double(e.p[j]) + b);
    parents.push_back(e.p);
    pinned.push_back(e.pinned);
  }
  return Tensor<Scalar>::make_result(
      {}, {static_cast<Scalar>(total)}, std::move(parents),
      [coeff = std::move(coeff), pinned = std::move(pinned), b](auto& n) {
        for (std::size_t i = 0; i < coeff.size(); ++i) {
          auto* g = detail::grad_sink(n, i);
          if (!g) continue;
          const auto& pv = n.parents[i]->value;
          for (std::size_t j = 0; j < g->size(); ++j) {
            const double v = double(pv[j]) + b;
            if (pinned[i][j] || v == 0.0) continue;
            (*g)[j] += n.grad[0] * static_cast<Scalar>(v > 0 ? coeff[i][j] : -coeff[i][j]);
          }
        }
      });
}

/// Scales channel j of an NCHW map by m[j].
template <typename Scalar>
Tensor<Scalar> apply_masks(const Tensor<Scalar>& features, const Tensor<Scalar>& m) {
  if (features.rank() != 4 || m.numel() != std::size_t(features.dim(1))) {
    throw ShapeError("apply_masks: features " + shape_str(features.shape()) + ", mask " +
                     shape_str(m.shape()));
  }
  const int batch = features.dim(0), channels = features.dim(1);
  const int plane = features.dim(2) * features.dim(3);
  std::vector<Scalar> out(features.numel());
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < plane; ++i) {
        const std::size_t k = (std::size_t(n) * channels + c) * plane + i;
        out[k] = features[k] * m[c];
      }
  return Tensor<Scalar>::make_result(
      features.shape(), std::move(out), {features, m}, [batch, channels, plane](auto& nd) {
        const auto& fv = nd.parents[0]->value;
        const auto& mv = nd.parents[1]->value;
        auto* gf = detail::grad_sink(nd, 0);
        auto* gm = detail::grad_sink(nd, 1);
        for (int n = 0; n < batch; ++n)
          for (int c = 0; c < channels; ++c)
            for (int i = 0; i < plane; ++i) {
              const std::size_t k = (std::size_t(n) * channels + c) * plane + i;
              if (gf) (*gf)[k] += nd.grad[k] * mv[c];
              if (gm) (*gm)[c] += nd.grad[k] * fv[k];
            }
      });
}

}  // namespace dmad
