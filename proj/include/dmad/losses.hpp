#pragma once

#include <string>

#include "dmad/ops.hpp"

namespace dmad {

enum class GanLossKind { Vanilla, LeastSquares };
enum class TaskKind { PairedL1, Cycle };

GanLossKind parse_gan_loss_kind(const std::string& s);
std::string to_string(GanLossKind kind);
TaskKind parse_task_kind(const std::string& s);
std::string to_string(TaskKind kind);

inline constexpr double kLogEps = 1e-8;

/// E[log D(x, y)] + E[log(1 - D(x, G(x)))] on logits, the quantity the
/// discriminator maximises and the generator minimises. log(sigma + eps)
/// keeps it finite for saturated logits.
template <typename Scalar>
Tensor<Scalar> gan_value(const Tensor<Scalar>& real_logits, const Tensor<Scalar>& fake_logits) {
  const auto real_term = mean(log(add_scalar(sigmoid(real_logits), kLogEps)));
  const auto fake_term = mean(log(add_scalar(sigmoid(scale(fake_logits, -1.0)), kLogEps)));
  return add(real_term, fake_term);
}

/// Discriminator loss to minimise. Vanilla: the negated value above.
/// Least squares: (MSE(real, 1) + MSE(fake, 0)) / 2.
template <typename Scalar>
Tensor<Scalar> discriminator_gan_loss(const Tensor<Scalar>& real_logits, const Tensor<Scalar>& fake_logits,
                                      GanLossKind kind) {
  if (kind == GanLossKind::Vanilla) return scale(gan_value(real_logits, fake_logits), -1.0);
  const auto real_term = mean(square(add_scalar(real_logits, -1.0)));
  const auto fake_term = mean(square(fake_logits));
  return scale(add(real_term, fake_term), 0.5);
}

/// Generator loss to minimise. Vanilla uses the non-saturating form
/// -E[log D(x, G(x))]; least squares is MSE(fake, 1).
template <typename Scalar>
Tensor<Scalar> generator_gan_loss(const Tensor<Scalar>& fake_logits, GanLossKind kind) {
  if (kind == GanLossKind::Vanilla) return scale(mean(log(add_scalar(sigmoid(fake_logits), kLogEps))), -1.0);
  return mean(square(add_scalar(fake_logits, -1.0)));
}

/// lambda * mean |y - G(x)|.
template <typename Scalar>
Tensor<Scalar> paired_l1_loss(const Tensor<Scalar>& prediction, const Tensor<Scalar>& target, double lambda) {
  if (prediction.shape() != target.shape()) {
    throw ConfigError("paired loss needs aligned pairs: " + shape_str(prediction.shape()) + " vs " +
                      shape_str(target.shape()));
  }
  return scale(mean(abs(sub(target, prediction))), lambda);
}

/// lambda * batch mean of the per-sample L2 norm |G2(G1(x)) - x|.
template <typename Scalar>
Tensor<Scalar> cycle_loss(const Tensor<Scalar>& reconstruction, const Tensor<Scalar>& source, double lambda) {
  if (reconstruction.shape() != source.shape() || source.rank() < 1) {
    throw ConfigError("cycle loss needs reconstructions shaped like the source");
  }
  const int n = source.dim(0);
  const int rest = static_cast<int>(source.numel() / std::size_t(n));
  const auto diff = reshape(sub(reconstruction, source), {n, rest});
  return scale(mean(row_l2_norm(diff)), lambda);
}

}  // namespace dmad
