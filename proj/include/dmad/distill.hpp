#pragma once

#include <string>
#include <vector>

#include "dmad/log.hpp"
#include "dmad/model.hpp"

namespace dmad {

enum class TapRole { TeacherGenerator, TeacherDiscriminator, StudentGenerator };

struct AttentionMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major, all >= 0
  TapRole role = TapRole::TeacherGenerator;
  int layer = -1;

  double at(int y, int x) const { return values[std::size_t(y) * width + x]; }
};

/// Sum over channels of squared activations, flattened per sample:
/// [N, C, H, W] -> [N, H*W]. Differentiable.
template <typename Scalar>
Tensor<Scalar> attention_tensor(const Tensor<Scalar>& features) {
  if (features.rank() != 4 || features.dim(1) < 1) {
    throw ShapeError("attention map needs NCHW features with C >= 1, got " + shape_str(features.shape()));
  }
  const int batch = features.dim(0), channels = features.dim(1);
  const int plane = features.dim(2) * features.dim(3);
  std::vector<Scalar> out(std::size_t(batch) * plane, Scalar(0));
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < channels; ++c)
      for (int i = 0; i < plane; ++i) {
        const Scalar v = features[(std::size_t(n) * channels + c) * plane + i];
        out[std::size_t(n) * plane + i] += v * v;
      }
  return Tensor<Scalar>::make_result({batch, plane}, std::move(out), {features}, [batch, channels, plane](auto& nd) {
    auto* g = detail::grad_sink(nd, 0);
    if (!g) return;
    const auto& fv = nd.parents[0]->value;
    for (int n = 0; n < batch; ++n)
      for (int c = 0; c < channels; ++c)
        for (int i = 0; i < plane; ++i) {
          const std::size_t k = (std::size_t(n) * channels + c) * plane + i;
          (*g)[k] += Scalar(2) * fv[k] * nd.grad[std::size_t(n) * plane + i];
        }
  });
}

/// Per-sample attention maps (no gradient tracking).
template <typename Scalar>
std::vector<AttentionMap> attention_maps(const Tensor<Scalar>& features, TapRole role = TapRole::TeacherGenerator,
                                         int layer = -1) {
  NoGradGuard guard;
  const auto a = attention_tensor(features);
  const int h = features.dim(2), w = features.dim(3);
  std::vector<AttentionMap> maps(features.dim(0));
  for (int n = 0; n < features.dim(0); ++n) {
    auto& m = maps[n];
    m.height = h;
    m.width = w;
    m.role = role;
    m.layer = layer;
    m.values.assign(a.data().begin() + std::size_t(n) * h * w, a.data().begin() + std::size_t(n + 1) * h * w);
  }
  return maps;
}

/// Separable piecewise-linear (degree-1 Lagrange) resampling with the corner
/// samples of source and target aligned. Negative results are clamped to 0.
AttentionMap align_attention(const AttentionMap& map, int target_h, int target_w);

/// Teacher co-attention: half the sum of the generator map and the aligned
/// discriminator maps.
AttentionMap co_attention(const AttentionMap& generator, const std::vector<AttentionMap>& discriminator);

/// Which discriminator layers feed the co-attention of each generator tap.
struct TapPlan {
  std::vector<int> generator_taps;                  // layer ids, shared by teacher and student
  std::vector<std::vector<int>> discriminator_taps; // per generator tap
};

/// Picks, for every generator tap, the `d_tap_count` discriminator taps whose
/// spatial size is nearest (ties go to the deeper layer).
TapPlan make_tap_plan(const ModelSpec& generator, const ModelSpec& discriminator, int d_tap_count = 1);

/// Unit-norm co-attention targets for one generator tap, one row per sample:
/// [N, H*W]. `d_features` are the discriminator tap outputs for this tap.
template <typename Scalar>
Tensor<Scalar> co_attention_target(const Tensor<Scalar>& g_features, const std::vector<Tensor<Scalar>>& d_features) {
  const auto g_maps = attention_maps(g_features, TapRole::TeacherGenerator);
  std::vector<std::vector<AttentionMap>> d_maps;
  for (const auto& d : d_features) d_maps.push_back(attention_maps(d, TapRole::TeacherDiscriminator));
  const int batch = g_features.dim(0);
  const int h = g_features.dim(2), w = g_features.dim(3);
  std::vector<Scalar> out;
  out.reserve(std::size_t(batch) * h * w);
  for (int n = 0; n < batch; ++n) {
    std::vector<AttentionMap> aligned;
    for (const auto& dm : d_maps) aligned.push_back(align_attention(dm.at(n), h, w));
    const auto fused = co_attention(g_maps[n], aligned);
    for (double v : fused.values) out.push_back(static_cast<Scalar>(v));
  }
  NoGradGuard guard;
  return row_normalize(Tensor<Scalar>({batch, h * w}, std::move(out))).detach();
}

int& attention_stabilized_count();

/// lambda * sum over taps of the batch-mean squared distance between the
/// normalised teacher target and the normalised student attention map.
/// Gradients reach the student features only.
template <typename Scalar>
Tensor<Scalar> co_attention_loss(const std::vector<Tensor<Scalar>>& teacher_targets,
                                 const std::vector<Tensor<Scalar>>& student_features, double lambda) {
  if (teacher_targets.size() != student_features.size() || teacher_targets.empty()) {
    throw ShapeError("co_attention_loss: tap count mismatch");
  }
  Tensor<Scalar> total = Tensor<Scalar>::scalar(Scalar(0));
  for (std::size_t i = 0; i < teacher_targets.size(); ++i) {
    const auto a = attention_tensor(student_features[i]);
    if (a.shape() != teacher_targets[i].shape()) {
      throw ShapeError("co_attention_loss: tap " + std::to_string(i) + " student " + shape_str(a.shape()) +
                       " vs teacher " + shape_str(teacher_targets[i].shape()));
    }
    int stabilized = 0;
    const auto normalized = row_normalize(a, 1e-12, 1e-8, &stabilized);
    if (stabilized > 0) {
      attention_stabilized_count() += stabilized;
      log_warning("co_attention_loss: near-zero student attention map at tap " + std::to_string(i));
    }
    const auto diff = sub(normalized, teacher_targets[i].detach());
    total = add(total, scale(sum(square(diff)), 1.0 / a.dim(0)));
  }
  return scale(total, lambda);
}

/// lambda * (1/N) * sum_i |f_T(x_i) - f_S(x_i)|^2 over discriminator features.
template <typename Scalar>
Tensor<Scalar> feature_loss(const Tensor<Scalar>& teacher_features, const Tensor<Scalar>& student_features,
                            double lambda) {
  if (teacher_features.shape() != student_features.shape()) {
    throw ShapeError("feature_loss: " + shape_str(teacher_features.shape()) + " vs " +
                     shape_str(student_features.shape()));
  }
  const auto diff = sub(student_features, teacher_features.detach());
  return scale(sum(square(diff)), lambda / student_features.dim(0));
}

/// 8-bit grayscale PGM of a map scaled by its maximum.
void write_attention_pgm(const AttentionMap& map, const std::string& path);

}  // namespace dmad
