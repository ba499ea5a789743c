#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "dmad/model.hpp"

namespace dmad {

/// Kept filters of every conv after search. Layers whose outputs meet at a
/// residual add share one channel space and therefore one keep set.
struct PruningPlan {
  std::map<int, std::vector<int>> keep;  // conv layer id -> sorted kept filter indices
  // Kept filters whose own mask is zero. They survive only because another
  // producer in the same channel space needs the channel, and are silenced in
  // the compact model so the function is unchanged.
  std::map<int, std::vector<int>> silenced;
  std::vector<bool> group_dropped;  // per cross-block group t: all s masks zero

  const std::vector<int>& keep_of(int conv) const;
};

/// Mask values per masked conv layer id.
using LayerMasks = std::map<int, std::vector<double>>;

/// Channel-space partition of a model: every layer output belongs to the space
/// of the conv(s) that produced it; residual adds merge spaces.
struct ChannelSpaces {
  std::vector<int> space_of;                   // per layer; -1 for the network input's space
  std::vector<std::vector<int>> producers;     // per space: conv ids writing into it
};

ChannelSpaces channel_spaces(const ModelSpec& spec);

/// keep j iff m_j == 1 for some producer of the channel space. Throws
/// StateError when a mask is not binary or a keep set would be empty.
PruningPlan derive_plan(const ModelSpec& spec, const LayerMasks& masks, const MaskGroupSet* groups = nullptr);

template <typename Scalar>
LayerMasks layer_masks(const MaskBank<Scalar>& bank, bool force_binary = false) {
  LayerMasks out;
  for (std::size_t i = 0; i < bank.entries().size(); ++i)
    out[bank.entries()[i].layer] = force_binary ? bank.binary_masks(i) : bank.masks(i);
  return out;
}

template <typename Scalar>
PruningPlan derive_plan(const ModelSpec& spec, const MaskBank<Scalar>& bank, const MaskGroupSet* groups = nullptr) {
  return derive_plan(spec, layer_masks(bank), groups);
}

/// Output channel indices of any layer under the plan (all channels for
/// layers fed only by the network input).
std::vector<int> output_keep(const ModelSpec& spec, const PruningPlan& plan, int layer);

/// The light-weight architecture: same layer ids, reduced n and c, no masks.
ModelSpec compact_spec(const ModelSpec& spec, const PruningPlan& plan);

/// Fraction of the residual stream's channels removed by the plan.
double residual_prune_rate(const ModelSpec& spec, const PruningPlan& plan);

/// Same quantity read directly off (possibly non-binary) masks: a stream
/// channel counts as removed when every producer's mask is exactly zero.
double residual_prune_rate(const ModelSpec& spec, const LayerMasks& masks);

/// Builds the cross-block groups for a bank over `spec`.
template <typename Scalar>
MaskGroupSet make_groups(const ModelSpec& spec, const MaskBank<Scalar>& bank) {
  MaskGroupSet set;
  if (spec.block_last_convs.empty()) return set;
  std::vector<std::size_t> entries;
  for (int conv : spec.block_last_convs) {
    if (!spec.layers.at(conv).masked) return set;
    entries.push_back(bank.index_of_layer(conv));
  }
  const int filters = spec.layers.at(spec.block_last_convs.front()).filters;
  set.groups.resize(filters);
  for (int t = 0; t < filters; ++t)
    for (std::size_t e : entries) set.groups[t].push_back({e, std::size_t(t)});
  return set;
}

/// Slices parameters onto the compact spec, inheriting weights.
template <typename Scalar>
ParamStore<Scalar> prune_params(const ModelSpec& spec, const ParamStore<Scalar>& params, const PruningPlan& plan) {
  compact_spec(spec, plan);  // validates the plan against the spec
  ParamStore<Scalar> out;
  for (std::size_t k = 0; k < spec.layers.size(); ++k) {
    const auto& l = spec.layers[k];
    if (l.kind == LayerKind::Conv) {
      const auto& outs = plan.keep_of(static_cast<int>(k));
      const auto ins = l.input < 0 ? std::vector<int>() : output_keep(spec, plan, l.input);
      const int c_new = l.input < 0 ? l.channels : static_cast<int>(ins.size());
      const auto& w = params.at(param_name(l, "weight"));
      const auto& b = params.at(param_name(l, "bias"));
      if (w.shape() != Shape{l.filters, l.channels, l.kernel, l.kernel}) {
        throw ShapeError("parameter " + param_name(l, "weight") + " does not match the spec");
      }
      const int kk = l.kernel * l.kernel;
      std::vector<Scalar> nw;
      nw.reserve(outs.size() * c_new * kk);
      std::vector<Scalar> nb;
      for (int f : outs) {
        for (int ci = 0; ci < c_new; ++ci) {
          const int c = l.input < 0 ? ci : ins[ci];
          const auto base = (std::size_t(f) * l.channels + c) * kk;
          nw.insert(nw.end(), w.data().begin() + base, w.data().begin() + base + kk);
        }
        nb.push_back(b[f]);
      }
      out.add(param_name(l, "weight"),
              Tensor<Scalar>({static_cast<int>(outs.size()), c_new, l.kernel, l.kernel}, std::move(nw)));
      out.add(param_name(l, "bias"), Tensor<Scalar>({static_cast<int>(outs.size())}, std::move(nb)));
    } else if (l.kind == LayerKind::Norm && l.affine) {
      const auto keep = output_keep(spec, plan, static_cast<int>(k));
      std::vector<Scalar> s, h;
      for (int c : keep) {
        s.push_back(params.at(param_name(l, "scale"))[c]);
        h.push_back(params.at(param_name(l, "shift"))[c]);
      }
      out.add(param_name(l, "scale"), Tensor<Scalar>({static_cast<int>(keep.size())}, std::move(s)));
      out.add(param_name(l, "shift"), Tensor<Scalar>({static_cast<int>(keep.size())}, std::move(h)));
    }
  }
  // Silence kept-but-masked filters at their mask site.
  for (const auto& [conv, filters] : plan.silenced) {
    if (filters.empty()) continue;
    const auto& outs = plan.keep_of(conv);
    const int site = mask_site(spec, conv);
    const auto& sl = spec.layers[site];
    for (int f : filters) {
      const auto pos = static_cast<std::size_t>(std::lower_bound(outs.begin(), outs.end(), f) - outs.begin());
      if (sl.kind == LayerKind::Norm) {
        if (!sl.affine) throw ConfigError("cannot silence filters behind a non-affine norm");
        out.at(param_name(sl, "scale")).data()[pos] = Scalar(0);
        out.at(param_name(sl, "shift")).data()[pos] = Scalar(0);
      } else {
        auto& w = out.at(param_name(sl, "weight"));
        const std::size_t row = w.numel() / w.dim(0);
        std::fill_n(w.data().begin() + pos * row, row, Scalar(0));
        out.at(param_name(sl, "bias")).data()[pos] = Scalar(0);
      }
    }
  }
  return out;
}

struct LayerPruneRate {
  int layer = 0;
  std::string name;
  int original_filters = 0;
  int kept_filters = 0;
  double rate = 0.0;  // 1 - kept / original
};

struct CompressionReport {
  ModelCost original;
  ModelCost compact;
  double macs_ratio = 1.0;
  double params_ratio = 1.0;
  std::vector<LayerPruneRate> layers;
};

CompressionReport compression_report(const ModelSpec& original, const ModelSpec& compact);

/// Text form: one "layer <id> keep <i,j,...>" line per conv.
std::string plan_to_text(const PruningPlan& plan);
PruningPlan plan_from_text(const std::string& text);

}  // namespace dmad
